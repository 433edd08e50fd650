"""Pluggable critics scoring separation quality, with analytic input gradients.

Two roles exist. A shadow critic judges whether the bone-shadow region of the
soft-tissue layer is distinguishable from the surrounding soft tissue; a
supervision critic judges a (shifted) reconstruction against the layer masks.
Each role ships a closed-form reference (mean/variance matching between the
region and a ring around it) and a trainable pixelwise-logistic variant whose
parameters can be stepped during training. Every critic returns
(scalar loss, gradient with respect to its image input) so the separation
engine can chain gradients through it.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import binary_dilation, gaussian_filter

from .imaging import Image, Mask, mask_intersection, mask_union
from .losses import BCE_EPS

FEATURE_BLUR_SIGMA = 1.5
CONTRAST_BLUR_SIGMA = 3.0
RING_WIDTH = 3


def dilation_ring(mask: Mask, width: int = RING_WIDTH) -> Mask:
    """Band of pixels within `width` of the mask but outside it."""
    inside = mask > 0.5
    grown = binary_dilation(inside, iterations=width)
    return (grown & ~inside).astype(np.float64)


def moment_statistic(
    image: Image, region_a: Mask, region_b: Mask
) -> tuple[float, np.ndarray]:
    """Squared mean gap plus squared variance gap between two pixel regions.

    Zero when the regions are statistically indistinguishable; the gradient
    with respect to the image is closed-form. Either region empty scores 0.
    """
    a = region_a > 0.5
    b = region_b > 0.5
    na = int(a.sum())
    nb = int(b.sum())
    if na == 0 or nb == 0:
        return 0.0, np.zeros_like(image)
    mu_a = float(image[a].mean())
    mu_b = float(image[b].mean())
    var_a = float(((image[a] - mu_a) ** 2).mean())
    var_b = float(((image[b] - mu_b) ** 2).mean())
    loss = (mu_a - mu_b) ** 2 + (var_a - var_b) ** 2

    grad = np.zeros_like(image)
    dmu = 2.0 * (mu_a - mu_b)
    grad[a] += dmu / na
    grad[b] -= dmu / nb
    dvar = 2.0 * (var_a - var_b)
    grad[a] += dvar * 2.0 / na * (image[a] - mu_a)
    grad[b] -= dvar * 2.0 / nb * (image[b] - mu_b)
    return float(loss), grad


def _blur(image: Image, sigma: float) -> np.ndarray:
    # Zero-padded Gaussian blur is symmetric, hence its own adjoint.
    return gaussian_filter(image, sigma, mode="constant", cval=0.0)


def _texture_features(image: Image) -> list[np.ndarray]:
    residual = image - _blur(image, CONTRAST_BLUR_SIGMA)
    return [
        np.ones_like(image),
        _blur(image, FEATURE_BLUR_SIGMA),
        residual * residual,
    ]


def _features_adjoint(image: Image, upstream: list[np.ndarray]) -> np.ndarray:
    """Gradient of sum_k <upstream_k, feature_k(image)> with respect to image."""
    residual = image - _blur(image, CONTRAST_BLUR_SIGMA)
    out = _blur(upstream[1], FEATURE_BLUR_SIGMA)
    inner = 2.0 * residual * upstream[2]
    out += inner - _blur(inner, CONTRAST_BLUR_SIGMA)
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class ShadowCritic:
    """Scores bone-shadow residue in the soft-tissue layer. Lower is cleaner."""

    role = "shadow"
    trainable = False
    name = "shadow"

    def evaluate(
        self, l0: Image, m_union: Mask, soft_ring: Mask
    ) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def step_batch(self, batch: list[tuple], lr: float) -> float:
        raise NotImplementedError(f"{self.name} has no trainable parameters")


class SupervisionCritic:
    """Scores a reconstruction against layer masks. Lower is more consistent."""

    role = "supervision"
    trainable = False
    name = "supervision"

    def evaluate(
        self, image: Image, masks: list[Mask], vacated: Mask
    ) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def step_batch(self, batch: list[tuple], lr: float) -> float:
        raise NotImplementedError(f"{self.name} has no trainable parameters")


class MomentShadowCritic(ShadowCritic):
    """Reference shadow critic: moment matching between shadow region and ring."""

    name = "moment_shadow"

    def evaluate(self, l0, m_union, soft_ring):
        return moment_statistic(l0, m_union, soft_ring)


class VacatedRegionSupervisionCritic(SupervisionCritic):
    """Reference supervision critic.

    After bones shift away, the region they vacated should show plain soft
    tissue; this scores the moment gap between that region and the nearby
    soft tissue outside every shifted bone mask.
    """

    name = "vacated_supervision"

    def __init__(self, ring_width: int = RING_WIDTH):
        self.ring_width = ring_width

    def evaluate(self, image, masks, vacated):
        surround = dilation_ring(vacated, self.ring_width) > 0.5
        if masks:
            surround &= mask_union(masks) < 0.5
        return moment_statistic(image, vacated, surround.astype(np.float64))


class LogisticShadowCritic(ShadowCritic):
    """Trainable shadow critic: pixelwise logistic regression on local texture.

    Trained to label shadow-region pixels 1 and ring pixels 0; the generator
    side is scored with the hinged adversarial term, which bottoms out once
    the regions cannot be told apart.
    """

    name = "logistic_shadow"
    trainable = True

    def __init__(self):
        self.weights = np.zeros(3, dtype=np.float64)

    def _forward(self, l0):
        feats = _texture_features(l0)
        z = sum(w * f for w, f in zip(self.weights, feats))
        return feats, _sigmoid(z)

    def _bce_parts(self, l0, m_union, soft_ring):
        feats, p = self._forward(l0)
        support = (m_union + soft_ring) > 0.5
        n = int(support.sum())
        if n == 0:
            raise ValueError(f"{self.name}: empty support")
        target = (m_union > 0.5).astype(np.float64)
        p_hat = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
        terms = -(target * np.log(p_hat) + (1.0 - target) * np.log(1.0 - p_hat))
        bce = float(terms[support].mean())
        live = support & (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
        dbce_dz = np.where(live, (p - target), 0.0) / n
        return feats, p, bce, dbce_dz

    def evaluate(self, l0, m_union, soft_ring):
        feats, p, bce, dbce_dz = self._bce_parts(l0, m_union, soft_ring)
        if bce >= 1.0:
            return 0.0, np.zeros_like(l0)
        upstream = [-self.weights[k] * dbce_dz for k in range(3)]
        return 1.0 - bce, _features_adjoint(l0, upstream)

    def step_batch(self, batch, lr):
        if not batch:
            raise ValueError(f"{self.name}: empty batch")
        grad = np.zeros_like(self.weights)
        total = 0.0
        for l0, m_union, soft_ring in batch:
            feats, p, bce, dbce_dz = self._bce_parts(l0, m_union, soft_ring)
            total += bce
            for k in range(3):
                grad[k] += float((dbce_dz * feats[k]).sum())
        self.weights -= lr * grad / len(batch)
        return total / len(batch)


class LogisticSegmentationCritic(SupervisionCritic):
    """Trainable supervision critic: per-channel logistic segmentation.

    Given the bone masks it builds its own targets (soft tissue, then each
    bone minus the overlap) and scores the mean per-channel cross-entropy of
    segmenting the given image, so its image gradient pulls the
    reconstruction toward something the critic can segment correctly.
    """

    name = "logistic_segmentation"
    trainable = True

    def __init__(self, n_bones: int = 2):
        self.n_bones = n_bones
        self.n_channels = n_bones + 1
        self.weights = np.zeros((self.n_channels, 3), dtype=np.float64)

    def _forward(self, image):
        feats = _texture_features(image)
        probs = [
            _sigmoid(sum(w * f for w, f in zip(self.weights[c], feats)))
            for c in range(self.n_channels)
        ]
        return feats, probs

    def _channel_targets(self, masks: list[Mask]) -> list[np.ndarray]:
        if len(masks) != self.n_bones:
            raise ValueError(
                f"{self.name}: expected {self.n_bones} bone masks, got {len(masks)}"
            )
        bones = [(m > 0.5).astype(np.float64) for m in masks]
        union = mask_union(bones)
        if len(bones) >= 2:
            overlap = mask_intersection(bones)
        else:
            overlap = np.zeros_like(union)
        return [1.0 - union] + [b * (1.0 - overlap) for b in bones]

    def evaluate(self, image, masks, vacated=None):
        feats, probs = self._forward(image)
        targets = self._channel_targets(masks)
        n = image.size
        loss = 0.0
        grad = np.zeros_like(image)
        for c, (p, t) in enumerate(zip(probs, targets)):
            p_hat = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
            loss += float(
                -(t * np.log(p_hat) + (1.0 - t) * np.log(1.0 - p_hat)).mean()
            )
            live = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
            dloss_dz = np.where(live, p - t, 0.0) / (n * self.n_channels)
            upstream = [self.weights[c, k] * dloss_dz for k in range(3)]
            grad += _features_adjoint(image, upstream)
        return loss / self.n_channels, grad

    def step_batch(self, batch, lr):
        if not batch:
            raise ValueError(f"{self.name}: empty batch")
        grad = np.zeros_like(self.weights)
        total = 0.0
        for image, masks in batch:
            feats, probs = self._forward(image)
            targets = self._channel_targets(masks)
            n = image.size
            case_loss = 0.0
            for c, (p, t) in enumerate(zip(probs, targets)):
                p_hat = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
                case_loss += float(
                    -(t * np.log(p_hat) + (1.0 - t) * np.log(1.0 - p_hat)).mean()
                )
                dloss_dz = (p - t) / (n * self.n_channels)
                for k in range(3):
                    grad[c, k] += float((dloss_dz * feats[k]).sum())
            total += case_loss / self.n_channels
        self.weights -= lr * grad / len(batch)
        return total / len(batch)


def reference_shadow_critic(
    l0: Image, m_union: Mask, soft_ring: Mask
) -> tuple[float, np.ndarray]:
    return MomentShadowCritic().evaluate(l0, m_union, soft_ring)


def reference_supervision_critic(
    image: Image, masks: list[Mask], vacated: Mask
) -> tuple[float, np.ndarray]:
    return VacatedRegionSupervisionCritic().evaluate(image, masks, vacated)


CRITIC_REGISTRY: dict[str, type] = {
    cls.name: cls
    for cls in (
        MomentShadowCritic,
        VacatedRegionSupervisionCritic,
        LogisticShadowCritic,
        LogisticSegmentationCritic,
    )
}
