"""Loss primitives and the composite objectives of both training stages.

Scalars only; gradients of the two primitives (rmse, bce) with respect to
the predicted image are provided for the hand-written optimizer. Reductions
are plain numpy means over row-major data, so results are reproducible
across runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .imaging import Image, Mask

BCE_EPS = 1e-7

STAGE2 = "stage2"
STAGE1_LATE = "stage1_late"
STAGE1_EARLY = "stage1_early"
STAGES = (STAGE2, STAGE1_LATE, STAGE1_EARLY)


@dataclass(frozen=True)
class LossWeights:
    """Weight sets for all training phases (defaults are the published values)."""

    alpha: float = 0.6
    beta: float = 0.3
    gamma: float = 0.1
    alpha_p: float = 0.5
    beta_p: float = 0.2
    gamma_p: float = 0.2
    delta: float = 0.1
    alpha_pp: float = 1.0
    beta_pp: float = 0.4
    delta_p: float = 0.4

    def __post_init__(self) -> None:
        for name in self.__dataclass_fields__:
            if getattr(self, name) < 0:
                raise ValueError(f"LossWeights: {name} must be >= 0")


@dataclass
class LossReport:
    """Named loss components of one objective evaluation."""

    stage: str
    total: float
    l0: float | None = None
    l1: float | None = None
    l2: float | None = None
    l3: float | None = None

    def components(self) -> dict[str, float]:
        out = {}
        for name in ("l0", "l1", "l2", "l3"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    def to_record(self) -> dict:
        rec: dict = {"stage": self.stage}
        rec.update(self.components())
        rec["total"] = self.total
        return rec


def _support_values(arr: np.ndarray, support: Mask | None) -> np.ndarray:
    if support is None:
        return np.asarray(arr, dtype=np.float64).ravel()
    support = np.asarray(support)
    if support.shape != arr.shape:
        raise ValueError(f"support shape {support.shape} != data shape {arr.shape}")
    picked = np.asarray(arr, dtype=np.float64)[support > 0]
    if picked.size == 0:
        raise ValueError("empty support mask")
    return picked


def rmse(y: Image, y_hat: Image, support: Mask | None = None) -> float:
    """Root mean squared error, optionally restricted to a support mask."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"rmse: shape mismatch {y.shape} vs {y_hat.shape}")
    diff = _support_values(y - y_hat, support)
    return float(np.sqrt(np.mean(diff * diff)))


def rmse_grad(y: Image, y_hat: Image, support: Mask | None = None) -> Image:
    """d rmse(y, y_hat) / d y; zero field when the error is exactly zero."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    diff = y - y_hat
    if support is not None:
        sup = np.asarray(support) > 0
        n = int(sup.sum())
        if n == 0:
            raise ValueError("empty support mask")
        value = float(np.sqrt(np.mean(diff[sup] ** 2)))
        if value == 0.0:
            return np.zeros_like(y)
        grad = np.zeros_like(y)
        grad[sup] = diff[sup] / (n * value)
        return grad
    n = diff.size
    value = float(np.sqrt(np.mean(diff * diff)))
    if value == 0.0:
        return np.zeros_like(y)
    return diff / (n * value)


def bce(y: Image, y_hat: Image, support: Mask | None = None) -> float:
    """Binary cross entropy of probabilities y against targets y_hat.

    y is clamped to [BCE_EPS, 1 - BCE_EPS] before the logs.
    """
    y = np.clip(np.asarray(y, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"bce: shape mismatch {y.shape} vs {y_hat.shape}")
    point = -(y_hat * np.log(y) + (1.0 - y_hat) * np.log(1.0 - y))
    return float(np.mean(_support_values(point, support)))


def bce_grad(y: Image, y_hat: Image, support: Mask | None = None) -> Image:
    """d bce(y, y_hat) / d y; zero where the probability clamp is active."""
    y_raw = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.clip(y_raw, BCE_EPS, 1.0 - BCE_EPS)
    inside = (y_raw > BCE_EPS) & (y_raw < 1.0 - BCE_EPS)
    point = (-y_hat / y + (1.0 - y_hat) / (1.0 - y)) * inside
    if support is not None:
        sup = np.asarray(support) > 0
        n = int(sup.sum())
        if n == 0:
            raise ValueError("empty support mask")
        grad = np.zeros_like(point)
        grad[sup] = point[sup] / n
        return grad
    return point / point.size


def loss_l0(r: Image, j: Image, m_cap: Mask | None) -> float:
    """Reconstruction loss: full-frame RMSE plus RMSE over the bone overlap."""
    total = rmse(r, j)
    if m_cap is not None and np.any(np.asarray(m_cap) > 0):
        total += rmse(r, j, support=m_cap)
    return total


def _channel_bce(outputs: Sequence[Image], targets: Sequence[Mask]) -> float:
    if len(outputs) != len(targets):
        raise ValueError(
            f"channel count mismatch: {len(outputs)} outputs vs {len(targets)} targets"
        )
    if len(outputs) == 0:
        raise ValueError("no channels")
    return float(np.mean([bce(o, t) for o, t in zip(outputs, targets)]))


def loss_l1(seg_output: Sequence[Image], m_shifted_no_overlap: Sequence[Mask]) -> float:
    """Mean per-channel BCE of a segmentation against overlap-free masks."""
    return _channel_bce(seg_output, m_shifted_no_overlap)


def loss_l2(shadow_output: Image, m_cup: Mask) -> float:
    """Generator-side shadow penalty: max(0, 1 - bce(shadow_output, M_union)).

    BCE is unbounded above, so the dual form is clamped at zero to keep the
    signal one-sided.
    """
    return max(0.0, 1.0 - bce(shadow_output, m_cup))


def loss_l3(
    r_b: Image,
    b: Image,
    r_b_shifted: Image,
    b_shifted: Image,
    support: Mask | None = None,
    support_shifted: Mask | None = None,
) -> float:
    """Bone-ground-truth anchor: equal-weight average of two RMSE terms."""
    return 0.5 * rmse(r_b, b, support) + 0.5 * rmse(r_b_shifted, b_shifted, support_shifted)


def loss_supervision(seg_on_j: Sequence[Image], m_no_overlap: Sequence[Mask]) -> float:
    """Supervision critic objective: segmentation BCE on the unshifted image."""
    return _channel_bce(seg_on_j, m_no_overlap)


def loss_discriminator(shadow_on_l0: Image, m_cup: Mask) -> float:
    """Shadow-critic objective: plain BCE (the critic wants to find shadows)."""
    return bce(shadow_on_l0, m_cup)


def loss_preseg(
    seg_on_pseudo: Sequence[Image],
    m_pseudo_no_overlap: Sequence[Mask],
    seg_on_real: Sequence[Image],
    m_real: Sequence[Mask],
) -> float:
    """Stage-1 supervision objective over a pseudo image and its source image."""
    return 0.5 * _channel_bce(seg_on_pseudo, m_pseudo_no_overlap) + 0.5 * _channel_bce(
        seg_on_real, m_real
    )


def hybrid_weights(
    weights: LossWeights, stage: str, early_l3_from_delta: bool = False
) -> dict[str, float]:
    """Active component weights for a training phase.

    stage1_early weighs the bone anchor with delta_p by default;
    early_l3_from_delta selects the alternative delta reading.
    """
    if stage == STAGE2:
        return {"l0": weights.alpha, "l1": weights.beta, "l2": weights.gamma}
    if stage == STAGE1_LATE:
        return {
            "l0": weights.alpha_p,
            "l1": weights.beta_p,
            "l2": weights.gamma_p,
            "l3": weights.delta,
        }
    if stage == STAGE1_EARLY:
        l3_weight = weights.delta if early_l3_from_delta else weights.delta_p
        return {"l0": weights.alpha_pp, "l1": weights.beta_pp, "l3": l3_weight}
    raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")


def loss_hybrid(
    components: Mapping[str, float],
    weights: LossWeights,
    stage: str,
    early_l3_from_delta: bool = False,
) -> LossReport:
    """Weighted sum of loss components for the given training phase."""
    active = hybrid_weights(weights, stage, early_l3_from_delta)
    missing = [k for k in active if k not in components]
    if missing:
        raise ValueError(f"loss_hybrid: stage {stage} needs components {missing}")
    total = sum(active[k] * float(components[k]) for k in sorted(active))
    report = LossReport(stage=stage, total=float(total))
    for k in active:
        setattr(report, k, float(components[k]))
    return report
