"""Synthetic finger-joint phantoms with known per-layer ground truth.

A phantom is two capsule-shaped bones over a smooth soft-tissue field,
composed through the shared multiplicative transmission model so the
composite is byte-identical to reconstructing the ground-truth stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .imaging import Image, LayerStack, Mask, reconstruct, validate_stack

BONE_VALUE_RANGE = (0.2, 0.8)


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 64
    pixel_spacing_mm: float = 0.175
    jsw_mm: float = 1.75
    overlap_px: float = 0.0  # > 0 interlocks the bone tips instead of leaving a gap
    bone_radius_frac: float = 0.16
    edge_margin_px: float = 6.0
    mask_margin_px: float = 3.0
    rim_width_px: float = 2.0
    rim_gain: float = 0.25
    bone_base: float = 0.42
    texture_amp: float = 0.05
    n_soft_blobs: int = 5
    soft_range: tuple[float, float] = (0.05, 0.4)
    soft_sigma_frac: tuple[float, float] = (0.2, 0.45)
    noise_sigma: float = 0.006

    def __post_init__(self) -> None:
        if self.size < 32:
            raise ValueError("PhantomConfig: size must be at least 32")
        if self.pixel_spacing_mm <= 0:
            raise ValueError("PhantomConfig: pixel_spacing_mm must be positive")
        if self.jsw_mm < 0 or self.overlap_px < 0:
            raise ValueError("PhantomConfig: jsw_mm and overlap_px must be >= 0")
        if self.bone_radius_frac < 0 or self.bone_radius_frac > 0.25:
            raise ValueError("PhantomConfig: bone_radius_frac outside [0, 0.25]")
        lo, hi = self.soft_range
        if not (0.0 <= lo < hi <= 1.0):
            raise ValueError("PhantomConfig: soft_range must satisfy 0 <= lo < hi <= 1")
        slo, shi = self.soft_sigma_frac
        if not (0.0 < slo <= shi):
            raise ValueError("PhantomConfig: soft_sigma_frac must be increasing and > 0")
        if self.mask_margin_px < 0:
            raise ValueError("PhantomConfig: mask_margin_px must be >= 0")


@dataclass
class Phantom:
    """Ground-truth stack, its composite, and the generation bookkeeping."""

    gt_stack: LayerStack
    composed: Image
    masks: list[Mask] = field(default_factory=list)
    pixel_spacing_mm: float = 0.175
    true_jsw_mm: float = 0.0
    params: dict = field(default_factory=dict)


def _capsule_distance(
    xs: np.ndarray, ys: np.ndarray, cx: float, y0: float, y1: float
) -> np.ndarray:
    """Distance from each pixel to a vertical segment at column cx, rows [y0, y1]."""
    dy = ys - np.clip(ys, y0, y1)
    return np.hypot(xs - cx, dy)


def _bone_layer(
    dist: np.ndarray, radius: float, cfg: PhantomConfig, rng: np.random.Generator
) -> tuple[Image, Mask]:
    inside = dist <= radius
    rim = inside & (dist > radius - cfg.rim_width_px)
    # Band-limited trabecular texture: difference of blurred white noise.
    white = rng.normal(0.0, 1.0, dist.shape)
    texture = gaussian_filter(white, 1.0) - gaussian_filter(white, 3.0)
    texture /= max(float(texture.std()), 1e-12)
    values = cfg.bone_base + cfg.rim_gain * rim + cfg.texture_amp * texture
    lo, hi = BONE_VALUE_RANGE
    layer = np.where(inside, np.clip(values, lo, hi), 0.0)
    mask = (dist <= radius + cfg.mask_margin_px).astype(np.float64)
    return layer, mask


def _soft_layer(cfg: PhantomConfig, rng: np.random.Generator) -> Image:
    size = cfg.size
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    blobs = np.zeros((size, size), dtype=np.float64)
    for _ in range(cfg.n_soft_blobs):
        amp = rng.uniform(0.5, 1.0)
        bx = rng.uniform(0.0, size - 1.0)
        by = rng.uniform(0.0, size - 1.0)
        sigma = rng.uniform(*cfg.soft_sigma_frac) * size
        blobs += amp * np.exp(-((xs - bx) ** 2 + (ys - by) ** 2) / (2.0 * sigma**2))
    lo, hi = cfg.soft_range
    pad = 3.0 * cfg.noise_sigma
    spread = float(blobs.max() - blobs.min())
    if spread < 1e-9:
        soft = np.full_like(blobs, 0.5 * (lo + hi))
    else:
        soft = (lo + pad) + (blobs - blobs.min()) * ((hi - lo - 2.0 * pad) / spread)
    soft = soft + rng.normal(0.0, cfg.noise_sigma, blobs.shape)
    return np.clip(soft, lo, hi)


def make_phantom(cfg: PhantomConfig | None = None, seed: int = 0) -> Phantom:
    """Generate one phantom deterministically from (config, seed)."""
    cfg = cfg or PhantomConfig()
    rng = np.random.default_rng(seed)
    size = cfg.size
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)

    soft = _soft_layer(cfg, rng)

    joint_row = size / 2.0 + rng.uniform(-2.0, 2.0)
    if cfg.overlap_px > 0:
        gap_px = -cfg.overlap_px
    else:
        gap_px = cfg.jsw_mm / cfg.pixel_spacing_mm
    true_jsw_mm = max(gap_px, 0.0) * cfg.pixel_spacing_mm

    layers: list[Image] = [soft]
    masks: list[Mask] = [np.ones((size, size), dtype=np.float64)]
    bone_params = []
    # Layer 1 is the lower (proximal) bone, layer 2 the upper (distal) one.
    for which in ("lower", "upper"):
        if cfg.bone_radius_frac <= 0:
            layers.append(np.zeros((size, size), dtype=np.float64))
            masks.append(np.zeros((size, size), dtype=np.float64))
            bone_params.append({"bone": which, "radius_px": 0.0})
            continue
        radius = size * cfg.bone_radius_frac * (1.0 + rng.uniform(-0.1, 0.1))
        cx = size / 2.0 + rng.uniform(-3.0, 3.0)
        if which == "upper":
            tip = joint_row - gap_px / 2.0
            y1 = tip - radius
            y0 = min(cfg.edge_margin_px + radius, y1)
        else:
            tip = joint_row + gap_px / 2.0
            y0 = tip + radius
            y1 = max(size - 1.0 - cfg.edge_margin_px - radius, y0)
        dist = _capsule_distance(xs, ys, cx, y0, y1)
        layer, mask = _bone_layer(dist, radius, cfg, rng)
        layers.append(layer)
        masks.append(mask)
        bone_params.append(
            {"bone": which, "cx": cx, "y0": y0, "y1": y1, "radius_px": radius}
        )

    stack = LayerStack(layers=layers, masks=masks)
    validate_stack(stack, n_bones=2)
    composed = reconstruct(stack)
    return Phantom(
        gt_stack=stack,
        composed=composed,
        masks=list(stack.masks),
        pixel_spacing_mm=cfg.pixel_spacing_mm,
        true_jsw_mm=true_jsw_mm,
        params={
            "seed": seed,
            "size": size,
            "joint_row": joint_row,
            "gap_px": gap_px,
            "bones": bone_params,
        },
    )
