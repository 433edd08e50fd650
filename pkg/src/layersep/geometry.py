"""Rigid 2-D transforms for bone layers.

A shift is a rotation about the image center followed by a translation,
given as (theta, x, y) per bone layer. Layer 0 (soft tissue) never moves.
Layers are resampled bilinearly, masks with nearest neighbor; resampling
uses inverse mapping with zero fill outside the frame.

Coordinates are (x = column rightward, y = row downward); the rotation
matrix acts algebraically on (x, y) offsets from the center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imaging import Image, LayerStack, Mask


@dataclass(frozen=True)
class LayerShift:
    theta: float = 0.0  # radians
    x: float = 0.0  # pixels
    y: float = 0.0  # pixels

    def is_identity(self) -> bool:
        return self.theta == 0.0 and self.x == 0.0 and self.y == 0.0


@dataclass
class ShiftParams:
    """Per-bone-layer shifts, keyed by layer index >= 1."""

    entries: dict[int, LayerShift] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for i, shift in self.entries.items():
            if i < 1:
                raise ValueError(f"ShiftParams: layer {i} cannot shift (soft tissue)")
            if abs(shift.theta) > math.pi:
                raise ValueError(f"ShiftParams: |theta| > pi for layer {i}")

    def for_layer(self, i: int) -> LayerShift:
        return self.entries.get(i, LayerShift())

    def to_records(self) -> list[dict]:
        return [
            {
                "layer": i,
                "theta_deg": math.degrees(s.theta),
                "dx_px": s.x,
                "dy_px": s.y,
            }
            for i, s in sorted(self.entries.items())
        ]

    @staticmethod
    def from_records(records: list[dict]) -> "ShiftParams":
        entries = {}
        for rec in records:
            entries[int(rec["layer"])] = LayerShift(
                theta=math.radians(float(rec.get("theta_deg", 0.0))),
                x=float(rec.get("dx_px", 0.0)),
                y=float(rec.get("dy_px", 0.0)),
            )
        return ShiftParams(entries)

    @staticmethod
    def identity(n_bones: int = 2) -> "ShiftParams":
        return ShiftParams({i: LayerShift() for i in range(1, n_bones + 1)})


@dataclass(frozen=True)
class ShiftRange:
    """Uniform sampling ranges for random shifts."""

    theta_max: float = math.radians(3.0)  # radians
    x_range: tuple[float, float] = (-8.0, 8.0)  # pixels
    y_range: tuple[float, float] = (-8.0, 8.0)  # pixels
    rng_seed: int = 0

    def __post_init__(self) -> None:
        for name, (lo, hi) in (("x_range", self.x_range), ("y_range", self.y_range)):
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ValueError(f"ShiftRange: invalid {name} ({lo}, {hi})")
        if not math.isfinite(self.theta_max) or self.theta_max < 0:
            raise ValueError(f"ShiftRange: invalid theta_max {self.theta_max}")


def make_transform(theta: float, x: float, y: float) -> np.ndarray:
    """2x3 rotation-then-translation matrix [[cos -sin x], [sin cos y]]."""
    if not all(math.isfinite(v) for v in (theta, x, y)):
        raise ValueError("make_transform: non-finite input")
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, x], [s, c, y]], dtype=np.float64)


def _source_coords(
    shape: tuple[int, int], shift: LayerShift
) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-map output pixel coordinates to source coordinates."""
    h, w = shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    yy, xx = np.meshgrid(
        np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"
    )
    dx = xx - cx - shift.x
    dy = yy - cy - shift.y
    c, s = math.cos(shift.theta), math.sin(shift.theta)
    sx = c * dx + s * dy + cx
    sy = -s * dx + c * dy + cy
    return sx, sy


def warp_layer(image: Image, shift: LayerShift) -> Image:
    """Bilinear resample of an image under a rigid shift, zero fill outside."""
    image = np.asarray(image, dtype=np.float64)
    if shift.is_identity():
        return image.copy()
    h, w = image.shape
    sx, sy = _source_coords(image.shape, shift)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros_like(image)
    corners = (
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    )
    for cxs, cys, wgt in corners:
        valid = (cxs >= 0) & (cxs < w) & (cys >= 0) & (cys < h)
        out[valid] += wgt[valid] * image[cys[valid], cxs[valid]]
    return out


def warp_layer_adjoint(grad: Image, shift: LayerShift) -> Image:
    """Transpose of warp_layer: scatter output-side gradients back to sources.

    Exact adjoint of the bilinear gather, so analytic gradients through a
    shift match finite differences to machine precision.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if shift.is_identity():
        return grad.copy()
    h, w = grad.shape
    sx, sy = _source_coords(grad.shape, shift)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    acc = np.zeros_like(grad)
    corners = (
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    )
    for cxs, cys, wgt in corners:
        valid = (cxs >= 0) & (cxs < w) & (cys >= 0) & (cys < h)
        np.add.at(acc, (cys[valid], cxs[valid]), wgt[valid] * grad[valid])
    return acc


def warp_mask(mask: Mask, shift: LayerShift) -> Mask:
    """Nearest-neighbor resample of a mask; re-binarized at 0.5."""
    mask = np.asarray(mask, dtype=np.float64)
    if shift.is_identity():
        return mask.copy()
    h, w = mask.shape
    sx, sy = _source_coords(mask.shape, shift)
    ix = np.floor(sx + 0.5).astype(np.int64)
    iy = np.floor(sy + 0.5).astype(np.int64)
    valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    out = np.zeros_like(mask)
    out[valid] = mask[iy[valid], ix[valid]]
    return (out >= 0.5).astype(np.float64)


def _content_exits_frame(support: Mask, shift: LayerShift) -> bool:
    """True if forward-mapping any set support pixel leaves the frame."""
    ys, xs = np.nonzero(np.asarray(support))
    if len(xs) == 0:
        return False
    h, w = np.asarray(support).shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    c, s = math.cos(shift.theta), math.sin(shift.theta)
    fx = c * (xs - cx) - s * (ys - cy) + cx + shift.x
    fy = s * (xs - cx) + c * (ys - cy) + cy + shift.y
    return bool(
        np.any((fx < -0.5) | (fx > w - 0.5) | (fy < -0.5) | (fy > h - 0.5))
    )


def shift_stack(stack: LayerStack, params: ShiftParams) -> LayerStack:
    """Resample bone layers and masks under per-layer shifts; layer 0 fixed.

    Shifted layers are re-masked by their shifted masks so the support
    invariant survives interpolation. Dropped out-of-frame content sets the
    clipped flag on the result.
    """
    layers = [stack.layers[0].copy()]
    masks = [stack.masks[0].copy()]
    clipped = False
    for i in range(1, len(stack.layers)):
        shift = params.for_layer(i)
        new_mask = warp_mask(stack.masks[i], shift)
        new_layer = warp_layer(stack.layers[i], shift) * new_mask
        if not shift.is_identity() and _content_exits_frame(stack.masks[i], shift):
            clipped = True
        layers.append(np.clip(new_layer, 0.0, 1.0))
        masks.append(new_mask)
    return LayerStack(layers, masks, clipped=clipped)


def shift_masks(masks: list[Mask], params: ShiftParams) -> list[Mask]:
    """Nearest-neighbor shift of a full mask list; index 0 is never moved."""
    out = [np.asarray(masks[0], dtype=np.float64).copy()]
    for i in range(1, len(masks)):
        out.append(warp_mask(masks[i], params.for_layer(i)))
    return out


def sample_shift(
    shift_range: ShiftRange,
    rng: np.random.Generator | None = None,
    n_bones: int = 2,
) -> ShiftParams:
    """Draw independent uniform shifts per bone layer.

    With rng omitted, a fresh generator is seeded from shift_range.rng_seed,
    so repeated calls are deterministic; pass a generator to stream draws.
    """
    if rng is None:
        rng = np.random.default_rng(shift_range.rng_seed)
    entries = {}
    for i in range(1, n_bones + 1):
        theta = float(rng.uniform(-shift_range.theta_max, shift_range.theta_max))
        x = float(rng.uniform(*shift_range.x_range))
        y = float(rng.uniform(*shift_range.y_range))
        entries[i] = LayerShift(theta=theta, x=x, y=y)
    return ShiftParams(entries)


def compose_shifts(first: LayerShift, second: LayerShift) -> LayerShift:
    """Shift equivalent to applying first, then second."""
    c, s = math.cos(second.theta), math.sin(second.theta)
    return LayerShift(
        theta=first.theta + second.theta,
        x=c * first.x - s * first.y + second.x,
        y=s * first.x + c * first.y + second.y,
    )


def invert_shift(shift: LayerShift) -> LayerShift:
    """Shift that undoes the given one."""
    c, s = math.cos(-shift.theta), math.sin(-shift.theta)
    return LayerShift(
        theta=-shift.theta,
        x=-(c * shift.x - s * shift.y),
        y=-(s * shift.x + c * shift.y),
    )
