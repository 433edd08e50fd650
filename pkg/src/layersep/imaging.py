"""Pixel grids, masks, layer stacks, and attenuation compositing.

Images are 2-D float64 arrays of display intensities in [0, 1] (bright =
absorbing). A layer stack holds n+1 layers: index 0 is soft tissue, 1 the
lower bone, 2 the upper bone. Compositing follows the multiplicative
transmission model: the composite equals 1 minus the product of per-layer
transmissions (1 - L_i).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import PIL.Image

Image = np.ndarray
Mask = np.ndarray

# Transmission values are clamped away from zero before any log-space
# operation; full absorption makes the model degenerate.
LOG_CLAMP = 1e-6


def as_image(data: np.ndarray | Sequence) -> Image:
    """Coerce to a float64 image array without validating."""
    return np.asarray(data, dtype=np.float64)


def validate_image(image: Image, name: str = "image") -> Image:
    """Check image invariants, returning the array; raise ValueError on failure."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D array, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name}: empty image {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise ValueError(f"{name}: expected float dtype, got {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite values present")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"{name}: values outside [0, 1] (min {lo:.6g}, max {hi:.6g})")
    return arr


def validate_mask(mask: Mask, name: str = "mask") -> Mask:
    """Check mask invariants (binary values), returning the array."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D array, got shape {arr.shape}")
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError(f"{name}: non-binary values {vals[:8]!r}")
    return np.asarray(arr, dtype=np.float64)


@dataclass
class LayerStack:
    """Ordered layers (0 = soft tissue, then bones) with their support masks.

    clipped is set by geometry.shift_stack when resampling dropped
    out-of-frame content.
    """

    layers: list[Image]
    masks: list[Mask]
    clipped: bool = field(default=False, compare=False)

    @property
    def n_bones(self) -> int:
        return len(self.layers) - 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.layers[0].shape

    def copy(self) -> "LayerStack":
        return LayerStack(
            [layer.copy() for layer in self.layers],
            [mask.copy() for mask in self.masks],
            self.clipped,
        )


def validate_stack(stack: LayerStack, n_bones: int | None = None) -> LayerStack:
    """Check stack invariants: shapes, value range, masked bone support."""
    if len(stack.layers) != len(stack.masks):
        raise ValueError(
            f"stack: {len(stack.layers)} layers but {len(stack.masks)} masks"
        )
    if len(stack.layers) < 1:
        raise ValueError("stack: no layers")
    if n_bones is not None and stack.n_bones != n_bones:
        raise ValueError(f"stack: expected {n_bones} bone layers, got {stack.n_bones}")
    shape = stack.layers[0].shape
    for i, (layer, mask) in enumerate(zip(stack.layers, stack.masks)):
        validate_image(layer, f"layer {i}")
        validate_mask(mask, f"mask {i}")
        if layer.shape != shape or mask.shape != shape:
            raise ValueError(f"stack: layer/mask {i} shape differs from layer 0")
        if i >= 1 and np.any(layer[mask == 0] != 0.0):
            raise ValueError(f"stack: layer {i} has support outside its mask")
    return stack


def mask_intersection(masks: Sequence[Mask]) -> Mask:
    """Per-pixel AND over the given masks."""
    if len(masks) == 0:
        raise ValueError("mask_intersection: empty mask list")
    out = np.asarray(masks[0], dtype=np.float64).copy()
    for m in masks[1:]:
        m = np.asarray(m)
        if m.shape != out.shape:
            raise ValueError(
                f"mask_intersection: shape mismatch {m.shape} vs {out.shape}"
            )
        out *= m
    return out


def mask_union(masks: Sequence[Mask]) -> Mask:
    """Per-pixel OR over the given masks."""
    if len(masks) == 0:
        raise ValueError("mask_union: empty mask list")
    out = np.asarray(masks[0], dtype=np.float64).copy()
    for m in masks[1:]:
        m = np.asarray(m)
        if m.shape != out.shape:
            raise ValueError(f"mask_union: shape mismatch {m.shape} vs {out.shape}")
        out = np.maximum(out, m)
    return out


def apply_mask(image: Image, mask: Mask) -> Image:
    """Per-pixel product of an image with a mask."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if image.shape != mask.shape:
        raise ValueError(f"apply_mask: shape mismatch {image.shape} vs {mask.shape}")
    return image * mask


def transmission(layers: Sequence[Image], skip: int | None = None) -> Image:
    """Product of per-layer transmissions (1 - L_i), optionally skipping one layer."""
    out = np.ones_like(np.asarray(layers[0], dtype=np.float64))
    for i, layer in enumerate(layers):
        if i == skip:
            continue
        out *= 1.0 - layer
    return out


def reconstruct(stack: LayerStack) -> Image:
    """Composite a layer stack into a displayed image: 1 - prod(1 - L_i)."""
    return 1.0 - transmission(stack.layers)


def reconstruct_gradient(stack: LayerStack, i: int) -> Image:
    """Per-pixel derivative of the composite with respect to layer i."""
    if not 0 <= i < len(stack.layers):
        raise IndexError(f"reconstruct_gradient: layer index {i} out of range")
    return transmission(stack.layers, skip=i)


def log_transmission(image: Image) -> Image:
    """log(1 - v) with v clamped to 1 - LOG_CLAMP to avoid the singularity."""
    v = np.minimum(np.asarray(image, dtype=np.float64), 1.0 - LOG_CLAMP)
    return np.log(1.0 - v)


# ---------------------------------------------------------------------------
# PNG I/O. Grayscale only; code value c at bit depth d maps to c / (2^d - 1).
# ---------------------------------------------------------------------------


def read_png(path: str | Path) -> Image:
    """Read an 8- or 16-bit grayscale PNG into a [0, 1] image."""
    with PIL.Image.open(path) as im:
        mode = im.mode
        arr = np.asarray(im)
    if mode == "L":
        scale = 255.0
    elif mode in ("I", "I;16", "I;16B"):
        scale = 65535.0
    else:
        raise ValueError(f"read_png: unsupported PNG mode {mode!r} in {path}")
    return np.asarray(arr, dtype=np.float64) / scale


def write_png(path: str | Path, image: Image, depth: int = 16) -> None:
    """Write a [0, 1] image as an 8- or 16-bit grayscale PNG."""
    arr = validate_image(image, "write_png input")
    if depth == 8:
        codes = np.round(arr * 255.0).astype(np.uint8)
        im = PIL.Image.fromarray(codes, mode="L")
    elif depth == 16:
        codes = np.round(arr * 65535.0).astype(np.uint16)
        im = PIL.Image.fromarray(codes)
    else:
        raise ValueError(f"write_png: depth must be 8 or 16, got {depth}")
    im.save(path, format="PNG")


def encode_png_bytes(image: Image, depth: int = 16) -> bytes:
    """Encode an image to PNG bytes (same contract as write_png)."""
    import io

    buf = io.BytesIO()
    arr = validate_image(image, "encode_png_bytes input")
    if depth == 8:
        im = PIL.Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L")
    elif depth == 16:
        im = PIL.Image.fromarray(np.round(arr * 65535.0).astype(np.uint16))
    else:
        raise ValueError(f"encode_png_bytes: depth must be 8 or 16, got {depth}")
    im.save(buf, format="PNG")
    return buf.getvalue()
