"""Pseudo joint images: artificial bone overlap built from non-overlap cases.

Bone patches (image content under each bone mask) are re-placed with a small
scale and translation so they overlap, then composed through the transmission
model. A harmonic correction field, solved with red-black SOR, supplies the
soft-tissue transmission inside the bone union so that doubly covered pixels
do not count the soft layer twice and the splice stays continuous.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imaging import (
    Image,
    Mask,
    apply_mask,
    mask_intersection,
    mask_union,
    validate_image,
    validate_mask,
)

K_DENOM_CLAMP = 1e-4
SOR_OMEGA = 1.9
SOR_TOL = 1e-6
SOR_MAX_ITERS = 10_000


class NoOverlapError(ValueError):
    """Placement produced no bone overlap; resample the placement."""


class ConvergenceError(RuntimeError):
    """Harmonic solver failed to reach the residual tolerance."""


@dataclass(frozen=True)
class BonePlacement:
    """Scale about the source mask centroid plus a translation, in pixels."""

    scale: float = 1.0
    dx: float = 0.0
    dy: float = 0.0

    def __post_init__(self) -> None:
        if self.scale <= 0:
            raise ValueError("BonePlacement: scale must be positive")

    def to_record(self) -> dict:
        return {"scale": self.scale, "dx": self.dx, "dy": self.dy}

    @classmethod
    def from_record(cls, record: dict) -> "BonePlacement":
        return cls(
            scale=float(record["scale"]),
            dx=float(record["dx"]),
            dy=float(record["dy"]),
        )


@dataclass(frozen=True)
class PlacementConfig:
    scale_range: tuple[float, float] = (0.95, 1.05)
    shift_px: float = 4.0
    overlap_range: tuple[float, float] = (0.02, 0.35)
    max_tries: int = 500


@dataclass
class SourceCase:
    """A non-overlap source: image plus one binary mask per bone."""

    case_id: str
    image: Image
    masks: list[Mask]


@dataclass
class PseudoCase:
    image: Image
    bone_gt: list[Image]
    bone_gt_shifted: list[Image]
    masks: list[Mask]
    k_field: Image
    provenance: dict = field(default_factory=dict)

    @property
    def union_mask(self) -> Mask:
        return mask_union(self.masks)

    @property
    def overlap_mask(self) -> Mask:
        return mask_intersection(self.masks)

    @property
    def overlap_fraction(self) -> float:
        return overlap_fraction(self.masks)


def overlap_fraction(masks: list[Mask]) -> float:
    """Intersection area over the smallest single-mask area (0 when degenerate)."""
    if len(masks) < 2:
        return 0.0
    smallest = min(float(m.sum()) for m in masks)
    if smallest == 0:
        return 0.0
    return float(mask_intersection(masks).sum()) / smallest


def _mask_centroid(mask: Mask) -> tuple[float, float]:
    ys, xs = np.nonzero(mask > 0.5)
    if ys.size == 0:
        raise ValueError("placement: cannot place an empty mask")
    return float(xs.mean()), float(ys.mean())


def _placement_source_coords(
    shape: tuple[int, int], placement: BonePlacement, center: tuple[float, float]
) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    cx, cy = center
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = (xs - cx - placement.dx) / placement.scale + cx
    sy = (ys - cy - placement.dy) / placement.scale + cy
    return sx, sy


def place_image(image: Image, placement: BonePlacement, center: tuple[float, float]) -> Image:
    """Bilinear warp of the image under the placement, zero outside the frame."""
    sx, sy = _placement_source_coords(image.shape, placement, center)
    h, w = image.shape
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros_like(image, dtype=np.float64)
    for dy_n, dx_n, weight in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yn = y0 + dy_n
        xn = x0 + dx_n
        valid = (yn >= 0) & (yn < h) & (xn >= 0) & (xn < w)
        out[valid] += weight[valid] * image[yn[valid], xn[valid]]
    return out


def place_mask(mask: Mask, placement: BonePlacement) -> Mask:
    """Nearest-neighbor warp of a binary mask under the placement."""
    center = _mask_centroid(mask)
    sx, sy = _placement_source_coords(mask.shape, placement, center)
    xn = np.floor(sx + 0.5).astype(np.int64)
    yn = np.floor(sy + 0.5).astype(np.int64)
    h, w = mask.shape
    valid = (yn >= 0) & (yn < h) & (xn >= 0) & (xn < w)
    out = np.zeros_like(mask, dtype=np.float64)
    out[valid] = mask[yn[valid], xn[valid]]
    return (out >= 0.5).astype(np.float64)


def extract_bone_regions(image: Image, masks: list[Mask]) -> list[Image]:
    """Image content under each bone mask (bone plus its soft-tissue texture)."""
    validate_image(image)
    out = []
    for mask in masks:
        validate_mask(mask)
        out.append(apply_mask(image, mask))
    return out


def _boundary_values(image: Image, bone_regions: list[Image]) -> np.ndarray:
    denom = np.ones_like(image)
    for region in bone_regions:
        denom = denom * (1.0 - region)
    denom = np.maximum(denom, K_DENOM_CLAMP)
    return (1.0 - image) / denom


def solve_k(
    image: Image,
    bone_regions: list[Image],
    union_mask: Mask,
    *,
    tol: float = SOR_TOL,
    max_iters: int = SOR_MAX_ITERS,
    omega: float = SOR_OMEGA,
) -> Image:
    """Harmonic correction field inside the bone union.

    Dirichlet values on the one-pixel ring outside the union come from the
    background transmission (1 - image) divided by the bone-region
    transmission product (clamped away from zero). Red-black Gauss-Seidel
    with over-relaxation; raises ConvergenceError with the final residual if
    the tolerance is not met.
    """
    validate_image(image)
    validate_mask(union_mask)
    if union_mask.sum() == 0:
        raise ValueError("solve_k: empty union mask")

    # Pad by one pixel so interior points always have four neighbors; the pad
    # row doubles as the boundary ring where the union touches the frame.
    pad_image = np.pad(image, 1, mode="edge")
    pad_regions = [np.pad(r, 1, mode="constant") for r in bone_regions]
    interior = np.pad(union_mask, 1, mode="constant") > 0.5

    shifted = (
        np.roll(interior, 1, axis=0)
        | np.roll(interior, -1, axis=0)
        | np.roll(interior, 1, axis=1)
        | np.roll(interior, -1, axis=1)
    )
    ring = shifted & ~interior
    if not ring.any():
        raise ValueError("solve_k: union mask has no boundary ring")
    bc = _boundary_values(pad_image, pad_regions)

    k = np.ones_like(pad_image)
    k[ring] = bc[ring]
    k[interior] = float(bc[ring].mean())

    yy, xx = np.indices(k.shape)
    parities = (interior & ((yy + xx) % 2 == 0), interior & ((yy + xx) % 2 == 1))

    def neighbor_avg(arr: np.ndarray) -> np.ndarray:
        return 0.25 * (
            np.roll(arr, 1, axis=0)
            + np.roll(arr, -1, axis=0)
            + np.roll(arr, 1, axis=1)
            + np.roll(arr, -1, axis=1)
        )

    residual = np.inf
    for _ in range(max_iters):
        for parity in parities:
            update = neighbor_avg(k) - k
            k[parity] += omega * update[parity]
        residual = float(np.abs((neighbor_avg(k) - k)[interior]).max())
        if residual < tol:
            break
    else:
        raise ConvergenceError(
            f"solve_k: residual {residual:.3e} above tolerance {tol:.1e} "
            f"after {max_iters} iterations"
        )
    return k[1:-1, 1:-1]


def compose_pseudo(
    image: Image,
    masks: list[Mask],
    placements: list[BonePlacement],
    *,
    source_id: str = "",
    literal_formula: bool = False,
    tol: float = SOR_TOL,
    max_iters: int = SOR_MAX_ITERS,
) -> PseudoCase:
    """Compose one pseudo-image from a non-overlap source.

    The placed bone patches are composed multiplicatively inside their union;
    the correction field divides one soft-tissue transmission factor out of
    each doubly covered pixel. Outside the union the source image is kept
    unchanged (exact splice). `literal_formula` instead adds the source image
    on top of the union term, for side-by-side comparison.
    """
    validate_image(image)
    if len(masks) != len(placements):
        raise ValueError("compose_pseudo: one placement per mask required")
    if len(masks) >= 2 and mask_intersection(masks).sum() > 0:
        raise ValueError("compose_pseudo: source bone masks must not overlap")

    bone_gt = extract_bone_regions(image, masks)
    placed_masks = []
    placed_regions = []
    for mask, placement in zip(masks, placements):
        center = _mask_centroid(mask)
        placed = place_mask(mask, placement)
        if placed.sum() == 0:
            raise NoOverlapError("compose_pseudo: placement left the frame")
        placed_masks.append(placed)
        placed_regions.append(apply_mask(place_image(image, placement, center), placed))
    if len(placed_masks) >= 2 and mask_intersection(placed_masks).sum() == 0:
        raise NoOverlapError("compose_pseudo: placed masks do not overlap")

    union = mask_union(placed_masks) if placed_masks else np.zeros_like(image)
    if union.sum() == 0:
        return PseudoCase(
            image=image.copy(),
            bone_gt=bone_gt,
            bone_gt_shifted=[],
            masks=[],
            k_field=np.ones_like(image),
            provenance={"source_id": source_id, "placements": []},
        )

    k = solve_k(image, placed_regions, union, tol=tol, max_iters=max_iters)
    transmission = np.ones_like(image)
    for region in placed_regions:
        transmission = transmission * (1.0 - region)
    cover = sum(m for m in placed_masks)

    if literal_formula:
        inside = (1.0 - k * transmission) + image
    else:
        # One soft-tissue transmission factor per extra covering patch is
        # divided out; single-cover pixels reduce to the pasted patch.
        k_safe = np.maximum(k, K_DENOM_CLAMP)
        inside = 1.0 - np.power(k_safe, 1.0 - cover) * transmission
    composite = np.where(union > 0.5, np.clip(inside, 0.0, 1.0), image)
    residual = laplacian_max(k, union)

    return PseudoCase(
        image=composite,
        bone_gt=bone_gt,
        bone_gt_shifted=placed_regions,
        masks=placed_masks,
        k_field=k,
        provenance={
            "source_id": source_id,
            "placements": [p.to_record() for p in placements],
            "overlap_fraction": overlap_fraction(placed_masks),
            "solver_residual": residual,
            "literal_formula": literal_formula,
        },
    )


def laplacian_max(k: Image, union_mask: Mask) -> float:
    """Largest 5-point Laplacian magnitude over union pixels with all four
    neighbors inside the frame (frame-edge pixels have no in-frame stencil)."""
    lap = (
        np.roll(k, 1, axis=0)
        + np.roll(k, -1, axis=0)
        + np.roll(k, 1, axis=1)
        + np.roll(k, -1, axis=1)
        - 4.0 * k
    )
    check = np.zeros_like(union_mask, dtype=bool)
    check[1:-1, 1:-1] = union_mask[1:-1, 1:-1] > 0.5
    if not check.any():
        return 0.0
    return float(np.abs(lap[check]).max())


def validate_pseudo_case(case: PseudoCase, laplacian_tol: float = 1e-3) -> None:
    """Check the published invariants; raises ValueError on the first breach."""
    validate_image(case.image)
    if len(case.masks) >= 2 and case.overlap_mask.sum() == 0:
        raise ValueError("PseudoCase: placed bone masks do not overlap")
    if case.masks:
        worst = laplacian_max(case.k_field, case.union_mask)
        if worst > laplacian_tol:
            raise ValueError(
                f"PseudoCase: correction field not harmonic (|lap| {worst:.2e})"
            )


def sample_placements(
    masks: list[Mask], rng: np.random.Generator, config: PlacementConfig
) -> list[BonePlacement]:
    """Draw placements until the placed masks overlap within the accepted band."""
    lo, hi = config.overlap_range
    for _ in range(config.max_tries):
        placements = []
        for _unused in masks:
            # Translation drawn from a disc so the displacement norm never
            # exceeds shift_px regardless of direction.
            while True:
                dx = rng.uniform(-config.shift_px, config.shift_px)
                dy = rng.uniform(-config.shift_px, config.shift_px)
                if dx * dx + dy * dy <= config.shift_px**2:
                    break
            placements.append(
                BonePlacement(scale=rng.uniform(*config.scale_range), dx=dx, dy=dy)
            )
        placed = [place_mask(m, p) for m, p in zip(masks, placements)]
        if any(p.sum() == 0 for p in placed):
            continue
        if lo <= overlap_fraction(placed) <= hi:
            return placements
    raise NoOverlapError(
        f"sample_placements: no accepted placement in {config.max_tries} tries"
    )


def build_pseudo_dataset(
    cases: list[SourceCase],
    count: int,
    seed: int = 0,
    config: PlacementConfig | None = None,
) -> list[PseudoCase]:
    """Deterministically build `count` pseudo-images from non-overlap sources."""
    if count < 0:
        raise ValueError("build_pseudo_dataset: count must be >= 0")
    if count > 0 and not cases:
        raise ValueError("build_pseudo_dataset: no source cases given")
    config = config or PlacementConfig()
    rng = np.random.default_rng(seed)
    out: list[PseudoCase] = []
    for _ in range(count):
        source = cases[int(rng.integers(0, len(cases)))]
        if len(source.masks) >= 2 and mask_intersection(source.masks).sum() > 0:
            raise ValueError(
                f"build_pseudo_dataset: source {source.case_id} has overlapping masks"
            )
        placements = sample_placements(source.masks, rng, config)
        case = compose_pseudo(
            source.image, source.masks, placements, source_id=source.case_id
        )
        validate_pseudo_case(case)
        out.append(case)
    return out
