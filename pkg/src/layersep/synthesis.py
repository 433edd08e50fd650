"""Joint-space synthesis: re-pose separated bone layers to a target JSW.

Once a radiograph is split into soft tissue and per-bone layers, the joint
space width becomes an adjustable parameter: translating the bone layers
along the joint axis and recomposing yields a new image whose JSW is known
by construction.  This module turns a target width (or a severity score)
into concrete layer shifts, renders the result, and builds balanced
datasets of such images with exact annotations.

Layer convention follows the phantom generator: layer 1 is the lower
(proximal) bone, layer 2 the upper (distal) one.  The joint axis is a unit
(dx, dy) vector pointing in the distal direction; rows grow downward, so
the default vertical axis is (0, -1).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import LayerShift, ShiftParams, ShiftRange, shift_stack
from .imaging import Image, LayerStack, reconstruct, write_png

NORMAL_JSW_MM = 1.75
DEFAULT_PIXEL_SPACING_MM = 0.175
DEFAULT_JOINT_AXIS = (0.0, -1.0)
UPPER_LAYER = 2
LOWER_LAYER = 1

# Severity bins over jsw/normal ratio, least severe first.  Lower edges are
# inclusive so an exact boundary lands in the less severe bin.
SCORE_RATIO_EDGES = (1.0, 0.75, 0.5, 0.25)

# Ratio ranges targets are drawn from per severity bin.  Bin 0 is capped at
# 125% of normal and bin 4 floored at 5% so every target stays positive and
# within a few pixels of shift at the default spacing.
SCORE_SAMPLING_RANGES = {
    0: (1.0, 1.25),
    1: (0.75, 1.0),
    2: (0.5, 0.75),
    3: (0.25, 0.5),
    4: (0.05, 0.25),
}


def svdh_like_score(jsw_mm: float, normal_jsw_mm: float = NORMAL_JSW_MM) -> int:
    """Grade a joint space width on the 0 (normal) to 4 (worst) scale.

    The grade counts how many quarters of the normal width have been lost:
    >= 100% of normal scores 0, [75%, 100%) scores 1, and so on down to
    < 25% scoring 4.
    """
    if not math.isfinite(jsw_mm) or jsw_mm < 0:
        raise ValueError("svdh_like_score: jsw_mm must be finite and >= 0")
    if not math.isfinite(normal_jsw_mm) or normal_jsw_mm <= 0:
        raise ValueError("svdh_like_score: normal_jsw_mm must be positive")
    ratio = jsw_mm / normal_jsw_mm
    for score, edge in enumerate(SCORE_RATIO_EDGES):
        if ratio >= edge:
            return score
    return 4


def _validate_axis(axis: Sequence[float]) -> tuple[float, float]:
    ax = (float(axis[0]), float(axis[1]))
    if len(tuple(axis)) != 2 or not all(math.isfinite(a) for a in ax):
        raise ValueError("joint axis must be a finite 2-vector")
    norm = math.hypot(*ax)
    if abs(norm - 1.0) > 1e-6:
        raise ValueError("joint axis must have unit length")
    return ax


@dataclass(frozen=True)
class JswAnnotation:
    """Joint space width of one image, with its derived severity grade.

    When svdh_like is omitted it is computed from jsw_mm; when given it must
    agree with the binning, so an annotation can never carry an inconsistent
    (width, grade) pair.
    """

    jsw_mm: float
    pixel_spacing_mm: float = DEFAULT_PIXEL_SPACING_MM
    axis: tuple[float, float] = DEFAULT_JOINT_AXIS
    svdh_like: int | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.jsw_mm) or self.jsw_mm < 0:
            raise ValueError("JswAnnotation: jsw_mm must be finite and >= 0")
        if not math.isfinite(self.pixel_spacing_mm) or self.pixel_spacing_mm <= 0:
            raise ValueError("JswAnnotation: pixel_spacing_mm must be positive")
        object.__setattr__(self, "axis", _validate_axis(self.axis))
        expected = svdh_like_score(self.jsw_mm)
        if self.svdh_like is None:
            object.__setattr__(self, "svdh_like", expected)
        elif int(self.svdh_like) != expected:
            raise ValueError(
                f"JswAnnotation: svdh_like {self.svdh_like} inconsistent with "
                f"jsw_mm {self.jsw_mm} (expected {expected})"
            )

    @property
    def jsw_px(self) -> float:
        return self.jsw_mm / self.pixel_spacing_mm

    def to_record(self) -> dict:
        return {
            "jsw_mm": self.jsw_mm,
            "pixel_spacing_mm": self.pixel_spacing_mm,
            "axis": list(self.axis),
            "svdh_like": self.svdh_like,
        }

    @staticmethod
    def from_record(record: Mapping) -> "JswAnnotation":
        return JswAnnotation(
            jsw_mm=float(record["jsw_mm"]),
            pixel_spacing_mm=float(
                record.get("pixel_spacing_mm", DEFAULT_PIXEL_SPACING_MM)
            ),
            axis=tuple(record.get("axis", DEFAULT_JOINT_AXIS)),
            svdh_like=(
                int(record["svdh_like"]) if record.get("svdh_like") is not None else None
            ),
        )


def jsw_to_shift(
    current_jsw_mm: float,
    target_jsw_mm: float,
    pixel_spacing_mm: float = DEFAULT_PIXEL_SPACING_MM,
    axis: Sequence[float] = DEFAULT_JOINT_AXIS,
    *,
    upper_layer: int = UPPER_LAYER,
    lower_layer: int = LOWER_LAYER,
) -> ShiftParams:
    """Layer shifts that change the joint space from current to target width.

    The required displacement (target - current) / spacing pixels is split
    symmetrically: the upper bone moves +axis * D/2, the lower -axis * D/2,
    with zero rotation.  target == current yields the identity.
    """
    if not math.isfinite(current_jsw_mm) or current_jsw_mm < 0:
        raise ValueError("jsw_to_shift: current_jsw_mm must be finite and >= 0")
    if not math.isfinite(target_jsw_mm) or target_jsw_mm < 0:
        raise ValueError("jsw_to_shift: target_jsw_mm must be finite and >= 0")
    if not math.isfinite(pixel_spacing_mm) or pixel_spacing_mm <= 0:
        raise ValueError("jsw_to_shift: pixel_spacing_mm must be positive")
    ax, ay = _validate_axis(axis)
    d_px = (target_jsw_mm - current_jsw_mm) / pixel_spacing_mm
    half = d_px / 2.0
    return ShiftParams(
        {
            upper_layer: LayerShift(theta=0.0, x=ax * half, y=ay * half),
            lower_layer: LayerShift(theta=0.0, x=-ax * half, y=-ay * half),
        }
    )


def jsw_from_shift(
    source_jsw_mm: float,
    shift: ShiftParams,
    pixel_spacing_mm: float = DEFAULT_PIXEL_SPACING_MM,
    axis: Sequence[float] = DEFAULT_JOINT_AXIS,
    *,
    upper_layer: int = UPPER_LAYER,
    lower_layer: int = LOWER_LAYER,
) -> float:
    """JSW implied by a shift: the displacement-difference rule.

    The width changes by the relative displacement of the two bones
    projected on the joint axis; rotations about the image centre do not
    enter the first-order width change and are ignored.
    """
    ax, ay = _validate_axis(axis)
    up = shift.for_layer(upper_layer)
    lo = shift.for_layer(lower_layer)
    d_px = (up.x - lo.x) * ax + (up.y - lo.y) * ay
    return source_jsw_mm + d_px * pixel_spacing_mm


def synthesize(stack: LayerStack, shift: ShiftParams) -> Image:
    """Render the image obtained by shifting bone layers, then recomposing."""
    return np.clip(reconstruct(shift_stack(stack, shift)), 0.0, 1.0)


@dataclass(frozen=True)
class SynthesisPlan:
    """Recipe for one synthetic image: which stack, moved how, yielding what."""

    source_id: str
    shift: ShiftParams
    source_jsw_mm: float
    target_jsw_mm: float
    annotation: JswAnnotation

    def __post_init__(self) -> None:
        if not math.isfinite(self.target_jsw_mm) or self.target_jsw_mm < 0:
            raise ValueError("SynthesisPlan: target_jsw_mm must be finite and >= 0")
        if not math.isfinite(self.source_jsw_mm) or self.source_jsw_mm < 0:
            raise ValueError("SynthesisPlan: source_jsw_mm must be finite and >= 0")

    @property
    def delta_mm(self) -> float:
        return self.target_jsw_mm - self.source_jsw_mm

    def to_record(self) -> dict:
        return {
            "source_id": self.source_id,
            "source_jsw_mm": self.source_jsw_mm,
            "target_jsw_mm": self.target_jsw_mm,
            "shift": self.shift.to_records(),
            "annotation": self.annotation.to_record(),
        }

    @staticmethod
    def from_record(record: Mapping) -> "SynthesisPlan":
        return SynthesisPlan(
            source_id=str(record["source_id"]),
            shift=ShiftParams.from_records(record["shift"]),
            source_jsw_mm=float(record["source_jsw_mm"]),
            target_jsw_mm=float(record["target_jsw_mm"]),
            annotation=JswAnnotation.from_record(record["annotation"]),
        )


def make_plan(
    source_id: str,
    source_jsw_mm: float,
    target_jsw_mm: float,
    pixel_spacing_mm: float = DEFAULT_PIXEL_SPACING_MM,
    axis: Sequence[float] = DEFAULT_JOINT_AXIS,
    shift_range: ShiftRange | None = None,
) -> SynthesisPlan:
    """Build a plan for one target width, optionally checked against a range."""
    shift = jsw_to_shift(source_jsw_mm, target_jsw_mm, pixel_spacing_mm, axis)
    if shift_range is not None:
        _check_shift_in_range(shift, shift_range)
    annotation = JswAnnotation(
        jsw_mm=target_jsw_mm,
        pixel_spacing_mm=pixel_spacing_mm,
        axis=tuple(axis),
    )
    return SynthesisPlan(
        source_id=source_id,
        shift=shift,
        source_jsw_mm=source_jsw_mm,
        target_jsw_mm=target_jsw_mm,
        annotation=annotation,
    )


def _check_shift_in_range(shift: ShiftParams, shift_range: ShiftRange) -> None:
    xlo, xhi = shift_range.x_range
    ylo, yhi = shift_range.y_range
    for i, s in shift.entries.items():
        if abs(s.theta) > shift_range.theta_max + 1e-12:
            raise ValueError(f"layer {i} rotation {s.theta} exceeds the shift range")
        if not (xlo - 1e-9 <= s.x <= xhi + 1e-9) or not (ylo - 1e-9 <= s.y <= yhi + 1e-9):
            raise ValueError(
                f"layer {i} translation ({s.x}, {s.y}) exceeds the shift range"
            )


@dataclass
class SynthesisSource:
    """A separated stack plus the JSW annotation of its source image."""

    case_id: str
    stack: LayerStack
    annotation: JswAnnotation


@dataclass
class SynthesisSample:
    """One synthetic image with its annotation and the plan that produced it."""

    sample_id: str
    image: Image
    annotation: JswAnnotation
    plan: SynthesisPlan


def _normalize_distribution(
    jsw_distribution: Mapping[int, float] | Sequence[float] | None,
) -> np.ndarray:
    if jsw_distribution is None:
        weights = np.ones(5, dtype=np.float64)
    elif isinstance(jsw_distribution, Mapping):
        weights = np.zeros(5, dtype=np.float64)
        for score, w in jsw_distribution.items():
            if int(score) not in SCORE_SAMPLING_RANGES:
                raise ValueError(f"unknown severity bin {score}")
            weights[int(score)] = float(w)
    else:
        weights = np.asarray(jsw_distribution, dtype=np.float64)
        if weights.shape != (5,):
            raise ValueError("jsw_distribution must give one weight per bin 0..4")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("jsw_distribution weights must be finite and >= 0")
    total = float(weights.sum())
    if total <= 0:
        raise ValueError("jsw_distribution must have positive total weight")
    return weights / total


def _bin_quotas(weights: np.ndarray, total: int) -> list[int]:
    # Largest-remainder apportionment; ties favour the less severe bin.
    ideal = weights * total
    base = np.floor(ideal).astype(int)
    leftover = total - int(base.sum())
    order = sorted(range(5), key=lambda i: (-(ideal[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return base.tolist()


def generate_balanced_dataset(
    sources: Sequence[SynthesisSource],
    per_source: int,
    jsw_distribution: Mapping[int, float] | Sequence[float] | None = None,
    seed: int = 0,
    *,
    shift_range: ShiftRange | None = None,
    normal_jsw_mm: float = NORMAL_JSW_MM,
) -> list[SynthesisSample]:
    """Synthesize per_source images per stack with a chosen severity mix.

    Severity bins are filled by largest-remainder apportionment of
    per_source * len(sources) samples, shuffled once so every source spans
    the bins, and each sample's target width is drawn uniformly from its
    bin's ratio range.  The same seed reproduces the dataset exactly.
    """
    if per_source < 0:
        raise ValueError("per_source must be >= 0")
    for src in sources:
        if src.annotation is None:
            raise ValueError(f"source {src.case_id} lacks a JSW annotation")
    total = per_source * len(sources)
    if total == 0:
        return []
    weights = _normalize_distribution(jsw_distribution)
    quotas = _bin_quotas(weights, total)
    labels = np.repeat(np.arange(5), quotas)
    rng = np.random.default_rng(seed)
    rng.shuffle(labels)

    if shift_range is None:
        shift_range = ShiftRange()
    samples: list[SynthesisSample] = []
    for k, score in enumerate(labels):
        src = sources[k // per_source]
        lo, hi = SCORE_SAMPLING_RANGES[int(score)]
        target = float(rng.uniform(lo, hi)) * normal_jsw_mm
        plan = make_plan(
            source_id=src.case_id,
            source_jsw_mm=src.annotation.jsw_mm,
            target_jsw_mm=target,
            pixel_spacing_mm=src.annotation.pixel_spacing_mm,
            axis=src.annotation.axis,
            shift_range=shift_range,
        )
        image = synthesize(src.stack, plan.shift)
        samples.append(
            SynthesisSample(
                sample_id=f"{src.case_id}-syn{k:04d}",
                image=image,
                annotation=plan.annotation,
                plan=plan,
            )
        )
    return samples


def save_synthesis_dataset(out_dir: str | Path, samples: Sequence[SynthesisSample]) -> Path:
    """Write sample PNGs plus a JSONL manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for sample in samples:
            write_png(out_dir / f"{sample.sample_id}.png", sample.image)
            record = {
                "id": sample.sample_id,
                "source_id": sample.plan.source_id,
                "jsw_mm": sample.annotation.jsw_mm,
                "svdh_like": sample.annotation.svdh_like,
                "shift": sample.plan.shift.to_records(),
                "pixel_spacing_mm": sample.annotation.pixel_spacing_mm,
            }
            fh.write(json.dumps(record) + "\n")
    return manifest
