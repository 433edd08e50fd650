"""Dataset manifests and annotation records.

Manifests are JSON-lines files, one case per line, listing the image, its
bone masks, and bookkeeping (spacing, split, kind, optional known JSW).
Annotations are appended to a separate JSONL file: each record stores the
alignment shifts an annotator ended with and the JSW derived from them by
the displacement-difference rule.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

from .geometry import ShiftParams
from .imaging import read_png
from .synthesis import DEFAULT_JOINT_AXIS, jsw_from_shift

SPLITS = ("train", "test")
KINDS = ("real", "pseudo", "phantom", "synthetic")


def resolve_path(base_dir: str | Path, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(base_dir) / p


@dataclass
class CaseRecord:
    """One dataset case: an image, its two bone masks, and bookkeeping.

    layer_paths optionally points at per-layer images (soft tissue first,
    then lower and upper bone) from ground truth or a separation run; the
    serve mode needs them to render previews.
    """

    case_id: str
    image_path: str
    mask_paths: list[str]
    pixel_spacing_mm: float
    jsw_mm: float | None = None
    split: str = "train"
    kind: str = "real"
    layer_paths: list[str] | None = None

    def __post_init__(self) -> None:
        if not self.case_id:
            raise ValueError("CaseRecord: case_id must be non-empty")
        if len(self.mask_paths) != 2:
            raise ValueError("CaseRecord: expected two mask paths (lower, upper)")
        if not math.isfinite(self.pixel_spacing_mm) or self.pixel_spacing_mm <= 0:
            raise ValueError("CaseRecord: pixel_spacing_mm must be positive")
        if self.jsw_mm is not None and (not math.isfinite(self.jsw_mm) or self.jsw_mm < 0):
            raise ValueError("CaseRecord: jsw_mm must be finite and >= 0")
        if self.split not in SPLITS:
            raise ValueError(f"CaseRecord: split must be one of {SPLITS}")
        if self.kind not in KINDS:
            raise ValueError(f"CaseRecord: kind must be one of {KINDS}")
        if self.layer_paths is not None and len(self.layer_paths) != 3:
            raise ValueError("CaseRecord: expected three layer paths (soft, lower, upper)")

    def to_record(self) -> dict:
        record = {
            "id": self.case_id,
            "image_path": self.image_path,
            "mask_paths": list(self.mask_paths),
            "pixel_spacing_mm": self.pixel_spacing_mm,
            "jsw_mm": self.jsw_mm,
            "split": self.split,
            "kind": self.kind,
        }
        if self.layer_paths is not None:
            record["layer_paths"] = list(self.layer_paths)
        return record

    @staticmethod
    def from_record(record: Mapping) -> "CaseRecord":
        return CaseRecord(
            case_id=str(record["id"]),
            image_path=str(record["image_path"]),
            mask_paths=[str(p) for p in record["mask_paths"]],
            pixel_spacing_mm=float(record["pixel_spacing_mm"]),
            jsw_mm=(None if record.get("jsw_mm") is None else float(record["jsw_mm"])),
            split=str(record.get("split", "train")),
            kind=str(record.get("kind", "real")),
            layer_paths=(
                [str(p) for p in record["layer_paths"]]
                if record.get("layer_paths") is not None
                else None
            ),
        )

    def all_paths(self) -> list[str]:
        return [self.image_path, *self.mask_paths, *(self.layer_paths or [])]


def _check_case_files(record: CaseRecord, base_dir: Path) -> None:
    image = None
    for path in record.all_paths():
        full = resolve_path(base_dir, path)
        if not full.is_file():
            raise FileNotFoundError(f"case {record.case_id}: missing file {full}")
        decoded = read_png(full)
        if image is None:
            image = decoded
        elif decoded.shape != image.shape:
            raise ValueError(
                f"case {record.case_id}: {full} has shape {decoded.shape}, "
                f"image is {image.shape}"
            )


def load_manifest(path: str | Path, check_files: bool = True) -> list[CaseRecord]:
    """Read a JSONL manifest; errors carry the offending line and field."""
    path = Path(path)
    records: list[CaseRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                record = CaseRecord.from_record(raw)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise ValueError(f"{path}:{lineno}: bad case record: {err}") from err
            if record.case_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate case id {record.case_id}")
            seen.add(record.case_id)
            if check_files:
                _check_case_files(record, path.parent)
            records.append(record)
    return records


def save_manifest(path: str | Path, records: Sequence[CaseRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_record()) + "\n")
    return path


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class AnnotationRecord:
    """An annotator's final alignment for one case and the JSW it implies.

    jsw_mm is derived from the shifts: baseline width plus the relative
    bone displacement projected on the joint axis, scaled to mm.  Negative
    values mean the annotator moved the bones past contact (overlap).  A
    supplied jsw_mm must match the rule to 1e-9.
    """

    case_id: str
    shift: ShiftParams
    pixel_spacing_mm: float
    baseline_jsw_mm: float = 0.0
    axis: tuple[float, float] = DEFAULT_JOINT_AXIS
    jsw_mm: float | None = None
    annotator_id: str = "anonymous"
    timestamp: str = field(default_factory=_utc_now)

    def __post_init__(self) -> None:
        if not math.isfinite(self.pixel_spacing_mm) or self.pixel_spacing_mm <= 0:
            raise ValueError("AnnotationRecord: pixel_spacing_mm must be positive")
        derived = jsw_from_shift(
            self.baseline_jsw_mm, self.shift, self.pixel_spacing_mm, self.axis
        )
        if self.jsw_mm is None:
            self.jsw_mm = derived
        elif abs(self.jsw_mm - derived) > 1e-9:
            raise ValueError(
                f"AnnotationRecord: jsw_mm {self.jsw_mm} does not match the "
                f"displacement-difference rule ({derived})"
            )

    def to_record(self) -> dict:
        return {
            "case_id": self.case_id,
            "shift": self.shift.to_records(),
            "pixel_spacing_mm": self.pixel_spacing_mm,
            "baseline_jsw_mm": self.baseline_jsw_mm,
            "axis": list(self.axis),
            "jsw_mm": self.jsw_mm,
            "annotator_id": self.annotator_id,
            "timestamp": self.timestamp,
        }

    @staticmethod
    def from_record(record: Mapping) -> "AnnotationRecord":
        return AnnotationRecord(
            case_id=str(record["case_id"]),
            shift=ShiftParams.from_records(record["shift"]),
            pixel_spacing_mm=float(record["pixel_spacing_mm"]),
            baseline_jsw_mm=float(record.get("baseline_jsw_mm", 0.0)),
            axis=tuple(record.get("axis", DEFAULT_JOINT_AXIS)),
            jsw_mm=(None if record.get("jsw_mm") is None else float(record["jsw_mm"])),
            annotator_id=str(record.get("annotator_id", "anonymous")),
            timestamp=str(record.get("timestamp", "")) or _utc_now(),
        )


def append_annotation(path: str | Path, record: AnnotationRecord) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record.to_record()) + "\n")


def load_annotations(path: str | Path) -> dict[str, AnnotationRecord]:
    """Latest annotation per case; missing file means no annotations yet."""
    path = Path(path)
    latest: dict[str, AnnotationRecord] = {}
    if not path.exists():
        return latest
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = AnnotationRecord.from_record(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise ValueError(f"{path}:{lineno}: bad annotation record: {err}") from err
            latest[record.case_id] = record
    return latest
