"""HTTP service backing the annotation UI.

Serves case images and stored layers, renders shift previews on demand,
and persists annotation records.  Case data is read-only after load;
annotation appends go through a single lock.  Previews are recomputed per
request from the stored layers, so identical shifts yield byte-identical
PNGs.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.middleware.cors import CORSMiddleware

from .geometry import LayerShift, ShiftParams
from .imaging import Image, LayerStack, Mask, encode_png_bytes, read_png
from .manifest import (
    AnnotationRecord,
    CaseRecord,
    append_annotation,
    load_annotations,
    load_manifest,
    resolve_path,
)
from .synthesis import jsw_from_shift, synthesize

SHIFT_FIELDS = ("theta_deg", "dx_px", "dy_px")


@dataclass
class LoadedCase:
    record: CaseRecord
    image: Image
    masks: list[Mask]
    layers: list[Image] | None

    @property
    def baseline_jsw_mm(self) -> float:
        return self.record.jsw_mm if self.record.jsw_mm is not None else 0.0

    def stack(self) -> LayerStack:
        if self.layers is None:
            raise HTTPException(
                status_code=400,
                detail={"field": "case", "error": "case has no stored layers"},
            )
        ones = np.ones_like(self.image)
        return LayerStack(layers=list(self.layers), masks=[ones, *self.masks])

    def summary(self, annotated: bool) -> dict:
        return {
            "id": self.record.case_id,
            "kind": self.record.kind,
            "split": self.record.split,
            "pixel_spacing_mm": self.record.pixel_spacing_mm,
            "jsw_mm": self.record.jsw_mm,
            "has_layers": self.layers is not None,
            "annotated": annotated,
        }


def load_case(record: CaseRecord, base_dir: Path) -> LoadedCase:
    image = read_png(resolve_path(base_dir, record.image_path))
    masks = [(read_png(resolve_path(base_dir, p)) > 0.5).astype(np.float64)
             for p in record.mask_paths]
    layers = None
    if record.layer_paths is not None:
        layers = [read_png(resolve_path(base_dir, p)) for p in record.layer_paths]
    return LoadedCase(record=record, image=image, masks=masks, layers=layers)


def _bad_request(field: str, error: str) -> HTTPException:
    return HTTPException(status_code=400, detail={"field": field, "error": error})


def parse_shift_records(raw: object, n_bones: int) -> ShiftParams:
    """Validate a preview/annotation shift list; 400 names the bad field."""
    if not isinstance(raw, list):
        raise _bad_request("shifts", "must be a list of per-layer shifts")
    entries: dict[int, LayerShift] = {}
    for k, item in enumerate(raw):
        where = f"shifts[{k}]"
        if not isinstance(item, dict):
            raise _bad_request(where, "must be an object")
        if "layer" not in item:
            raise _bad_request(f"{where}.layer", "missing")
        try:
            layer = int(item["layer"])
        except (TypeError, ValueError):
            raise _bad_request(f"{where}.layer", "must be an integer")
        if not (1 <= layer <= n_bones):
            raise _bad_request(f"{where}.layer", f"must be in 1..{n_bones}")
        if layer in entries:
            raise _bad_request(f"{where}.layer", f"duplicate layer {layer}")
        values = {}
        for name in SHIFT_FIELDS:
            value = item.get(name, 0.0)
            if not isinstance(value, (int, float)) or not math.isfinite(float(value)):
                raise _bad_request(f"{where}.{name}", "must be a finite number")
            values[name] = float(value)
        entries[layer] = LayerShift(
            theta=math.radians(values["theta_deg"]),
            x=values["dx_px"],
            y=values["dy_px"],
        )
    return ShiftParams(entries)


async def _json_body(request: Request) -> dict:
    try:
        body = await request.json()
    except json.JSONDecodeError:
        raise _bad_request("body", "not valid JSON")
    if not isinstance(body, dict):
        raise _bad_request("body", "must be a JSON object")
    return body


def create_app(
    manifest_path: str | Path,
    annotations_path: str | Path | None = None,
    check_files: bool = True,
) -> FastAPI:
    manifest_path = Path(manifest_path)
    records = load_manifest(manifest_path, check_files=check_files)
    base_dir = manifest_path.parent
    cases = {rec.case_id: load_case(rec, base_dir) for rec in records}
    if annotations_path is None:
        annotations_path = base_dir / "annotations.jsonl"
    annotations_path = Path(annotations_path)
    annotations = load_annotations(annotations_path)
    write_lock = threading.Lock()

    app = FastAPI(title="layersep")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
        expose_headers=["X-Jsw-Mm", "X-Baseline-Jsw-Mm"],
    )

    def get_case(case_id: str) -> LoadedCase:
        case = cases.get(case_id)
        if case is None:
            raise HTTPException(status_code=404, detail=f"unknown case {case_id}")
        return case

    @app.get("/health")
    def health():
        return "ok"

    @app.get("/cases")
    def list_cases():
        return {
            "cases": [
                case.summary(annotated=case_id in annotations)
                for case_id, case in sorted(cases.items())
            ]
        }

    @app.get("/cases/{case_id}/image")
    def case_image(case_id: str):
        case = get_case(case_id)
        return Response(content=encode_png_bytes(case.image), media_type="image/png")

    @app.get("/cases/{case_id}/layers/{index}")
    def case_layer(case_id: str, index: int):
        case = get_case(case_id)
        if case.layers is None:
            raise HTTPException(status_code=404, detail="case has no stored layers")
        if not (0 <= index < len(case.layers)):
            raise HTTPException(status_code=404, detail=f"no layer {index}")
        return Response(
            content=encode_png_bytes(case.layers[index]), media_type="image/png"
        )

    @app.post("/cases/{case_id}/preview")
    async def preview(case_id: str, request: Request):
        case = get_case(case_id)
        body = await _json_body(request)
        if "shifts" not in body:
            raise _bad_request("shifts", "missing")
        shift = parse_shift_records(body["shifts"], n_bones=len(case.masks))
        image = synthesize(case.stack(), shift)
        jsw = jsw_from_shift(
            case.baseline_jsw_mm, shift, case.record.pixel_spacing_mm
        )
        return Response(
            content=encode_png_bytes(image),
            media_type="image/png",
            headers={
                "X-Jsw-Mm": repr(jsw),
                "X-Baseline-Jsw-Mm": repr(case.baseline_jsw_mm),
            },
        )

    @app.post("/cases/{case_id}/annotation")
    async def post_annotation(case_id: str, request: Request):
        case = get_case(case_id)
        body = await _json_body(request)
        if "shifts" not in body:
            raise _bad_request("shifts", "missing")
        shift = parse_shift_records(body["shifts"], n_bones=len(case.masks))
        annotator = body.get("annotator_id", "anonymous")
        if not isinstance(annotator, str) or not annotator:
            raise _bad_request("annotator_id", "must be a non-empty string")
        supplied_jsw = body.get("jsw_mm")
        if supplied_jsw is not None and not isinstance(supplied_jsw, (int, float)):
            raise _bad_request("jsw_mm", "must be a number")
        try:
            record = AnnotationRecord(
                case_id=case_id,
                shift=shift,
                pixel_spacing_mm=case.record.pixel_spacing_mm,
                baseline_jsw_mm=case.baseline_jsw_mm,
                jsw_mm=supplied_jsw,
                annotator_id=annotator,
            )
        except ValueError as err:
            raise _bad_request("jsw_mm", str(err))
        with write_lock:
            append_annotation(annotations_path, record)
            annotations[case_id] = record
        return record.to_record()

    @app.get("/cases/{case_id}/annotation")
    def get_annotation(case_id: str):
        get_case(case_id)
        record = annotations.get(case_id)
        if record is None:
            raise HTTPException(status_code=404, detail=f"no annotation for {case_id}")
        return record.to_record()

    return app
