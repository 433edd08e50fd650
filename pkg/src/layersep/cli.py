"""Command-line surface: dataset generation, separation, training,
synthesis, evaluation, and the serve mode.

Exit codes: 0 success, 1 validation error (bad arguments, bad inputs),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import load_config
from .engine import (
    CriticSet,
    LayerModel,
    SeparationCase,
    emit_layers,
    optimize_case,
    save_separation,
    save_training_log,
    train_two_stage,
)
from .imaging import LayerStack, read_png, reconstruct, write_png
from .manifest import CaseRecord, load_manifest, resolve_path, save_manifest
from .metrics import MetricReport, evaluate_separation
from .phantom import Phantom, PhantomConfig, make_phantom
from .pseudo import SourceCase, build_pseudo_dataset
from .synthesis import (
    JswAnnotation,
    SynthesisSource,
    generate_balanced_dataset,
    save_synthesis_dataset,
)


def _write_case_files(
    out_dir: Path,
    case_id: str,
    image,
    masks,
    layers=None,
) -> dict:
    """Write one case's PNGs; returns the manifest path fields (relative)."""
    write_png(out_dir / f"{case_id}.png", image)
    mask_paths = []
    for i, mask in enumerate(masks, start=1):
        name = f"{case_id}_mask{i}.png"
        write_png(out_dir / name, mask)
        mask_paths.append(name)
    layer_paths = None
    if layers is not None:
        layer_paths = []
        for i, layer in enumerate(layers):
            name = f"{case_id}_layer{i}.png"
            write_png(out_dir / name, layer)
            layer_paths.append(name)
    return {
        "image_path": f"{case_id}.png",
        "mask_paths": mask_paths,
        "layer_paths": layer_paths,
    }


def cmd_phantom(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_kwargs = {"size": args.size, "overlap_px": args.overlap_px}
    if args.bone_radius_frac is not None:
        cfg_kwargs["bone_radius_frac"] = args.bone_radius_frac
    cfg = PhantomConfig(**cfg_kwargs)
    records = []
    for k in range(args.count):
        case_id = f"phantom{k:03d}"
        phantom = make_phantom(cfg, seed=args.seed + k)
        paths = _write_case_files(
            out_dir,
            case_id,
            phantom.composed,
            phantom.masks[1:],
            layers=phantom.gt_stack.layers,
        )
        records.append(
            CaseRecord(
                case_id=case_id,
                pixel_spacing_mm=phantom.pixel_spacing_mm,
                jsw_mm=phantom.true_jsw_mm,
                split=args.split,
                kind="phantom",
                **paths,
            )
        )
    save_manifest(out_dir / "manifest.jsonl", records)
    print(f"wrote {len(records)} phantoms to {out_dir}")
    return 0


def _phantom_sources(count: int, size: int, seed: int) -> list[SourceCase]:
    # Pseudo construction needs non-overlapping donors.
    cfg = PhantomConfig(size=size, overlap_px=0.0)
    sources = []
    for k in range(count):
        phantom = make_phantom(cfg, seed=seed + 1000 + k)
        sources.append(
            SourceCase(
                case_id=f"src{k:03d}",
                image=phantom.composed,
                masks=[m.copy() for m in phantom.masks[1:]],
            )
        )
    return sources


def cmd_pseudo(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    sources = _phantom_sources(args.sources, args.size, args.seed)
    cases = build_pseudo_dataset(sources, args.count, seed=args.seed)
    records = []
    for k, case in enumerate(cases):
        case_id = f"pseudo{k:03d}"
        paths = _write_case_files(out_dir, case_id, case.image, case.masks)
        records.append(
            CaseRecord(
                case_id=case_id,
                pixel_spacing_mm=0.175,
                jsw_mm=None,
                split=args.split,
                kind="pseudo",
                **paths,
            )
        )
    save_manifest(out_dir / "manifest.jsonl", records)
    print(f"wrote {len(records)} pseudo cases to {out_dir}")
    return 0


def _separate_worker(payload: dict) -> dict:
    record = CaseRecord.from_record(payload["record"])
    base_dir = Path(payload["base_dir"])
    image = read_png(resolve_path(base_dir, record.image_path))
    masks = [
        (read_png(resolve_path(base_dir, p)) > 0.5).astype(np.float64)
        for p in record.mask_paths
    ]
    case = SeparationCase(
        case_id=record.case_id, image=image, bone_masks=masks, kind=record.kind
    )
    model = LayerModel.default_init(case)
    stack, history = optimize_case(
        model,
        critics=CriticSet.reference(),
        steps=payload["steps"],
        lr=payload["lr"],
        rng=np.random.default_rng(payload["case_seed"]),
    )
    final = history[-1].to_record() if history else {}
    save_separation(
        Path(payload["out_dir"]),
        record.case_id,
        stack,
        meta={
            "case_id": record.case_id,
            "steps": payload["steps"],
            "lr": payload["lr"],
            "seed": payload["case_seed"],
            "final_losses": final,
        },
    )
    return {"case_id": record.case_id, "final_losses": final}


def cmd_separate(args) -> int:
    manifest_path = Path(args.manifest)
    records = load_manifest(manifest_path)
    if not records:
        raise ValueError(f"{manifest_path}: manifest has no cases")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    # resolve so the rewritten image/mask paths stay valid from anywhere
    base_dir = manifest_path.resolve().parent
    payloads = [
        {
            "record": record.to_record(),
            "base_dir": str(base_dir),
            "out_dir": str(out_dir),
            "steps": args.steps,
            "lr": args.lr,
            "case_seed": args.seed + k,
        }
        for k, record in enumerate(records)
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_separate_worker, payloads))
    else:
        results = [_separate_worker(p) for p in payloads]
    out_records = []
    for record, result in zip(records, results):
        total = result["final_losses"].get("total")
        print(f"{record.case_id}: final loss {total}")
        out_records.append(
            dataclasses.replace(
                record,
                image_path=str(resolve_path(base_dir, record.image_path)),
                mask_paths=[str(resolve_path(base_dir, p)) for p in record.mask_paths],
                layer_paths=[f"{record.case_id}/layer{i}.png" for i in range(3)],
            )
        )
    save_manifest(out_dir / "manifest.jsonl", out_records)
    print(f"separated {len(out_records)} cases into {out_dir}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    train_cfg = config.train
    if args.seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    sources = _phantom_sources(args.sources, args.size, train_cfg.seed)
    by_id = {src.case_id: src for src in sources}
    pseudo_cases = build_pseudo_dataset(sources, args.d1_count, seed=train_cfg.seed)
    d1 = []
    for k, pseudo in enumerate(pseudo_cases):
        source = by_id.get(pseudo.provenance.get("source_id", ""))
        aux = (source.image, source.masks) if source is not None else None
        d1.append(SeparationCase.from_pseudo(pseudo, f"pseudo{k:03d}", source=aux))
    overlap_cfg = PhantomConfig(size=args.size, overlap_px=5.0)
    d2 = list(d1)
    for k in range(args.d2_extra):
        phantom = make_phantom(overlap_cfg, seed=train_cfg.seed + 2000 + k)
        d2.append(SeparationCase.from_phantom(phantom, f"joint{k:03d}"))

    result = train_two_stage(d1, d2, train_cfg, shift_range=config.shift_range)

    save_training_log(out_dir / "training_log.jsonl", result.log)
    records = []
    for case in d2:
        model = result.models[case.case_id]
        stack = emit_layers(model)
        save_separation(out_dir, case.case_id, stack, meta={"case_id": case.case_id})
        paths = _write_case_files(out_dir, case.case_id, case.image, case.bone_masks)
        paths["layer_paths"] = [f"{case.case_id}/layer{i}.png" for i in range(3)]
        records.append(
            CaseRecord(
                case_id=case.case_id,
                pixel_spacing_mm=0.175,
                jsw_mm=None,
                split="train",
                kind="pseudo" if case.kind == "pseudo" else "phantom",
                **paths,
            )
        )
    save_manifest(out_dir / "manifest.jsonl", records)
    (out_dir / "config.json").write_text(
        json.dumps(
            {"config": config.to_record(), "train_hash": train_cfg.config_hash()},
            indent=2,
            sort_keys=True,
        )
    )
    print(f"trained {len(d2)} cases over {len(result.log)} epochs into {out_dir}")
    return 0


def _stack_from_record(record: CaseRecord, base_dir: Path) -> LayerStack:
    if record.layer_paths is None:
        raise ValueError(f"case {record.case_id}: no layer paths in manifest")
    layers = [read_png(resolve_path(base_dir, p)) for p in record.layer_paths]
    masks = [
        (read_png(resolve_path(base_dir, p)) > 0.5).astype(np.float64)
        for p in record.mask_paths
    ]
    ones = np.ones_like(layers[0])
    return LayerStack(layers=layers, masks=[ones, *masks])


def cmd_synthesize(args) -> int:
    config = load_config(args.config)
    settings = config.synthesis
    per_source = args.per_source if args.per_source is not None else settings.per_source
    manifest_path = Path(args.manifest)
    records = load_manifest(manifest_path)
    base_dir = manifest_path.parent
    sources = []
    for record in records:
        if record.layer_paths is None or record.jsw_mm is None:
            continue
        sources.append(
            SynthesisSource(
                case_id=record.case_id,
                stack=_stack_from_record(record, base_dir),
                annotation=JswAnnotation(
                    jsw_mm=record.jsw_mm, pixel_spacing_mm=record.pixel_spacing_mm
                ),
            )
        )
    if not sources:
        raise ValueError(
            f"{manifest_path}: no cases with both stored layers and known jsw_mm"
        )
    samples = generate_balanced_dataset(
        sources,
        per_source,
        jsw_distribution=settings.jsw_distribution,
        seed=args.seed,
        normal_jsw_mm=settings.normal_jsw_mm,
    )
    manifest = save_synthesis_dataset(args.out, samples)
    print(f"wrote {len(samples)} synthesized images, manifest {manifest}")
    return 0


def cmd_evaluate(args) -> int:
    manifest_path = Path(args.manifest)
    records = load_manifest(manifest_path)
    base_dir = manifest_path.parent
    pred_dir = Path(args.pred)
    report = MetricReport()
    n_scored = 0
    for record in records:
        if record.layer_paths is None:
            continue
        gt_stack = _stack_from_record(record, base_dir)
        pred_paths = [pred_dir / record.case_id / f"layer{i}.png" for i in range(3)]
        for path in pred_paths:
            if not path.is_file():
                raise ValueError(f"missing prediction {path}")
        predicted = LayerStack(
            layers=[read_png(p) for p in pred_paths], masks=list(gt_stack.masks)
        )
        phantom = Phantom(
            gt_stack=gt_stack,
            composed=reconstruct(gt_stack),
            masks=list(gt_stack.masks),
            pixel_spacing_mm=record.pixel_spacing_mm,
            true_jsw_mm=record.jsw_mm or 0.0,
        )
        result = evaluate_separation(predicted, phantom, case_id=record.case_id)
        report.add(result.to_row(group=record.kind))
        n_scored += 1
    if n_scored == 0:
        raise ValueError(f"{manifest_path}: no cases with stored ground-truth layers")
    out_path = Path(args.report_out) if args.report_out else pred_dir / "report.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(report.to_json())
    print(report.to_table())
    print(f"report written to {out_path}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app

    config = load_config(args.config)
    serve = config.serve
    host = args.host or serve.host
    port = args.port or serve.port
    annotations = args.annotations or serve.annotations_path
    app = create_app(args.manifest, annotations_path=annotations)
    uvicorn.run(app, host=host, port=port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--seed", type=int, default=None, help="base RNG seed")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers")

    parser = argparse.ArgumentParser(
        prog="layersep",
        description="Radiograph layer separation and joint-space synthesis",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="generate a phantom suite")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--overlap-px", type=float, default=5.0)
    p.add_argument("--bone-radius-frac", type=float, default=None)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.set_defaults(func=cmd_phantom, need_out=True, default_seed=0)

    p = sub.add_parser("pseudo", parents=[common], help="build pseudo-overlap cases")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--sources", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.set_defaults(func=cmd_pseudo, need_out=True, default_seed=0)

    p = sub.add_parser("separate", parents=[common], help="optimize cases from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=30.0)
    p.set_defaults(func=cmd_separate, need_out=True, default_seed=0)

    p = sub.add_parser("train", parents=[common], help="run the two-stage schedule")
    p.add_argument("--sources", type=int, default=3)
    p.add_argument("--d1-count", type=int, default=4)
    p.add_argument("--d2-extra", type=int, default=2)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(func=cmd_train, need_out=True)

    p = sub.add_parser("synthesize", parents=[common], help="build a balanced dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--per-source", type=int, default=None)
    p.set_defaults(func=cmd_synthesize, need_out=True, default_seed=0)

    p = sub.add_parser("evaluate", parents=[common], help="score separations against GT")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred", required=True, help="directory of separation outputs")
    p.add_argument("--report-out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", parents=[common], help="run the annotation HTTP service")
    p.add_argument("--manifest", required=True)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--annotations", default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if getattr(args, "need_out", False) and args.out is None:
        print("error: --out is required for this command", file=sys.stderr)
        return 1
    if args.seed is None:
        args.seed = getattr(args, "default_seed", None)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, NotADirectoryError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failure, distinct from bad input
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
