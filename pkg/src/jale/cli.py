"""Command-line pipeline: analyze, dataset, train, plan, encode, evaluate.

Each command writes its output document plus ``<out>.manifest.json`` recording
inputs, config hash, seed and output digests. Exit status: 0 ok, 1 error,
3 finished with infeasible plan entries.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from collections import defaultdict
from pathlib import Path
from typing import Sequence

from .complexity import DEFAULT_BLOCK_SIZE, analyze_file
from .core import (
    JaleConfig,
    JaleError,
    LadderPlan,
    SegmentFeatures,
    ThreadPresetPair,
    config_from_dict,
    default_hls_ladder,
    dump_config,
    read_config,
)
from .elimination import eliminate
from .forest import ForestParams
from .harness import (
    EncodeFailure,
    ExternalBackend,
    Segment,
    SimulatorBackend,
    SimulatorParams,
    generate_dataset,
    read_dataset,
    run_plan,
    segment_from_file,
    synthetic_segment,
)
from .metrics import BdReport, MetricError, RdCurve, bd_quality, bd_rate, delta_energy, delta_storage, delta_threads, mean_report
from .selection import fixed_plan, load_model_dir, plan_ladder, save_model_dir, split_models, train_ladder_models

log = logging.getLogger("jale")

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 3
FEATURES_VERSION = "jale-features/1"
PLAN_VERSION = "jale-plan/1"
RECORDS_VERSION = "jale-records/1"
REPORT_VERSION = "jale-report/1"
MANIFEST_VERSION = "jale-manifest/1"
REFERENCE_PAIR = ThreadPresetPair(8, 0)  # ultrafast, eight threads


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def _read_json(path: Path, version: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise JaleError(f"cannot read {path}: {exc}") from None
    if doc.get("format") != version:
        raise JaleError(f"{path}: expected format {version!r}, got {doc.get('format')!r}")
    return doc


def _clean(v):
    return None if v is None or v != v else v  # NaN -> null


def write_manifest(out: Path, command: str, args: argparse.Namespace, cfg: JaleConfig | None,
                   inputs: Sequence[Path], outputs: Sequence[Path]) -> Path:
    manifest = {
        "format": MANIFEST_VERSION,
        "command": command,
        "config_hash": cfg.digest() if cfg else None,
        "seed": getattr(args, "seed", None),
        "inputs": [{"path": p.name, "sha256": _sha256(p)} for p in inputs if p.is_file()],
        "outputs": [{"path": p.name, "sha256": _sha256(p)} for p in outputs if p.is_file()],
    }
    path = out.with_name(out.name + ".manifest.json")
    _write_json(path, manifest)
    return path


def _config(args) -> JaleConfig:
    cfg = read_config(args.config) if getattr(args, "config", None) else default_hls_ladder()
    if getattr(args, "jnd", None) is not None:
        cfg = cfg.with_jnd(args.jnd)
    return cfg


def _backend(args, cfg: JaleConfig):
    if args.backend == "sim":
        return SimulatorBackend(SimulatorParams.from_mapping(cfg.simulator), seed=args.seed)
    return ExternalBackend()


# -- commands ------------------------------------------------------------------


def cmd_analyze(args) -> int:
    out = Path(args.out)
    docs = []
    for path in map(Path, args.input):
        t0 = time.perf_counter()
        f = analyze_file(path, args.block_size, args.width, args.height, args.bit_depth, args.chroma)
        # kept out of the document so outputs stay reproducible
        log.info("analyzed %s in %.3f s", path.name, time.perf_counter() - t0)
        docs.append({"segment": path.stem, "features": f.to_dict()})
    _write_json(out, {"format": FEATURES_VERSION, "segments": docs})
    write_manifest(out, "analyze", args, None, [Path(p) for p in args.input], [out])
    return EXIT_OK


def _segments(args) -> list[Segment]:
    segs: list[Segment] = []
    for path in map(Path, args.input or ()):
        if path.suffix == ".json":
            doc = _read_json(path, FEATURES_VERSION)
            segs += [Segment(d["segment"], SegmentFeatures.from_dict(d["features"])) for d in doc["segments"]]
        else:
            segs.append(segment_from_file(path, args.block_size))
    segs += [synthetic_segment(args.seed, i) for i in range(getattr(args, "synthetic", 0) or 0)]
    return segs


def cmd_dataset(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    result = generate_dataset(_backend(args, cfg), _segments(args), cfg.ladder, cfg.threads, cfg.presets)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        result.to_csv(fh)
    outputs = [out]
    if result.errors:
        err = out.with_name(out.name + ".errors.json")
        _write_json(err, {"errors": result.errors})
        outputs.append(err)
        log.warning("%d encodes failed; see %s", len(result.errors), err)
    write_manifest(out, "dataset", args, cfg, [Path(p) for p in args.input or ()], outputs)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    rows = read_dataset(args.input)
    params = ForestParams.from_mapping(cfg.forest)
    if args.n_estimators is not None:
        params = ForestParams(**(params.to_dict() | {"n_estimators": args.n_estimators}))
    threads = sorted({r["n"] for r in rows}) if args.grid == "data" else list(cfg.threads)
    presets = sorted({r["p"] for r in rows}, reverse=True) if args.grid == "data" else list(cfg.presets)
    kinds = ("speed", "quality") if args.scope == "all" else (args.scope,)
    models = train_ladder_models(rows, threads, presets, params, args.seed, kinds)
    out = Path(args.out)
    paths = save_model_dir(models, out)
    log.info("wrote %d models to %s", len(paths), out)
    write_manifest(out / "models", "train", args, cfg, [Path(args.input)], paths)
    return EXIT_OK


def cmd_plan(args) -> int:
    cfg = _config(args)
    speed, quality = split_models(load_model_dir(args.models))
    plans = []
    for seg in _segments(args):
        plan = plan_ladder(cfg, seg.features, speed, quality, seg.id)
        plans.append(eliminate(plan, cfg.jnd, cfg.vmaf_cap))
    out = Path(args.out)
    doc = {
        "format": PLAN_VERSION,
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "jnd": cfg.jnd,
        "vmaf_cap": cfg.vmaf_cap,
        "target_speed": cfg.target_speed,
        "plans": [p.to_dict() for p in plans],
    }
    _write_json(out, doc)
    write_manifest(out, "plan", args, cfg, [Path(p) for p in args.input or ()], [out])
    infeasible = sum(not e.feasible for p in plans for e in p.retained)
    over = sum(p.budget_exceeded for p in plans)
    if over:
        log.warning("%d segment plan(s) exceed the %d-thread budget", over, cfg.total_threads)
    if infeasible:
        log.warning("%d retained entries cannot reach %.1f fps", infeasible, cfg.target_speed)
        return EXIT_INFEASIBLE
    return EXIT_OK


def _encode_plans(backend, plans: Sequence[LadderPlan], total: int, all_rungs: bool, sources=None) -> tuple[list, list]:
    records, failures = [], []
    for plan in plans:
        src = (sources or {}).get(plan.segment_id)
        seg = Segment(plan.segment_id, plan.features, path=src)
        entries = plan.entries if all_rungs else plan.retained
        for entry, res in zip(entries, run_plan(backend, plan, seg, total, entries=entries)):
            if isinstance(res, EncodeFailure):
                failures.append({"segment": plan.segment_id, "index": entry.representation.index, "error": res.error})
            else:
                records.append(res.to_dict() | {"retained": entry.retained})
    return records, failures


def cmd_encode(args) -> int:
    doc = _read_json(Path(args.input), PLAN_VERSION)
    cfg = config_from_dict(doc["config"])
    plans = [LadderPlan.from_dict(p) for p in doc["plans"]]
    total = args.threads_total or cfg.total_threads
    sources = {Path(s).stem: Path(s) for s in args.source or ()}
    records, failures = _encode_plans(_backend(args, cfg), plans, total, args.all_rungs, sources)
    out = Path(args.out)
    _write_json(out, {
        "format": RECORDS_VERSION,
        "scheme": "jale",
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "features": {p.segment_id: p.features.to_dict() for p in plans},
        "records": records,
        "failures": failures,
    })
    write_manifest(out, "encode", args, cfg, [Path(args.input)], [out])
    return EXIT_ERROR if failures else EXIT_OK


def _curve(recs: Sequence[dict], key: str) -> RdCurve | None:
    pts = [(r["achieved_bitrate"], r[key]) for r in sorted(recs, key=lambda r: r["index"]) if r[key] is not None]
    try:
        return RdCurve.from_points(pts)
    except MetricError as exc:
        log.info("no %s curve: %s", key, exc)
        return None


def _bd(ref, opt, fn):
    if ref is None or opt is None:
        return None
    try:
        return fn(ref, opt)
    except MetricError:
        return None


def segment_report(opt: Sequence[dict], ref: Sequence[dict]) -> BdReport:
    """BD figures over every encoded rung; storage/thread/energy deltas over retained rungs."""
    cp, cv = _curve(opt, "psnr"), _curve(opt, "vmaf")
    rp, rv = _curve(ref, "psnr"), _curve(ref, "vmaf")
    kept = [r for r in opt if r.get("retained", True)]
    ref_kept = [r for r in ref if r.get("retained", True)]
    energy = None
    if kept and all(r["energy_joules"] is not None for r in kept + ref_kept):
        energy = delta_energy([r["energy_joules"] for r in kept], [r["energy_joules"] for r in ref_kept])
    return BdReport(
        bdr_psnr=_bd(rp, cp, bd_rate),
        bdr_vmaf=_bd(rv, cv, bd_rate),
        bd_psnr=_bd(rp, cp, bd_quality),
        bd_vmaf=_bd(rv, cv, bd_quality),
        delta_storage=delta_storage([r["achieved_bitrate"] for r in kept], [r["achieved_bitrate"] for r in ref_kept]),
        delta_threads=delta_threads([r["threads"] for r in kept], [r["threads"] for r in ref_kept]),
        delta_energy=energy,
        delta_time=delta_storage([r["wall_time"] for r in kept], [r["wall_time"] for r in ref_kept]),
    )


def cmd_evaluate(args) -> int:
    opt = _read_json(Path(args.input), RECORDS_VERSION)
    cfg = config_from_dict(opt["config"])
    inputs = [Path(args.input)]
    if args.reference:
        ref = _read_json(Path(args.reference), RECORDS_VERSION)
        inputs.append(Path(args.reference))
    else:
        plans = [fixed_plan(cfg, REFERENCE_PAIR, sid, SegmentFeatures.from_dict(f)) for sid, f in sorted(opt["features"].items())]
        recs, _ = _encode_plans(_backend(args, cfg), plans, cfg.total_threads, False)
        ref = {"records": recs}
    by_seg_opt, by_seg_ref = defaultdict(list), defaultdict(list)
    for r in opt["records"]:
        by_seg_opt[r["segment"]].append(r)
    for r in ref["records"]:
        by_seg_ref[r["segment"]].append(r)
    per_segment = {}
    for sid in sorted(by_seg_opt):
        if sid in by_seg_ref:
            per_segment[sid] = segment_report(by_seg_opt[sid], by_seg_ref[sid])
    if not per_segment:
        raise JaleError("no segment appears in both record sets")
    mean = mean_report(list(per_segment.values()))
    out = Path(args.out)
    _write_json(out, {
        "format": REPORT_VERSION,
        "config_hash": cfg.digest(),
        "mean": {k: _clean(v) for k, v in mean.to_dict().items()},
        "segments": {k: {kk: _clean(vv) for kk, vv in v.to_dict().items()} for k, v in per_segment.items()},
    })
    out.with_suffix(".txt").write_text(mean.table() + "\n", encoding="utf-8")
    print(mean.table())
    write_manifest(out, "evaluate", args, cfg, inputs, [out, out.with_suffix(".txt")])
    return EXIT_OK


def cmd_init_config(args) -> int:
    cfg = default_hls_ladder().with_jnd(args.jnd) if args.jnd is not None else default_hls_ladder()
    Path(args.out).write_text(dump_config(cfg), encoding="utf-8")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jale", description="JND-aware low-latency ladder planning")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True, seed=True, backend=False):
        if config:
            p.add_argument("--config", help="config document (YAML, version jale-config/1); default: HLS ladder")
            p.add_argument("--jnd", type=float, help="override JND in VMAF points (cap follows as 100 - jnd)")
        if seed:
            p.add_argument("--seed", type=int, default=0)
        if backend:
            p.add_argument("--backend", choices=("sim", "external"), default="sim")
        p.add_argument("--out", required=True)

    p = sub.add_parser("init-config", help="write the default config document")
    p.add_argument("--jnd", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("analyze", help="extract complexity features")
    p.add_argument("--input", nargs="+", required=True, help=".y4m files or raw planar YUV")
    p.add_argument("--block-size", type=int, default=DEFAULT_BLOCK_SIZE)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--bit-depth", type=int, choices=(8, 10), default=8)
    p.add_argument("--chroma", default="420", choices=("420", "422", "444", "400"))
    common(p, config=False, seed=False)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("dataset", help="encode every (rung, threads, preset) per segment")
    p.add_argument("--input", nargs="*", help="video files or features documents")
    p.add_argument("--synthetic", type=int, default=0, help="add N synthetic segments (simulator use)")
    p.add_argument("--block-size", type=int, default=DEFAULT_BLOCK_SIZE)
    common(p, backend=True)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train speed and quality forests from a dataset CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--scope", choices=("all", "speed", "quality"), default="all")
    p.add_argument("--grid", choices=("config", "data"), default="data",
                   help="take the (threads, preset) grid from the data or from the config")
    p.add_argument("--n-estimators", type=int)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("plan", help="select pairs per rung, then drop redundant rungs")
    p.add_argument("--input", nargs="+", required=True, help="features documents or video files")
    p.add_argument("--models", required=True)
    p.add_argument("--block-size", type=int, default=DEFAULT_BLOCK_SIZE)
    common(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("encode", help="execute a plan under the thread budget")
    p.add_argument("--input", required=True, help="plan document")
    p.add_argument("--source", nargs="*", help="segment video files (external backend)")
    p.add_argument("--threads-total", type=int)
    p.add_argument("--all-rungs", action="store_true", help="also encode eliminated rungs (for BD curves)")
    common(p, config=False, backend=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("evaluate", help="BD metrics and resource deltas against a reference")
    p.add_argument("--input", required=True, help="records of the optimized scheme")
    p.add_argument("--reference", help="reference records; default: encode (8 threads, ultrafast) on all rungs")
    common(p, config=False, backend=True)
    p.set_defaults(func=cmd_evaluate)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (JaleError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
