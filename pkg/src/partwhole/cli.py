"""Command-line entry point.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _set_threads(n: int | None) -> None:
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)
        try:
            from threadpoolctl import threadpool_limits
            threadpool_limits(n)
        except ImportError:
            pass


def _read_json(path, what: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read {what} {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise CliError(f"{path}: expected a JSON object")
    return data


def _load_shape(path):
    from .data import ShapeFormatError, load_shape
    try:
        return load_shape(path)
    except FileNotFoundError:
        raise CliError(f"shape file not found: {path}") from None
    except ShapeFormatError as exc:
        raise CliError(str(exc)) from None


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _round(values, ndigits: int = 8) -> list:
    return [round(float(v), ndigits) for v in np.asarray(values).reshape(-1)]


# -- gen-data ------------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    from .data import save_shape, split_dataset, write_split_index
    from .synth import SynthSpec, generate_synthetic
    raw = _read_json(args.spec, "spec file")
    ratios = raw.pop("split_ratios", (0.7, 0.1, 0.2))
    try:
        spec = SynthSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid spec: {exc}") from None
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        records = generate_synthetic(spec)
        for r in records:
            save_shape(r, out / f"{r.shape_id}.json")
        train, val, test = split_dataset(records, tuple(ratios), spec.seed)
        write_split_index(out, train, val, test)
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc.strerror}") from None
    print(f"wrote {len(records)} {spec.category} shapes to {out} (train {len(train)}, val {len(val)}, test {len(test)})")
    return EXIT_OK


# -- group -------------------------------------------------------------------------------
def cmd_group(args) -> int:
    from .data import resample_part
    from .geometry import aabb_of, pca_canonicalize
    from .hierarchy import build_super_parts, pairwise_chamfer
    record = _load_shape(args.shape)
    parts = []
    for p in record.parts:
        pts = resample_part(p.points, args.points_per_part) if len(np.unique(p.points, axis=0)) > 1 else p.points
        parts.append(pca_canonicalize(pts)[0] if len(pts) > 1 else pts - pts.mean(axis=0))
    assignment = build_super_parts(parts, args.aabb_tol, args.chamfer_tol)
    print(f"shape {record.shape_id}: {assignment.num_parts} parts, M = {assignment.num_supers} super-parts")
    for s, members in enumerate(assignment.members):
        print(f"  super {s}: parts {list(members)}")
    print("part  super  extent_x  extent_y  extent_z")
    for i, p in enumerate(parts):
        e = aabb_of(p).extents
        print(f"{i:>4}  {assignment.part_to_super[i]:>5}  {e[0]:8.4f}  {e[1]:8.4f}  {e[2]:8.4f}")
    cd = pairwise_chamfer(parts)
    print("pairwise chamfer:")
    for i in range(len(parts)):
        print("  " + " ".join(f"{v:8.4f}" for v in cd[i]))
    return EXIT_OK


# -- train ---------------------------------------------------------------------------------
def _merge_config(config_path, overrides: dict):
    """Defaults, then the config file, then command-line overrides."""
    from .model import ModelConfig
    from .training import TrainConfig
    data = _read_json(config_path, "config file") if config_path else {}
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    model_part = dict(data.pop("model", {}))
    train_part = dict(data.pop("train", {}))
    flat = dict(data)                     # flat keys are accepted too
    flat.update({k: v for k, v in overrides.items() if v is not None})
    for key, value in flat.items():
        if key in model_keys:
            model_part[key] = value
        if key in train_keys or key not in model_keys:
            train_part[key] = value
    valid = sorted(model_keys | train_keys)
    bad = sorted((set(model_part) - model_keys) | (set(train_part) - train_keys))
    if bad:
        raise CliError(f"unknown config key(s) {bad}; valid keys: {', '.join(valid)}")
    try:
        return ModelConfig(**model_part), TrainConfig(**train_part)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from None


def _load_dataset(data_dir, split, points_per_part):
    from .data import ShapeFormatError, load_directory, preprocess
    if not Path(data_dir).is_dir():
        raise CliError(f"data directory not found: {data_dir}")
    try:
        records = load_directory(data_dir, split)
    except (ShapeFormatError, KeyError, FileNotFoundError) as exc:
        raise CliError(str(exc)) from None
    if not records:
        raise CliError(f"no shapes in {data_dir}" + (f" for split {split!r}" if split else ""))
    try:
        return [preprocess(r, points_per_part) for r in records]
    except ShapeFormatError as exc:
        raise CliError(str(exc)) from None


def cmd_train(args) -> int:
    from .model import AssemblyModel
    from .training import NumericError, train
    overrides = {k: getattr(args, k) for k in ("epochs", "batch_size", "lr", "mon_samples", "seed",
                                                 "points_per_part", "checkpoint_every", "use_super_encoder")}
    model_cfg, train_cfg = _merge_config(args.config, overrides)
    shapes = _load_dataset(args.data, args.split, train_cfg.points_per_part)
    if max(s.num_parts for s in shapes) > model_cfg.max_parts:
        raise CliError(f"a shape has more than max_parts = {model_cfg.max_parts} parts")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    model = AssemblyModel(model_cfg)
    verbose = not args.quiet

    def report(row):
        if verbose:
            print(f"epoch {row['epoch']:>4}  loss {row['mean_loss']:.6f}  L_t {row['L_t']:.6f}  "
                  f"L_r {row['L_r']:.6f}  L_s {row['L_s']:.6f}", flush=True)

    try:
        result = train(model, shapes, train_cfg, log_path=log_path, checkpoint_path=out,
                       resume_from=args.resume, on_epoch=report)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if result.history:
        first, last = result.history[0]["mean_loss"], result.history[-1]["mean_loss"]
        print(f"trained {len(result.history)} epochs on {len(shapes)} shapes: loss {first:.6f} -> {last:.6f}; "
              f"checkpoint {out}, log {log_path}")
    return EXIT_OK


# -- assemble -------------------------------------------------------------------------------
def prediction_dict(shape_id: str, variant: int, seed: int, pred) -> dict:
    return {
        "shape_id": shape_id,
        "variant": variant,
        "seed": seed,
        "parts": [{"part_index": i, "super_index": int(pred.assignment.part_to_super[i]),
                   "translation": _round(p.translation), "quaternion": _round(p.quaternion)}
                  for i, p in enumerate(pred.part_poses)],
        "super_parts": [{"super_index": s, "members": [int(m) for m in pred.assignment.members[s]],
                         "translation": _round(p.translation), "quaternion": _round(p.quaternion)}
                        for s, p in enumerate(pred.super_poses)],
    }


def cmd_assemble(args) -> int:
    from .autograd import CheckpointError
    from .data import ShapeFormatError, export_obj, export_ply, preprocess
    from .metrics import place_parts
    from .training import load_model
    try:
        model = load_model(args.checkpoint)
    except (OSError, CheckpointError, KeyError) as exc:
        raise CliError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    record = _load_shape(args.shape)
    if len(record.parts) > model.config.max_parts:
        raise CliError(f"shape {record.shape_id} has {len(record.parts)} parts; "
                       f"checkpoint supports max_parts = {model.config.max_parts}")
    points_per_part = args.points_per_part
    if points_per_part is None:
        meta = json.loads(Path(str(args.checkpoint) + ".json").read_text())
        points_per_part = int(meta["train_config"]["points_per_part"])
    try:
        shape = preprocess(record, points_per_part)
    except ShapeFormatError as exc:
        raise CliError(str(exc)) from None
    rng = np.random.default_rng(args.seed)
    noise = rng.standard_normal((args.variants, model.config.noise_dim))
    preds = model.assemble(shape.points, shape.assignment, noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, pred in enumerate(preds):
        stem = f"{shape.shape_id}_v{k:02d}"
        (out / f"{stem}.json").write_text(_dump(prediction_dict(shape.shape_id, k, args.seed, pred)))
        placed = place_parts(shape.points, pred.translations(), pred.quaternions())
        if args.export in ("ply", "both"):
            export_ply(out / f"{stem}.ply", list(placed))
        if args.export in ("obj", "both"):
            export_obj(out / f"{stem}.obj", list(placed))
    print(f"wrote {len(preds)} prediction(s) for {shape.shape_id} to {out}")
    return EXIT_OK


# -- eval -----------------------------------------------------------------------------------------
def _read_predictions(pred_dir) -> dict[str, list[dict]]:
    files = sorted(Path(pred_dir).glob("*.json")) if Path(pred_dir).is_dir() else []
    if not files:
        raise CliError(f"no prediction files in {pred_dir}")
    grouped: dict[str, list[dict]] = {}
    for f in files:
        data = _read_json(f, "prediction file")
        for key in ("shape_id", "parts"):
            if key not in data:
                raise CliError(f"{f}: {key}: missing required field")
        grouped.setdefault(str(data["shape_id"]), []).append(data)
    for variants in grouped.values():
        variants.sort(key=lambda d: d.get("variant", 0))
    return grouped


def _poses(pred: dict, n: int, source: str):
    t = np.zeros((n, 3))
    q = np.zeros((n, 4))
    seen = set()
    for entry in pred["parts"]:
        i = int(entry["part_index"])
        if not 0 <= i < n or i in seen:
            raise CliError(f"{source}: invalid or repeated part_index {i}")
        seen.add(i)
        t[i] = entry["translation"]
        q[i] = entry["quaternion"]
    if len(seen) != n:
        raise CliError(f"{source}: expected {n} parts, got {len(seen)}")
    return t, q / np.linalg.norm(q, axis=1, keepdims=True)


def cmd_eval(args) -> int:
    from .data import ShapeFormatError, load_directory, preprocess
    from .metrics import aggregate_row, csv_header, evaluate_variants, write_report_csv
    predictions = _read_predictions(args.predictions)
    if not Path(args.data).is_dir():
        raise CliError(f"data directory not found: {args.data}")
    try:
        records = {r.shape_id: r for r in load_directory(args.data, args.split)}
    except (ShapeFormatError, KeyError, FileNotFoundError) as exc:
        raise CliError(str(exc)) from None
    orphans = sorted(set(predictions) - set(records))
    if orphans:
        raise CliError(f"predictions without ground truth: {', '.join(orphans)}")
    reports = []
    for shape_id in sorted(predictions):
        shape = preprocess(records[shape_id], args.points_per_part)
        variants = [_poses(p, shape.num_parts, f"{shape_id} variant {p.get('variant', 0)}")
                    for p in predictions[shape_id]]
        reports.append(evaluate_variants(shape.points, shape.gt_translations, shape.gt_quaternions,
                                         shape.contacts, variants, shape_id))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(out, reports)
    agg = dict(zip(csv_header(), aggregate_row(reports)))
    print(f"evaluated {len(reports)} shapes: SCD {agg['scd']:.6f}  PA@0.01 {agg['pa@0.01']:.2f}  "
          f"CA@0.01 {agg['ca@0.01']:.2f}  mPA {agg['mpa']:.2f}  mCA {agg['mca']:.2f}  "
          f"DS {agg['ds']:.6f}  QDS {agg['qds']:.6f}  WQDS {agg['wqds']:.6f}  -> {out}")
    return EXIT_OK


# -- export ------------------------------------------------------------------------------------------
def cmd_export(args) -> int:
    from .data import ShapeFormatError, export_obj, export_ply, preprocess
    from .metrics import place_parts
    record = _load_shape(args.shape)
    try:
        shape = preprocess(record, args.points_per_part)
    except ShapeFormatError as exc:
        raise CliError(str(exc)) from None
    if args.prediction:
        pred = _read_json(args.prediction, "prediction file")
        t, q = _poses(pred, shape.num_parts, args.prediction)
    else:
        t, q = shape.gt_translations, shape.gt_quaternions
    placed = list(place_parts(shape.points, t, q))
    fmt = args.format or Path(args.out).suffix.lstrip(".").lower()
    if fmt == "ply":
        export_ply(args.out, placed)
    elif fmt == "obj":
        export_obj(args.out, placed)
    else:
        raise CliError(f"unknown export format {fmt!r}; use ply or obj")
    print(f"wrote {len(placed)} parts to {args.out}")
    return EXIT_OK


# -- gradcheck ----------------------------------------------------------------------------------------
def cmd_gradcheck(args) -> int:
    from .autograd import corrupt_gradient
    from .gradcheck import format_report, run_suite
    names = args.only.split(",") if args.only else None
    if args.corrupt:
        with corrupt_gradient(args.corrupt):
            results = run_suite(args.seed, args.seeds, names)
    else:
        results = run_suite(args.seed, args.seeds, names)
    print(format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------------------
def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partwhole", description="Hierarchical 3D part assembly.")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="JSON generator spec")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("group", help="print the super-part clustering of one shape")
    p.add_argument("--shape", required=True)
    p.add_argument("--points-per-part", type=int, default=1000)
    p.add_argument("--aabb-tol", type=float, default=0.1)
    p.add_argument("--chamfer-tol", type=float, default=0.2)
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON config; flat keys or 'model'/'train' sections")
    p.add_argument("--data", required=True, help="directory of shape files")
    p.add_argument("--split", default=None, help="split from splits.json (default: every shape)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="loss CSV (default: checkpoint path with .csv)")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mon-samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--points-per-part", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--use-super-encoder", type=_bool)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("assemble", help="predict K assembly variants for one shape")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shape", required=True)
    p.add_argument("--variants", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points-per-part", type=int, default=None, help="default: value used in training")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--export", choices=("none", "ply", "obj", "both"), default="none")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("eval", help="score prediction files against ground truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--points-per-part", type=int, default=1000)
    p.add_argument("--out", default="metrics.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="write an assembled shape as PLY or OBJ")
    p.add_argument("--shape", required=True)
    p.add_argument("--prediction", default=None, help="prediction JSON (default: ground truth)")
    p.add_argument("--points-per-part", type=int, default=1000)
    p.add_argument("--format", choices=("ply", "obj"), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=20, help="random cases per check")
    p.add_argument("--only", default=None, help="comma-separated check names")
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    _set_threads(args.threads)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
