"""Command-line entry point: ``xmamba <subcommand>``.

Exit codes: 0 success, 1 a check or validation failed, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, SyntheticDatasetSpec, generate_synthetic, train_val_split
from .encoders import ModelConfig, preset
from .errors import XMambaError
from .fusion import build_model
from .report import build_comparison_table, format_table_tsv, read_results_csv
from .training import TrainConfig, evaluate, train

EXIT_OK, EXIT_FAIL, EXIT_BAD_INPUT = 0, 1, 2
CONFIG_FILE = "config.json"
HISTORY_FILE = "history.csv"


class BadInput(Exception):
    pass


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise BadInput(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise BadInput(f"{path}: top level must be an object")
    return cfg


def resolve_run_config(raw: dict) -> dict:
    """Normalise a run config into plain dicts for model, train and data.

    ``model`` may name a preset via ``{"preset": "toy", ...overrides}``.
    """
    unknown = set(raw) - {"model", "train", "data", "kind", "strategy"}
    if unknown:
        raise BadInput(f"unknown config keys {sorted(unknown)}")
    model = dict(raw.get("model", {"preset": "toy"}))
    try:
        name = model.pop("preset", None)
        model_cfg = preset(name, **model) if name else ModelConfig(**model)
        train_cfg = TrainConfig(**raw.get("train", {}))
        data_spec = SyntheticDatasetSpec(**raw.get("data", {}))
    except (TypeError, ValueError) as exc:
        raise BadInput(str(exc)) from exc
    kind = raw.get("kind", "fused")
    if kind not in ("fused", "video", "skeleton"):
        raise BadInput(f"kind must be fused, video or skeleton, got {kind!r}")
    return {
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "data": data_spec.to_dict(),
        "kind": kind,
        "strategy": raw.get("strategy", "average"),
    }


def _objects(resolved: dict):
    model_cfg = ModelConfig(**resolved["model"])
    train_cfg = TrainConfig(**resolved["train"])
    data_spec = SyntheticDatasetSpec(**resolved["data"])
    if (data_spec.frames, data_spec.height, data_spec.width) != (model_cfg.frames, model_cfg.height, model_cfg.width):
        raise BadInput("data frames/height/width must match the model config")
    if data_spec.num_classes != model_cfg.num_classes:
        raise BadInput("data num_classes must match the model config")
    try:
        model = build_model(model_cfg, resolved["kind"], resolved["strategy"], train_cfg.seed)
    except ValueError as exc:
        raise BadInput(str(exc)) from exc
    return model, train_cfg, data_spec


# ---------------------------------------------------------------------------
# subcommands


def cmd_gradcheck(args) -> int:
    from .gradcheck import SUITES, run_suite

    names = args.suite or list(SUITES)
    bad = [n for n in names if n not in SUITES]
    if bad:
        raise BadInput(f"unknown suites {bad}; choose from {sorted(SUITES)}")
    ok = True
    for name in names:
        r = run_suite(name, args.seeds)
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'}\t{name}\t{r.max_error:.3e}\t{r.seconds:.1f}s", flush=True)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_scan_bench(args) -> int:
    from .ssm import bench_scan

    if any(n < 1 for n in args.lengths) or args.trials < 1:
        raise BadInput("lengths and trials must be positive")
    timings = bench_scan(args.lengths, args.d_model, args.d_state, args.trials, args.seed, args.kernel)
    print("length,mean_ns,stddev_ns")
    for length, ns in timings.items():
        sd = statistics.stdev(ns) if len(ns) > 1 else 0.0
        print(f"{length},{statistics.fmean(ns):.0f},{sd:.0f}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    raw = dict(_load_json(args.config).get("data", {})) if args.config else {}
    for key in ("seed", "samples_per_class", "occlusion_prob", "keypoint_noise"):
        value = getattr(args, key)
        if value is not None:
            raw[key] = value
    try:
        spec = SyntheticDatasetSpec(**raw)
    except (TypeError, ValueError) as exc:
        raise BadInput(str(exc)) from exc
    data = generate_synthetic(spec)
    data.save(args.out)
    print(f"wrote {len(data)} clips to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    resolved = resolve_run_config(_load_json(args.config))
    model, train_cfg, data_spec = _objects(resolved)
    dataset = Dataset.load(args.data) if args.data else generate_synthetic(data_spec)
    result = train(model, dataset, train_cfg)
    out = Path(args.out)
    save_checkpoint(out, result.best_state)
    (out / HISTORY_FILE).write_text(result.history_csv())
    (out / CONFIG_FILE).write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    last = result.history[-1]
    print(f"stopped at epoch {result.stopped_epoch}; best epoch {result.best_epoch}; last val top-1 {last.val_top1:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not (ckpt / CONFIG_FILE).exists():
        raise BadInput(f"{ckpt} has no {CONFIG_FILE}")
    resolved = resolve_run_config(_load_json(ckpt / CONFIG_FILE))
    model, train_cfg, data_spec = _objects(resolved)
    try:
        model.load_state_dict(load_checkpoint(ckpt))
    except (KeyError, ValueError, OSError) as exc:
        raise BadInput(f"cannot load checkpoint: {exc}") from exc
    dataset = Dataset.load(args.data) if args.data else generate_synthetic(data_spec)
    if args.split != "all":
        train_idx, val_idx = train_val_split(len(dataset), train_cfg.seed, train_cfg.val_fraction)
        dataset = dataset.subset(train_idx if args.split == "train" else val_idx)
    print(f"{args.split}\t{len(dataset)}\t{evaluate(model, dataset):.2f}")
    return EXIT_OK


def cmd_table(args) -> int:
    try:
        results = read_results_csv(args.results)
    except (OSError, ValueError) as exc:
        raise BadInput(str(exc)) from exc
    try:
        rows = build_comparison_table(results, args.video_baseline, args.skeleton_baseline, args.eval_size)
    except ValueError as exc:
        raise BadInput(str(exc)) from exc
    sys.stdout.write(format_table_tsv(rows))
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xmamba", description="Cross-modal selective-SSM toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="run the finite-difference suites")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("scan-bench", help="time one forward selective scan per length")
    p.add_argument("--lengths", type=_int_list, default=[512, 1024, 2048, 4096], help="comma-separated, e.g. 512,4096")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-state", type=int, default=16)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kernel", choices=("fused", "generic"), default="fused", help="generic reads pre-discretised [L, C, N] operands")
    p.set_defaults(func=cmd_scan_bench)

    p = sub.add_parser("gen-data", help="write a synthetic dataset to an .npz file")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="run config JSON; its 'data' section is used")
    p.add_argument("--seed", type=int)
    p.add_argument("--samples-per-class", dest="samples_per_class", type=int)
    p.add_argument("--occlusion-prob", dest="occlusion_prob", type=float)
    p.add_argument("--keypoint-noise", dest="keypoint_noise", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint directory")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset .npz (default: generate from the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 of a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.add_argument("--data")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("table", help="delta table from a method,top1 CSV")
    p.add_argument("--results", required=True)
    p.add_argument("--video-baseline", default="Video")
    p.add_argument("--skeleton-baseline", default="Skeleton")
    p.add_argument("--eval-size", type=int, help="snap inputs to multiples of 100/N before differencing")
    p.set_defaults(func=cmd_table)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_BAD_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (BadInput, XMambaError, FileNotFoundError) as exc:
        print(f"xmamba: error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
