"""Command-line surface: gen, train, sample, eval, ablate, plot.

Every failure exits nonzero with a single machine-parsable JSON line on
stderr, e.g. ``{"error": "config", "detail": "..."}``; the code identifies
the failure class (2 usage, 3 missing file, 4 bad data, 5 bad config,
6 numeric abort).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import torch

from .errors import EXIT_MISSING_FILE, EXIT_OK, EXIT_USAGE, FlowcastError, ConfigError, DataError
from .metrics import evaluate, report_summary_line, write_metric_report
from .plotting import plot_scene
from .scene import (
    DatasetMeta,
    SceneGenConfig,
    SceneRecord,
    fit_normalizer,
    generate_scene,
    read_dataset,
    read_dataset_meta,
    scene_seeds,
    write_dataset,
)
from .selection import read_predictions, write_predictions
from .trainer import (
    TrainConfig,
    TrainData,
    derived_seed,
    load_model,
    predict,
    read_train_config,
    run_ablation,
    train,
)


def _emit_error(kind: str, detail: str) -> None:
    print(json.dumps({"error": kind, "detail": detail}), file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    """argparse that reports errors as one JSON line and exits with 2."""

    def error(self, message):
        _emit_error("usage", message)
        raise SystemExit(EXIT_USAGE)


def _parse_scene_gen_config(path) -> SceneGenConfig:
    """Read generator settings from `key = value` lines (# comments allowed)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    fields = {f.name: f for f in dataclasses.fields(SceneGenConfig)}
    overrides = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in fields:
            raise ConfigError(f"{path}:{lineno}: unknown generator key {key!r}")
        try:
            if key in ("branch_probs", "speed_range"):
                overrides[key] = tuple(float(v) for v in raw.split(","))
            elif key in ("include_boundaries", "include_crosswalk"):
                overrides[key] = raw.lower() in ("true", "1", "yes")
            elif key in ("max_branch_angle_deg", "position_noise", "heading_noise",
                         "speed_drift", "future_walk", "approach_length", "lane_length", "lane_width"):
                overrides[key] = float(raw)
            else:
                overrides[key] = int(raw)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return SceneGenConfig(**overrides)


def _load_records_and_normalizer(data_path):
    records = read_dataset(data_path)
    try:
        normalizer = read_dataset_meta(data_path).normalizer
    except FileNotFoundError:
        normalizer = fit_normalizer([r.future for r in records])
    return records, normalizer


def _cmd_gen(args) -> int:
    config = _parse_scene_gen_config(args.config) if args.config else SceneGenConfig()
    seeds = scene_seeds(args.seed, args.count)
    records = []
    for i, scene_seed in enumerate(seeds):
        context, future = generate_scene(int(scene_seed), config)
        records.append(SceneRecord(f"scene-{i:06d}", context, future))
    normalizer = fit_normalizer([r.future for r in records])
    write_dataset(args.out, records, DatasetMeta(normalizer, config, args.seed, args.count))
    print(json.dumps({"command": "gen", "count": len(records), "out": str(args.out)}))
    return EXIT_OK


def _cmd_train(args) -> int:
    records, normalizer = _load_records_and_normalizer(args.data)
    config = read_train_config(args.config) if args.config else TrainConfig()
    result = train(
        records,
        config,
        normalizer=normalizer,
        log_path=args.log,
        checkpoint_path=args.out_ckpt,
        resume_from=args.resume,
        max_steps=args.max_steps,
        progress=lambda line: print(line, flush=True),
    )
    summary = {
        "command": "train",
        "steps": result.steps_done,
        "total_steps": result.total_steps,
        "final_total": result.log_rows[-1]["total"] if result.log_rows else None,
        "ckpt": str(args.out_ckpt),
    }
    print(json.dumps(summary))
    return EXIT_OK


def _cmd_sample(args) -> int:
    model, config, normalizer = load_model(args.ckpt)
    if args.k is not None:
        if args.k > config.n_queries:
            raise ConfigError(f"--k ({args.k}) cannot exceed the model's query count ({config.n_queries})")
        config = dataclasses.replace(config, k_out=args.k)
    records = read_dataset(args.data)
    data = TrainData.from_records(records, normalizer)
    generator = torch.Generator().manual_seed(derived_seed(config.seed, 4, args.seed))
    predictions = predict(model, data, range(len(data)), args.steps, config, generator)
    write_predictions(args.out, predictions)
    print(json.dumps({"command": "sample", "count": len(predictions), "steps": args.steps, "out": str(args.out)}))
    return EXIT_OK


def _paired_entries(pred_path, data_path):
    predictions = read_predictions(pred_path)
    records = read_dataset(data_path)
    by_id = {r.scene_id: r for r in records}
    entries = []
    for pred in predictions:
        if pred.scene_id not in by_id:
            raise DataError(f"{pred_path}: prediction references unknown scene_id {pred.scene_id!r}")
        record = by_id[pred.scene_id]
        entries.append((pred, record))
    return entries


def _cmd_eval(args) -> int:
    entries = _paired_entries(args.pred, args.data)
    report = evaluate(
        [(pred.predictions, record.future, record.context.ego) for pred, record in entries],
        miss_threshold=args.miss_threshold,
    )
    write_metric_report(args.out, report)
    print(report_summary_line(report))
    return EXIT_OK


def _cmd_ablate(args) -> int:
    records, normalizer = _load_records_and_normalizer(args.data)
    config = read_train_config(args.config) if args.config else TrainConfig()
    seeds = tuple(int(s) for s in args.seeds.split(","))
    steps_list = tuple(int(s) for s in args.steps_list.split(","))
    run_ablation(
        records,
        config,
        seeds=seeds,
        steps_list=steps_list,
        normalizer=normalizer,
        out_csv=args.out,
        progress=lambda line: print(line, flush=True),
    )
    print(json.dumps({"command": "ablate", "seeds": list(seeds), "ode_steps": list(steps_list), "out": str(args.out)}))
    return EXIT_OK


def _cmd_plot(args) -> int:
    entries = _paired_entries(args.pred, args.data)
    match = [e for e in entries if e[0].scene_id == args.scene_id]
    if not match:
        raise DataError(f"scene_id {args.scene_id!r} not present in both prediction and dataset files")
    pred, record = match[0]
    out = plot_scene(record, pred.predictions, args.out)
    print(json.dumps({"command": "plot", "scene_id": args.scene_id, "out": str(out)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowcast", description="Multi-modal trajectory prediction toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic fork-junction dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="generator config file (key = value lines)")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train a denoiser on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="training config file (key = value lines)")
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--log", default=None, help="loss-curve CSV path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many additional steps")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="sample and select trajectories for a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, required=True, help="ODE solver steps")
    p.add_argument("--k", type=int, default=None, help="selected trajectories per scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="noise seed offset")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("eval", help="score predictions against a dataset")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--miss-threshold", type=float, default=2.0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train ablation variants and tabulate metrics")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    p.add_argument("--steps-list", default="1,5,10", help="comma-separated ODE step counts")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("plot", help="render one scene's predictions to SVG")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene-id", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # argparse --help (0) or usage errors (2)
        return int(exc.code or 0)
    except FileNotFoundError as exc:
        _emit_error("missing_file", str(exc))
        return EXIT_MISSING_FILE
    except FlowcastError as exc:
        _emit_error(exc.kind, str(exc))
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
