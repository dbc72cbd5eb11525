"""Command line front end.

Six subcommands cover the whole pipeline: ``synth`` writes a scenario
bundle, ``train`` fits a scorer and saves a checkpoint plus its loss
history, ``track`` runs either tracker over a bundle, ``eval`` scores a
result file against ground truth, ``ablate`` reproduces the loss-mode and
search-budget comparisons, and ``plot`` renders any of the emitted CSVs as
an SVG. Every subcommand is deterministic for fixed inputs and seeds, so
artifacts are byte-identical across reruns.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
The failing subcommand prints a one-line diagnostic to stderr.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .association import AssocConfig, track_mht, track_online
from .benchmark import (
    BENCH_SEEDS,
    BenchData,
    ablate_budget,
    ablate_losses,
    format_ablation,
    reference_data,
    write_ablation_csv,
)
from .core import FrameOrderError
from .data import (
    DataError,
    SynthConfig,
    load_config,
    load_scenario,
    parse_mot,
    records_to_trajectories,
    sample_clips,
    save_scenario,
    synth_generate,
    write_mot,
)
from .encoder import (
    CorruptCheckpointError,
    DimensionError,
    load_checkpoint,
    save_checkpoint,
)
from .metrics import MetricsError, evaluate, format_report, write_metrics_csv
from .training import TrainConfig, train, write_loss_history

# clip draws are seeded per scenario so multi-bundle training does not
# depend on how the bundles are split across --data arguments
_CLIP_SEED_STRIDE = 1000


def _cmd_synth(args) -> int:
    cfg = load_config(SynthConfig, args.config)
    name = args.name if args.name else Path(args.out).name
    scenario = synth_generate(cfg, name=name)
    save_scenario(scenario, args.out)
    n_dets = sum(len(d) for d in scenario.detections.values())
    print(f"{scenario.name}: {len(scenario.gt)} tracks, "
          f"{scenario.frame_count} frames, {n_dets} detections -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(TrainConfig, args.config)
    cfg.validate()
    clips = []
    for i, bundle in enumerate(args.data):
        scenario = load_scenario(bundle)
        if scenario.d_in != cfg.d_in:
            raise DataError(
                f"{bundle}: embedding dim {scenario.d_in} != config d_in {cfg.d_in}"
            )
        clips.extend(sample_clips(
            scenario, cfg.n_length, cfg.c,
            seed=cfg.seed * _CLIP_SEED_STRIDE + i,
            n_clips=cfg.clips_per_scenario,
        ))
    result = train(clips, cfg)
    final = result.history[-1].mean_loss if result.history else 0.0
    if not math.isfinite(final):
        raise FloatingPointError(f"training diverged: final mean loss {final}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, out / "model.ckpt")
    write_loss_history(result.history, out / "loss.csv")
    print(f"trained on {len(clips)} clips, final mean loss {final:.6f} -> {out}")
    return 0


def _cmd_track(args) -> int:
    scenario = load_scenario(args.data)
    params = load_checkpoint(args.model)
    if scenario.d_in != params.d_in:
        raise DataError(
            f"{args.data}: embedding dim {scenario.d_in} != model d_in {params.d_in}"
        )
    cfg = load_config(AssocConfig, args.config) if args.config else AssocConfig()
    cfg.validate()
    tracker = track_online if args.mode == "online" else track_mht
    trajectories = tracker(scenario.detections, scenario.frame_count, params, cfg)
    write_mot(trajectories, args.out)
    n_entries = sum(len(t.entries) for t in trajectories)
    print(f"{args.mode}: {len(trajectories)} tracks, {n_entries} boxes -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    gt = records_to_trajectories(parse_mot(args.gt, kind="gt"))
    pred = records_to_trajectories(parse_mot(args.pred, kind="gt"))
    report = evaluate([(args.name, list(gt), list(pred))],
                      iou_threshold=args.iou_threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = format_report(report)
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    write_metrics_csv(report, out / "metrics.csv")
    print(table)
    return 0


def _load_bench_data(root) -> BenchData:
    base = Path(root)
    train_dirs = sorted(p for p in (base / "train").iterdir() if p.is_dir())
    eval_dirs = sorted(p for p in (base / "eval").iterdir() if p.is_dir())
    if not train_dirs or not eval_dirs:
        raise DataError(f"{root}: expected scenario bundles under train/ and eval/")
    return BenchData(
        train=[load_scenario(p) for p in train_dirs],
        eval_=[load_scenario(p) for p in eval_dirs],
    )


def _cmd_ablate(args) -> int:
    data = _load_bench_data(args.data) if args.data else reference_data()
    progress = (lambda line: print(line, flush=True)) if args.verbose else None
    results = ablate_losses(data, seeds=BENCH_SEEDS, jobs=args.jobs,
                            progress=progress)
    results += ablate_budget(data, seeds=BENCH_SEEDS, jobs=args.jobs,
                             progress=progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(results, out / "ablation.csv")
    print(format_ablation(results))
    return 0


def _read_csv(path) -> tuple:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not lines:
        raise DataError(f"{path}: empty CSV")
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:]]
    if any(len(r) != len(header) for r in rows):
        raise DataError(f"{path}: ragged rows")
    return header, rows


def _cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    # pin every entropy source matplotlib bakes into an SVG
    plt.rcParams["svg.hashsalt"] = "trackseek"

    header, rows = _read_csv(args.infile)
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    if header[0] == "epoch":
        epochs = [int(r[0]) for r in rows]
        for col in range(1, len(header)):
            ax.plot(epochs, [float(r[col]) for r in rows], label=header[col])
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        ax.set_title("training loss")
    elif header[0] in ("configuration", "sequence"):
        labels = [r[0] for r in rows]
        mota = [float(r[header.index("MOTA")]) for r in rows]
        ids_col = "IDS" if "IDS" in header else None
        x = np.arange(len(labels))
        ax.bar(x, mota, width=0.6, color="#4878d0")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_ylabel("MOTA")
        ax.set_title(f"MOTA by {header[0]}")
        if ids_col:
            twin = ax.twinx()
            twin.plot(x, [float(r[header.index(ids_col)]) for r in rows],
                      color="#d65f5f", marker="o", linestyle="--", label="IDS")
            twin.set_ylabel("IDS")
            twin.legend(loc="upper right")
    else:
        raise DataError(f"{args.infile}: unrecognized CSV header {header[0]!r}")
    fig.tight_layout()
    fig.savefig(args.out, format="svg", metadata={"Date": None})
    plt.close(fig)
    print(f"{args.infile} -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trackseek",
        description="Synthesize tracking data, train a tracklet scorer, "
                    "run trackers, evaluate, and compare configurations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scenario bundle")
    p.add_argument("--config", required=True,
                   help="key = value file with SynthConfig fields")
    p.add_argument("--out", required=True,
                   help="bundle directory (gt.txt, det.txt, emb.bin, meta.txt)")
    p.add_argument("--name", default=None,
                   help="scenario name stored in meta.txt (default: --out basename)")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a scorer on scenario bundles")
    p.add_argument("--data", required=True, nargs="+",
                   help="one or more scenario bundle directories")
    p.add_argument("--config", required=True,
                   help="key = value file with TrainConfig fields")
    p.add_argument("--out", required=True,
                   help="output directory for model.ckpt and loss.csv")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("track", help="run a tracker over a scenario bundle")
    p.add_argument("--data", required=True, help="scenario bundle directory")
    p.add_argument("--model", required=True, help="checkpoint from train")
    p.add_argument("--mode", choices=("online", "mht"), default="online",
                   help="per-frame assignment or deferred multi-hypothesis "
                        "(default: online)")
    p.add_argument("--config", default=None,
                   help="optional key = value file with AssocConfig fields")
    p.add_argument("--out", required=True, help="result file in MOT CSV format")
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("eval", help="score a result file against ground truth")
    p.add_argument("--gt", required=True, help="ground-truth MOT CSV")
    p.add_argument("--pred", required=True, help="tracker output MOT CSV")
    p.add_argument("--out", required=True,
                   help="output directory for report.txt and metrics.csv")
    p.add_argument("--name", default="sequence",
                   help="sequence label in the report (default: sequence)")
    p.add_argument("--iou-threshold", type=float, default=0.5,
                   help="match threshold for the metrics (default: 0.5)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate",
                       help="compare loss modes and search budgets over seeds")
    p.add_argument("--data", default=None,
                   help="directory with train/ and eval/ scenario bundles "
                        "(default: the built-in frozen benchmark)")
    p.add_argument("--out", required=True,
                   help="output directory for ablation.csv")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker process cap for independent runs (default: 1)")
    p.add_argument("--verbose", action="store_true",
                   help="print each run as it finishes")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("plot", help="render a CSV artifact as an SVG")
    p.add_argument("--in", dest="infile", required=True,
                   help="loss.csv, ablation.csv, or metrics.csv")
    p.add_argument("--out", required=True, help="output SVG path")
    p.set_defaults(func=_cmd_plot)
    return parser


_DATA_ERRORS = (
    DataError, MetricsError, FrameOrderError, DimensionError,
    CorruptCheckpointError,
)
_NUMERIC_ERRORS = (FloatingPointError, OverflowError, ZeroDivisionError,
                   np.linalg.LinAlgError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems and 0 on --help
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except _DATA_ERRORS as exc:
        print(f"trackseek {args.command}: {exc}", file=sys.stderr)
        return 2
    except _NUMERIC_ERRORS as exc:
        print(f"trackseek {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"trackseek {args.command}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"trackseek {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
