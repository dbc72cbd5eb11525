"""Frozen desk-scale benchmark comparing losses, search budgets, encoders.

The protocol is pinned end to end: scenario seeds, clip draws, and the set
of training seeds are constants, so every machine computes the same
numbers. One configuration is trained once per seed, evaluated by running
the multi-hypothesis tracker over the shared evaluation scenarios, and
summarized by the median of the pooled MOTA / IDS / IDF1 across seeds.

Scale is deliberately small (eight identities, dense crossings, a few
dozen clips) so a full ablation fits in minutes on one core while the
relative comparisons stay meaningful.
"""

from __future__ import annotations

import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .association import AssocConfig, track_mht
from .data import Scenario, SynthConfig, TrainingClip, sample_clips, synth_generate
from .encoder import VARIANTS
from .metrics import evaluate
from .training import TrainConfig, train

BENCH_SEEDS = (0, 1, 2, 3, 4)
BUDGET_GRID = ((1, 2), (2, 4), (3, 8))

_TRAIN_DATA_SEEDS = tuple(range(900, 930))
_EVAL_DATA_SEEDS = tuple(range(500, 510))
_CLIP_SEED_BASE = 7321


def bench_synth_config(seed: int) -> SynthConfig:
    """Scenario recipe for the benchmark: every identity is paired onto a
    crossing path, appearance is noisy enough that crossings are only
    resolvable by a model that actually learned the embedding structure."""
    return SynthConfig(
        n_identities=8,
        n_frames=100,
        embedding_dim=8,
        identity_separation=4.0,
        appearance_noise=0.6,
        detection_noise=0.5,
        fp_rate=0.04,
        fn_rate=0.04,
        crossing_rate=1.0,
        seed=seed,
    )


def bench_train_config(**overrides) -> TrainConfig:
    """Small-model training configuration used for every benchmark run."""
    base = dict(
        k=2,
        c=4,
        n_length=8,
        margin=0.3,
        learning_rate=5e-3,
        weight_decay=5e-4,
        batch_size=4,
        epochs=40,
        warmup_epochs=5,
        loss_mode="margin_rank_search",
        rank_weight=1.0,
        variant="recurrent_attention",
        d_in=8,
        hidden=16,
        n_max=8,
        clips_per_scenario=4,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


@dataclass(frozen=True)
class BenchRun:
    """Pooled evaluation numbers for one trained model."""

    seed: int
    mota: float
    ids: int
    idf1: float


@dataclass(frozen=True)
class BenchResult:
    """Median-over-seeds summary for one configuration."""

    label: str
    mota: float
    ids: float
    idf1: float
    runs: Tuple[BenchRun, ...]


class BenchData:
    """Training and evaluation scenarios plus per-instance result caches.

    Runs are memoized by their full TrainConfig, so the three ablations
    share work (the default search configuration appears in all of them).
    """

    def __init__(self, train: Sequence[Scenario], eval_: Sequence[Scenario]):
        if not train or not eval_:
            raise ValueError("benchmark needs both training and evaluation scenarios")
        self.train = list(train)
        self.eval = list(eval_)
        self._clips: Dict[Tuple[int, int, int], List[TrainingClip]] = {}
        self._runs: Dict[TrainConfig, BenchRun] = {}

    def clips(self, cfg: TrainConfig) -> List[TrainingClip]:
        key = (cfg.c, cfg.n_length, cfg.clips_per_scenario)
        if key not in self._clips:
            clips: List[TrainingClip] = []
            for i, scn in enumerate(self.train):
                clips.extend(sample_clips(
                    scn, cfg.n_length, cfg.c,
                    seed=_CLIP_SEED_BASE + i, n_clips=cfg.clips_per_scenario,
                ))
            self._clips[key] = clips
        return self._clips[key]

    def run(self, cfg: TrainConfig, seed: int) -> BenchRun:
        run_cfg = replace(cfg, seed=seed)
        if run_cfg not in self._runs:
            self._runs[run_cfg] = _execute_run(self, run_cfg)
        return self._runs[run_cfg]


def _execute_run(data: BenchData, run_cfg: TrainConfig) -> BenchRun:
    result = train(data.clips(run_cfg), run_cfg)
    pairs = []
    for scn in data.eval:
        pred = track_mht(
            scn.detections, scn.frame_count, result.params, AssocConfig(),
        )
        pairs.append((scn.name, list(scn.gt), pred))
    report = evaluate(pairs)
    return BenchRun(
        seed=run_cfg.seed,
        mota=report.overall_clear.mota,
        ids=report.overall_clear.ids,
        idf1=report.overall_ident.idf1,
    )


_REFERENCE: Optional[BenchData] = None


def reference_data() -> BenchData:
    """The frozen scenario set; built once per process."""
    global _REFERENCE
    if _REFERENCE is None:
        _REFERENCE = BenchData(
            train=[
                synth_generate(bench_synth_config(s), name=f"bench-train-{i}")
                for i, s in enumerate(_TRAIN_DATA_SEEDS)
            ],
            eval_=[
                synth_generate(bench_synth_config(s), name=f"bench-eval-{i}")
                for i, s in enumerate(_EVAL_DATA_SEEDS)
            ],
        )
    return _REFERENCE


# ------------------------------------------------------------- run drivers


_WORKER_DATA: Optional[BenchData] = None


def _worker(run_cfg: TrainConfig) -> BenchRun:
    return _execute_run(_WORKER_DATA, run_cfg)


def _gather(
    data: BenchData,
    wanted: Sequence[TrainConfig],
    jobs: int,
    progress: Optional[Callable[[str], None]],
) -> None:
    """Fill the run cache for every config in ``wanted`` (seed included)."""
    missing = [cfg for cfg in dict.fromkeys(wanted) if cfg not in data._runs]
    if not missing:
        return
    if jobs > 1:
        global _WORKER_DATA
        _WORKER_DATA = data
        try:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for cfg, run in zip(missing, pool.map(_worker, missing)):
                    data._runs[cfg] = run
                    if progress is not None:
                        progress(_progress_line(cfg, run))
        finally:
            _WORKER_DATA = None
    else:
        for cfg in missing:
            run = _execute_run(data, cfg)
            data._runs[cfg] = run
            if progress is not None:
                progress(_progress_line(cfg, run))


def _progress_line(cfg: TrainConfig, run: BenchRun) -> str:
    return (
        f"{cfg.loss_mode}/{cfg.variant} k={cfg.k} c={cfg.c} seed={cfg.seed}: "
        f"MOTA {run.mota:.3f} IDS {run.ids} IDF1 {run.idf1:.3f}"
    )


def run_config(
    data: BenchData,
    label: str,
    cfg: TrainConfig,
    seeds: Sequence[int] = BENCH_SEEDS,
    jobs: int = 1,
    progress: Optional[Callable[[str], None]] = None,
) -> BenchResult:
    """Train ``cfg`` once per seed and return the median summary."""
    wanted = [replace(cfg, seed=s) for s in seeds]
    _gather(data, wanted, jobs, progress)
    runs = tuple(data.run(cfg, s) for s in seeds)
    return BenchResult(
        label=label,
        mota=float(statistics.median(r.mota for r in runs)),
        ids=float(statistics.median(r.ids for r in runs)),
        idf1=float(statistics.median(r.idf1 for r in runs)),
        runs=runs,
    )


def _run_grid(
    data: Optional[BenchData],
    entries: Sequence[Tuple[str, TrainConfig]],
    seeds: Sequence[int],
    jobs: int,
    progress: Optional[Callable[[str], None]],
) -> List[BenchResult]:
    if data is None:
        data = reference_data()
    wanted = [replace(cfg, seed=s) for _, cfg in entries for s in seeds]
    _gather(data, wanted, jobs, progress)
    return [run_config(data, label, cfg, seeds) for label, cfg in entries]


def ablate_losses(
    data: Optional[BenchData] = None,
    seeds: Sequence[int] = BENCH_SEEDS,
    jobs: int = 1,
    progress: Optional[Callable[[str], None]] = None,
) -> List[BenchResult]:
    """The four training objectives under one search/model budget."""
    entries = [
        ("cross_entropy", bench_train_config(loss_mode="cross_entropy")),
        ("margin_only", bench_train_config(loss_mode="margin_only")),
        ("margin_rank", bench_train_config(loss_mode="margin_rank")),
        ("margin_rank_search", bench_train_config(loss_mode="margin_rank_search")),
    ]
    return _run_grid(data, entries, seeds, jobs, progress)


def ablate_budget(
    data: Optional[BenchData] = None,
    seeds: Sequence[int] = BENCH_SEEDS,
    jobs: int = 1,
    progress: Optional[Callable[[str], None]] = None,
) -> List[BenchResult]:
    """Joint (K, C) search-width grid with the search objective."""
    entries = [
        (f"search_k{k}_c{c}", bench_train_config(k=k, c=c))
        for k, c in BUDGET_GRID
    ]
    return _run_grid(data, entries, seeds, jobs, progress)


def ablate_encoders(
    data: Optional[BenchData] = None,
    seeds: Sequence[int] = BENCH_SEEDS,
    jobs: int = 1,
    progress: Optional[Callable[[str], None]] = None,
) -> List[BenchResult]:
    """Every encoder under the search objective, next to the plain
    cross-entropy baseline they are all expected to beat."""
    entries = [(variant, bench_train_config(variant=variant)) for variant in VARIANTS]
    entries.append(
        ("cross_entropy", bench_train_config(loss_mode="cross_entropy")),
    )
    return _run_grid(data, entries, seeds, jobs, progress)


# ---------------------------------------------------------------- reports


def format_ablation(results: Sequence[BenchResult]) -> str:
    width = max(len("configuration"), max(len(r.label) for r in results)) + 2
    lines = [f"{'configuration':<{width}}{'MOTA':>8}{'IDS':>8}{'IDF1':>8}"]
    for r in results:
        lines.append(
            f"{r.label:<{width}}{r.mota:>8.3f}{r.ids:>8.1f}{r.idf1:>8.3f}"
        )
    return "\n".join(lines) + "\n"


def write_ablation_csv(results: Sequence[BenchResult], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("configuration,MOTA,IDS,IDF1\n")
        for r in results:
            fh.write(f"{r.label},{r.mota:.6f},{r.ids:.1f},{r.idf1:.6f}\n")
