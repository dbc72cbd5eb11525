"""Search-driven scorer training.

The training signal follows the tracker's own decision process instead of
teacher forcing. Each clip becomes an episode: the beam starts at the gt
track's first detection and at every step every retained branch is extended
with every candidate, scored, and pruned back to the top K. The gt
continuation is scored alongside but never pruned, so the margin between it
and whatever the search currently believes is enforced exactly where the
tracker would have to make the call. Branches that survive scoring share
tracklet prefixes, and the backward pass accumulates through the shared
tape nodes once.

Three teacher-forced baselines (``margin_rank``, ``margin_only``,
``cross_entropy``) are kept for comparison. They use K persistent negative
chains per episode, each grown by one seeded-random candidate per step, so
their negatives drift away from the gt path the same way a confused tracker
would, just without the model in the loop.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import Detection, Tracklet, extend, make_tracklet
from .data import TrainingClip
from .encoder import (
    GradientSet,
    ModelParams,
    ScoreTape,
    VARIANTS,
    backward,
    grad_check,
    init_params,
    score,
    score_with_tape,
    zero_grads,
)
from .losses import ScoredBranch, cross_entropy_baseline, margin_loss, rank_loss

LOSS_MODES = ("margin_rank_search", "margin_rank", "margin_only", "cross_entropy")


@dataclass(frozen=True)
class TrainConfig:
    """Search width, loss shape, optimizer settings, and model size."""

    k: int = 3
    c: int = 4
    n_length: int = 8
    margin: float = 0.3
    learning_rate: float = 5e-3
    weight_decay: float = 5e-4
    batch_size: int = 4
    epochs: int = 40
    warmup_epochs: int = 5
    loss_mode: str = "margin_rank_search"
    rank_weight: float = 1.0
    variant: str = "recurrent_attention"
    d_in: int = 16
    hidden: int = 32
    n_max: int = 8
    clips_per_scenario: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.k < 1 or self.c < 1:
            raise ValueError("k and c must be >= 1")
        if self.n_length < 2:
            raise ValueError("n_length must be >= 2")
        if self.n_max < self.n_length:
            raise ValueError("n_max must cover n_length")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("batch_size >= 1, epochs >= 0, warmup_epochs >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


# ------------------------------------------------------------------ adam


@dataclass
class AdamState:
    step: int
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]


def adam_init(p: ModelParams) -> AdamState:
    return AdamState(
        step=0,
        m={name: np.zeros_like(t) for name, t in p.tensors.items()},
        v={name: np.zeros_like(t) for name, t in p.tensors.items()},
    )


def adam_update(
    p: ModelParams,
    grads: GradientSet,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ModelParams:
    """One Adam step with bias correction and decoupled weight decay.

    Decay shrinks the weights directly (before the moment update is
    applied); it never enters the gradient moments.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new = {}
    for name in p.tensors:
        g = grads[name]
        w = p.tensors[name]
        if weight_decay != 0.0:
            w = w - lr * weight_decay * w
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        new[name] = w - lr * m_hat / (np.sqrt(v_hat) + eps)
    return ModelParams(
        d_in=p.d_in, hidden=p.hidden, n_max=p.n_max, variant=p.variant, tensors=new,
    )


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Linear per-epoch warmup ramp, then the configured rate."""
    if cfg.warmup_epochs <= 0 or epoch >= cfg.warmup_epochs:
        return cfg.learning_rate
    return cfg.learning_rate * (epoch + 1) / cfg.warmup_epochs


# --------------------------------------------------------------- episodes


@dataclass(frozen=True)
class SearchBranch:
    """A scored beam entry; the tracklet carries its raw score and cache."""

    tracklet: Tracklet
    tape: ScoreTape
    is_gt: bool = False

    @property
    def raw(self) -> float:
        return self.tracklet.score

    @property
    def ids_count(self) -> int:
        return self.tracklet.ids_count


def expand(
    branches: Sequence[SearchBranch],
    candidates: Sequence[Detection],
    params: ModelParams,
) -> List[SearchBranch]:
    """Every branch extended with every candidate, scored incrementally.

    Output is parent-major: all children of branches[0] first, in candidate
    order."""
    out = []
    for branch in branches:
        for det in candidates:
            raw, scored, tape = score_with_tape(extend(branch.tracklet, det), params)
            out.append(SearchBranch(tracklet=scored, tape=tape))
    return out


def prune_topk(branches: Sequence[SearchBranch], k: int) -> List[SearchBranch]:
    """Top k by raw score; ties resolve to the earlier input position."""
    order = sorted(range(len(branches)), key=lambda i: (-branches[i].raw, i))
    return [branches[i] for i in order[:k]]


@dataclass(frozen=True)
class EpisodeRecord:
    total_loss: float
    margin_total: float
    rank_total: float
    step_losses: Tuple[float, ...]
    grads: GradientSet


def _as_scored(branch: SearchBranch, is_gt: bool = False) -> ScoredBranch:
    return ScoredBranch(
        raw=branch.raw, ids_count=branch.ids_count,
        is_gt=is_gt, tracklet=branch.tracklet,
    )


def _episode_rng(seed: int, epoch: int, position: int) -> np.random.Generator:
    seq = np.random.SeedSequence((seed, epoch, position))
    return np.random.Generator(np.random.Philox(seq))


def run_episode(
    clip: TrainingClip,
    params: ModelParams,
    cfg: TrainConfig,
    rng: Optional[np.random.Generator] = None,
    compute_grads: bool = True,
) -> EpisodeRecord:
    """One training episode over a clip; loss, components, and gradients.

    In search mode the negatives are whatever the beam itself retains, so
    no randomness is consumed. The teacher-forced modes draw one candidate
    per negative chain per step from ``rng`` (amount consumed does not
    depend on the params, keeping the loss a deterministic function of the
    weights for a fixed rng seed)."""
    if cfg.loss_mode not in LOSS_MODES:
        raise ValueError(f"unknown loss_mode {cfg.loss_mode!r}")
    if len(clip.gt_detections) < 2:
        raise ValueError("episode needs a clip with at least two detections")
    if rng is None:
        rng = _episode_rng(cfg.seed, 0, 0)

    _, root, root_tape = score_with_tape(make_tracklet([clip.gt_detections[0]]), params)
    gt_branch = SearchBranch(tracklet=root, tape=root_tape, is_gt=True)

    search = cfg.loss_mode == "margin_rank_search"
    if search:
        negatives: List[SearchBranch] = []
    else:
        negatives = [SearchBranch(tracklet=root, tape=root_tape)] * cfg.k

    total = margin_total = rank_total = 0.0
    step_losses = []
    tapes: List[ScoreTape] = []
    upstream: List[float] = []

    def contribute(branch: SearchBranch, grad: float) -> None:
        if grad != 0.0:
            tapes.append(branch.tape)
            upstream.append(grad)

    for tau in range(1, len(clip.gt_detections)):
        gt_det = clip.gt_detections[tau]
        cands = clip.candidates[tau]

        if search:
            pool = list(cands) + [gt_det]
            children = expand([gt_branch] + negatives, pool, params)
            gt_child = replace(children[len(pool) - 1], is_gt=True)
            gt_path = gt_child.tracklet.detections
            pool_children = [
                ch for i, ch in enumerate(children)
                if i != len(pool) - 1 and ch.tracklet.detections != gt_path
            ]
            retained = prune_topk(pool_children, cfg.k)
        else:
            gt_child = replace(
                expand([gt_branch], [gt_det], params)[0], is_gt=True,
            )
            picks = [cands[int(rng.integers(len(cands)))] for _ in negatives]
            retained = [
                expand([neg], [det], params)[0]
                for neg, det in zip(negatives, picks)
            ]

        gt_scored = _as_scored(gt_child, is_gt=True)
        neg_scored = [_as_scored(b) for b in retained]

        if cfg.loss_mode == "cross_entropy":
            out = cross_entropy_baseline(
                [gt_scored.raw] + [b.raw for b in neg_scored],
                [1] + [0] * len(neg_scored),
            )
            value = out.value
            contribute(gt_child, float(out.branch_grads[0]))
            for branch, g in zip(retained, out.branch_grads[1:]):
                contribute(branch, float(g))
        else:
            m = margin_loss(gt_scored, neg_scored, cfg.margin)
            if cfg.loss_mode == "margin_only":
                value = m.value
                gt_grad, branch_grads = m.gt_grad, m.branch_grads
            else:
                r = rank_loss(neg_scored)
                value = m.value + cfg.rank_weight * r.value
                gt_grad = m.gt_grad
                branch_grads = m.branch_grads + cfg.rank_weight * r.branch_grads
                rank_total += r.value
            margin_total += m.value
            contribute(gt_child, gt_grad)
            for branch, g in zip(retained, branch_grads):
                contribute(branch, float(g))

        total += value
        step_losses.append(value)
        gt_branch = gt_child
        negatives = retained

    if compute_grads and tapes:
        grads = backward(tapes, upstream, params)
    else:
        grads = zero_grads(params)
    return EpisodeRecord(
        total_loss=total,
        margin_total=margin_total,
        rank_total=rank_total,
        step_losses=tuple(step_losses),
        grads=grads,
    )


def episode_grad_check(
    clip: TrainingClip,
    cfg: TrainConfig,
    params: Optional[ModelParams] = None,
    epsilon: float = 1e-5,
    max_checks: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Finite-difference check of the full episode gradient."""
    if params is None:
        params = init_params(cfg.d_in, cfg.hidden, cfg.variant,
                             n_max=cfg.n_max, seed=cfg.seed)

    def loss_fn(p: ModelParams) -> Tuple[float, GradientSet]:
        rec = run_episode(clip, p, cfg, rng=_episode_rng(cfg.seed, 0, 0))
        return rec.total_loss, rec.grads

    return grad_check(params, loss_fn, epsilon=epsilon,
                      max_checks=max_checks, seed=seed)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    margin_component: float
    rank_component: float


@dataclass
class TrainResult:
    params: ModelParams
    history: List[EpochStats]


def _canonical_order(clips: Sequence[TrainingClip]) -> List[int]:
    # sort key includes candidate geometry so two different draws of the
    # same window still order deterministically regardless of input order
    def key(i):
        clip = clips[i]
        fingerprint = tuple(
            (d.frame, d.box.left, d.box.top, d.box.width, d.box.height)
            for row in clip.candidates for d in row
        )
        return clip.sort_key + fingerprint

    return sorted(range(len(clips)), key=key)


def train(
    clips: Sequence[TrainingClip],
    cfg: TrainConfig,
    params: Optional[ModelParams] = None,
    progress: Optional[Callable[[EpochStats], None]] = None,
) -> TrainResult:
    """Adam over batch-averaged episode gradients.

    The result depends only on the clip multiset and the config: clips are
    put into a canonical order before the seeded shuffle, and each episode
    draws its candidates from a generator keyed by (seed, epoch, canonical
    position)."""
    cfg.validate()
    if not clips:
        raise ValueError("no training clips")
    if params is None:
        params = init_params(cfg.d_in, cfg.hidden, cfg.variant,
                             n_max=cfg.n_max, seed=cfg.seed)
    order = _canonical_order(clips)
    state = adam_init(params)
    history: List[EpochStats] = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg, epoch)
        shuffle_rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence((cfg.seed, epoch)))
        )
        perm = shuffle_rng.permutation(len(order))
        sum_loss = sum_margin = sum_rank = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            positions = perm[start:start + cfg.batch_size]
            batch_grads = zero_grads(params)
            for pos in positions:
                pos = int(pos)
                clip = clips[order[pos]]
                rec = run_episode(
                    clip, params, cfg, rng=_episode_rng(cfg.seed, epoch, pos),
                )
                for name in batch_grads:
                    batch_grads[name] += rec.grads[name]
                sum_loss += rec.total_loss
                sum_margin += rec.margin_total
                sum_rank += rec.rank_total
            for name in batch_grads:
                batch_grads[name] /= len(positions)
            params = adam_update(params, batch_grads, state, lr, cfg.weight_decay)
        stats = EpochStats(
            epoch=epoch + 1,
            mean_loss=sum_loss / len(perm),
            margin_component=sum_margin / len(perm),
            rank_component=sum_rank / len(perm),
        )
        history.append(stats)
        if progress is not None:
            progress(stats)
    return TrainResult(params=params, history=history)


def write_loss_history(history: Sequence[EpochStats], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss,margin_component,rank_component\n")
        for s in history:
            fh.write(
                f"{s.epoch},{s.mean_loss:.10g},"
                f"{s.margin_component:.10g},{s.rank_component:.10g}\n"
            )


def separation_rate(clips: Sequence[TrainingClip], params: ModelParams) -> float:
    """Fraction of steps where the gt extension outscores every candidate,
    walking the gt path teacher-forced."""
    total = separated = 0
    for clip in clips:
        _, prefix = score(make_tracklet([clip.gt_detections[0]]), params)
        for tau in range(1, len(clip.gt_detections)):
            gt_raw, gt_next = score(extend(prefix, clip.gt_detections[tau]), params)
            best = -np.inf
            for det in clip.candidates[tau]:
                neg_raw, _ = score(extend(prefix, det), params)
                best = max(best, neg_raw)
            separated += gt_raw > best
            total += 1
            prefix = gt_next
    if total == 0:
        raise ValueError("no steps to evaluate")
    return separated / total


def search_separation_rate(
    clips: Sequence[TrainingClip],
    params: ModelParams,
    cfg: TrainConfig,
) -> float:
    """Fraction of clips whose gt chain outscores every beam negative on the
    last step, running the same beam expansion the search losses train on.

    The sigmoid is monotone, so raw-score comparisons decide it."""
    if not clips:
        raise ValueError("no clips to evaluate")
    separated = 0
    for clip in clips:
        _, root, root_tape = score_with_tape(
            make_tracklet([clip.gt_detections[0]]), params,
        )
        gt_branch = SearchBranch(tracklet=root, tape=root_tape, is_gt=True)
        negatives: List[SearchBranch] = []
        final_ok = True
        for tau in range(1, len(clip.gt_detections)):
            pool = list(clip.candidates[tau]) + [clip.gt_detections[tau]]
            children = expand([gt_branch] + negatives, pool, params)
            gt_child = replace(children[len(pool) - 1], is_gt=True)
            gt_path = gt_child.tracklet.detections
            pool_children = [
                ch for i, ch in enumerate(children)
                if i != len(pool) - 1 and ch.tracklet.detections != gt_path
            ]
            retained = prune_topk(pool_children, cfg.k)
            final_ok = all(gt_child.raw > neg.raw for neg in retained)
            gt_branch = gt_child
            negatives = retained
        separated += final_ok
    return separated / len(clips)
