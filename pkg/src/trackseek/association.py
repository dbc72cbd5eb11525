"""Data association: optimal assignment, hypothesis conflicts, trackers.

Two trackers share the scorer. ``track_online`` commits one hypothesis per
frame: gate detections by overlap with each track's last box, score every
gated extension, solve the assignment, reject weak matches. ``track_mht``
defers: every object keeps a small tree of alternative continuations
(including coasting through misses), a global hypothesis is picked each
frame as a maximum-weight independent set over conflicting leaves, and
commitment happens N frames late, when the evidence has usually resolved
the ambiguity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core import (
    BBox, Detection, Tracklet, Trajectory, extend, iou, make_tracklet,
)
from .encoder import ModelParams, score
from .numerics import logistic


@dataclass(frozen=True)
class AssocConfig:
    """Gating, lifecycle, and hypothesis-management knobs."""

    gate_iou: float = 0.1
    score_threshold: float = 0.5
    birth_min: int = 2
    death_max: int = 5
    mht_k: int = 3
    nscan_n: int = 3
    mwis_exact_limit: int = 25
    miss_penalty: float = 0.3

    def validate(self) -> None:
        if not (0.0 <= self.gate_iou <= 1.0):
            raise ValueError("gate_iou must be in [0, 1]")
        if not (0.0 <= self.score_threshold <= 1.0):
            raise ValueError("score_threshold must be in [0, 1]")
        if self.birth_min < 1 or self.death_max < 1:
            raise ValueError("birth_min and death_max must be >= 1")
        if self.mht_k < 1:
            raise ValueError("mht_k must be >= 1")
        if self.nscan_n < 0 or self.mwis_exact_limit < 0:
            raise ValueError("nscan_n and mwis_exact_limit must be >= 0")


# ------------------------------------------------------------- assignment


def _shortest_augmenting_path(sq: np.ndarray):
    """Min-cost perfect matching on a square matrix via successive shortest
    augmenting paths with dual potentials (the Jonker-Volgenant scheme).

    Returns (row_col, u, v) where row_col[i] is the column of row i and the
    duals satisfy cost[i, j] - u[i] - v[j] >= 0 with equality on matches.
    """
    n = sq.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    col_row = np.zeros(n + 1, dtype=np.int64)  # 1-based; 0 means free
    for i in range(1, n + 1):
        col_row[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        way = np.zeros(n + 1, dtype=np.int64)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_row[j0]
            js = np.nonzero(~used[1:])[0] + 1
            cur = sq[i0 - 1, js - 1] - u[i0] - v[js]
            better = cur < minv[js]
            minv[js[better]] = cur[better]
            way[js[better]] = j0
            j1 = js[np.argmin(minv[js])]
            delta = minv[j1]
            used_js = np.nonzero(used)[0]
            u[col_row[used_js]] += delta
            v[used_js] -= delta
            minv[~used] -= delta
            j0 = j1
            if col_row[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            col_row[j0] = col_row[j1]
            j0 = j1
    row_col = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_col[col_row[j] - 1] = j - 1
    return row_col, u[1:], v[1:]


def _match_remaining(tight, first_row, banned_cols):
    """Perfect matching of rows > first_row into unbanned columns of the
    tight graph (Kuhn augmenting paths); None when impossible."""
    n = tight.shape[0]
    match_col: Dict[int, int] = {}

    def augment(r, seen):
        for j in range(n):
            if tight[r, j] and j not in banned_cols and j not in seen:
                seen.add(j)
                if j not in match_col or augment(match_col[j], seen):
                    match_col[j] = r
                    return True
        return False

    for r in range(first_row + 1, n):
        if not augment(r, set()):
            return None
    return {r: j for j, r in match_col.items()}


def _lex_refine(tight: np.ndarray, row_col: np.ndarray) -> List[int]:
    """Lexicographically smallest column vector among perfect matchings of
    the tight graph. Every such matching is cost-optimal (complementary
    slackness), so this deterministically picks among ties."""
    n = tight.shape[0]
    current = [int(j) for j in row_col]
    fixed: set = set()
    for i in range(n):
        for j in range(n):
            if not tight[i, j] or j in fixed:
                continue
            if j == current[i]:
                fixed.add(j)
                break
            rest = _match_remaining(tight, i, fixed | {j})
            if rest is not None:
                current[i] = j
                for r, c in rest.items():
                    current[r] = c
                fixed.add(j)
                break
        else:
            raise AssertionError("tight graph lost a perfect matching")
    return current


def hungarian(cost) -> List[Tuple[int, int]]:
    """Minimum-cost assignment. Rectangular matrices are padded with zero
    rows/columns; ``np.inf`` forbids a pair. Forbidden and padded slots are
    dropped from the result, so fewer than min(n_rows, n_cols) pairs can
    come back when a row has no affordable column.

    Among equal-cost optima the result is the lexicographically smallest
    column assignment scanning padded rows top down: row 0 takes the
    smallest column used by any optimal solution, then row 1, and so on.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    n_rows, n_cols = c.shape
    if n_rows == 0 or n_cols == 0:
        return []
    if np.any(np.isnan(c)) or np.any(c == -np.inf):
        raise ValueError("cost entries must be finite or +inf")
    n = max(n_rows, n_cols)
    finite = c[np.isfinite(c)]
    if finite.size:
        lo = min(float(finite.min()), 0.0)
        hi = max(float(finite.max()), 0.0)
        big = (hi - lo + 1.0) * (n + 1)
    else:
        big = 1.0
    sq = np.zeros((n, n))
    sq[:n_rows, :n_cols] = np.where(np.isfinite(c), c, big)

    row_col, u, v = _shortest_augmenting_path(sq)
    reduced = sq - u[:, None] - v[None, :]
    eps = 1e-9 * max(1.0, float(np.abs(sq).max()))
    tight = reduced <= eps
    refined = _lex_refine(tight, row_col)

    out = []
    for i in range(n_rows):
        j = refined[i]
        if j < n_cols and np.isfinite(c[i, j]):
            out.append((i, j))
    return out


def gate(last_box: BBox, detections: Sequence[Detection], threshold: float) -> List[int]:
    """Indices of detections overlapping the box at or above the threshold."""
    return [i for i, d in enumerate(detections)
            if iou(last_box, d.box) >= threshold]


# ------------------------------------------------------------------- mwis


def mwis(
    weights: Sequence[float],
    edges: Sequence[Tuple[int, int]],
    exact_limit: int = 25,
) -> Tuple[List[int], float]:
    """Maximum-weight independent set.

    Exact branch and bound up to ``exact_limit`` vertices (ties resolve to
    the lexicographically smallest vertex tuple); beyond that a greedy
    weight-over-degree heuristic. The empty set is always feasible, so the
    result weight is never negative.
    """
    w = [float(x) for x in weights]
    n = len(w)
    adj = [0] * n
    for a, b in edges:
        if not (0 <= a < n and 0 <= b < n):
            raise ValueError(f"edge ({a}, {b}) out of range")
        if a == b:
            raise ValueError(f"self loop at vertex {a}")
        adj[a] |= 1 << b
        adj[b] |= 1 << a
    if n == 0:
        return [], 0.0
    if n <= exact_limit:
        return _mwis_exact(w, adj)
    return _mwis_greedy(w, adj)


def _mwis_exact(w: List[float], adj: List[int]) -> Tuple[List[int], float]:
    n = len(w)
    pos_suffix = [0.0] * (n + 1)
    for i in reversed(range(n)):
        pos_suffix[i] = pos_suffix[i + 1] + max(w[i], 0.0)
    best_set: Tuple[int, ...] = ()
    best_w = 0.0
    chosen: List[int] = []

    def rec(i: int, weight: float, banned: int) -> None:
        nonlocal best_set, best_w
        if weight + pos_suffix[i] < best_w:
            return
        if i == n:
            key = tuple(chosen)
            if weight > best_w or (weight == best_w and key < best_set):
                best_w, best_set = weight, key
            return
        if not (banned >> i) & 1:
            chosen.append(i)
            rec(i + 1, weight + w[i], banned | adj[i])
            chosen.pop()
        rec(i + 1, weight, banned)

    rec(0, 0.0, 0)
    return list(best_set), best_w


def _mwis_greedy(w: List[float], adj: List[int]) -> Tuple[List[int], float]:
    n = len(w)
    alive = (1 << n) - 1
    picked: List[int] = []
    total = 0.0
    while True:
        best_v = -1
        best_ratio = 0.0
        for v in range(n):
            if not (alive >> v) & 1 or w[v] <= 0.0:
                continue
            deg = bin(adj[v] & alive).count("1")
            ratio = w[v] / (deg + 1)
            if ratio > best_ratio:
                best_v, best_ratio = v, ratio
        if best_v < 0:
            break
        picked.append(best_v)
        total += w[best_v]
        alive &= ~((1 << best_v) | adj[best_v])
    return sorted(picked), total


@dataclass(frozen=True)
class ConflictGraph:
    """Pairwise incompatibilities between candidate tracks."""

    n: int
    edges: Tuple[Tuple[int, int], ...]


def build_conflict_graph(
    paths: Sequence[Sequence[Detection]],
    groups: Optional[Sequence[int]] = None,
) -> ConflictGraph:
    """Edges between paths sharing a detection (same object instance, not
    merely an equal box) and, when ``groups`` is given, between paths of
    the same group, enforcing one hypothesis per object."""
    edges = set()
    by_det: Dict[int, List[int]] = {}
    for idx, path in enumerate(paths):
        for det in path:
            by_det.setdefault(id(det), []).append(idx)
    for indices in by_det.values():
        for a in range(len(indices)):
            for b in range(a + 1, len(indices)):
                i, j = indices[a], indices[b]
                if i != j:
                    edges.add((min(i, j), max(i, j)))
    if groups is not None:
        if len(groups) != len(paths):
            raise ValueError("groups must align with paths")
        by_group: Dict[int, List[int]] = {}
        for idx, g in enumerate(groups):
            by_group.setdefault(g, []).append(idx)
        for members in by_group.values():
            for a in range(len(members)):
                for b in range(a + 1, len(members)):
                    edges.add((members[a], members[b]))
    return ConflictGraph(n=len(paths), edges=tuple(sorted(edges)))


# ---------------------------------------------------------------- scoring


def _window_base(t: Tracklet, p: ModelParams) -> Tracklet:
    """Suffix window keeping extension scores in the trained length range.

    The self-attention position table hard-caps scoreable length; the
    recurrent variants have no cap but their scores drift once a track
    grows far past the lengths seen in training, and a drifted score loses
    detection contests against fresh short tracks. Sliding every variant
    keeps all competitors on the same footing.
    """
    w = max(p.n_max - 1, 1)
    if len(t) >= p.n_max:
        return make_tracklet(t.detections[-w:])
    return t


def _extension_sigma(base: Tracklet, det: Detection, p: ModelParams):
    raw, scored = score(extend(base, det), p)
    return float(logistic(raw)), scored


# ----------------------------------------------------------------- online


@dataclass
class _OnlineTrack:
    tid: int
    tracklet: Tracklet
    last_box: BBox
    history: List[Tuple[int, BBox]]
    hits: int = 1
    misses: int = 0
    confirmed: bool = False


def track_online(
    detections: Mapping[int, Sequence[Detection]],
    frame_count: int,
    params: ModelParams,
    cfg: AssocConfig = AssocConfig(),
) -> List[Trajectory]:
    """Greedy-commitment tracker: one assignment per frame, no lookback.

    Matches pay the negated extension confidence, matches below the score
    threshold are rejected, unmatched detections open tentative tracks
    (confirmed after ``birth_min`` consecutive hits, dead after one early
    miss), and confirmed tracks coast up to ``death_max - 1`` misses.
    """
    cfg.validate()
    tracks: List[_OnlineTrack] = []
    finished: List[_OnlineTrack] = []
    next_id = 1
    for frame in range(1, frame_count + 1):
        dets = list(detections.get(frame, ()))
        ext: Dict[Tuple[int, int], Tuple[float, Tracklet]] = {}
        cost = np.full((len(tracks), len(dets)), np.inf)
        for ti, tr in enumerate(tracks):
            base = _window_base(tr.tracklet, params)
            if base is not tr.tracklet:
                _, base = score(base, params)
                tr.tracklet = base
            for dj in gate(tr.last_box, dets, cfg.gate_iou):
                sigma, scored = _extension_sigma(tr.tracklet, dets[dj], params)
                ext[(ti, dj)] = (sigma, scored)
                cost[ti, dj] = -sigma
        matched_tracks = set()
        matched_dets = set()
        if len(tracks) and len(dets):
            for ti, dj in hungarian(cost):
                sigma, scored = ext[(ti, dj)]
                if sigma < cfg.score_threshold:
                    continue
                tr = tracks[ti]
                tr.tracklet = scored
                tr.last_box = dets[dj].box
                tr.history.append((frame, dets[dj].box))
                tr.hits += 1
                tr.misses = 0
                if tr.hits >= cfg.birth_min:
                    tr.confirmed = True
                matched_tracks.add(ti)
                matched_dets.add(dj)
        survivors = []
        for ti, tr in enumerate(tracks):
            if ti in matched_tracks:
                survivors.append(tr)
                continue
            tr.misses += 1
            if not tr.confirmed or tr.misses >= cfg.death_max:
                finished.append(tr)
            else:
                survivors.append(tr)
        tracks = survivors
        for dj, det in enumerate(dets):
            if dj in matched_dets:
                continue
            _, t0 = score(make_tracklet([det]), params)
            tracks.append(_OnlineTrack(
                tid=next_id, tracklet=t0, last_box=det.box,
                history=[(frame, det.box)],
                confirmed=cfg.birth_min <= 1,
            ))
            next_id += 1
    finished.extend(tracks)
    out = [
        Trajectory(track_id=tr.tid, entries=tuple(tr.history))
        for tr in sorted(finished, key=lambda tr: tr.tid)
        if tr.confirmed
    ]
    return out


# -------------------------------------------------------------------- mht


# a path mostly made of detections already owned by heavier tracks is a
# rival duplicate; its leftover slivers cost identity switches, not coverage
_MIN_UNIQUE = 0.5


@dataclass
class _Leaf:
    tracklet: Tracklet
    decisions: Tuple[Tuple[int, Optional[Detection]], ...]
    last_box: BBox
    miss_streak: int
    sigma: float
    weight: float  # cumulative path score, so older tracks win conflicts


@dataclass
class _Tree:
    tid: int
    leaves: List[_Leaf]
    unselected: int = 0


def _root_leaf(det: Detection, frame: int, params: ModelParams) -> _Leaf:
    raw, t0 = score(make_tracklet([det]), params)
    sigma = float(logistic(raw))
    return _Leaf(
        tracklet=t0, decisions=((frame, det),), last_box=det.box,
        miss_streak=0, sigma=sigma, weight=sigma,
    )


def _best_leaf(leaves: Sequence[_Leaf]) -> _Leaf:
    return max(enumerate(leaves), key=lambda iv: (iv[1].weight, -iv[0]))[1]


def track_mht(
    detections: Mapping[int, Sequence[Detection]],
    frame_count: int,
    params: ModelParams,
    cfg: AssocConfig = AssocConfig(),
) -> List[Trajectory]:
    """Deferred-commitment tracker.

    Each object keeps up to ``mht_k`` alternative continuations. Per frame
    every leaf branches over its gated detections plus one coasting child;
    a leaf's weight is its accumulated extension confidence minus a
    penalty per consecutive miss. A global hypothesis is selected as a
    maximum-weight independent set under two conflict rules: no detection
    claimed twice, one leaf per object. Trees then drop the leaves that
    disagree with the selected leaf's ancestry ``nscan_n`` frames back,
    and rival branches holding a detection the hypothesis gave to another
    object are dropped outright. Deferral lives in the sibling window:
    with ``nscan_n`` 0 every frame pins to its hypothesis and the tracker
    degenerates to a greedy one with extra bookkeeping.

    Detections outside the hypothesis spawn rival trees, so the final
    output resolves residual overlaps by weight: heavier paths own their
    detections and lighter ones are trimmed to what remains, which keeps
    rival fragments from duplicating an established object without
    discarding their unique coverage. Trees kept out of the hypothesis
    for ``death_max`` consecutive frames retire early.
    """
    cfg.validate()
    trees: List[_Tree] = []
    retired: List[Tuple[int, _Leaf]] = []
    next_id = 1
    for frame in range(1, frame_count + 1):
        dets = list(detections.get(frame, ()))
        survivors: List[_Tree] = []
        for tree in trees:
            children: List[_Leaf] = []
            old_leaves = tree.leaves
            for leaf in tree.leaves:
                base = _window_base(leaf.tracklet, params)
                if base is not leaf.tracklet:
                    _, base = score(base, params)
                for dj in gate(leaf.last_box, dets, cfg.gate_iou):
                    det = dets[dj]
                    sigma, scored = _extension_sigma(base, det, params)
                    children.append(_Leaf(
                        tracklet=scored,
                        decisions=leaf.decisions + ((frame, det),),
                        last_box=det.box, miss_streak=0, sigma=sigma,
                        weight=leaf.weight + sigma,
                    ))
                if leaf.miss_streak + 1 < cfg.death_max:
                    streak = leaf.miss_streak + 1
                    children.append(_Leaf(
                        tracklet=base,
                        decisions=leaf.decisions + ((frame, None),),
                        last_box=leaf.last_box, miss_streak=streak,
                        sigma=leaf.sigma,
                        weight=leaf.weight - cfg.miss_penalty * streak,
                    ))
            order = sorted(range(len(children)),
                           key=lambda i: (-children[i].weight, i))
            tree.leaves = [children[i] for i in order[:cfg.mht_k]]
            if tree.leaves:
                survivors.append(tree)
            else:
                # no children only happens after the miss limit; the best
                # pre-expansion leaf carries the path to keep
                retired.append((tree.tid, _best_leaf(old_leaves)))
        trees = survivors

        all_leaves = [(tree, leaf) for tree in trees for leaf in tree.leaves]
        claimed: Dict[int, int] = {}
        selected_trees = set()
        if all_leaves:
            paths = [
                [d for _, d in leaf.decisions if d is not None]
                for _, leaf in all_leaves
            ]
            groups = []
            for ti, tree in enumerate(trees):
                groups.extend([ti] * len(tree.leaves))
            graph = build_conflict_graph(paths, groups=groups)
            weights = [leaf.weight for _, leaf in all_leaves]
            chosen, _ = mwis(weights, graph.edges, cfg.mwis_exact_limit)
            for ci in chosen:
                tree, leaf = all_leaves[ci]
                selected_trees.add(id(tree))
                frame_det = leaf.decisions[-1][1]
                if frame_det is not None:
                    claimed[id(frame_det)] = id(tree)
                cutoff = frame - cfg.nscan_n
                prefix = tuple(d for d in leaf.decisions if d[0] <= cutoff)
                tree.leaves = [
                    lf for lf in tree.leaves
                    if lf.decisions[:len(prefix)] == prefix
                ]

        still: List[_Tree] = []
        for tree in trees:
            kept = []
            for lf in tree.leaves:
                d = lf.decisions[-1][1]
                owner = claimed.get(id(d)) if d is not None else None
                if owner is None or owner == id(tree):
                    kept.append(lf)
            if kept:
                tree.leaves = kept
            if not kept or id(tree) not in selected_trees:
                tree.unselected += 1
            else:
                tree.unselected = 0
            if not kept or tree.unselected >= cfg.death_max:
                retired.append((tree.tid, _best_leaf(tree.leaves)))
            else:
                still.append(tree)
        trees = still

        # births: only detections no live branch can explain; a leftover
        # detection next to an existing track is an assignment ambiguity
        # for that tree to resolve, not a new object, and spawning a rival
        # there makes the two trees trade the object back and forth
        boxes = [lf.last_box for tree in trees for lf in tree.leaves]
        for det in dets:
            if id(det) in claimed:
                continue
            if any(iou(b, det.box) >= cfg.gate_iou for b in boxes):
                continue
            trees.append(_Tree(tid=next_id,
                               leaves=[_root_leaf(det, frame, params)]))
            next_id += 1

    # one conflict-free answer over everything that survived or retired:
    # heavier paths own their detections, lighter paths keep whatever is
    # left after trimming the shared ones (dropping a whole path for one
    # overlap would punch holes in the coverage)
    pool: List[Tuple[int, _Leaf]] = list(retired)
    pool.extend((tree.tid, _best_leaf(tree.leaves)) for tree in trees)
    pool.sort(key=lambda tl: (-tl[1].weight, tl[0]))
    used: set = set()
    out: List[Trajectory] = []
    for tid, leaf in pool:
        path = [(f, det) for f, det in leaf.decisions if det is not None]
        entries = tuple(
            (f, det.box) for f, det in path if id(det) not in used
        )
        if (len(entries) >= cfg.birth_min
                and len(entries) >= _MIN_UNIQUE * len(path)):
            used.update(id(det) for _, det in path)
            out.append(Trajectory(track_id=tid, entries=entries))
    out.sort(key=lambda t: t.track_id)
    return out
