"""Tracking quality measures.

The frame-level measures follow the CLEAR protocol: correspondences persist
from frame to frame while the pair still overlaps enough, new pairs are
filled in by a max-overlap assignment, and an identity switch is counted
whenever a ground-truth track's match differs from its last known one, even
across a gap. The identity measures (IDF1 family) instead pick one global
bijection between ground-truth and predicted tracks that maximizes matched
frames, so a track that flips identity halfway never scores above half.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .association import hungarian
from .core import Trajectory, iou


class MetricsError(ValueError):
    """Ill-formed trajectories handed to the evaluators."""


@dataclass(frozen=True)
class MotMetrics:
    """Frame-level tallies plus the derived rates.

    mt and ml are percentages of ground-truth tracks covered at >= 80%
    and <= 20% of their frames."""

    mota: float
    motp: float
    fp: int
    fn: int
    ids: int
    frag: int
    mt: float
    ml: float
    gt_total: int
    matched: int
    iou_sum: float
    track_count: int
    mt_count: int
    ml_count: int


@dataclass(frozen=True)
class IdMetrics:
    idf1: float
    idp: float
    idr: float
    idtp: int
    gt_total: int
    pred_total: int


@dataclass(frozen=True)
class SequenceResult:
    name: str
    clear: MotMetrics
    ident: IdMetrics


@dataclass(frozen=True)
class EvalReport:
    sequences: Tuple[SequenceResult, ...]
    overall_clear: MotMetrics
    overall_ident: IdMetrics


def _index(trajectories: Sequence[Trajectory], kind: str):
    ids = [t.track_id for t in trajectories]
    if len(set(ids)) != len(ids):
        raise MetricsError(f"duplicate {kind} track ids")
    at: Dict[int, Dict[int, object]] = {}
    for t in trajectories:
        for frame, box in t.entries:
            at.setdefault(frame, {})[t.track_id] = box
    return at


def _mot_from_counts(fp, fn, ids, frag, gt_total, matched, iou_sum,
                     track_count, mt_count, ml_count) -> MotMetrics:
    if gt_total <= 0:
        raise MetricsError("no ground truth boxes to evaluate against")
    return MotMetrics(
        mota=1.0 - (fp + fn + ids) / gt_total,
        motp=iou_sum / matched if matched else 0.0,
        fp=fp, fn=fn, ids=ids, frag=frag,
        mt=100.0 * mt_count / track_count if track_count else 0.0,
        ml=100.0 * ml_count / track_count if track_count else 0.0,
        gt_total=gt_total, matched=matched, iou_sum=iou_sum,
        track_count=track_count, mt_count=mt_count, ml_count=ml_count,
    )


def clear_mot(
    gt: Sequence[Trajectory],
    pred: Sequence[Trajectory],
    iou_threshold: float = 0.5,
) -> MotMetrics:
    """CLEAR measures with persistent frame-to-frame correspondence.

    A match made once is kept while both tracks continue to overlap at or
    above the threshold, even when a fresher candidate overlaps more;
    remaining boxes are paired fresh by maximum total overlap. Switches
    compare against the ground-truth track's last known partner, so a gap
    does not reset identity.
    """
    gt_at = _index(gt, "ground-truth")
    pred_at = _index(pred, "predicted")
    frames = sorted(set(gt_at) | set(pred_at))

    corr: Dict[int, int] = {}
    last_known: Dict[int, int] = {}
    was_matched: Dict[int, bool] = {}
    present: Dict[int, int] = {g.track_id: 0 for g in gt}
    covered: Dict[int, int] = {g.track_id: 0 for g in gt}
    fp = fn = ids = frag = matched = 0
    iou_sum = 0.0

    for f in frames:
        g_boxes = gt_at.get(f, {})
        p_boxes = pred_at.get(f, {})
        new_corr: Dict[int, int] = {}
        for gid, pid in corr.items():
            if gid in g_boxes and pid in p_boxes:
                if iou(g_boxes[gid], p_boxes[pid]) >= iou_threshold:
                    new_corr[gid] = pid
        free_g = [gid for gid in sorted(g_boxes) if gid not in new_corr]
        taken = set(new_corr.values())
        free_p = [pid for pid in sorted(p_boxes) if pid not in taken]
        if free_g and free_p:
            cost = np.full((len(free_g), len(free_p)), np.inf)
            for i, gid in enumerate(free_g):
                for j, pid in enumerate(free_p):
                    ov = iou(g_boxes[gid], p_boxes[pid])
                    if ov >= iou_threshold:
                        cost[i, j] = -ov
            for i, j in hungarian(cost):
                new_corr[free_g[i]] = free_p[j]

        fp += len(p_boxes) - len(new_corr)
        fn += len(g_boxes) - len(new_corr)
        matched += len(new_corr)
        for gid, pid in new_corr.items():
            iou_sum += iou(g_boxes[gid], p_boxes[pid])
            if gid in last_known and last_known[gid] != pid:
                ids += 1
            last_known[gid] = pid
        for gid in g_boxes:
            is_matched = gid in new_corr
            if was_matched.get(gid, False) and not is_matched:
                frag += 1
            was_matched[gid] = is_matched
            present[gid] += 1
            covered[gid] += is_matched
        corr = new_corr

    mt_count = ml_count = 0
    for gid in present:
        coverage = covered[gid] / present[gid]
        mt_count += coverage >= 0.8
        ml_count += coverage <= 0.2
    return _mot_from_counts(
        fp, fn, ids, frag, sum(present.values()), matched, iou_sum,
        len(present), mt_count, ml_count,
    )


def _id_from_counts(idtp, gt_total, pred_total) -> IdMetrics:
    return IdMetrics(
        idf1=2.0 * idtp / (gt_total + pred_total) if gt_total + pred_total else 0.0,
        idp=idtp / pred_total if pred_total else 0.0,
        idr=idtp / gt_total if gt_total else 0.0,
        idtp=idtp, gt_total=gt_total, pred_total=pred_total,
    )


def id_metrics(
    gt: Sequence[Trajectory],
    pred: Sequence[Trajectory],
    iou_threshold: float = 0.5,
) -> IdMetrics:
    """Identity precision, recall, and F1 from the best global bijection.

    Each (gt, pred) pair is scored by how many frames they overlap at or
    above the threshold; one assignment maximizes the total, which becomes
    IDTP."""
    gt_at = _index(gt, "ground-truth")
    pred_at = _index(pred, "predicted")
    gt_ids = sorted(t.track_id for t in gt)
    pred_ids = sorted(t.track_id for t in pred)
    gt_total = sum(len(t.entries) for t in gt)
    pred_total = sum(len(t.entries) for t in pred)
    if not gt_ids or not pred_ids:
        return _id_from_counts(0, gt_total, pred_total)

    overlap = np.zeros((len(gt_ids), len(pred_ids)))
    g_pos = {gid: i for i, gid in enumerate(gt_ids)}
    p_pos = {pid: j for j, pid in enumerate(pred_ids)}
    for f in set(gt_at) & set(pred_at):
        for gid, gbox in gt_at[f].items():
            for pid, pbox in pred_at[f].items():
                if iou(gbox, pbox) >= iou_threshold:
                    overlap[g_pos[gid], p_pos[pid]] += 1
    idtp = 0
    for i, j in hungarian(-overlap):
        idtp += int(overlap[i, j])
    return _id_from_counts(idtp, gt_total, pred_total)


def evaluate(
    sequences: Sequence[Tuple[str, Sequence[Trajectory], Sequence[Trajectory]]],
    iou_threshold: float = 0.5,
) -> EvalReport:
    """Per-sequence measures plus tallies pooled into one overall row."""
    if not sequences:
        raise MetricsError("nothing to evaluate")
    results = []
    for name, gt, pred in sequences:
        results.append(SequenceResult(
            name=name,
            clear=clear_mot(gt, pred, iou_threshold),
            ident=id_metrics(gt, pred, iou_threshold),
        ))
    c = [r.clear for r in results]
    overall_clear = _mot_from_counts(
        sum(m.fp for m in c), sum(m.fn for m in c), sum(m.ids for m in c),
        sum(m.frag for m in c), sum(m.gt_total for m in c),
        sum(m.matched for m in c), sum(m.iou_sum for m in c),
        sum(m.track_count for m in c), sum(m.mt_count for m in c),
        sum(m.ml_count for m in c),
    )
    i = [r.ident for r in results]
    overall_ident = _id_from_counts(
        sum(m.idtp for m in i), sum(m.gt_total for m in i),
        sum(m.pred_total for m in i),
    )
    return EvalReport(
        sequences=tuple(results),
        overall_clear=overall_clear,
        overall_ident=overall_ident,
    )


_COLUMNS = ("MOTA", "MOTP", "FP", "FN", "IDF1", "IDP", "IDR",
            "IDS", "Frag", "MT", "ML")


def _row_values(clear: MotMetrics, ident: IdMetrics):
    return (clear.mota, clear.motp, clear.fp, clear.fn, ident.idf1,
            ident.idp, ident.idr, clear.ids, clear.frag, clear.mt, clear.ml)


def format_report(report: EvalReport) -> str:
    """Fixed-width text table, one row per sequence plus OVERALL."""
    name_w = max([len("OVERALL")] + [len(r.name) for r in report.sequences]) + 2
    header = f"{'sequence':<{name_w}}" + "".join(
        f"{c:>8}" for c in _COLUMNS
    )
    lines = [header]

    def fmt(name, clear, ident):
        mota, motp, fp, fn, idf1, idp, idr, ids, frag, mt, ml = \
            _row_values(clear, ident)
        return (
            f"{name:<{name_w}}"
            f"{mota:>8.3f}{motp:>8.3f}{fp:>8d}{fn:>8d}"
            f"{idf1:>8.3f}{idp:>8.3f}{idr:>8.3f}"
            f"{ids:>8d}{frag:>8d}{mt:>8.1f}{ml:>8.1f}"
        )

    for r in report.sequences:
        lines.append(fmt(r.name, r.clear, r.ident))
    lines.append(fmt("OVERALL", report.overall_clear, report.overall_ident))
    return "\n".join(lines) + "\n"


def write_metrics_csv(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sequence," + ",".join(_COLUMNS) + "\n")

        def row(name, clear, ident):
            mota, motp, fp, fn, idf1, idp, idr, ids, frag, mt, ml = \
                _row_values(clear, ident)
            fh.write(
                f"{name},{mota:.6f},{motp:.6f},{fp},{fn},"
                f"{idf1:.6f},{idp:.6f},{idr:.6f},{ids},{frag},"
                f"{mt:.2f},{ml:.2f}\n"
            )

        for r in report.sequences:
            row(r.name, r.clear, r.ident)
        row("OVERALL", report.overall_clear, report.overall_ident)
