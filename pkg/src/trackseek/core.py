"""Core domain types: boxes, detections, tracklets, trajectories.

Everything here is immutable. Trackers and the training loop build new
tracklets with :func:`extend` instead of mutating old ones, which is what
makes branch sharing in the search tree and in MHT hypothesis trees safe.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np


class FrameOrderError(ValueError):
    """A detection was appended with a frame index <= the tracklet's last."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, (left, top, width, height) in pixel coordinates."""

    left: float
    top: float
    width: float
    height: float

    def __post_init__(self) -> None:
        if not (self.width > 0.0 and self.height > 0.0):
            raise ValueError(
                f"box sides must be positive, got {self.width} x {self.height}"
            )

    @property
    def right(self) -> float:
        return self.left + self.width

    @property
    def bottom(self) -> float:
        return self.top + self.height

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (self.left + 0.5 * self.width, self.top + 0.5 * self.height)

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes. 0 when disjoint, 1 when identical."""
    iw = min(a.right, b.right) - max(a.left, b.left)
    if iw <= 0.0:
        return 0.0
    ih = min(a.bottom, b.bottom) - max(a.top, b.top)
    if ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True, eq=False)
class Detection:
    """One detector output: a box plus an appearance feature vector.

    ``gt_identity`` is the annotated identity for synthetic/ground-truth
    detections and None for clutter. Trackers never read it; it exists so the
    training loop can count identity transitions and tests can check results.
    Detections compare by object identity on purpose: two hypothesis branches
    conflict exactly when they contain the same detection instance.
    """

    frame: int
    box: BBox
    confidence: float
    feature: np.ndarray
    gt_identity: Optional[int] = None

    def __post_init__(self) -> None:
        if self.frame < 1:
            raise ValueError(f"frame indices are 1-based, got {self.frame}")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")
        feat = np.asarray(self.feature, dtype=np.float64)
        if feat.ndim != 1:
            raise ValueError(f"feature must be a vector, got shape {feat.shape}")
        feat.flags.writeable = False
        object.__setattr__(self, "feature", feat)


def _same_identity(a: Optional[int], b: Optional[int]) -> bool:
    # Absent identities are distinct pseudo-identities per occurrence, so a
    # pair only matches when both are present and equal.
    return a is not None and b is not None and a == b


def count_ids(identities: Sequence[Optional[int]]) -> int:
    """Number of adjacent identity transitions in a sequence.

    ``None`` stands for an unmatched or false-positive detection and acts as
    a fresh identity each time it appears, so [1, None, 1] has two
    transitions and [None, None] has one.
    """
    if len(identities) == 0:
        raise ValueError("identity sequence must be non-empty")
    return sum(
        0 if _same_identity(a, b) else 1
        for a, b in zip(identities, identities[1:])
    )


@dataclass(frozen=True, eq=False)
class Tracklet:
    """A frame-ordered run of detections with scoring bookkeeping.

    ``score`` is the scalar the encoder head produced the last time this
    exact tracklet was scored (None if never scored). ``ids_count`` is the
    number of identity transitions along the detections. ``encoder_cache``
    is an opaque handle owned by the encoder; it lets an extension re-use
    the shared prefix instead of re-running the recurrence.
    """

    detections: Tuple[Detection, ...]
    score: Optional[float] = None
    ids_count: int = 0
    encoder_cache: Optional[object] = None

    def __post_init__(self) -> None:
        if len(self.detections) == 0:
            raise ValueError("tracklet must contain at least one detection")
        frames = [d.frame for d in self.detections]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise FrameOrderError(f"frames must strictly increase, got {frames}")

    def __len__(self) -> int:
        return len(self.detections)

    @property
    def last(self) -> Detection:
        return self.detections[-1]

    @property
    def identities(self) -> Tuple[Optional[int], ...]:
        return tuple(d.gt_identity for d in self.detections)

    def with_score(self, score: float, cache: object) -> "Tracklet":
        return replace(self, score=score, encoder_cache=cache)


def make_tracklet(detections: Iterable[Detection]) -> Tracklet:
    dets = tuple(detections)
    t = Tracklet(detections=dets)
    if len(dets) > 1:
        t = replace(t, ids_count=count_ids([d.gt_identity for d in dets]))
    return t


def extend(tracklet: Tracklet, det: Detection) -> Tracklet:
    """New tracklet with ``det`` appended; the input is untouched.

    The extension's ids_count adds one transition unless the new detection
    carries the same (present) identity as the current tail. The score is
    cleared because it belongs to the shorter tracklet; the encoder cache is
    carried over so only the new step needs computing.
    """
    if det.frame <= tracklet.last.frame:
        raise FrameOrderError(
            f"cannot extend frame {tracklet.last.frame} with frame {det.frame}"
        )
    bump = 0 if _same_identity(tracklet.last.gt_identity, det.gt_identity) else 1
    return Tracklet(
        detections=tracklet.detections + (det,),
        score=None,
        ids_count=tracklet.ids_count + bump,
        encoder_cache=tracklet.encoder_cache,
    )


@dataclass(frozen=True)
class HypothesisSet:
    """Searched branches for one object plus the ground-truth branch.

    All branches share the same root detection. The gt branch is kept
    outside ``branches`` and is never pruned.
    """

    object_id: int
    branches: Tuple[Tracklet, ...]
    gt_branch: Optional[Tracklet] = None

    def __post_init__(self) -> None:
        roots = {id(b.detections[0]) for b in self.branches}
        if self.gt_branch is not None:
            roots.add(id(self.gt_branch.detections[0]))
        if len(roots) > 1:
            raise ValueError("all branches in a hypothesis set must share a root")


@dataclass(frozen=True)
class Trajectory:
    """An emitted track: (frame, box) pairs with strictly increasing frames."""

    track_id: int
    entries: Tuple[Tuple[int, BBox], ...]

    def __post_init__(self) -> None:
        frames = [f for f, _ in self.entries]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise FrameOrderError(f"trajectory frames must strictly increase: {frames}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def frames(self) -> Tuple[int, ...]:
        return tuple(f for f, _ in self.entries)

    def box_at(self, frame: int) -> Optional[BBox]:
        for f, b in self.entries:
            if f == frame:
                return b
        return None
