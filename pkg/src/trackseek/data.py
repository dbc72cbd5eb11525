"""Data formats and synthetic scenario generation.

File formats (all little-endian, all stable across platforms):

* MOT CSV: ``frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z``.
  Written rows use conf 1, world coordinates -1, two-decimal fixed-point
  box values, sorted by (frame, id).
* Embedding binary: magic ``TSK1EMBD``, u32 version, u32 d_in, u32 n_rows,
  then per row u32 frame, u32 index-within-frame, d_in float64 values.
* Scenario bundle: a directory holding ``gt.txt``, ``det.txt``, ``emb.bin``
  and a ``meta.txt`` key/value file. For synthetic data the det.txt id
  column carries the generating identity (-1 for clutter) so training can
  recover identity labels after a round trip.

Randomness comes exclusively from numpy's Philox bit generator (a 64-bit
counter-based generator with published constants), so equal seeds give
byte-identical outputs on every platform.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
import struct
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import BBox, Detection, Trajectory


class DataError(ValueError):
    """Malformed input files or impossible generation settings."""


def rng_from_seed(seed: int) -> np.random.Generator:
    """The package-wide counter-based generator."""
    return np.random.Generator(np.random.Philox(seed))


# --------------------------------------------------------------- MOT CSV


@dataclass(frozen=True)
class MotRow:
    track_id: int
    box: BBox
    conf: float


def parse_mot(path, kind: str = "gt") -> Dict[int, List[MotRow]]:
    """Frame-indexed records from a MOT CSV file.

    ``kind="gt"`` requires positive integer ids; ``kind="det"`` accepts any
    id (detectors write -1). Malformed lines are collected and reported
    together with their line numbers in a single :class:`DataError`.
    """
    if kind not in ("gt", "det"):
        raise ValueError(f"kind must be 'gt' or 'det', got {kind!r}")
    frames: Dict[int, List[MotRow]] = {}
    bad: List[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) < 7:
                bad.append(f"line {lineno}: expected >= 7 fields, got {len(parts)}")
                continue
            try:
                frame = int(parts[0])
                tid = int(parts[1])
                left, top, w, h = (float(v) for v in parts[2:6])
                conf = float(parts[6])
            except ValueError:
                bad.append(f"line {lineno}: non-numeric field")
                continue
            if frame < 1:
                bad.append(f"line {lineno}: frame {frame} < 1")
                continue
            if kind == "gt" and tid < 1:
                bad.append(f"line {lineno}: gt id must be >= 1, got {tid}")
                continue
            if w <= 0 or h <= 0:
                bad.append(f"line {lineno}: non-positive box {w} x {h}")
                continue
            frames.setdefault(frame, []).append(MotRow(tid, BBox(left, top, w, h), conf))
    if bad:
        raise DataError(f"{path}: {len(bad)} malformed line(s): " + "; ".join(bad))
    return frames


def records_to_trajectories(frames: Dict[int, List[MotRow]]) -> Tuple[Trajectory, ...]:
    """Group frame-indexed gt records into per-id trajectories."""
    by_id: Dict[int, List[Tuple[int, BBox]]] = {}
    for frame in sorted(frames):
        seen = set()
        for row in frames[frame]:
            if row.track_id in seen:
                raise DataError(f"id {row.track_id} appears twice in frame {frame}")
            seen.add(row.track_id)
            by_id.setdefault(row.track_id, []).append((frame, row.box))
    return tuple(
        Trajectory(track_id=tid, entries=tuple(sorted(by_id[tid])))
        for tid in sorted(by_id)
    )


def write_mot(trajectories: Sequence[Trajectory], path) -> None:
    """MOT CSV with fixed two-decimal boxes, sorted by (frame, id)."""
    rows = []
    for tr in trajectories:
        for frame, box in tr.entries:
            rows.append((frame, tr.track_id, box))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", encoding="utf-8") as fh:
        for frame, tid, box in rows:
            fh.write(
                f"{frame},{tid},{box.left:.2f},{box.top:.2f},"
                f"{box.width:.2f},{box.height:.2f},1,-1,-1,-1\n"
            )


# ----------------------------------------------------------- embeddings


_EMB_MAGIC = b"TSK1EMBD"


def save_embeddings(table: Dict[Tuple[int, int], np.ndarray], d_in: int, path) -> None:
    """Binary embedding table keyed by (frame, index within frame)."""
    keys = sorted(table)
    chunks = [_EMB_MAGIC, struct.pack("<III", 1, d_in, len(keys))]
    for frame, index in keys:
        vec = np.asarray(table[(frame, index)], dtype="<f8")
        if vec.shape != (d_in,):
            raise DataError(
                f"embedding for ({frame}, {index}) has shape {vec.shape}, want ({d_in},)"
            )
        chunks.append(struct.pack("<II", frame, index))
        chunks.append(vec.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_embeddings(path) -> Tuple[int, Dict[Tuple[int, int], np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _EMB_MAGIC:
        raise DataError(f"{path}: bad embedding magic")
    if len(blob) < 20:
        raise DataError(f"{path}: truncated header")
    version, d_in, n_rows = struct.unpack("<III", blob[8:20])
    if version != 1:
        raise DataError(f"{path}: unsupported embedding version {version}")
    row_bytes = 8 + 8 * d_in
    if len(blob) != 20 + n_rows * row_bytes:
        raise DataError(f"{path}: expected {n_rows} rows, size mismatch")
    table: Dict[Tuple[int, int], np.ndarray] = {}
    off = 20
    for _ in range(n_rows):
        frame, index = struct.unpack("<II", blob[off:off + 8])
        vec = np.frombuffer(blob, dtype="<f8", count=d_in, offset=off + 8)
        table[(frame, index)] = np.array(vec, dtype=np.float64)
        off += row_bytes
    return d_in, table


# -------------------------------------------------------------- scenario


@dataclass(frozen=True)
class Scenario:
    """Ground truth plus detections-with-features for one sequence."""

    name: str
    frame_count: int
    d_in: int
    gt: Tuple[Trajectory, ...]
    detections: Dict[int, Tuple[Detection, ...]]

    def embedding_table(self) -> Dict[Tuple[int, int], np.ndarray]:
        return {
            (frame, i): det.feature
            for frame, dets in self.detections.items()
            for i, det in enumerate(dets)
        }

    def validate(self) -> None:
        ids = [tr.track_id for tr in self.gt]
        if len(set(ids)) != len(ids):
            raise DataError(f"{self.name}: duplicate gt track ids")
        for frame, dets in self.detections.items():
            if not (1 <= frame <= self.frame_count):
                raise DataError(f"{self.name}: detection frame {frame} out of range")
            for det in dets:
                if det.frame != frame:
                    raise DataError(f"{self.name}: detection frame mismatch at {frame}")
                if det.feature.shape != (self.d_in,):
                    raise DataError(
                        f"{self.name}: feature dim {det.feature.shape} != ({self.d_in},)"
                    )


def save_scenario(s: Scenario, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_mot(s.gt, out / "gt.txt")
    rows = []
    for frame in sorted(s.detections):
        for det in s.detections[frame]:
            tid = det.gt_identity if det.gt_identity is not None else -1
            rows.append((frame, tid, det.box, det.confidence))
    with open(out / "det.txt", "w", encoding="utf-8") as fh:
        for frame, tid, box, conf in rows:
            fh.write(
                f"{frame},{tid},{box.left:.2f},{box.top:.2f},"
                f"{box.width:.2f},{box.height:.2f},{conf:.4f},-1,-1,-1\n"
            )
    save_embeddings(s.embedding_table(), s.d_in, out / "emb.bin")
    with open(out / "meta.txt", "w", encoding="utf-8") as fh:
        fh.write(f"name = {s.name}\n")
        fh.write(f"frame_count = {s.frame_count}\n")
        fh.write(f"d_in = {s.d_in}\n")


def load_scenario(in_dir) -> Scenario:
    src = Path(in_dir)
    for needed in ("gt.txt", "det.txt", "emb.bin", "meta.txt"):
        if not (src / needed).exists():
            raise DataError(f"{src}: missing {needed}")
    meta = parse_kv_file(src / "meta.txt")
    try:
        name = meta["name"]
        frame_count = int(meta["frame_count"])
        d_in = int(meta["d_in"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{src}/meta.txt: {exc}") from exc
    gt = records_to_trajectories(parse_mot(src / "gt.txt", kind="gt"))
    emb_dim, table = load_embeddings(src / "emb.bin")
    if emb_dim != d_in:
        raise DataError(f"{src}: emb.bin dim {emb_dim} != meta d_in {d_in}")
    det_rows = parse_mot(src / "det.txt", kind="det")
    detections: Dict[int, Tuple[Detection, ...]] = {}
    for frame in sorted(det_rows):
        dets = []
        for i, row in enumerate(det_rows[frame]):
            key = (frame, i)
            if key not in table:
                raise DataError(f"{src}: no embedding for detection {key}")
            dets.append(Detection(
                frame=frame,
                box=row.box,
                confidence=row.conf,
                feature=table[key],
                gt_identity=row.track_id if row.track_id >= 1 else None,
            ))
        detections[frame] = tuple(dets)
    s = Scenario(name=name, frame_count=frame_count, d_in=d_in,
                 gt=gt, detections=detections)
    s.validate()
    return s


# ------------------------------------------------------------ generation


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic arena.

    Identities move at constant velocity with optional per-frame jitter,
    reflecting off the arena walls. Appearance anchors sit pairwise at
    least ``identity_separation`` apart; detection features are anchor
    plus isotropic noise, clutter features are drawn away from every
    anchor. ``crossing_rate`` steers what fraction of identities get
    paired onto deliberately intersecting paths.
    """

    n_identities: int = 8
    n_frames: int = 100
    arena: float = 400.0
    velocity_min: float = 1.0
    velocity_max: float = 4.0
    embedding_dim: int = 16
    identity_separation: float = 4.0
    appearance_noise: float = 0.4
    detection_noise: float = 0.5
    fp_rate: float = 0.05
    fn_rate: float = 0.05
    crossing_rate: float = 0.5
    seed: int = 0
    box_min: float = 16.0
    box_max: float = 32.0
    path_jitter: float = 0.25


def _place_anchors(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    sep = cfg.identity_separation
    anchors: List[np.ndarray] = []
    tries = 0
    while len(anchors) < cfg.n_identities:
        cand = rng.normal(0.0, max(sep, 1e-9), size=cfg.embedding_dim)
        if all(np.linalg.norm(cand - a) >= sep for a in anchors):
            anchors.append(cand)
        tries += 1
        if tries > 1000 * cfg.n_identities:
            raise DataError(
                f"cannot place {cfg.n_identities} anchors separated by {sep} "
                f"in {cfg.embedding_dim} dims"
            )
    return np.stack(anchors)


def _clutter_feature(rng: np.random.Generator, anchors: np.ndarray, sep: float) -> np.ndarray:
    center = anchors.mean(axis=0)
    for _ in range(100):
        cand = center + rng.normal(0.0, 2.0 * max(sep, 1e-9), size=anchors.shape[1])
        if np.min(np.linalg.norm(anchors - cand, axis=1)) >= sep:
            return cand
    direction = rng.normal(size=anchors.shape[1])
    direction /= np.linalg.norm(direction)
    return anchors[0] + 3.0 * sep * direction


def _reflect(value: float, lo: float, hi: float, vel: float) -> Tuple[float, float]:
    # fold the coordinate back into [lo, hi], flipping velocity per bounce
    span = hi - lo
    if span <= 0:
        return lo, vel
    while value < lo or value > hi:
        if value < lo:
            value = 2 * lo - value
            vel = -vel
        else:
            value = 2 * hi - value
            vel = -vel
    return value, vel


def _paths(rng: np.random.Generator, cfg: SynthConfig, sizes: np.ndarray) -> np.ndarray:
    """Center positions, shape (n_frames, n_identities, 2)."""
    n = cfg.n_identities
    centers = np.zeros((cfg.n_frames, n, 2))
    starts = np.zeros((n, 2))
    vels = np.zeros((n, 2))
    half = sizes / 2.0
    lo = half
    hi = cfg.arena - half

    n_pairs = int(round(cfg.crossing_rate * n / 2.0))
    paired = list(range(2 * n_pairs))
    for a, b in zip(paired[0::2], paired[1::2]):
        t_meet = int(rng.integers(cfg.n_frames // 3, 2 * cfg.n_frames // 3 + 1))
        point = rng.uniform(0.3 * cfg.arena, 0.7 * cfg.arena, size=2)
        for ident in (a, b):
            for _ in range(200):
                speed = rng.uniform(cfg.velocity_min, cfg.velocity_max)
                theta = rng.uniform(0.0, 2.0 * np.pi)
                v = speed * np.array([np.cos(theta), np.sin(theta)])
                start = point - v * (t_meet - 1)
                ts = np.arange(cfg.n_frames)[:, None]
                seg = start + v * ts
                if np.all(seg >= lo[ident]) and np.all(seg <= hi[ident]):
                    break
            else:
                start = rng.uniform(lo[ident], hi[ident])
                v = rng.uniform(cfg.velocity_min, cfg.velocity_max) * _unit(rng)
            starts[ident] = start
            vels[ident] = v
    for ident in range(2 * n_pairs, n):
        starts[ident] = rng.uniform(lo[ident], hi[ident])
        vels[ident] = rng.uniform(cfg.velocity_min, cfg.velocity_max) * _unit(rng)

    pos = starts.copy()
    vel = vels.copy()
    for t in range(cfg.n_frames):
        if t > 0:
            step_vec = vel.copy()
            if cfg.path_jitter > 0:
                step_vec = step_vec + rng.normal(0.0, cfg.path_jitter, size=(n, 2))
            pos = pos + step_vec
            for ident in range(n):
                for axis in range(2):
                    pos[ident, axis], vel[ident, axis] = _reflect(
                        pos[ident, axis], lo[ident, axis], hi[ident, axis], vel[ident, axis]
                    )
        centers[t] = pos
    return centers


def _unit(rng: np.random.Generator) -> np.ndarray:
    theta = rng.uniform(0.0, 2.0 * np.pi)
    return np.array([np.cos(theta), np.sin(theta)])


def synth_generate(cfg: SynthConfig, name: Optional[str] = None) -> Scenario:
    """Seeded synthetic scenario: gt trajectories plus noisy detections.

    Equal configs give identical scenarios down to the last bit; every
    detection carries a feature vector, real ones tagged with their
    generating identity and clutter left untagged.
    """
    if cfg.n_identities < 1 or cfg.n_frames < 1:
        raise DataError("need at least one identity and one frame")
    rng = rng_from_seed(cfg.seed)
    d = cfg.embedding_dim
    anchors = _place_anchors(rng, cfg)
    sizes = rng.uniform(cfg.box_min, cfg.box_max, size=(cfg.n_identities, 2))
    centers = _paths(rng, cfg, sizes)

    gt = []
    for ident in range(cfg.n_identities):
        entries = []
        for t in range(cfg.n_frames):
            cx, cy = centers[t, ident]
            w, h = sizes[ident]
            entries.append((t + 1, BBox(cx - w / 2, cy - h / 2, w, h)))
        gt.append(Trajectory(track_id=ident + 1, entries=tuple(entries)))

    detections: Dict[int, Tuple[Detection, ...]] = {}
    for t in range(cfg.n_frames):
        frame = t + 1
        dets: List[Detection] = []
        for ident in range(cfg.n_identities):
            if rng.uniform() < cfg.fn_rate:
                continue
            cx, cy = centers[t, ident] + rng.normal(0.0, cfg.detection_noise, 2)
            w, h = np.maximum(
                sizes[ident] + rng.normal(0.0, cfg.detection_noise / 2.0, 2), 2.0
            )
            conf = rng.uniform(0.85, 1.0)
            feature = anchors[ident] + rng.normal(0.0, cfg.appearance_noise, d)
            dets.append(Detection(
                frame=frame, box=BBox(cx - w / 2, cy - h / 2, w, h),
                confidence=conf, feature=feature, gt_identity=ident + 1,
            ))
        for _ in range(rng.poisson(cfg.fp_rate * cfg.n_identities)):
            w, h = rng.uniform(cfg.box_min, cfg.box_max, 2)
            cx, cy = rng.uniform([w / 2, h / 2], [cfg.arena - w / 2, cfg.arena - h / 2])
            conf = rng.uniform(0.3, 0.85)
            feature = _clutter_feature(rng, anchors, cfg.identity_separation)
            dets.append(Detection(
                frame=frame, box=BBox(cx - w / 2, cy - h / 2, w, h),
                confidence=conf, feature=feature, gt_identity=None,
            ))
        order = rng.permutation(len(dets))
        detections[frame] = tuple(dets[i] for i in order)

    s = Scenario(
        name=name or f"synth-{cfg.seed}",
        frame_count=cfg.n_frames,
        d_in=d,
        gt=tuple(gt),
        detections=detections,
    )
    s.validate()
    return s


# ----------------------------------------------------------------- clips


@dataclass(frozen=True)
class TrainingClip:
    """One gt subtrack plus per-frame distractor candidates."""

    source: str
    track_id: int
    start_frame: int
    gt_detections: Tuple[Detection, ...]
    candidates: Tuple[Tuple[Detection, ...], ...]

    @property
    def sort_key(self) -> Tuple[str, int, int]:
        return (self.source, self.track_id, self.start_frame)


def candidate_pool(
    scenario: Scenario, frame: int, track_id: int,
) -> Tuple[List[Detection], np.ndarray]:
    """Same-frame detections of other identities plus clutter, with
    nearness weights exp(-center distance / gt box diagonal)."""
    gt_det = None
    pool: List[Detection] = []
    for det in scenario.detections.get(frame, ()):
        if det.gt_identity == track_id:
            if gt_det is None:
                gt_det = det
        else:
            pool.append(det)
    if gt_det is None:
        raise DataError(f"track {track_id} has no detection in frame {frame}")
    gx, gy = gt_det.box.center
    scale = max(gt_det.box.diagonal, 1e-9)
    weights = np.array([
        np.exp(-np.hypot(d.box.center[0] - gx, d.box.center[1] - gy) / scale)
        for d in pool
    ])
    return pool, weights


def _track_detection(scenario: Scenario, frame: int, track_id: int) -> Optional[Detection]:
    for det in scenario.detections.get(frame, ()):
        if det.gt_identity == track_id:
            return det
    return None


def sample_clips(
    scenario: Scenario, n_length: int, c: int, seed: int, n_clips: int,
) -> List[TrainingClip]:
    """Seeded clip sampling: a gt subtrack of ``n_length`` consecutive
    detections plus ``c`` same-frame candidates per frame, preferring
    spatially near distractors."""
    if n_length < 2:
        raise DataError("clips need n_length >= 2")
    if c < 1:
        raise DataError("clips need at least one candidate per frame")
    rng = rng_from_seed(seed)

    by_track: Dict[int, List[int]] = {}
    for tr in scenario.gt:
        present = sorted(
            f for f in scenario.detections
            if _track_detection(scenario, f, tr.track_id) is not None
        )
        run_start = None
        prev = None
        for f in present + [None]:
            if run_start is not None and (f is None or f != prev + 1):
                run_len = prev - run_start + 1
                for off in range(run_len - n_length + 1):
                    by_track.setdefault(tr.track_id, []).append(run_start + off)
                run_start = None
            if f is not None and run_start is None:
                run_start = f
            prev = f
    if not by_track:
        raise DataError(
            f"{scenario.name}: no gt track has {n_length} consecutive detections"
        )

    # cycle tracks in shuffled order so every identity serves as the
    # positive chain once the draw count reaches the track count; uniform
    # window draws can starve an identity, which then only ever appears
    # as a negative
    order = sorted(by_track)
    order = [order[i] for i in rng.permutation(len(order))]

    clips = []
    for j in range(n_clips):
        track_id = order[j % len(order)]
        starts = by_track[track_id]
        start = starts[int(rng.integers(len(starts)))]
        gt_dets = []
        cand_rows = []
        for frame in range(start, start + n_length):
            gt_dets.append(_track_detection(scenario, frame, track_id))
            pool, weights = candidate_pool(scenario, frame, track_id)
            if not pool:
                raise DataError(
                    f"{scenario.name}: frame {frame} has no candidate detections"
                )
            cand_rows.append(tuple(draw_candidates(pool, weights, c, rng)))
        clips.append(TrainingClip(
            source=scenario.name,
            track_id=track_id,
            start_frame=start,
            gt_detections=tuple(gt_dets),
            candidates=tuple(cand_rows),
        ))
    return clips


def draw_candidates(
    pool: Sequence[Detection], weights: np.ndarray, c: int, rng: np.random.Generator,
) -> List[Detection]:
    p = weights / weights.sum()
    if len(pool) >= c:
        picks = rng.choice(len(pool), size=c, replace=False, p=p)
    else:
        picks = rng.choice(len(pool), size=c, replace=True, p=p)
    return [pool[int(i)] for i in picks]


# --------------------------------------------------------- key/value files


def parse_kv_file(path) -> Dict[str, str]:
    """Plain ``key = value`` lines; '#' starts a comment; blanks ignored."""
    out: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}: line {lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def config_from_mapping(cls, mapping: Dict[str, str], path="<config>"):
    """Build a dataclass from string key/values with field-type coercion."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in mapping.items():
        if key not in fields:
            raise DataError(f"{path}: unknown key {key!r} for {cls.__name__}")
        ftype = fields[key].type
        try:
            if ftype in ("int", int):
                kwargs[key] = int(raw)
            elif ftype in ("float", float):
                kwargs[key] = float(raw)
            elif ftype in ("bool", bool):
                if raw.lower() not in ("true", "false", "0", "1"):
                    raise ValueError(raw)
                kwargs[key] = raw.lower() in ("true", "1")
            else:
                kwargs[key] = raw
        except ValueError:
            raise DataError(f"{path}: bad value {raw!r} for {key}") from None
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise DataError(f"{path}: {exc}") from exc


def load_config(cls, path):
    return config_from_mapping(cls, parse_kv_file(path), path=path)


def write_config(cfg, path) -> None:
    """Dataclass instance to ``key = value`` lines, field order preserved.

    Float formatting uses str(), which round-trips exactly in python 3."""
    with open(path, "w", encoding="utf-8") as fh:
        for f in dataclasses.fields(cfg):
            fh.write(f"{f.name} = {getattr(cfg, f.name)}\n")
