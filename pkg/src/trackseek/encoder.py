"""Tracklet scorers: recurrent (LSTM), recurrent + attention, self-attention.

A scorer maps a tracklet (sequence of detection feature vectors) to one raw
real score. Three variants share the same embedding and head:

* ``recurrent``: LSTM over the embedded features, linear head on the final
  hidden state.
* ``recurrent_attention``: same LSTM, but the head reads a dot-product
  attention context over all hidden states including the current one.
* ``self_attention``: no recurrence; embedded features plus sinusoidal
  position encodings go through one single-head scaled dot-product
  self-attention layer, the head reads the mean-pooled output.

Forward passes are recorded on an immutable tree of step nodes so that
tracklets sharing a prefix (search branches, MHT hypotheses) share both the
forward computation and, via :func:`backward`, the gradient accumulation.
All gradients are derived by hand for exactly these architectures; there is
no general-purpose autodiff here, which is why :func:`grad_check` exists.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import Detection, Tracklet
from .numerics import logistic, softmax

VARIANTS = ("recurrent", "recurrent_attention", "self_attention")

#: One gradient array per trainable tensor, keyed and shaped like
#: ``ModelParams.tensors``.
GradientSet = Dict[str, np.ndarray]


class DimensionError(ValueError):
    """Feature vector length does not match the model's input size."""


class CorruptCheckpointError(ValueError):
    """Checkpoint bytes failed magic/shape/version validation."""


def sinusoidal_table(n_max: int, hidden: int) -> np.ndarray:
    """Fixed (n_max, hidden) sin/cos position encodings; not trained."""
    pos = np.arange(n_max, dtype=np.float64)[:, None]
    i = np.arange(hidden, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / hidden)
    table = np.empty((n_max, hidden), dtype=np.float64)
    table[:, 0::2] = np.sin(angle[:, 0::2])
    table[:, 1::2] = np.cos(angle[:, 1::2])
    return table


@dataclass(frozen=True)
class ModelParams:
    """Scorer configuration plus its trainable tensors.

    ``tensors`` holds the trainable weights. The sinusoidal position table
    is a derived buffer, rebuilt from the config, never updated by the
    optimizer and not part of gradient sets.
    """

    d_in: int
    hidden: int
    n_max: int
    variant: str
    tensors: Dict[str, np.ndarray]
    pos_table: np.ndarray = field(repr=False, default=None)

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.pos_table is None:
            object.__setattr__(self, "pos_table", sinusoidal_table(self.n_max, self.hidden))

    def copy(self) -> "ModelParams":
        return ModelParams(
            d_in=self.d_in,
            hidden=self.hidden,
            n_max=self.n_max,
            variant=self.variant,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            pos_table=self.pos_table,
        )


def tensor_names(variant: str) -> Tuple[str, ...]:
    base = ("embed_w", "embed_b", "cell_w", "cell_b", "head_w", "head_b")
    if variant == "self_attention":
        return base + ("attn_q", "attn_k", "attn_v")
    return base


def init_params(
    d_in: int, hidden: int, variant: str = "recurrent_attention",
    n_max: int = 8, seed: int = 0,
) -> ModelParams:
    """Seeded uniform(-1/sqrt(H), 1/sqrt(H)) init, forget-gate bias set to 1."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    rng = np.random.Generator(np.random.Philox(seed))
    bound = 1.0 / np.sqrt(hidden)
    shapes = {
        "embed_w": (d_in, hidden),
        "embed_b": (hidden,),
        "cell_w": (2 * hidden, 4 * hidden),
        "cell_b": (4 * hidden,),
        "head_w": (hidden,),
        "head_b": (),
    }
    if variant == "self_attention":
        shapes.update({
            "attn_q": (hidden, hidden),
            "attn_k": (hidden, hidden),
            "attn_v": (hidden, hidden),
        })
    tensors = {
        name: rng.uniform(-bound, bound, size=shapes[name])
        for name in tensor_names(variant)
    }
    # Gate order along the 4H axis is (input, forget, candidate, output).
    tensors["cell_b"][hidden:2 * hidden] = 1.0
    return ModelParams(d_in=d_in, hidden=hidden, n_max=n_max, variant=variant, tensors=tensors)


def zero_grads(p: ModelParams) -> GradientSet:
    return {k: np.zeros_like(v) for k, v in p.tensors.items()}


def embed(x: np.ndarray, p: ModelParams) -> np.ndarray:
    """tanh-squashed affine embedding of one raw feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.d_in,):
        raise DimensionError(f"expected feature of shape ({p.d_in},), got {x.shape}")
    return np.tanh(x @ p.tensors["embed_w"] + p.tensors["embed_b"])


def step(
    phi: np.ndarray, hidden: np.ndarray, cell: np.ndarray, p: ModelParams,
) -> Tuple[np.ndarray, np.ndarray]:
    """One LSTM step; returns (hidden', cell'). Cheap functional form used by
    tests and one-off callers; :func:`score` records the taped version."""
    h, c, _ = _lstm_step(phi, hidden, cell, p)
    return h, c


def _gates(phi, h_prev, p):
    H = p.hidden
    z = np.concatenate([phi, h_prev])
    a = z @ p.tensors["cell_w"] + p.tensors["cell_b"]
    i = logistic(a[:H])
    f = logistic(a[H:2 * H])
    g = np.tanh(a[2 * H:3 * H])
    o = logistic(a[3 * H:])
    return i, f, g, o


def _lstm_step(phi, h_prev, c_prev, p):
    i, f, g, o = _gates(phi, h_prev, p)
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, (i, f, g, o, tanh_c)


def attend(
    history: Sequence[np.ndarray], query: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Dot-product attention of ``query`` over ``history``.

    The caller includes the current hidden state as the last history entry,
    so the current step attends over itself too. Returns (context, weights).
    """
    if len(history) == 0:
        raise ValueError("attention needs a non-empty history")
    hist = np.asarray(history, dtype=np.float64)
    weights = softmax(hist @ np.asarray(query, dtype=np.float64))
    return weights @ hist, weights


class _StepNode:
    """One consumed detection in the shared forward tree.

    For recurrent variants the node carries the post-step (h, c) plus every
    activation the LSTM backward needs. For self_attention it carries the
    position-encoded embedding. ``owner`` ties the cache to the tensor dict
    it was computed with; a mismatch means stale cache and forces recompute.
    """

    __slots__ = (
        "parent", "depth", "owner", "x", "phi",
        "h", "c", "i", "f", "g", "o", "tanh_c", "u",
    )

    def __init__(self, parent, depth, owner, x, phi):
        self.parent = parent
        self.depth = depth
        self.owner = owner
        self.x = x
        self.phi = phi
        self.h = self.c = self.i = self.f = self.g = self.o = self.tanh_c = None
        self.u = None


@dataclass(frozen=True)
class ScoreTape:
    """Forward record of one scoring call, consumed by :func:`backward`."""

    variant: str
    nodes: Tuple[_StepNode, ...]
    raw: float
    # recurrent_attention readout
    alpha: Optional[np.ndarray] = None
    ctx: Optional[np.ndarray] = None
    # self_attention readout
    U: Optional[np.ndarray] = None
    Q: Optional[np.ndarray] = None
    K: Optional[np.ndarray] = None
    V: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None


def _advance(node: Optional[_StepNode], det: Detection, p: ModelParams) -> _StepNode:
    phi = embed(det.feature, p)
    depth = 1 if node is None else node.depth + 1
    new = _StepNode(node, depth, p.tensors, det.feature, phi)
    if p.variant == "self_attention":
        if depth > p.n_max:
            raise ValueError(
                f"tracklet length {depth} exceeds position table length {p.n_max}"
            )
        new.u = phi + p.pos_table[depth - 1]
    else:
        H = p.hidden
        h_prev = np.zeros(H) if node is None else node.h
        c_prev = np.zeros(H) if node is None else node.c
        h, c, (i, f, g, o, tanh_c) = _lstm_step(phi, h_prev, c_prev, p)
        new.h, new.c = h, c
        new.i, new.f, new.g, new.o, new.tanh_c = i, f, g, o, tanh_c
    return new


def _chain(tip: _StepNode) -> List[_StepNode]:
    nodes = []
    n = tip
    while n is not None:
        nodes.append(n)
        n = n.parent
    nodes.reverse()
    return nodes


def score_with_tape(t: Tracklet, p: ModelParams) -> Tuple[float, Tracklet, ScoreTape]:
    """Score ``t``, re-using its encoder cache when valid.

    Only detections beyond the cached depth are pushed through the encoder,
    so extending a scored tracklet by one detection costs one step plus the
    readout. Results are bit-identical to a from-scratch pass because the
    incremental path runs the very same operations.
    """
    node = t.encoder_cache
    if not isinstance(node, _StepNode) or node.owner is not p.tensors or node.depth > len(t):
        node = None
    start = 0 if node is None else node.depth
    for det in t.detections[start:]:
        node = _advance(node, det, p)
    nodes = tuple(_chain(node))

    head_w, head_b = p.tensors["head_w"], p.tensors["head_b"]
    if p.variant == "recurrent":
        raw = float(head_w @ node.h + head_b)
        tape = ScoreTape(variant=p.variant, nodes=nodes, raw=raw)
    elif p.variant == "recurrent_attention":
        hist = [n.h for n in nodes]
        ctx, alpha = attend(hist, node.h)
        raw = float(head_w @ ctx + head_b)
        tape = ScoreTape(variant=p.variant, nodes=nodes, raw=raw, alpha=alpha, ctx=ctx)
    else:
        U = np.stack([n.u for n in nodes])
        Q = U @ p.tensors["attn_q"]
        K = U @ p.tensors["attn_k"]
        V = U @ p.tensors["attn_v"]
        A = softmax(Q @ K.T / np.sqrt(p.hidden), axis=-1)
        Y = A @ V
        y = Y.mean(axis=0)
        raw = float(head_w @ y + head_b)
        tape = ScoreTape(
            variant=p.variant, nodes=nodes, raw=raw, U=U, Q=Q, K=K, V=V, A=A, y=y,
        )
    return raw, t.with_score(raw, node), tape


def score(t: Tracklet, p: ModelParams) -> Tuple[float, Tracklet]:
    """Raw (pre-sigmoid) score of a tracklet plus the tracklet with cache."""
    raw, cached, _ = score_with_tape(t, p)
    return raw, cached


def backward(
    tapes: Sequence[ScoreTape],
    loss_grads: Sequence[float],
    p: ModelParams,
) -> GradientSet:
    """Accumulate d(sum_k loss_grads[k] * raw_k)/d(params) over all tapes.

    Nodes shared between tapes (search branches with a common prefix) are
    backpropagated once: readout gradients land in per-node accumulators,
    then one reverse-depth sweep walks the recurrence.
    """
    if len(tapes) != len(loss_grads):
        raise ValueError("need exactly one upstream gradient per tape")
    grads = zero_grads(p)
    H = p.hidden
    head_w = p.tensors["head_w"]

    # accumulators keyed by node identity, bucketed by depth so the sweep can
    # keep registering parents below the depth currently being processed
    acc: Dict[int, List] = {}
    node_of: Dict[int, _StepNode] = {}
    by_depth: Dict[int, List[int]] = {}

    def _bump(node, dh=None, dc=None, du=None):
        key = id(node)
        if key not in acc:
            acc[key] = [np.zeros(H), np.zeros(H), np.zeros(H)]
            node_of[key] = node
            by_depth.setdefault(node.depth, []).append(key)
        if dh is not None:
            acc[key][0] += dh
        if dc is not None:
            acc[key][1] += dc
        if du is not None:
            acc[key][2] += du

    for tape, up in zip(tapes, loss_grads):
        if up == 0.0:
            continue
        tip = tape.nodes[-1]
        if tape.variant == "recurrent":
            grads["head_w"] += up * tip.h
            grads["head_b"] += up
            _bump(tip, dh=up * head_w)
        elif tape.variant == "recurrent_attention":
            grads["head_w"] += up * tape.ctx
            grads["head_b"] += up
            dctx = up * head_w
            hist = np.stack([n.h for n in tape.nodes])
            alpha = tape.alpha
            dalpha = hist @ dctx
            ddots = alpha * (dalpha - float(alpha @ dalpha))
            dquery = hist.T @ ddots
            dhist = np.outer(alpha, dctx) + np.outer(ddots, tip.h)
            for n, dh_n in zip(tape.nodes, dhist):
                _bump(n, dh=dh_n)
            _bump(tip, dh=dquery)
        else:
            grads["head_w"] += up * tape.y
            grads["head_b"] += up
            T = len(tape.nodes)
            dy = up * head_w
            dY = np.tile(dy / T, (T, 1))
            dA = dY @ tape.V.T
            dV = tape.A.T @ dY
            row_dot = np.sum(tape.A * dA, axis=1, keepdims=True)
            dS = tape.A * (dA - row_dot)
            scale = 1.0 / np.sqrt(H)
            dQ = dS @ tape.K * scale
            dK = dS.T @ tape.Q * scale
            grads["attn_q"] += tape.U.T @ dQ
            grads["attn_k"] += tape.U.T @ dK
            grads["attn_v"] += tape.U.T @ dV
            dU = (
                dQ @ p.tensors["attn_q"].T
                + dK @ p.tensors["attn_k"].T
                + dV @ p.tensors["attn_v"].T
            )
            for n, du_n in zip(tape.nodes, dU):
                _bump(n, du=du_n)

    cell_w = p.tensors["cell_w"]
    max_depth = max(by_depth) if by_depth else 0
    for depth in range(max_depth, 0, -1):
        # the list can grow while parents register, but only at lower depths
        keys = by_depth.get(depth, [])
        for key in keys:
            node = node_of[key]
            dh, dc, du = acc[key]
            if p.variant == "self_attention":
                dphi = du
            else:
                do = dh * node.tanh_c
                dc_tot = dc + dh * node.o * (1.0 - node.tanh_c ** 2)
                c_prev = np.zeros(H) if node.parent is None else node.parent.c
                h_prev = np.zeros(H) if node.parent is None else node.parent.h
                df = dc_tot * c_prev
                di = dc_tot * node.g
                dg = dc_tot * node.i
                dc_prev = dc_tot * node.f
                da = np.concatenate([
                    di * node.i * (1.0 - node.i),
                    df * node.f * (1.0 - node.f),
                    dg * (1.0 - node.g ** 2),
                    do * node.o * (1.0 - node.o),
                ])
                z = np.concatenate([node.phi, h_prev])
                grads["cell_w"] += np.outer(z, da)
                grads["cell_b"] += da
                dz = cell_w @ da
                dphi = dz[:H]
                if node.parent is not None:
                    _bump(node.parent, dh=dz[H:], dc=dc_prev)
            da_e = dphi * (1.0 - node.phi ** 2)
            grads["embed_w"] += np.outer(node.x, da_e)
            grads["embed_b"] += da_e
    return grads


def grad_check(
    p: ModelParams,
    loss_fn: Callable[[ModelParams], Tuple[float, GradientSet]],
    epsilon: float = 1e-5,
    max_checks: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn`` must be deterministic in the params. When the model has more
    than ``max_checks`` scalar parameters, a seeded random subsample is
    checked instead of every coordinate. Relative error uses a small guard
    so coordinates where both gradients vanish compare on absolute terms.
    """
    _, grads = loss_fn(p)
    coords = []
    for name in sorted(p.tensors):
        n = p.tensors[name].size
        coords.extend((name, i) for i in range(n))
    if max_checks is not None and len(coords) > max_checks:
        rng = np.random.Generator(np.random.Philox(seed))
        picked = rng.choice(len(coords), size=max_checks, replace=False)
        coords = [coords[int(i)] for i in sorted(picked)]

    work = p.copy()
    worst = 0.0
    for name, flat_idx in coords:
        tensor = work.tensors[name]
        flat = tensor.reshape(-1)
        keep = flat[flat_idx]
        flat[flat_idx] = keep + epsilon
        hi, _ = loss_fn(work)
        flat[flat_idx] = keep - epsilon
        lo, _ = loss_fn(work)
        flat[flat_idx] = keep
        fd = (hi - lo) / (2.0 * epsilon)
        an = grads[name].reshape(-1)[flat_idx]
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
        if rel > worst:
            worst = rel
    return worst


_MAGIC = b"TSK1CKPT"
_VARIANT_CODE = {name: i for i, name in enumerate(VARIANTS)}


def save_checkpoint(p: ModelParams, path) -> None:
    """Self-describing little-endian binary: config header, then named tensors."""
    chunks = [_MAGIC, struct.pack("<IIIIB3x", 1, p.d_in, p.hidden, p.n_max,
                                  _VARIANT_CODE[p.variant])]
    names = tensor_names(p.variant)
    chunks.append(struct.pack("<I", len(names)))
    for name in names:
        # asarray keeps 0-d tensors 0-d (ascontiguousarray would promote them)
        arr = np.asarray(p.tensors[name], dtype="<f8")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q" if arr.ndim else "<0Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CorruptCheckpointError(f"{path}: truncated at byte {off}")
        out = blob[off:off + n]
        off += n
        return out

    if take(8) != _MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic")
    header_fmt = "<IIIIB3x"
    version, d_in, hidden, n_max, code = struct.unpack(
        header_fmt, take(struct.calcsize(header_fmt))
    )
    if version != 1:
        raise CorruptCheckpointError(f"{path}: unsupported version {version}")
    try:
        variant = VARIANTS[code]
    except IndexError:
        raise CorruptCheckpointError(f"{path}: unknown variant code {code}") from None
    (n_tensors,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        tensors[name] = np.array(data, dtype=np.float64)
    if off != len(blob):
        raise CorruptCheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    expected = set(tensor_names(variant))
    if set(tensors) != expected:
        raise CorruptCheckpointError(
            f"{path}: tensor set {sorted(tensors)} != expected {sorted(expected)}"
        )
    return ModelParams(d_in=d_in, hidden=hidden, n_max=n_max, variant=variant, tensors=tensors)
