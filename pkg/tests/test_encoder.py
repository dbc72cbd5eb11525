"""Scorer tests: straight-line forward oracles, finite-difference gradients,
cache coherence, and checkpoint round-trips."""

import numpy as np
import pytest

from trackseek import (
    BBox,
    Detection,
    attend,
    backward,
    embed,
    extend,
    grad_check,
    init_params,
    load_checkpoint,
    make_tracklet,
    save_checkpoint,
    score,
    step,
)
from trackseek.encoder import (
    VARIANTS,
    CorruptCheckpointError,
    DimensionError,
    ModelParams,
    score_with_tape,
    sinusoidal_table,
    tensor_names,
    zero_grads,
)

D_IN, H = 3, 4


def det(frame, feat, identity=None):
    return Detection(frame=frame, box=BBox(0, 0, 10, 10), confidence=1.0,
                     feature=np.asarray(feat, float), gt_identity=identity)


def random_tracklet(rng, n, d_in=D_IN):
    dets = [det(k + 1, rng.normal(size=d_in)) for k in range(n)]
    return make_tracklet(dets)


def zeroed(variant="recurrent", d_in=D_IN, hidden=H):
    p = init_params(d_in, hidden, variant=variant, seed=0)
    for v in p.tensors.values():
        v[...] = 0.0
    return p


# ---------------------------------------------------------------- oracles


def naive_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def naive_forward(features, p):
    """Independent from-scratch scorer used to cross-check the library.

    Straight-line numpy, no caching, no shared code paths.
    """
    W, b = p.tensors["embed_w"], p.tensors["embed_b"]
    phis = [np.tanh(f @ W + b) for f in features]
    hw, hb = p.tensors["head_w"], p.tensors["head_b"]
    n = p.hidden
    if p.variant == "self_attention":
        table = sinusoidal_table(p.n_max, p.hidden)
        U = np.stack([phi + table[t] for t, phi in enumerate(phis)])
        Q, K, V = U @ p.tensors["attn_q"], U @ p.tensors["attn_k"], U @ p.tensors["attn_v"]
        S = Q @ K.T / np.sqrt(n)
        A = np.exp(S - S.max(axis=1, keepdims=True))
        A /= A.sum(axis=1, keepdims=True)
        y = (A @ V).mean(axis=0)
        return float(hw @ y + hb)
    h = np.zeros(n)
    c = np.zeros(n)
    hiddens = []
    for phi in phis:
        a = np.concatenate([phi, h]) @ p.tensors["cell_w"] + p.tensors["cell_b"]
        i, f = naive_sigmoid(a[:n]), naive_sigmoid(a[n:2 * n])
        g, o = np.tanh(a[2 * n:3 * n]), naive_sigmoid(a[3 * n:])
        c = f * c + i * g
        h = o * np.tanh(c)
        hiddens.append(h)
    if p.variant == "recurrent":
        return float(hw @ h + hb)
    dots = np.array([hj @ h for hj in hiddens])
    w = np.exp(dots - dots.max())
    w /= w.sum()
    ctx = sum(wj * hj for wj, hj in zip(w, hiddens))
    return float(hw @ ctx + hb)


# ---------------------------------------------------------------- pieces


class TestEmbed:
    def test_zero_params_give_zero_embedding(self):
        p = zeroed()
        assert np.all(embed(np.ones(D_IN), p) == 0.0)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(0)
        p = init_params(D_IN, H, seed=1)
        x = rng.normal(size=D_IN)
        expected = np.tanh(x @ p.tensors["embed_w"] + p.tensors["embed_b"])
        np.testing.assert_array_equal(embed(x, p), expected)

    def test_range_is_bounded(self):
        # mathematically open interval; float64 tanh saturates to exactly 1
        p = init_params(D_IN, H, seed=2)
        x = np.full(D_IN, 50.0)
        e = embed(x, p)
        assert np.all(np.abs(e) <= 1.0)

    def test_dimension_mismatch(self):
        p = init_params(D_IN, H, seed=0)
        with pytest.raises(DimensionError):
            embed(np.zeros(D_IN + 1), p)


class TestStep:
    def test_zero_params_halve_the_cell(self):
        # all gates sigmoid(0) = 1/2, candidate tanh(0) = 0:
        # cell' = 0.5 * cell, hidden' = 0.5 * tanh(cell')
        p = zeroed()
        h, c = step(np.zeros(H), np.zeros(H), 2.0 * np.ones(H), p)
        np.testing.assert_allclose(c, np.ones(H), atol=1e-15)
        np.testing.assert_allclose(h, 0.3807970779778824 * np.ones(H), atol=1e-15)

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(3)
        p = init_params(D_IN, H, seed=3)
        phi, h0, c0 = rng.normal(size=(3, H))
        h, c = step(phi, h0, c0, p)
        n = H
        a = np.concatenate([phi, h0]) @ p.tensors["cell_w"] + p.tensors["cell_b"]
        i, f = naive_sigmoid(a[:n]), naive_sigmoid(a[n:2 * n])
        g, o = np.tanh(a[2 * n:3 * n]), naive_sigmoid(a[3 * n:])
        np.testing.assert_allclose(c, f * c0 + i * g, atol=1e-14)
        np.testing.assert_allclose(h, o * np.tanh(f * c0 + i * g), atol=1e-14)

    def test_gates_bounded(self):
        rng = np.random.default_rng(4)
        p = init_params(D_IN, H, seed=4)
        h, c = step(rng.normal(size=H) * 100, rng.normal(size=H), rng.normal(size=H), p)
        assert np.all(np.isfinite(h)) and np.all(np.isfinite(c))
        assert np.all(np.abs(h) <= 1.0)


class TestAttend:
    def test_single_entry_history(self):
        h = np.array([1.0, -2.0, 0.5, 3.0])
        ctx, w = attend([h], h)
        np.testing.assert_array_equal(ctx, h)
        np.testing.assert_array_equal(w, [1.0])

    def test_equal_dots_give_uniform_weights(self):
        hist = [np.zeros(H), np.zeros(H), np.zeros(H)]
        ctx, w = attend(hist, np.ones(H))
        np.testing.assert_allclose(w, np.full(3, 1 / 3), atol=1e-15)
        np.testing.assert_allclose(ctx, np.zeros(H), atol=1e-15)

    def test_matches_direct_softmax(self):
        rng = np.random.default_rng(5)
        hist = list(rng.normal(size=(5, H)))
        q = rng.normal(size=H)
        ctx, w = attend(hist, q)
        dots = np.array([h @ q for h in hist])
        e = np.exp(dots - dots.max())
        expected_w = e / e.sum()
        np.testing.assert_allclose(w, expected_w, atol=1e-14)
        np.testing.assert_allclose(ctx, expected_w @ np.stack(hist), atol=1e-14)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(6)
        for n in (1, 2, 7):
            hist = list(rng.normal(size=(n, H)) * 10)
            _, w = attend(hist, rng.normal(size=H))
            assert w.sum() == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------- scoring


class TestScore:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_matches_naive_forward(self, variant):
        rng = np.random.default_rng(10)
        p = init_params(D_IN, H, variant=variant, seed=11)
        t = random_tracklet(rng, 6)
        raw, _ = score(t, p)
        assert raw == pytest.approx(naive_forward([d.feature for d in t.detections], p), abs=1e-12)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_deterministic(self, variant):
        rng = np.random.default_rng(12)
        p = init_params(D_IN, H, variant=variant, seed=13)
        t = random_tracklet(rng, 5)
        assert score(t, p)[0] == score(t, p)[0]

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_incremental_equals_from_scratch(self, variant):
        rng = np.random.default_rng(14)
        p = init_params(D_IN, H, variant=variant, seed=15)
        t = random_tracklet(rng, 1)
        for k in range(2, 8):
            _, t = score(t, p)  # prime the cache
            t = extend(t, det(k, rng.normal(size=D_IN)))
            incremental, _ = score(t, p)
            fresh, _ = score(make_tracklet(t.detections), p)
            assert abs(incremental - fresh) < 1e-10
            assert incremental == fresh  # same ops, bit-identical

    def test_stale_cache_from_other_params_is_ignored(self):
        rng = np.random.default_rng(16)
        p1 = init_params(D_IN, H, seed=17)
        p2 = init_params(D_IN, H, seed=18)
        t = random_tracklet(rng, 4)
        _, cached = score(t, p1)
        raw2, _ = score(cached, p2)
        assert raw2 == score(make_tracklet(t.detections), p2)[0]

    def test_other_tracklets_cannot_leak(self):
        rng = np.random.default_rng(19)
        p = init_params(D_IN, H, seed=20)
        t3 = random_tracklet(rng, 4)
        before, _ = score(t3, p)
        score(random_tracklet(rng, 5), p)
        score(random_tracklet(rng, 2), p)
        after, _ = score(t3, p)
        assert before == after

    def test_self_attention_respects_position_table_length(self):
        rng = np.random.default_rng(21)
        p = init_params(D_IN, H, variant="self_attention", n_max=3, seed=22)
        with pytest.raises(ValueError):
            score(random_tracklet(rng, 4), p)

    def test_position_encoding_breaks_permutation_symmetry(self):
        rng = np.random.default_rng(23)
        p = init_params(D_IN, H, variant="self_attention", seed=24)
        f1, f2 = rng.normal(size=(2, D_IN))
        a = make_tracklet([det(1, f1), det(2, f2)])
        b = make_tracklet([det(1, f2), det(2, f1)])
        assert score(a, p)[0] != score(b, p)[0]


# ---------------------------------------------------------------- gradients


def fd_gradient(loss_of_params, p, epsilon=1e-6):
    out = zero_grads(p)
    for name, tensor in p.tensors.items():
        flat = tensor.reshape(-1)
        gflat = out[name].reshape(-1)
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + epsilon
            hi = loss_of_params()
            flat[idx] = keep - epsilon
            lo = loss_of_params()
            flat[idx] = keep
            gflat[idx] = (hi - lo) / (2 * epsilon)
    return out


class TestBackward:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_matches_finite_differences_with_shared_prefix(self, variant):
        rng = np.random.default_rng(30)
        p = init_params(D_IN, H, variant=variant, seed=31)
        base = random_tracklet(rng, 3)
        _, base_cached, _ = score_with_tape(base, p)
        # two branches sharing the 3-step prefix, plus the prefix itself
        b1 = extend(base_cached, det(4, rng.normal(size=D_IN)))
        b2 = extend(base_cached, det(4, rng.normal(size=D_IN)))
        ups = [0.7, -1.3, 0.4]
        tapes = []
        for t in (b1, b2, base_cached):
            _, _, tape = score_with_tape(t, p)
            tapes.append(tape)
        grads = backward(tapes, ups, p)

        tracklets = [make_tracklet(b1.detections), make_tracklet(b2.detections),
                     make_tracklet(base.detections)]

        def loss():
            return sum(u * score(t, p)[0] for u, t in zip(ups, tracklets))

        fd = fd_gradient(loss, p)
        for name in grads:
            np.testing.assert_allclose(
                grads[name], fd[name], rtol=1e-5, atol=1e-7,
                err_msg=f"{variant}:{name}",
            )

    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(32)
        p = init_params(D_IN, H, seed=33)
        _, _, tape = score_with_tape(random_tracklet(rng, 4), p)
        grads = backward([tape], [0.0], p)
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_shared_prefix_accumulates_like_separate_tapes(self):
        rng = np.random.default_rng(34)
        p = init_params(D_IN, H, variant="recurrent_attention", seed=35)
        base = random_tracklet(rng, 2)
        _, cached, _ = score_with_tape(base, p)
        d4 = det(3, rng.normal(size=D_IN))
        d5 = det(3, rng.normal(size=D_IN))
        shared_tapes = []
        for d in (d4, d5):
            _, _, tape = score_with_tape(extend(cached, d), p)
            shared_tapes.append(tape)
        grads_shared = backward(shared_tapes, [1.0, 1.0], p)
        solo_tapes = []
        for d in (d4, d5):
            t = make_tracklet(base.detections + (d,))
            _, _, tape = score_with_tape(t, p)
            solo_tapes.append(tape)
        grads_solo = backward(solo_tapes, [1.0, 1.0], p)
        for name in grads_shared:
            np.testing.assert_allclose(grads_shared[name], grads_solo[name], atol=1e-12)

    def test_upstream_count_mismatch(self):
        rng = np.random.default_rng(36)
        p = init_params(D_IN, H, seed=37)
        _, _, tape = score_with_tape(random_tracklet(rng, 2), p)
        with pytest.raises(ValueError):
            backward([tape], [1.0, 2.0], p)


class TestGradCheck:
    def test_accepts_correct_gradients(self):
        rng = np.random.default_rng(40)
        p = init_params(D_IN, H, seed=41)
        t = random_tracklet(rng, 4)

        def loss_fn(q):
            raw, _, tape = score_with_tape(make_tracklet(t.detections), q)
            return raw, backward([tape], [1.0], q)

        assert grad_check(p, loss_fn, epsilon=1e-5) < 1e-6

    def test_flags_sabotaged_gradients(self):
        rng = np.random.default_rng(42)
        p = init_params(D_IN, H, seed=43)
        t = random_tracklet(rng, 4)

        def bad_loss_fn(q):
            raw, _, tape = score_with_tape(make_tracklet(t.detections), q)
            grads = backward([tape], [1.0], q)
            grads["head_w"] = grads["head_w"] * 1.5  # wrong on purpose
            return raw, grads

        assert grad_check(p, bad_loss_fn, epsilon=1e-5) > 1e-2

    def test_subsampling_is_seeded(self):
        rng = np.random.default_rng(44)
        p = init_params(D_IN, H, seed=45)
        t = random_tracklet(rng, 3)

        def loss_fn(q):
            raw, _, tape = score_with_tape(make_tracklet(t.detections), q)
            return raw, backward([tape], [1.0], q)

        a = grad_check(p, loss_fn, max_checks=10, seed=9)
        b = grad_check(p, loss_fn, max_checks=10, seed=9)
        assert a == b


# ---------------------------------------------------------------- params


class TestInitParams:
    def test_bounds_and_forget_bias(self):
        p = init_params(16, 32, seed=0)
        bound = 1 / np.sqrt(32)
        for name, tensor in p.tensors.items():
            if name == "cell_b":
                continue
            assert np.all(np.abs(tensor) <= bound), name
        np.testing.assert_array_equal(p.tensors["cell_b"][32:64], np.ones(32))

    def test_seeded_and_distinct(self):
        a = init_params(4, 8, seed=5)
        b = init_params(4, 8, seed=5)
        c = init_params(4, 8, seed=6)
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name], b.tensors[name])
        assert any(np.any(a.tensors[n] != c.tensors[n]) for n in a.tensors)

    def test_variant_tensor_sets(self):
        assert "attn_q" not in init_params(4, 8, variant="recurrent", seed=0).tensors
        assert "attn_q" in init_params(4, 8, variant="self_attention", seed=0).tensors

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            init_params(4, 8, variant="bidirectional", seed=0)


class TestCheckpoint:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_round_trip_exact(self, tmp_path, variant):
        p = init_params(5, 6, variant=variant, n_max=9, seed=7)
        path = tmp_path / "model.ckpt"
        save_checkpoint(p, path)
        q = load_checkpoint(path)
        assert (q.d_in, q.hidden, q.n_max, q.variant) == (5, 6, 9, variant)
        assert set(q.tensors) == set(tensor_names(variant))
        for name in p.tensors:
            assert q.tensors[name].shape == p.tensors[name].shape
            np.testing.assert_array_equal(p.tensors[name], q.tensors[name])
        # identical bytes on re-save
        path2 = tmp_path / "model2.ckpt"
        save_checkpoint(q, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_scores_survive_round_trip(self, tmp_path):
        rng = np.random.default_rng(50)
        p = init_params(D_IN, H, variant="recurrent_attention", seed=51)
        t = random_tracklet(rng, 5)
        save_checkpoint(p, tmp_path / "m.ckpt")
        q = load_checkpoint(tmp_path / "m.ckpt")
        assert score(t, p)[0] == score(make_tracklet(t.detections), q)[0]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        p = init_params(4, 4, seed=0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(p, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)

    def test_trailing_garbage(self, tmp_path):
        p = init_params(4, 4, seed=0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(p, path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(path)


class TestPositionTable:
    def test_shape_and_first_row(self):
        table = sinusoidal_table(8, 6)
        assert table.shape == (8, 6)
        # position 0: sin(0)=0 on even channels, cos(0)=1 on odd ones
        np.testing.assert_array_equal(table[0, 0::2], np.zeros(3))
        np.testing.assert_array_equal(table[0, 1::2], np.ones(3))

    def test_rows_distinct(self):
        table = sinusoidal_table(8, 16)
        for a in range(8):
            for b in range(a + 1, 8):
                assert np.linalg.norm(table[a] - table[b]) > 1e-3
