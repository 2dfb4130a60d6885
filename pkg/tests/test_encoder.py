import math

import numpy as np
import pytest

from structmlm.corpus import MlmBatch
from structmlm.encoder import (
    LABEL_IGNORE,
    AttentionPattern,
    ModelConfig,
    _backward_through_model,
    _forward_cached,
    backward,
    dense_reference_attention,
    forward,
    init_parameters,
    loss_and_grads,
    mlm_loss,
    pair_count,
    sparse_attention,
    zero_grads,
)
from structmlm.errors import NoMaskedPositionsError, SequenceTooLongError


def brute_force_pair_count(n, window, global_positions):
    g = set(global_positions)
    k = window // 2
    return sum(1 for i in range(n) for j in range(n) if abs(i - j) <= k or i in g or j in g)


class TestPairCount:
    def test_dense(self):
        assert pair_count(4, 6, []) == 16

    def test_diagonal(self):
        assert pair_count(5, 0, []) == 5

    def test_enumerated_example(self):
        assert pair_count(10, 4, [0]) == brute_force_pair_count(10, 4, [0])

    @pytest.mark.parametrize("n", [1, 2, 3, 7, 16, 33])
    @pytest.mark.parametrize("window", [0, 2, 4, 8])
    def test_matches_brute_force(self, n, window):
        rng = np.random.default_rng(n * 100 + window)
        for n_glob in (0, 1, 2):
            g = sorted(rng.choice(n, size=min(n_glob, n), replace=False).tolist())
            assert pair_count(n, window, g) == brute_force_pair_count(n, window, g)

    def test_linear_cost_bound(self):
        # pair_count / n bounded by window + 1 + 2g and near it for n >> window
        window, g_count = 16, 4
        ratios = {}
        for n in (256, 512, 1024, 2048):
            g = [0, n // 3, 2 * n // 3, n - 1]
            ratio = pair_count(n, window, g) / n
            assert ratio <= window + 1 + 2 * g_count
            ratios[n] = ratio
        ref = ratios[2048]
        assert all(abs(r - ref) / ref < 0.05 for r in ratios.values())


class TestSparseAttention:
    def test_identical_keys_give_uniform_rows(self):
        n = 7
        rng = np.random.default_rng(0)
        q = rng.normal(size=(n, 4))
        k = np.tile(rng.normal(size=(1, 4)), (n, 1))
        v = rng.normal(size=(n, 4))
        pattern = AttentionPattern(n, 2, (5,))
        _, weights = sparse_attention(q, k, v, pattern)
        allowed = pattern.allowed_mask()
        for i in range(n):
            row = weights[i][allowed[i]]
            assert np.allclose(row, 1.0 / allowed[i].sum(), atol=1e-12)

    def test_full_window_equals_dense(self):
        rng = np.random.default_rng(1)
        for n in (1, 2, 9, 24):
            q, k, v = rng.normal(size=(3, n, 8))
            window = 2 * (n - 1) if n > 1 else 0
            out_s, w_s = sparse_attention(q, k, v, AttentionPattern(n, window, ()))
            out_d, w_d = dense_reference_attention(q, k, v)
            assert np.abs(out_s - out_d).max() < 1e-10
            assert np.abs(w_s - w_d).max() < 1e-10

    def test_enumerated_allowed_set_row4(self):
        pattern = AttentionPattern(6, 2, (1,))
        rng = np.random.default_rng(2)
        q, k, v = rng.normal(size=(3, 6, 4))
        _, weights = sparse_attention(q, k, v, pattern)
        assert set(np.flatnonzero(weights[4] > 0)) == {1, 3, 4, 5}

    def test_single_allowed_position_gets_weight_one(self):
        rng = np.random.default_rng(3)
        q, k, v = rng.normal(size=(3, 5, 4))
        _, weights = sparse_attention(q, k, v, AttentionPattern(5, 0, ()))
        assert np.allclose(np.diag(weights), 1.0)

    def test_row_stochastic_and_structural_zeros(self):
        rng = np.random.default_rng(4)
        for trial in range(25):
            n = int(rng.integers(1, 30))
            window = 2 * int(rng.integers(0, 6))
            g = tuple(sorted(rng.choice(n, size=int(rng.integers(0, min(4, n) + 1)), replace=False).tolist()))
            q, k, v = rng.normal(size=(3, n, 8))
            _, weights = sparse_attention(q, k, v, AttentionPattern(n, window, g))
            allowed = AttentionPattern(n, window, g).allowed_mask()
            assert np.all(weights[~allowed] == 0.0)
            assert np.abs(weights.sum(axis=1) - 1.0).max() <= 1e-12

    def test_locality(self):
        # perturbing token j changes row i's output only if (i, j) is allowed
        rng = np.random.default_rng(5)
        n, j = 14, 9
        pattern = AttentionPattern(n, 4, (2,))
        q, k, v = rng.normal(size=(3, n, 6))
        base, _ = sparse_attention(q, k, v, pattern)
        k2, v2, q2 = k.copy(), v.copy(), q.copy()
        k2[j] += 0.5
        v2[j] -= 0.3
        q2[j] += 0.1
        pert, _ = sparse_attention(q2, k2, v2, pattern)
        allowed = pattern.allowed_mask()
        for i in range(n):
            changed = not np.allclose(base[i], pert[i], atol=1e-14)
            if not allowed[i, j] and i != j:
                assert not changed

    def test_permutation_consistency_of_global_set(self):
        # with window 0 the pattern is position-free: permuting inputs and
        # the global set together permutes outputs
        rng = np.random.default_rng(6)
        n = 10
        g = (1, 4)
        q, k, v = rng.normal(size=(3, n, 4))
        out, _ = sparse_attention(q, k, v, AttentionPattern(n, 0, g))
        perm = rng.permutation(n)
        inv = np.argsort(perm)
        g_perm = tuple(sorted(int(inv[p]) for p in g))
        out_p, _ = sparse_attention(q[perm], k[perm], v[perm], AttentionPattern(n, 0, g_perm))
        assert np.allclose(out_p, out[perm], atol=1e-12)

    def test_pattern_length_mismatch(self):
        q = np.zeros((4, 2))
        with pytest.raises(ValueError):
            sparse_attention(q, q, q, AttentionPattern(5, 0, ()))


class TestDenseReference:
    def test_single_token_weight_one(self):
        q = k = v = np.ones((1, 3))
        out, w = dense_reference_attention(q, k, v)
        assert w[0, 0] == 1.0
        assert np.allclose(out, v)

    def test_two_identical_tokens_split_evenly(self):
        q = k = v = np.ones((2, 3))
        _, w = dense_reference_attention(q, k, v)
        assert np.allclose(w, 0.5)


class TestMlmLoss:
    def test_near_one_hot_gives_near_zero(self):
        logits = np.zeros((3, 8))
        labels = np.array([2, LABEL_IGNORE, 5])
        logits[0, 2] = 200.0
        logits[2, 5] = 200.0
        assert mlm_loss(logits, labels) < 1e-12

    def test_uniform_gives_log_vocab(self):
        logits = np.zeros((4, 17))
        labels = np.array([0, 16, LABEL_IGNORE, 3])
        assert abs(mlm_loss(logits, labels) - math.log(17)) < 1e-12

    def test_hand_arithmetic(self):
        logits = np.log(np.array([[0.5, 0.5], [0.25, 0.75]]))
        labels = np.array([0, 0])
        expected = (math.log(2) + math.log(4)) / 2
        assert abs(mlm_loss(logits, labels) - expected) < 1e-12

    def test_no_masked_positions(self):
        with pytest.raises(NoMaskedPositionsError):
            mlm_loss(np.zeros((2, 4)), np.array([LABEL_IGNORE, LABEL_IGNORE]))


def _tiny_config(**kw):
    base = dict(n_layers=1, n_heads=2, d_model=8, d_ff=12, window=4,
                vocab_size=13, max_len=16)
    base.update(kw)
    return ModelConfig(**base)


class TestForward:
    def test_zero_params_give_uniform_logits(self):
        cfg = _tiny_config()
        params = init_parameters(cfg, 0)
        for name, arr in params.tensors.items():
            if not name.endswith("_scale"):
                arr[:] = 0.0
        logits, _ = forward(params, np.arange(6), np.zeros(6, dtype=np.uint8))
        assert np.allclose(logits, logits[0, 0])

    def test_all_global_equals_full_window(self):
        cfg = _tiny_config()
        params = init_parameters(cfg, 1)
        n = 10
        ids = np.arange(n) % cfg.vocab_size
        logits_glob, _ = forward(params, ids, np.ones(n, dtype=np.uint8))
        wide = ModelConfig(**{**cfg.to_dict(), "window": 2 * (n - 1)})
        params_wide = init_parameters(wide, 1)
        logits_wide, _ = forward(params_wide, ids, np.zeros(n, dtype=np.uint8))
        assert np.abs(logits_glob - logits_wide).max() < 1e-10

    def test_bitwise_deterministic(self):
        cfg = _tiny_config()
        params = init_parameters(cfg, 2)
        ids = np.arange(9)
        gmask = np.zeros(9, dtype=np.uint8)
        gmask[3] = 1
        a, _ = forward(params, ids, gmask)
        b, _ = forward(params, ids, gmask)
        assert a.tobytes() == b.tobytes()

    def test_sequence_too_long(self):
        cfg = _tiny_config(max_len=8)
        params = init_parameters(cfg, 0)
        with pytest.raises(SequenceTooLongError):
            forward(params, np.zeros(9, dtype=np.int64), np.zeros(9, dtype=np.uint8))

    def test_trace_rows_sum_to_one_with_exact_zeros(self):
        cfg = _tiny_config(n_layers=2)
        params = init_parameters(cfg, 3)
        n = 12
        gmask = np.zeros(n, dtype=np.uint8)
        gmask[[0, 7]] = 1
        _, trace = forward(params, np.arange(n) % cfg.vocab_size, gmask)
        allowed = AttentionPattern.from_global_mask(gmask, cfg.window).allowed_mask()
        for layer_weights in trace.layers:
            dense = layer_weights.to_dense()
            assert np.abs(dense.sum(axis=-1) - 1.0).max() <= 1e-12
            assert np.all(dense[:, ~allowed] == 0.0)

    def test_init_deterministic(self):
        cfg = _tiny_config()
        a = init_parameters(cfg, 7)
        b = init_parameters(cfg, 7)
        assert a.equals(b)


def _fd_gradcheck(cfg, n, seed, n_global, step=1e-5, tol=1e-4):
    rng = np.random.default_rng(seed)
    params = init_parameters(cfg, seed)
    ids = rng.integers(0, cfg.vocab_size, size=n)
    labels = np.full(n, LABEL_IGNORE)
    sel = rng.random(n) < 0.4
    sel[0] = True
    labels[sel] = rng.integers(0, cfg.vocab_size, size=int(sel.sum()))
    gmask = np.zeros(n, dtype=np.uint8)
    if n_global:
        gmask[rng.choice(n, size=n_global, replace=False)] = 1
    rows = [(ids, labels, gmask)]
    _, grads = loss_and_grads(params, rows)
    failures = {}
    for name, arr in params.tensors.items():
        fd = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            i = it.multi_index
            orig = arr[i]
            arr[i] = orig + step
            up, _ = loss_and_grads(params, rows)
            arr[i] = orig - step
            down, _ = loss_and_grads(params, rows)
            arr[i] = orig
            fd[i] = (up - down) / (2 * step)
            it.iternext()
        rel = np.linalg.norm(grads[name] - fd) / max(np.linalg.norm(grads[name]), np.linalg.norm(fd), 1e-12)
        if rel >= tol:
            failures[name] = rel
    return failures


class TestBackward:
    def test_finite_difference_shared_projections(self):
        assert _fd_gradcheck(_tiny_config(), n=9, seed=0, n_global=2) == {}

    def test_finite_difference_separate_projections_untied(self):
        cfg = _tiny_config(share_global_projections=False, tie_mlm_head=False)
        assert _fd_gradcheck(cfg, n=9, seed=1, n_global=2) == {}

    def test_finite_difference_no_globals(self):
        assert _fd_gradcheck(_tiny_config(), n=8, seed=2, n_global=0) == {}

    def test_untouched_vocab_row_zero_gradient(self):
        cfg = _tiny_config(tie_mlm_head=False)  # untied head isolates the embedding
        params = init_parameters(cfg, 0)
        ids = np.array([1, 2, 3, 1])
        labels = np.array([2, LABEL_IGNORE, LABEL_IGNORE, 2])
        gmask = np.zeros(4, dtype=np.uint8)
        _, grads = loss_and_grads(params, [(ids, labels, gmask)])
        untouched = [i for i in range(cfg.vocab_size) if i not in set(ids.tolist())]
        assert np.all(grads["tok_emb"][untouched] == 0.0)
        assert np.any(grads["tok_emb"][1] != 0.0)

    def test_gradients_linear_in_upstream(self):
        # doubling the loss gradient doubles every parameter gradient
        cfg = _tiny_config()
        params = init_parameters(cfg, 4)
        ids = np.arange(7)
        gmask = np.zeros(7, dtype=np.uint8)
        logits, cache, _ = _forward_cached(params, ids, gmask)
        dlogits = np.random.default_rng(0).normal(size=logits.shape)
        g1 = zero_grads(params)
        _backward_through_model(dlogits, params, cache, g1)
        g2 = zero_grads(params)
        _backward_through_model(2.0 * dlogits, params, cache, g2)
        for name in g1:
            assert np.allclose(g2[name], 2.0 * g1[name], atol=1e-12)

    def test_backward_batch_api(self):
        cfg = _tiny_config()
        params = init_parameters(cfg, 5)
        rng = np.random.default_rng(6)
        ids = rng.integers(0, cfg.vocab_size, size=(2, 8))
        labels = np.where(rng.random((2, 8)) < 0.4, ids, LABEL_IGNORE)
        labels[0, 0] = ids[0, 0]
        batch = MlmBatch(ids, labels, np.zeros((2, 8), dtype=np.uint8), rng_seed=0)
        grads = backward(params, batch)
        assert set(grads) == set(params.tensors)
        assert all(np.isfinite(g).all() for g in grads.values())

    def test_duplicated_row_same_mean_gradients(self):
        cfg = _tiny_config()
        params = init_parameters(cfg, 7)
        ids = np.arange(6)
        labels = np.array([1, LABEL_IGNORE, 3, LABEL_IGNORE, 5, LABEL_IGNORE])
        gmask = np.zeros(6, dtype=np.uint8)
        loss1, g1 = loss_and_grads(params, [(ids, labels, gmask)])
        loss2, g2 = loss_and_grads(params, [(ids, labels, gmask)] * 2)
        assert abs(loss1 - loss2) < 1e-15
        for name in g1:
            assert np.allclose(g1[name], g2[name], atol=1e-14)
