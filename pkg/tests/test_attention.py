import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from interagent import attention as at
from interagent import numerics as nx
from interagent.errors import ConfigError
from interagent.numerics import Tensor


def naive_mha(q_src, kv_src, p):
    """Per-head loop oracle."""
    WQ, WK, WV, WO = (t.data for t in (p.W_Q, p.W_K, p.W_V, p.W_O))
    H, dh = p.heads, p.head_dim
    heads = []
    for h in range(H):
        sl = slice(h * dh, (h + 1) * dh)
        out = np.zeros((q_src.shape[0], dh))
        for i in range(q_src.shape[0]):
            q = q_src[i] @ WQ[:, sl]
            logits = np.array([q @ (kv_src[j] @ WK[:, sl]) / np.sqrt(dh) for j in range(kv_src.shape[0])])
            w = np.exp(logits - logits.max())
            w /= w.sum()
            for j in range(kv_src.shape[0]):
                out[i] += w[j] * (kv_src[j] @ WV[:, sl])
        heads.append(out)
    return np.concatenate(heads, axis=1) @ WO


def naive_sparse(f, edges, p, ratio, mode="edge", J=3, group="other"):
    """Brute force: per head, softmax over its edge chunk, keep top-k (or top groups), no renorm."""
    WQ, WK, WV, WO = (t.data for t in (p.W_Q, p.W_K, p.W_V, p.W_O))
    H, dh, d = p.heads, p.head_dim, p.d_model
    E = edges.shape[0]
    per = -(-E // H)
    padded = np.zeros((per * H, 3))
    padded[:E] = edges
    out = np.zeros((f.shape[0], d))
    for h in range(H):
        sl = slice(h * dh, (h + 1) * dh)
        cols = list(range(h * per, (h + 1) * per))
        for i in range(f.shape[0]):
            q = f[i] @ WQ[:, sl]
            logits = np.array([q @ (padded[c] @ WK[:, sl]) / np.sqrt(d) for c in cols])
            a = np.exp(logits - logits.max())
            a /= a.sum()
            if mode == "edge":
                k = max(1, int(np.floor(ratio * per + 0.5)))
                ranked = sorted(range(per), key=lambda c: (-a[c], c))
                keep = set(ranked[:k])
            else:
                unit = {}
                for c_local, c in enumerate(cols):
                    u = c // J if group == "other" else (c // (J * J), c % J)
                    unit.setdefault(u, []).append(c_local)
                units = list(unit.values())
                k = max(1, int(np.floor(ratio * len(units) + 0.5)))
                ranked = sorted(range(len(units)), key=lambda u: (-sum(a[c] for c in units[u]), units[u][0]))
                keep = {c for u in ranked[:k] for c in units[u]}
            for c_local in keep:
                out[i, sl] += a[c_local] * (padded[cols[c_local]] @ WV[:, sl])
    return out @ WO


def params(rng, d=8, d_kv=3, H=2):
    return at.init_attn(rng, d, d_kv, H)


def test_mha_single_token_returns_value():
    d = 4
    I = np.eye(d)
    p = at.AttnParams(*(Tensor(I) for _ in range(4)), heads=2)
    x = np.array([[0.3, -1.0, 2.0, 0.5]])
    assert np.abs(at.multi_head_attention(Tensor(x), Tensor(x), p).data - x).max() < 1e-15


def test_mha_identical_keys_average_values():
    d = 2
    I = np.eye(d)
    WV = Tensor(np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    WK = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]))
    p = at.AttnParams(Tensor(I), WK, WV, Tensor(I), heads=1)
    kv = np.array([[1.0, 2.0, 4.0, -2.0], [1.0, 2.0, 0.0, 6.0]])
    out = at.multi_head_attention(Tensor(np.array([[0.5, 0.1]])), Tensor(kv), p).data
    assert np.abs(out - [[2.0, 2.0]]).max() < 1e-15


@pytest.mark.parametrize("seed", range(5))
def test_mha_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    p = at.init_attn(rng, 8, 6, 4)
    q, kv = rng.normal(size=(5, 8)), rng.normal(size=(7, 6))
    assert np.abs(at.multi_head_attention(Tensor(q), Tensor(kv), p).data - naive_mha(q, kv, p)).max() < 1e-10
    # batched call agrees with the per-sample oracle
    qb, kvb = rng.normal(size=(3, 5, 8)), rng.normal(size=(3, 7, 6))
    out = at.multi_head_attention(Tensor(qb), Tensor(kvb), p).data
    for b in range(3):
        assert np.abs(out[b] - naive_mha(qb[b], kvb[b], p)).max() < 1e-10


def test_adaln_zero_gate_identity(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    cond = Tensor(rng.normal(size=(2, 5)))
    p = at.init_adaln(5, 4)
    y = at.adaln(x, cond, p, lambda h: h * 7.0 + 1.0)
    assert np.array_equal(y.data, x.data)


def test_adaln_degenerate_modulation(rng):
    x = rng.normal(size=(3, 4))
    p = at.init_adaln(2, 4)
    p.b.data[8:] = 1.0  # gate = 1, shift = scale = 0
    sub = lambda h: nx.tanh(h)
    y = at.adaln(Tensor(x), Tensor(np.zeros(2)), p, sub).data
    assert np.abs(y - (x + np.tanh(nx.layer_norm(Tensor(x)).data))).max() < 1e-15


def _fd_check(f, arrays, tol=1e-4):
    ps = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    grads = nx.backward(f(*ps), wrt=ps)
    for k in range(len(arrays)):
        def scalar(v, k=k):
            return float(f(*[Tensor(v if i == k else arrays[i]) for i in range(len(arrays))]).data)
        fd = nx.finite_diff_grad(scalar, arrays[k])
        assert nx.rel_err(grads[k], fd) <= tol


@pytest.mark.parametrize("seed", range(10))
def test_mha_and_adaln_gradients(seed):
    rng = np.random.default_rng(seed)
    p = at.init_attn(rng, 4, 3, 2)
    q, kv, w = rng.normal(size=(3, 4)), rng.normal(size=(5, 3)), rng.normal(size=(3, 4))

    def f(q, kv, WQ, WK, WV, WO):
        pp = at.AttnParams(WQ, WK, WV, WO, 2)
        return nx.sum_(at.multi_head_attention(q, kv, pp) * Tensor(w))

    _fd_check(f, [q, kv, p.W_Q.data, p.W_K.data, p.W_V.data, p.W_O.data])

    W, b = rng.normal(size=(3, 12)) * 0.5, rng.normal(size=12) * 0.5
    x, cond = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3))
    W2 = rng.normal(size=(4, 4))

    def g(x, cond, W, b):
        y = at.adaln(x, cond, at.AdaLNParams(W, b), lambda h: nx.gelu(nx.linear(h, Tensor(W2))))
        return nx.sum_(nx.square(y))

    _fd_check(g, [x, cond, W, b])


@pytest.mark.parametrize("seed", range(10))
def test_sparse_attention_gradients(seed):
    rng = np.random.default_rng(200 + seed)
    p = at.init_attn(rng, 4, 3, 2)
    f, edges = rng.normal(size=(2, 4)), rng.normal(size=(18, 3))
    w = rng.normal(size=(2, 4))
    for cfg in (at.SparseConfig("edge", 0.5, J=3), at.SparseConfig("joint", 0.5, J=3)):
        def s(f, WQ, WK, WV, WO, cfg=cfg):
            pp = at.AttnParams(WQ, WK, WV, WO, 2)
            return nx.sum_(at.sparse_edge_attention(f, Tensor(edges), pp, cfg) * Tensor(w))
        _fd_check(s, [f, p.W_Q.data, p.W_K.data, p.W_V.data, p.W_O.data])

    def gm(f, WQ, WK):
        pp = at.AttnParams(WQ, WK, p.W_V, p.W_O, 2)
        A = at.gumbel_attention_map(f, Tensor(edges), pp, at.SparseConfig(temperature=0.7))
        return nx.sum_(A * Tensor(rng.normal(size=A.shape) * 0 + np.linspace(-1, 1, A.data.size).reshape(A.shape)))

    _fd_check(gm, [f, p.W_Q.data, p.W_K.data])


def test_gumbel_map_noise_off_reduces_to_softmax(rng):
    p = at.init_attn(rng, 4, 3, 1)
    f, edges = rng.normal(size=(2, 4)), rng.normal(size=(6, 3))
    A = at.gumbel_attention_map(Tensor(f), Tensor(edges), p, at.SparseConfig()).data[0]
    logits = (f @ p.W_Q.data) @ (edges @ p.W_K.data).T / np.sqrt(4)
    ref = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    assert np.abs(A - ref).max() < 1e-12
    assert np.abs(A.sum(-1) - 1).max() <= 1e-9
    again = at.gumbel_attention_map(Tensor(f), Tensor(edges), p, at.SparseConfig()).data[0]
    assert np.array_equal(A, again)


def test_gumbel_noise_rows_sum_to_one(rng):
    p = at.init_attn(rng, 4, 3, 2)
    cfg = at.SparseConfig(noise=True, temperature=0.5)
    A = at.gumbel_attention_map(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(10, 3))), p, cfg,
                                rng=np.random.default_rng(1)).data
    assert np.abs(A.sum(-1) - 1).max() <= 1e-9
    with pytest.raises(ConfigError):
        at.gumbel_attention_map(Tensor(np.zeros((1, 4))), Tensor(np.zeros((2, 3))), p, cfg)


def test_low_temperature_is_nearly_hard(rng):
    p = at.init_attn(rng, 4, 3, 1)
    f, edges = rng.normal(size=(3, 4)), rng.normal(size=(6, 3)) * 3
    A = at.gumbel_attention_map(Tensor(f), Tensor(edges), p, at.SparseConfig(temperature=0.01)).data[0]
    logits = (f @ p.W_Q.data) @ (edges @ p.W_K.data).T
    assert np.all(A.max(-1) >= 0.999)
    assert np.array_equal(A.argmax(-1), logits.argmax(-1))


def test_topk_examples():
    assert np.array_equal(at.topk_mask(np.array([[0.5, 0.3, 0.2]]), 2), [[1, 1, 0]])
    assert np.array_equal(at.topk_mask(np.array([[0.5, 0.3, 0.2]]), 3), [[1, 1, 1]])
    assert np.array_equal(at.topk_mask(np.array([[0.4, 0.4, 0.2]]), 1), [[1, 0, 0]])
    for k in (0, 4):
        with pytest.raises(ConfigError):
            at.topk_mask(np.array([[0.5, 0.3, 0.2]]), k)


def full_sort_topk(A, k):
    M = np.zeros_like(A)
    for r in range(A.shape[0]):
        idx = sorted(range(A.shape[1]), key=lambda c: (-A[r, c], c))[:k]
        M[r, idx] = 1
    return M


def test_topk_matches_full_sort_oracle():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n, m = rng.integers(1, 6), rng.integers(1, 12)
        A = np.round(rng.random((n, m)), 1)  # rounding forces ties
        k = int(rng.integers(1, m + 1))
        M = at.topk_mask(A, k)
        assert np.array_equal(M, full_sort_topk(A, k))
        assert np.all(M.sum(-1) == k)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 10), st.integers(1, 5), st.integers(0, 10_000))
def test_topk_monotone_retention(m, n, seed):
    A = np.random.default_rng(seed).random((n, m))
    for k in range(1, m):
        assert np.all(at.topk_mask(A, k) <= at.topk_mask(A, k + 1))


def test_partition_edges():
    assert at.partition_edges(225, 5) == (225, [(0, 45), (45, 90), (90, 135), (135, 180), (180, 225)])
    assert at.partition_edges(8, 3) == (9, [(0, 3), (3, 6), (6, 9)])
    rng = np.random.default_rng(0)
    for _ in range(50):
        E, H = int(rng.integers(1, 200)), int(rng.integers(1, 9))
        padded, ranges = at.partition_edges(E, H)
        covered = np.concatenate([np.arange(a, b) for a, b in ranges])
        assert np.array_equal(covered, np.arange(padded)) and padded >= E and padded - E < H


@pytest.mark.parametrize("seed", range(5))
def test_sparse_dense_reduction(seed):
    rng = np.random.default_rng(seed)
    p = at.init_attn(rng, 8, 3, 2)
    f, edges = rng.normal(size=(4, 8)), rng.normal(size=(18, 3))
    out = at.sparse_edge_attention(Tensor(f), Tensor(edges), p, at.SparseConfig(ratio=1.0, J=3)).data
    assert np.abs(out - naive_sparse(f, edges, p, 1.0)).max() <= 1e-10


def test_sparse_singleton_mask(rng):
    d = 4
    p = at.init_attn(rng, d, 3, 1)
    p.W_O = Tensor(np.eye(d))
    f, edges = rng.normal(size=(3, d)), rng.normal(size=(9, 3))
    out = at.sparse_edge_attention(Tensor(f), Tensor(edges), p, at.SparseConfig(ratio=0.01, J=3)).data
    A = at.gumbel_attention_map(Tensor(f), Tensor(edges), p, at.SparseConfig()).data[0]
    V = edges @ p.W_V.data
    top = A.argmax(-1)
    expected = A[np.arange(3), top][:, None] * V[top]
    assert np.abs(out - expected).max() < 1e-12


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("mode,group", [("edge", "other"), ("joint", "other"), ("joint", "ego")])
def test_sparse_matches_bruteforce_oracle(seed, mode, group):
    rng = np.random.default_rng(seed)
    J, l_e = 3, 2
    p = at.init_attn(rng, 6, 3, 1)
    f, edges = rng.normal(size=(4, 6)), rng.normal(size=(l_e * J * J, 3))
    for ratio in (1 / 8, 1 / 4, 1 / 2, 3 / 4):
        cfg = at.SparseConfig(mode, ratio, J=J, joint_group=group)
        out = at.sparse_edge_attention(Tensor(f), Tensor(edges), p, cfg).data
        assert np.abs(out - naive_sparse(f, edges, p, ratio, mode, J, group)).max() <= 1e-10


def test_sparse_padding_and_heads_oracle(rng):
    p = at.init_attn(rng, 6, 3, 3)
    f, edges = rng.normal(size=(2, 6)), rng.normal(size=(8, 3))
    out = at.sparse_edge_attention(Tensor(f), Tensor(edges), p, at.SparseConfig(ratio=0.5, J=2)).data
    assert np.abs(out - naive_sparse(f, edges, p, 0.5, J=2)).max() <= 1e-10


def test_sparse_mask_row_counts(rng):
    p = at.init_attn(rng, 8, 3, 4)
    f, edges = rng.normal(size=(2, 5, 8)), rng.normal(size=(2, 100, 3))
    A = at.gumbel_attention_map(Tensor(f), Tensor(edges), p, at.SparseConfig()).data
    for ratio in (1 / 8, 1 / 4, 1 / 2, 3 / 4):
        M = at.sparse_mask(A, at.SparseConfig("edge", ratio, J=5), 100)
        k = at.keep_count(ratio, 25)
        assert np.all(M.sum(-1) == k)
        assert np.all(((M * A) != 0).sum(-1) == k)
        Mj = at.sparse_mask(A, at.SparseConfig("joint", ratio, J=5), 100)
        assert np.all(Mj.sum(-1) == 5 * at.keep_count(ratio, 5))
