"""Multi-head attention, AdaLN modulation and sparse interaction-graph attention."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .numerics import Tensor


@dataclass
class AttnParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_O: Tensor
    heads: int

    @property
    def d_model(self) -> int:
        return self.W_Q.shape[1]

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def tensors(self) -> dict[str, Tensor]:
        return {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V, "W_O": self.W_O}


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_attn(rng: np.random.Generator, d_model: int, d_kv: int, heads: int) -> AttnParams:
    if d_model % heads:
        raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")
    return AttnParams(
        W_Q=Tensor(xavier(rng, d_model, d_model), requires_grad=True),
        W_K=Tensor(xavier(rng, d_kv, d_model), requires_grad=True),
        W_V=Tensor(xavier(rng, d_kv, d_model), requires_grad=True),
        W_O=Tensor(xavier(rng, d_model, d_model), requires_grad=True),
        heads=heads,
    )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., L, d] -> [..., H, L, d/H]"""
    lead, L, d = x.shape[:-2], x.shape[-2], x.shape[-1]
    x = nx.reshape(x, lead + (L, heads, d // heads))
    return nx.swapaxes(x, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    """[..., H, L, dh] -> [..., L, H*dh]"""
    x = nx.swapaxes(x, -2, -3)
    lead = x.shape[:-2]
    return nx.reshape(x, lead + (x.shape[-2] * x.shape[-1],))


def multi_head_attention(q_src: Tensor, kv_src: Tensor, params: AttnParams) -> Tensor:
    """Scaled dot-product attention, heads concatenated then output-projected."""
    if q_src.shape[-1] != params.W_Q.shape[0] or kv_src.shape[-1] != params.W_K.shape[0]:
        raise DimensionError(
            f"attention inputs {q_src.shape}, {kv_src.shape} do not match params "
            f"{params.W_Q.shape}, {params.W_K.shape}")
    H = params.heads
    Q = _split_heads(nx.linear(q_src, params.W_Q), H)
    K = _split_heads(nx.linear(kv_src, params.W_K), H)
    V = _split_heads(nx.linear(kv_src, params.W_V), H)
    logits = nx.matmul(Q, nx.swapaxes(K, -1, -2)) * (1.0 / np.sqrt(params.head_dim))
    A = nx.softmax(logits, axis=-1)
    return nx.linear(_merge_heads(nx.matmul(A, V)), params.W_O)


# ---------------------------------------------------------------------------
# adaptive layer norm


@dataclass
class AdaLNParams:
    W: Tensor  # d_cond x 3d -> (shift, scale, gate)
    b: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b}


def init_adaln(d_cond: int, d_model: int) -> AdaLNParams:
    # all-zero modulation: identity residual at initialisation
    return AdaLNParams(Tensor(np.zeros((d_cond, 3 * d_model)), requires_grad=True),
                       Tensor(np.zeros(3 * d_model), requires_grad=True))


def modulation(cond: Tensor, params: AdaLNParams, like: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """(shift, scale, gate), each broadcastable against ``like``."""
    mod = nx.linear(nx.silu(cond), params.W, params.b)
    d = mod.shape[-1] // 3
    if mod.ndim < like.ndim:
        mod = nx.reshape(mod, mod.shape[:-1] + (1,) * (like.ndim - mod.ndim) + (3 * d,))
    shift, scale, gate = nx.split(mod, [d, d, d], axis=-1)
    return shift, scale, gate


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return nx.layer_norm(x) * (scale + 1.0) + shift


def adaln(x: Tensor, cond: Tensor, params: AdaLNParams, sublayer: Callable[[Tensor], Tensor]) -> Tensor:
    """y = x + gate * sublayer(LN(x) * (1 + scale) + shift)."""
    shift, scale, gate = modulation(cond, params, x)
    return x + gate * sublayer(modulate(x, shift, scale))


# ---------------------------------------------------------------------------
# sparse interaction-graph attention


@dataclass
class SparseConfig:
    mode: str = "edge"  # "edge" | "joint"
    ratio: float = 0.5
    temperature: float = 1.0
    noise: bool = False
    J: int = 5  # joints per agent, used to form joint groups
    joint_group: str = "other"  # "other" | "ego"

    def __post_init__(self):
        if self.mode not in ("edge", "joint"):
            raise ConfigError(f"unknown sparse mode {self.mode!r}")
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError("sparsity ratio must lie in (0, 1]")
        if self.temperature <= 0:
            raise ConfigError("Gumbel temperature must be positive")
        if self.joint_group not in ("other", "ego"):
            raise ConfigError(f"unknown joint grouping {self.joint_group!r}")


def keep_count(ratio: float, units: int) -> int:
    return max(1, int(np.floor(ratio * units + 0.5)))


def partition_edges(total_edges: int, heads: int) -> tuple[int, list[tuple[int, int]]]:
    """Contiguous equal chunks per head; the total is padded up to a multiple of ``heads``."""
    if heads < 1:
        raise ConfigError("need at least one head")
    per = -(-total_edges // heads)
    return per * heads, [(h * per, (h + 1) * per) for h in range(heads)]


def _pad_edges(edges: Tensor, padded: int) -> Tensor:
    E = edges.shape[-2]
    if padded == E:
        return edges
    pad = np.zeros(edges.shape[:-2] + (padded - E, edges.shape[-1]))
    return nx.concat([edges, Tensor(pad)], axis=-2)


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def _edge_qkv(f: Tensor, edges: Tensor, params: AttnParams):
    H, dh = params.heads, params.head_dim
    padded, _ = partition_edges(edges.shape[-2], H)
    e = _pad_edges(edges, padded)
    e = nx.reshape(e, e.shape[:-2] + (H, padded // H, e.shape[-1]))  # [..., H, E_h, 3]
    Wk = nx.transpose(nx.reshape(params.W_K, (params.W_K.shape[0], H, dh)), (1, 0, 2))
    Wv = nx.transpose(nx.reshape(params.W_V, (params.W_V.shape[0], H, dh)), (1, 0, 2))
    Q = _split_heads(nx.linear(f, params.W_Q), H)
    return Q, nx.matmul(e, Wk), nx.matmul(e, Wv)


def gumbel_attention_map(f: Tensor, edges: Tensor, params: AttnParams, cfg: SparseConfig,
                         rng: np.random.Generator | None = None) -> Tensor:
    """Per-head attention over each head's edge subset, shape [..., H, l_f, E_h].

    A = softmax((Q K^T / sqrt(d_f) + G) / tau) with G ~ Gumbel(0, 1) when noise is on.
    """
    Q, K, _ = _edge_qkv(f, edges, params)
    return _gumbel_softmax(Q, K, params, cfg, rng)


def _gumbel_softmax(Q, K, params, cfg, rng):
    logits = nx.matmul(Q, nx.swapaxes(K, -1, -2)) * (1.0 / np.sqrt(params.d_model))
    if cfg.noise:
        if rng is None:
            raise ConfigError("Gumbel noise requested without a random generator")
        logits = logits + Tensor(sample_gumbel(rng, logits.shape))
    if cfg.temperature != 1.0:
        logits = logits * (1.0 / cfg.temperature)
    return nx.softmax(logits, axis=-1)


def topk_mask(A, k: int) -> np.ndarray:
    """Binary mask with exactly k ones per row at the k largest entries, ties to lower index."""
    A = np.asarray(A.data if isinstance(A, Tensor) else A)
    n = A.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} outside [1, {n}]")
    order = np.argsort(-A, axis=-1, kind="stable")[..., :k]
    M = np.zeros(A.shape)
    np.put_along_axis(M, order, 1.0, axis=-1)
    return M


def _unit_ids(total_edges: int, padded: int, J: int, grouping: str) -> np.ndarray:
    g = np.arange(padded)
    if grouping == "other":
        ids = g // J  # (frame, other joint i) since index = frame*J*J + i*J + j
    else:
        ids = (g // (J * J)) * J + g % J  # (frame, ego joint j)
    ids = ids.astype(np.int64)
    ids[g >= total_edges] = -1 - g[g >= total_edges]  # padding edges score alone
    return ids


def sparse_mask(A: np.ndarray, cfg: SparseConfig, total_edges: int) -> np.ndarray:
    """Mask [..., H, l_f, E_h] for an attention map laid out as in gumbel_attention_map."""
    H, E_h = A.shape[-3], A.shape[-1]
    if cfg.mode == "edge":
        return topk_mask(A, keep_count(cfg.ratio, E_h))
    ids = _unit_ids(total_edges, H * E_h, cfg.J, cfg.joint_group).reshape(H, E_h)
    M = np.zeros(A.shape)
    for h in range(H):
        units, inverse = np.unique(ids[h], return_inverse=True)
        # order units by first appearance so ties resolve toward the lowest edge index
        first = np.array([np.flatnonzero(inverse == u).min() for u in range(len(units))])
        order = np.argsort(first, kind="stable")
        P = np.zeros((E_h, len(units)))
        P[np.arange(E_h), np.argsort(order)[inverse]] = 1.0
        scores = A[..., h, :, :] @ P
        keep = topk_mask(scores, keep_count(cfg.ratio, len(units)))
        M[..., h, :, :] = keep @ P.T
    return M


def sparse_edge_attention(f: Tensor, edges: Tensor, params: AttnParams, cfg: SparseConfig,
                          rng: np.random.Generator | None = None) -> Tensor:
    """f' = (M o A) V per head, heads concatenated and output-projected.

    The mask M is a constant: gradients reach the scores only through retained entries.
    """
    if edges.shape[-1] != params.W_K.shape[0]:
        raise DimensionError(f"edge features {edges.shape} do not match W_K {params.W_K.shape}")
    Q, K, V = _edge_qkv(f, edges, params)
    A = _gumbel_softmax(Q, K, params, cfg, rng)
    M = sparse_mask(A.data, cfg, edges.shape[-2])
    return nx.linear(_merge_heads(nx.matmul(A * Tensor(M), V)), params.W_O)
