"""Inter-DiT: twin weight-shared multi-stream diffusion transformer over two agents.

Both agents are processed in one batched pass. The leading batch axis holds
agent 1's samples followed by agent 2's, so the "other agent" view of any
hidden tensor is its two halves swapped.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import attention as at
from . import numerics as nx
from .errors import ConfigError, ContractError, DimensionError
from .numerics import Tensor
from .representation import EXTERO_KINDS, extero_dim, proprio_dim

STREAMS = ("p", "e", "a")
VOCAB_SIZE = 64
HISTORY_STRIDED = 12
HISTORY_RECENT = 4
HISTORY_TOKENS = HISTORY_STRIDED + HISTORY_RECENT


@dataclass
class ModelConfig:
    J: int = 5
    dof: int = 8
    extero: str = "SIG"
    d_model: int = 64
    blocks: int = 2
    heads: int = 4
    m: int = 4
    h: int = 364
    cond_layers: tuple[str, ...] = ("history", "other")
    ffn_mult: int = 4
    sparse_mode: str = "edge"
    sparse_ratio: float = 0.5
    sparse_temperature: float = 1.0
    sparse_heads: int = 4
    joint_group: str = "other"
    head_gain: float = 0.1

    def __post_init__(self):
        self.cond_layers = tuple(self.cond_layers)
        if self.extero not in EXTERO_KINDS:
            raise ConfigError(f"unknown exteroception kind {self.extero!r}")
        if self.d_model % self.heads or self.d_model % self.sparse_heads:
            raise ConfigError("d_model must be divisible by the head counts")
        if any(c not in ("history", "other") for c in self.cond_layers):
            raise ConfigError(f"conditioning layers must be 'history' or 'other': {self.cond_layers}")
        if self.h < HISTORY_TOKENS or self.m < 1 or self.blocks < 0:
            raise ConfigError("need h >= 16, m >= 1 and a non-negative block count")
        self.sparse()  # validates the sparse settings

    @property
    def d_p(self) -> int:
        return proprio_dim(self.J)

    @property
    def d_e(self) -> int:
        return extero_dim(self.J, self.extero)

    @property
    def d_a(self) -> int:
        return self.dof

    @property
    def stream_dims(self) -> tuple[int, int, int]:
        return self.d_p, self.d_e, self.d_a

    @property
    def d_x(self) -> int:
        return sum(self.stream_dims)

    @property
    def d_s(self) -> int:
        return self.d_p + self.d_e

    def sparse(self, noise: bool = False) -> at.SparseConfig:
        return at.SparseConfig(self.sparse_mode, self.sparse_ratio, self.sparse_temperature,
                               noise, self.J, self.joint_group)


def paper_config(**overrides) -> ModelConfig:
    base = dict(J=15, dof=28, d_model=768, blocks=4, heads=8, sparse_heads=8,
                cond_layers=("history", "other", "history", "other", "history"))
    base.update(overrides)
    return ModelConfig(**base)


def layout_summary(cfg: ModelConfig) -> list[dict[str, int]]:
    """Per-block layer counts, computed from the config without allocating weights."""
    return [{"fusion_attention": 1, "conditioning_attention": len(cfg.cond_layers),
             "projection": len(STREAMS), "feed_forward": len(STREAMS)} for _ in range(cfg.blocks)]


@dataclass
class InterDiTParams:
    cfg: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def attn(self, prefix: str, heads: int) -> at.AttnParams:
        t = self.tensors
        return at.AttnParams(t[f"{prefix}.W_Q"], t[f"{prefix}.W_K"], t[f"{prefix}.W_V"], t[f"{prefix}.W_O"], heads)

    def adaln(self, prefix: str) -> at.AdaLNParams:
        return at.AdaLNParams(self.tensors[f"{prefix}.W"], self.tensors[f"{prefix}.b"])

    def parameters(self) -> list[Tensor]:
        return [self.tensors[k] for k in sorted(self.tensors)]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def init_params(cfg: ModelConfig, seed: int = 0) -> InterDiTParams:
    rng = np.random.default_rng(seed)
    d, P = cfg.d_model, {}

    def lin(name, fan_in, fan_out, gain=1.0, bias=True):
        P[f"{name}.W"] = Tensor(at.xavier(rng, fan_in, fan_out, gain), requires_grad=True)
        if bias:
            P[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)

    def attn(name, d_kv, heads):
        for k, v in at.init_attn(rng, d, d_kv, heads).tensors().items():
            P[f"{name}.{k}"] = v

    def ada(name, width=3):
        P[f"{name}.W"] = Tensor(np.zeros((d, width * d)), requires_grad=True)
        P[f"{name}.b"] = Tensor(np.zeros(width * d), requires_grad=True)

    for s, dim in zip(STREAMS, cfg.stream_dims):
        lin(f"in.{s}", dim, d)
    P["pos"] = Tensor(rng.normal(0.0, 0.02, size=(cfg.m, d)), requires_grad=True)
    P["stream_emb"] = Tensor(rng.normal(0.0, 0.02, size=(3, d)), requires_grad=True)
    if cfg.extero == "SIG":
        attn("sig", 3, cfg.sparse_heads)
    lin("hist.in", cfg.d_s, d)
    P["hist.pos"] = Tensor(rng.normal(0.0, 0.02, size=(HISTORY_TOKENS, d)), requires_grad=True)
    P["text.table"] = Tensor(rng.normal(0.0, 1.0, size=(VOCAB_SIZE, d)), requires_grad=True)
    lin("time.fc1", d, d)
    lin("time.fc2", d, d)
    for b in range(cfg.blocks):
        pre = f"block{b}"
        attn(f"{pre}.fusion", d, cfg.heads)
        for s in STREAMS:
            ada(f"{pre}.fusion.ada.{s}")
            lin(f"{pre}.shared.{s}", d, d)
            lin(f"{pre}.proj.{s}", d, d)
            ada(f"{pre}.ffn.ada.{s}")
            lin(f"{pre}.ffn.{s}.fc1", d, cfg.ffn_mult * d)
            lin(f"{pre}.ffn.{s}.fc2", cfg.ffn_mult * d, d)
        for li in range(len(cfg.cond_layers)):
            attn(f"{pre}.cond{li}", d, cfg.heads)
            for s in STREAMS:
                ada(f"{pre}.cond{li}.ada.{s}")
    for s, dim in zip(STREAMS, cfg.stream_dims):
        ada(f"out.ada.{s}", width=2)
        lin(f"out.{s}", d, dim, gain=cfg.head_gain)
    return InterDiTParams(cfg, P)


# ---------------------------------------------------------------------------
# conditioning signals


def tokenize(command: str) -> list[int]:
    return [zlib.crc32(tok.encode("utf-8")) % VOCAB_SIZE for tok in command.lower().split()]


def text_weights(commands, mask=None) -> np.ndarray:
    """Bag-of-words averaging matrix [B, VOCAB]; empty or masked rows are all zero."""
    if isinstance(commands, str):
        commands = [commands]
    W = np.zeros((len(commands), VOCAB_SIZE))
    for i, cmd in enumerate(commands):
        ids = tokenize(cmd)
        if ids and not (mask is not None and mask[i]):
            np.add.at(W[i], ids, 1.0 / len(ids))
    return W


def text_embed(params: InterDiTParams, commands, mask=None) -> Tensor:
    """Mean of hashed-token embeddings. The null condition is the exact zero vector."""
    single = isinstance(commands, str)
    out = nx.matmul(Tensor(text_weights(commands, mask)), params["text.table"])
    return nx.reshape(out, (params.cfg.d_model,)) if single else out


def cfg_mask(rng: np.random.Generator, batch: int, rate: float = 0.1) -> np.ndarray:
    return rng.random(batch) < rate


def timestep_features(t, d: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = d // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if d % 2:
        feats = np.concatenate([feats, np.zeros((len(t), 1))], axis=-1)
    return feats


def time_embed(params: InterDiTParams, t) -> Tensor:
    x = Tensor(timestep_features(t, params.cfg.d_model))
    x = nx.silu(nx.linear(x, params["time.fc1.W"], params["time.fc1.b"]))
    return nx.linear(x, params["time.fc2.W"], params["time.fc2.b"])


# ---------------------------------------------------------------------------
# history


def history_indices(h: int) -> np.ndarray:
    stride = (h - HISTORY_RECENT) // HISTORY_STRIDED
    return np.concatenate([np.arange(HISTORY_STRIDED) * stride, np.arange(h - HISTORY_RECENT, h)])


def pad_history(frames: np.ndarray, h: int) -> np.ndarray:
    """Last h frames, left-padded by repeating the oldest one."""
    frames = np.asarray(frames)
    if len(frames) == 0:
        raise ContractError("history needs at least one frame")
    frames = frames[-h:]
    if len(frames) < h:
        pad = np.repeat(frames[:1], h - len(frames), axis=0)
        frames = np.concatenate([pad, frames], axis=0)
    return frames


def downsample_history(frames: np.ndarray, h: int) -> np.ndarray:
    """[n, D] most-recent-last history -> [16, D] context."""
    return pad_history(frames, h)[history_indices(h)]


# ---------------------------------------------------------------------------
# forward


def _lin(params, name, x):
    return nx.linear(x, params[f"{name}.W"], params[f"{name}.b"])


def _swap_agents(x: Tensor) -> Tensor:
    half = x.shape[0] // 2
    a, b = nx.split(x, [half, half], axis=0)
    return nx.concat([b, a], axis=0)


def embed_streams(params: InterDiTParams, X: Tensor, rng=None, noise: bool = False) -> list[Tensor]:
    """Decoupled input projections; SIG adds sparse edge attention to the extero stream."""
    cfg = params.cfg
    parts = nx.split(X, list(cfg.stream_dims), axis=-1)
    hs = []
    for i, (s, x) in enumerate(zip(STREAMS, parts)):
        h = _lin(params, f"in.{s}", x) + params["pos"] + nx.getitem(params["stream_emb"], i)
        if s == "e" and cfg.extero == "SIG":
            lead = x.shape[:-2]
            edges = nx.reshape(x, lead + (cfg.m * cfg.J * cfg.J, 3))
            h = h + at.sparse_edge_attention(h, edges, params.attn("sig", cfg.sparse_heads),
                                             cfg.sparse(noise), rng)
        hs.append(h)
    return hs


def output_heads(params: InterDiTParams, hs: list[Tensor], cond: Tensor) -> Tensor:
    outs = []
    for s, h in zip(STREAMS, hs):
        mod = nx.linear(nx.silu(cond), params[f"out.ada.{s}.W"], params[f"out.ada.{s}.b"])
        shift, scale = nx.split(nx.reshape(mod, mod.shape[:-1] + (1, mod.shape[-1])),
                                [params.cfg.d_model] * 2, axis=-1)
        outs.append(_lin(params, f"out.{s}", at.modulate(h, shift, scale)))
    return nx.concat(outs, axis=-1)


def fusion_stage(params: InterDiTParams, b: int, hs: list[Tensor], cond: Tensor) -> list[Tensor]:
    pre, m = f"block{b}", hs[0].shape[-2]
    mods, us = [], []
    for s, h in zip(STREAMS, hs):
        shift, scale, gate = at.modulation(cond, params.adaln(f"{pre}.fusion.ada.{s}"), h)
        mods.append(gate)
        us.append(_lin(params, f"{pre}.shared.{s}", at.modulate(h, shift, scale)))
    U = nx.concat(us, axis=-2)  # [.., 3m, d] in order p, e, a
    O = at.multi_head_attention(U, U, params.attn(f"{pre}.fusion", params.cfg.heads))
    return [h + gate * _lin(params, f"{pre}.proj.{s}", o)
            for s, h, gate, o in zip(STREAMS, hs, mods, nx.split(O, [m] * 3, axis=-2))]


def conditioning_layer(params: InterDiTParams, b: int, li: int, hs: list[Tensor], context: Tensor,
                       cond: Tensor) -> list[Tensor]:
    pre, m = f"block{b}", hs[0].shape[-2]
    gates, us = [], []
    for s, h in zip(STREAMS, hs):
        shift, scale, gate = at.modulation(cond, params.adaln(f"{pre}.cond{li}.ada.{s}"), h)
        gates.append(gate)
        us.append(at.modulate(h, shift, scale))
    O = at.multi_head_attention(nx.concat(us, axis=-2), nx.layer_norm(context),
                                params.attn(f"{pre}.cond{li}", params.cfg.heads))
    return [h + gate * _lin(params, f"{pre}.proj.{s}", o)
            for s, h, gate, o in zip(STREAMS, hs, gates, nx.split(O, [m] * 3, axis=-2))]


def conditioning_stage(params: InterDiTParams, b: int, hs: list[Tensor], history: Tensor, other: Tensor,
                       cond: Tensor) -> list[Tensor]:
    """Cross-attention to the cues in cfg.cond_layers order, then per-stream feed-forward."""
    for li, cue in enumerate(params.cfg.cond_layers):
        hs = conditioning_layer(params, b, li, hs, history if cue == "history" else other, cond)
    out = []
    for s, h in zip(STREAMS, hs):
        def ffn(x, s=s):
            return _lin(params, f"block{b}.ffn.{s}.fc2", nx.gelu(_lin(params, f"block{b}.ffn.{s}.fc1", x)))
        out.append(at.adaln(h, cond, params.adaln(f"block{b}.ffn.ada.{s}"), ffn))
    return out


def _check_inputs(cfg: ModelConfig, X, S):
    if X.shape[-2:] != (cfg.m, cfg.d_x):
        raise DimensionError(f"window shape {X.shape} does not end in ({cfg.m}, {cfg.d_x})")
    if S.shape[-2:] != (HISTORY_TOKENS, cfg.d_s):
        raise DimensionError(f"history shape {S.shape} does not end in ({HISTORY_TOKENS}, {cfg.d_s})")


def forward_stacked(params: InterDiTParams, X, t, cond, S, rng=None, noise: bool = False) -> Tensor:
    """X [2B, m, D] with agent 2 in the second half; cond [2B, d]; S [2B, 16, D_s]."""
    X, S, cond = nx.as_tensor(X), nx.as_tensor(S), nx.as_tensor(cond)
    _check_inputs(params.cfg, X, S)
    if X.ndim != 3 or X.shape[0] % 2:
        raise DimensionError(f"stacked window must be [2B, m, D], got {X.shape}")
    c = cond + time_embed(params, t)
    hs = embed_streams(params, X, rng, noise)
    history = _lin(params, "hist.in", S) + params["hist.pos"]
    for b in range(params.cfg.blocks):
        hs = fusion_stage(params, b, hs, c)
        other = _swap_agents(nx.concat(hs, axis=-2))
        hs = conditioning_stage(params, b, hs, history, other, c)
    return output_heads(params, hs, c)


def interdit_forward(params: InterDiTParams, X1, X2, t, c, S1, S2, rng=None,
                     noise: bool = False) -> tuple[Tensor, Tensor]:
    """Denoise a window pair. Inputs may be unbatched [m, D] or batched [B, m, D].

    ``c`` is a text embedding ([d] or [B, d]); ``t`` a scalar or [B] integer timestep.
    """
    X1, X2, S1, S2, c = (nx.as_tensor(v) for v in (X1, X2, S1, S2, c))
    single = X1.ndim == 2
    if single:
        X1, X2, S1, S2 = (nx.reshape(v, (1,) + v.shape) for v in (X1, X2, S1, S2))
    B = X1.shape[0]
    if X2.shape != X1.shape or S1.shape != S2.shape or S1.shape[0] != B:
        raise DimensionError("agent inputs must have matching shapes")
    if c.ndim == 1:
        c = nx.reshape(c, (1, c.shape[0])) * Tensor(np.ones((B, 1)))
    t = np.broadcast_to(np.asarray(t), (B,))
    out = forward_stacked(params, nx.concat([X1, X2], axis=0), np.concatenate([t, t]),
                          nx.concat([c, c], axis=0), nx.concat([S1, S2], axis=0), rng, noise)
    o1, o2 = nx.split(out, [B, B], axis=0)
    if single:
        o1, o2 = nx.reshape(o1, o1.shape[1:]), nx.reshape(o2, o2.shape[1:])
    return o1, o2


def bypass_forward(params: InterDiTParams, X, t, cond) -> Tensor:
    """Input projections straight into the output heads, skipping every block."""
    X, cond = nx.as_tensor(X), nx.as_tensor(cond)
    return output_heads(params, embed_streams(params, X), cond + time_embed(params, t))
