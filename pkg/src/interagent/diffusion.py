"""x0-parameterised diffusion: schedules, loss, guidance, sampling and closed-loop control."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import interdit as idt
from . import numerics as nx
from .errors import ConfigError, DataError, SimulationFault
from .numerics import Tensor
from .representation import NormStats, denormalize, frame_features, normalize
from .simworld import BodySpec, SimState, ground_contact, step

GUIDANCE = 3.5
CFG_MASK_RATE = 0.1
BETA_MAX = 0.999
COSINE_OFFSET = 0.008


@dataclass(frozen=True)
class NoiseSchedule:
    N: int
    kind: str
    beta: np.ndarray  # [N+1], beta[0] = 0
    alpha: np.ndarray
    alpha_bar: np.ndarray  # alpha_bar[0] = 1 for the clean signal


def cosine_alpha_bar(N: int, s: float = COSINE_OFFSET) -> np.ndarray:
    t = np.arange(N + 1) / N
    f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
    return f / f[0]


def make_schedule(N: int = 50, kind: str = "cosine") -> NoiseSchedule:
    if N < 2:
        raise ConfigError(f"diffusion needs at least 2 steps, got {N}")
    if kind == "cosine":
        ab = cosine_alpha_bar(N)
        beta = np.concatenate([[0.0], np.minimum(1.0 - ab[1:] / ab[:-1], BETA_MAX)])
    elif kind == "linear":
        scale = 1000.0 / N
        beta = np.concatenate([[0.0], np.minimum(np.linspace(scale * 1e-4, scale * 0.02, N), BETA_MAX)])
        ab = np.cumprod(1.0 - beta)
    else:
        raise ConfigError(f"unknown schedule {kind!r}")
    return NoiseSchedule(N, kind, beta, 1.0 - beta, ab)


def mix(X0, alpha_bar, eps):
    return np.sqrt(alpha_bar) * X0 + np.sqrt(1.0 - alpha_bar) * eps


def q_sample(schedule: NoiseSchedule, X0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """Forward noising; ``t`` may be a scalar or one step per leading batch entry."""
    ab = schedule.alpha_bar[np.asarray(t)]
    ab = np.reshape(ab, np.shape(ab) + (1,) * (np.ndim(X0) - np.ndim(ab)))
    return mix(X0, ab, eps)


def posterior(schedule: NoiseSchedule, t: int) -> tuple[float, float, float]:
    """(coef_x0, coef_xt, variance) of q(x_{t-1} | x_t, x_0), taken from alpha_bar directly."""
    ab_t, ab_prev = schedule.alpha_bar[t], schedule.alpha_bar[t - 1]
    a_t = ab_t / ab_prev
    b_t = 1.0 - a_t
    c0 = math.sqrt(ab_prev) * b_t / (1.0 - ab_t)
    ct = math.sqrt(a_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    return c0, ct, b_t * (1.0 - ab_prev) / (1.0 - ab_t)


# ---------------------------------------------------------------------------
# training objective

# A predictor maps (X1_t, X2_t, t, cfg_mask) to differentiable clean-window estimates.
Predictor = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], tuple[Tensor, Tensor]]


@dataclass
class Batch:
    X1: np.ndarray  # [B, m, D] normalised
    X2: np.ndarray
    S1: np.ndarray  # [B, 16, D_s] normalised
    S2: np.ndarray
    commands: list[str]

    def __len__(self):
        return len(self.commands)


def model_predictor(params: idt.InterDiTParams, batch: Batch, rng: np.random.Generator | None = None,
                    noise: bool = False) -> Predictor:
    def predict(X1t, X2t, t, mask):
        c = idt.text_embed(params, batch.commands, mask)
        return idt.interdit_forward(params, X1t, X2t, t, c, batch.S1, batch.S2, rng, noise)
    return predict


def window_norm(diff: Tensor) -> Tensor:
    """L2 norm of each [m, D] window, [B, m, D] -> [B]."""
    return nx.sqrt(nx.sum_(nx.square(diff), axis=(-2, -1)))


def training_loss(predict: Predictor, batch: Batch, schedule: NoiseSchedule, rng: np.random.Generator,
                  mask_rate: float = CFG_MASK_RATE) -> Tensor:
    """Mean over samples and both agents of ||X0 - Phi(q_sample(X0, t), t, c, S)||."""
    B = len(batch)
    t = rng.integers(1, schedule.N + 1, size=B)
    eps1 = rng.standard_normal(batch.X1.shape)
    eps2 = rng.standard_normal(batch.X2.shape)
    mask = rng.random(B) < mask_rate
    p1, p2 = predict(q_sample(schedule, batch.X1, t, eps1), q_sample(schedule, batch.X2, t, eps2), t, mask)
    err = nx.concat([window_norm(Tensor(batch.X1) - p1), window_norm(Tensor(batch.X2) - p2)], axis=0)
    return nx.mean(err)


# ---------------------------------------------------------------------------
# guidance and sampling

# A denoiser maps (X1_t, X2_t, t, c_embedding [B, d]) to clean-window estimates as arrays.
Denoiser = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def model_denoiser(params: idt.InterDiTParams, S1: np.ndarray, S2: np.ndarray) -> Denoiser:
    """Inference-time denoiser over fixed histories [B, 16, D_s]; Gumbel noise off."""
    def denoise(X1t, X2t, t, c):
        reps = X1t.shape[0] // S1.shape[0]
        s1, s2 = np.concatenate([S1] * reps), np.concatenate([S2] * reps)
        with nx.no_grad():
            o1, o2 = idt.interdit_forward(params, X1t, X2t, t, c, s1, s2)
        return o1.data, o2.data
    return denoise


def cfg_predict(denoise: Denoiser, X1t, X2t, t, c: np.ndarray, s: float = GUIDANCE):
    """Phi_null + s (Phi_c - Phi_null), with the cond and null passes batched together."""
    if s < 0:
        raise ConfigError("guidance scale must be non-negative")
    B = X1t.shape[0]
    t = np.broadcast_to(np.asarray(t), (B,))
    null = np.zeros_like(c)
    if s == 1.0:
        return denoise(X1t, X2t, t, c)
    if not np.any(c):
        return denoise(X1t, X2t, t, null)
    o1, o2 = denoise(np.concatenate([X1t, X1t]), np.concatenate([X2t, X2t]), np.concatenate([t, t]),
                     np.concatenate([c, null]))
    out = []
    for o in (o1, o2):
        cond, unc = o[:B], o[B:]
        out.append(cond + (s - 1.0) * (cond - unc))
    return out[0], out[1]


def sample(denoise: Denoiser, schedule: NoiseSchedule, shape: tuple[int, ...], c: np.ndarray,
           s: float, rng: np.random.Generator, sampler: str = "ancestral",
           overwrite: Callable | None = None):
    """Iterative denoising from pure noise; returns the normalised clean window pair.

    ``overwrite(x1, x2) -> (x1, x2)`` is applied to every clean-window prediction.
    """
    if sampler not in ("ancestral", "deterministic"):
        raise ConfigError(f"unknown sampler {sampler!r}")
    x1, x2 = rng.standard_normal(shape), rng.standard_normal(shape)
    for t in range(schedule.N, 0, -1):
        p1, p2 = cfg_predict(denoise, x1, x2, t, c, s)
        if overwrite is not None:
            p1, p2 = overwrite(p1, p2)
        if t == 1:
            return p1, p2
        x1, x2 = (_reverse_step(schedule, t, x, p, rng, sampler) for x, p in ((x1, p1), (x2, p2)))
    raise AssertionError("unreachable")


def _reverse_step(schedule, t, x_t, x0, rng, sampler):
    if sampler == "deterministic":
        ab_t, ab_prev = schedule.alpha_bar[t], schedule.alpha_bar[t - 1]
        eps = (x_t - math.sqrt(ab_t) * x0) / math.sqrt(1.0 - ab_t)
        return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
    c0, ct, var = posterior(schedule, t)
    return c0 * x0 + ct * x_t + math.sqrt(var) * rng.standard_normal(x_t.shape)


def reactive_sample(denoise: Denoiser, schedule: NoiseSchedule, fixed_proprio: np.ndarray,
                    shape: tuple[int, ...], d_p: int, c: np.ndarray, s: float,
                    rng: np.random.Generator, sampler: str = "ancestral"):
    """Inpainting: agent 1's proprioception is replaced by ``fixed_proprio`` (normalised,
    [B, m, d_p]) after every prediction. Actions and exteroception are left as generated."""
    fixed_proprio = np.asarray(fixed_proprio)
    if fixed_proprio.shape[:-2] != shape[:-2] or fixed_proprio.shape[-2] < shape[-2]:
        raise DataError(f"fixed trajectory {fixed_proprio.shape} does not cover window {shape}")
    fixed = fixed_proprio[..., :shape[-2], :d_p]

    def overwrite(p1, p2):
        p1 = p1.copy()
        p1[..., :d_p] = fixed
        return p1, p2

    return sample(denoise, schedule, shape, c, s, rng, sampler, overwrite)


# ---------------------------------------------------------------------------
# closed-loop control


class ControllerState:
    """FIFO history of per-agent [x_p, x_e] frames, oldest first."""

    def __init__(self, h: int, command: str = "", guidance: float = GUIDANCE):
        self.h = h
        self.fifo: deque[np.ndarray] = deque(maxlen=h)
        self.n = 0
        self.command = command
        self.guidance = guidance

    def push(self, frame: np.ndarray):
        """frame: [2, D_s]"""
        self.fifo.append(np.asarray(frame, dtype=np.float64))
        self.n += 1

    def buffer(self) -> np.ndarray:
        """[h, 2, D_s] with left padding by the oldest frame."""
        return idt.pad_history(np.stack(list(self.fifo)), self.h)

    def context(self) -> np.ndarray:
        """[2, 16, D_s] downsampled history per agent."""
        return np.swapaxes(self.buffer()[idt.history_indices(self.h)], 0, 1)


@dataclass
class Trajectory:
    """Per-agent, per-frame channels of a controlled run."""
    xp: np.ndarray  # [2, T, d_p]
    xe: np.ndarray  # [2, T, d_e]
    xa: np.ndarray  # [2, T, dof] executed commands
    states: list[SimState]
    contacts: np.ndarray  # [2, T, C]
    sampler_calls: int


@dataclass
class Policy:
    params: idt.InterDiTParams
    stats: NormStats  # over the full [x_p, x_e, x_a] channel layout
    schedule: NoiseSchedule
    spec: BodySpec
    sampler: str = "ancestral"

    @property
    def cfg(self) -> idt.ModelConfig:
        return self.params.cfg

    def state_stats(self) -> NormStats:
        d_s = self.cfg.d_s
        return NormStats(self.stats.mean[:d_s], self.stats.std[:d_s])


def _features(state: SimState, policy: Policy) -> np.ndarray:
    xp, xe = frame_features(state, policy.spec, policy.cfg.extero)
    return np.concatenate([xp, xe], axis=-1)


def rollout(policy: Policy, state: SimState, command: str, steps: int, guidance: float = GUIDANCE,
            seed: int = 0, mode: str = "execute_horizon", replay: list[SimState] | None = None,
            replay_proprio: np.ndarray | None = None) -> Trajectory:
    """Closed-loop diffusion control of both agents for ``steps`` frames.

    With ``replay`` set, agent 1 follows the given states (kinematic replay) and the
    sampler inpaints its proprioception from ``replay_proprio`` [T, d_p] (raw units).
    """
    if mode not in ("execute_horizon", "replan_every_frame"):
        raise ConfigError(f"unknown rollout mode {mode!r}")
    cfg, spec = policy.cfg, policy.spec
    rng = np.random.default_rng(seed)
    m, d_p, d_s = cfg.m, cfg.d_p, cfg.d_s
    execute = m if mode == "execute_horizon" else 1
    ss = policy.state_stats()
    with nx.no_grad():
        c = idt.text_embed(policy.params, [command]).data
    ctl = ControllerState(cfg.h, command, guidance)
    state = state.copy()
    if replay is not None:
        state = SimState((replay[0].agents[0].copy(), state.agents[1].copy()), state.time)
    state, contact = ground_contact(state, spec)
    ctl.push(_features(state, policy))
    frames, acts, states, contacts = [], [], [], []
    calls = 0
    n = 0
    while n < steps:
        S = normalize(ctl.context(), ss)
        denoise = model_denoiser(policy.params, S[0:1], S[1:2])
        shape = (1, m, cfg.d_x)
        if replay is None:
            x1, x2 = sample(denoise, policy.schedule, shape, c, guidance, rng, policy.sampler)
        else:
            idx = np.minimum(np.arange(n, n + m), len(replay_proprio) - 1)
            fixed = normalize(replay_proprio[idx], NormStats(ss.mean[:d_p], ss.std[:d_p]))[None]
            x1, x2 = reactive_sample(denoise, policy.schedule, fixed, shape, d_p, c, guidance, rng,
                                     policy.sampler)
        calls += 1
        pred = denormalize(np.stack([x1[0], x2[0]]), policy.stats)  # [2, m, D]
        for k in range(min(execute, steps - n)):
            cmds = [spec.clamp(pred[i, k, d_s:]) for i in range(2)]
            frames.append(ctl.fifo[-1])
            acts.append(np.stack(cmds))
            states.append(state)
            contacts.append(contact)
            try:
                state = step(state, cmds, spec=spec)
            except SimulationFault as exc:
                raise SimulationFault(f"rollout diverged at frame {n}: {exc}") from exc
            if replay is not None:
                src = replay[min(n + 1, len(replay) - 1)]
                state = SimState((src.agents[0].copy(), state.agents[1]), state.time)
            state, contact = ground_contact(state, spec)
            ctl.push(_features(state, policy))
            n += 1
    F = np.stack(frames, axis=1)  # [2, T, D_s]
    xp, xe = F[..., :d_p], F[..., d_p:]
    if replay_proprio is not None:
        xp = xp.copy()
        xp[0] = replay_proprio[:steps]
    return Trajectory(xp, xe, np.stack(acts, axis=1), states, np.stack(contacts, axis=1), calls)
