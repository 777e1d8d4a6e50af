"""Window sampling, AdamW with a warm-up cosine schedule, checkpointing and resume.

Parameters, optimiser moments and normalisation statistics are rounded to float32
after every update, so a float32 checkpoint captures the training state exactly and
a resumed run continues bitwise.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffusion as dfn
from . import interdit as idt
from . import numerics as nx
from .config import Config, config_from_text
from .errors import ConfigError, DataError, InterAgentError
from .formats import Checkpoint, DatasetFile
from .numerics import Tensor
from .representation import NormStats, fit_norm, normalize

log = logging.getLogger(__name__)


class TrainingDiverged(InterAgentError, RuntimeError):
    """The loss became non-finite; the last good state has been checkpointed."""


def f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# data


@dataclass
class WindowSet:
    """Every (episode, start) window of the dataset, normalised, with its history context."""
    X: np.ndarray  # [N, 2, m, D]
    S: np.ndarray  # [N, 2, 16, D_s]
    commands: list[str]

    def __len__(self):
        return len(self.commands)

    def batch(self, idx: np.ndarray) -> dfn.Batch:
        return dfn.Batch(self.X[idx, 0], self.X[idx, 1], self.S[idx, 0], self.S[idx, 1],
                         [self.commands[i] for i in idx])


def dataset_stats(ds: DatasetFile) -> NormStats:
    """Per-channel statistics over every frame of both agents, rounded to float32."""
    rows = [np.concatenate([ep.xp, ep.xe, ep.xa], axis=-1).reshape(-1, ds.d_p + ds.d_e + ds.d_a)
            for ep in ds.episodes]
    st = fit_norm(rows)
    return NormStats(f32(st.mean), f32(st.std))


def build_windows(ds: DatasetFile, cfg: idt.ModelConfig, stats: NormStats) -> WindowSet:
    """Window at frame n covers frames n..n+m-1; its history is frames up to and including n."""
    if (ds.d_p, ds.d_e, ds.d_a) != cfg.stream_dims:
        raise DataError(f"dataset channels {(ds.d_p, ds.d_e, ds.d_a)} do not match the model {cfg.stream_dims}")
    m, h, d_s = cfg.m, cfg.h, cfg.d_s
    hist = idt.history_indices(h)
    Xs, Ss, cmds = [], [], []
    for ep in ds.episodes:
        full = normalize(np.concatenate([ep.xp, ep.xe, ep.xa], axis=-1), stats)  # [2, T, D]
        T = full.shape[1]
        for n in range(T - m + 1):
            Xs.append(full[:, n:n + m])
            Ss.append(np.stack([idt.pad_history(full[i, max(0, n - h + 1):n + 1, :d_s], h)[hist]
                                for i in range(2)]))
            cmds.append(ep.command)
    if not Xs:
        raise DataError(f"no episode is long enough for a {m}-frame window")
    return WindowSet(np.stack(Xs), np.stack(Ss), cmds)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamW:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 2e-5
    warmup: int = 0
    total: int = 1

    def __post_init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def rate(self, step: int) -> float:
        """Linear warm-up to the peak, then cosine decay to zero at ``total``."""
        if self.warmup and step <= self.warmup:
            return self.lr * step / self.warmup
        span = max(1, self.total - self.warmup)
        frac = min(1.0, (step - self.warmup) / span)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))

    def update(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> float:
        self.step += 1
        lr = self.rate(self.step)
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        for name, p in params.items():
            g = grads[name]
            m = f32(self.beta1 * self.m.get(name, 0.0) + (1.0 - self.beta1) * g)
            v = f32(self.beta2 * self.v.get(name, 0.0) + (1.0 - self.beta2) * g * g)
            self.m[name], self.v[name] = m, v
            step = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = f32(p.data - lr * step)
        return lr

    def header(self) -> str:
        return (f"# AdamW\tbeta1={self.beta1}\tbeta2={self.beta2}\tweight_decay={self.weight_decay}"
                f"\tpeak_lr={self.lr}\twarmup={self.warmup}\tsteps={self.total}\teps={self.eps}\n")


def make_optimizer(config: Config) -> AdamW:
    return AdamW(config.lr, config.beta1, config.beta2, config.adam_eps, config.weight_decay,
                 config.warmup, config.steps)


# ---------------------------------------------------------------------------
# state and checkpoints


@dataclass
class TrainState:
    config: Config
    params: idt.InterDiTParams
    stats: NormStats
    opt: AdamW

    @property
    def step(self) -> int:
        return self.opt.step

    def checkpoint(self) -> Checkpoint:
        t = {name: p.data for name, p in self.params.tensors.items()}
        t["norm.mean"], t["norm.std"] = self.stats.mean, self.stats.std
        for name in self.opt.m:
            t[f"opt.m.{name}"], t[f"opt.v.{name}"] = self.opt.m[name], self.opt.v[name]
        t["opt.step"] = np.array([self.opt.step], dtype=np.float64)
        return Checkpoint(self.config.to_text(paths=False), self.config.digest(), t)


def init_state(config: Config, stats: NormStats) -> TrainState:
    params = idt.init_params(config.model_config(), config.model_seed)
    for p in params.tensors.values():
        p.data = f32(p.data)
    return TrainState(config, params, stats, make_optimizer(config))


def state_from_checkpoint(ck: Checkpoint, config: Config | None = None) -> TrainState:
    """Rebuild the training state; ``config`` (if given) must share the checkpoint's digest."""
    saved = config_from_text(ck.config_text)
    config = config or saved
    if config.digest() != ck.digest or saved.digest() != ck.digest:
        raise ConfigError("checkpoint was written for a different model configuration (digest mismatch)")
    params = idt.init_params(config.model_config(), config.model_seed)
    missing = [n for n in params.tensors if n not in ck.tensors]
    if missing:
        raise ConfigError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    for name, p in params.tensors.items():
        if ck.tensors[name].shape != p.data.shape:
            raise ConfigError(f"parameter {name} has shape {ck.tensors[name].shape}, expected {p.data.shape}")
        p.data = ck.tensors[name].copy()
    opt = make_optimizer(config)
    if "opt.step" in ck.tensors:
        opt.step = int(ck.tensors["opt.step"][0])
        for name in params.tensors:
            if f"opt.m.{name}" in ck.tensors:
                opt.m[name] = ck.tensors[f"opt.m.{name}"].copy()
                opt.v[name] = ck.tensors[f"opt.v.{name}"].copy()
    stats = NormStats(ck.tensors["norm.mean"].copy(), ck.tensors["norm.std"].copy())
    return TrainState(config, params, stats, opt)


# ---------------------------------------------------------------------------
# loop


def train_step(state: TrainState, windows: WindowSet, schedule: dfn.NoiseSchedule) -> float:
    """One optimiser step; the batch, noise levels and masks depend only on (seed, step)."""
    cfg = state.config
    step = state.step + 1
    rng = np.random.default_rng([cfg.seed, step])
    idx = rng.integers(0, len(windows), size=cfg.batch_size)
    batch = windows.batch(idx)
    predict = dfn.model_predictor(state.params, batch, rng, noise=True)
    names = state.params.names()
    tensors = [state.params[n] for n in names]
    for p in tensors:
        p.grad = None
    loss = dfn.training_loss(predict, batch, schedule, rng, cfg.cfg_mask_rate)
    value = float(loss.data)
    if not math.isfinite(value):
        return value
    grads = nx.backward(loss, wrt=tensors)
    state.opt.update(state.params.tensors, dict(zip(names, grads)))
    return value


def train(state: TrainState, windows: WindowSet, until: int | None = None,
          checkpoint_path: str | Path | None = None, log_path: str | Path | None = None,
          on_step: Callable[[int, float], None] | None = None) -> list[tuple[int, float]]:
    """Run to step ``until`` (default: the configured total). Returns (step, loss) rows.

    The loss log is appended to when resuming and created with the optimiser header otherwise.
    """
    cfg = state.config
    until = cfg.steps if until is None else until
    schedule = dfn.make_schedule(cfg.diffusion_steps, cfg.schedule)
    logf = None
    if log_path is not None:
        fresh = state.step == 0 or not Path(log_path).exists()
        logf = open(log_path, "w" if fresh else "a")
        if fresh:
            logf.write(state.opt.header())
            logf.write("step\tloss\tlr\n")
    rows = []
    try:
        while state.step < until:
            good = state.checkpoint() if checkpoint_path is not None else None
            loss = train_step(state, windows, schedule)
            if not math.isfinite(loss):
                if good is not None:
                    good.save(checkpoint_path)
                raise TrainingDiverged(f"non-finite loss at step {state.step + 1}; "
                                       f"checkpoint at step {state.step} retained")
            rows.append((state.step, loss))
            if logf:
                logf.write(f"{state.step}\t{loss!r}\t{state.opt.rate(state.step)!r}\n")
            if on_step:
                on_step(state.step, loss)
            if checkpoint_path is not None and (state.step % cfg.checkpoint_every == 0 or state.step == until):
                state.checkpoint().save(checkpoint_path)
    finally:
        if logf:
            logf.close()
    return rows


def read_loss_log(path: str | Path) -> list[tuple[int, float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#") or line.startswith("step"):
            continue
        step, loss = line.split("\t")[:2]
        rows.append((int(step), float(loss)))
    return rows
