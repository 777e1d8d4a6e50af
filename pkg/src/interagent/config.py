"""Flat ``key = value`` run configuration with a paper-scale default and a desk profile."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import interdit as idt
from .errors import ConfigError
from .simworld import BodySpec, desk_body, paper_body


def _f(default, doc: str):
    return field(default=default, metadata={"doc": doc})


@dataclass(frozen=True)
class Config:
    # body and model
    body: str = _f("paper", "body spec: 'desk', 'paper' or a path to a JSON body file")
    J: int = _f(15, "joint count; must agree with the body spec")
    extero: str = _f("SIG", "exteroception kind: RS, FIG or SIG")
    d_model: int = _f(768, "latent width of every stream")
    blocks: int = _f(4, "number of multi-stream blocks")
    heads: int = _f(8, "attention heads in fusion and conditioning layers")
    sparse_heads: int = _f(8, "heads of the sparse edge attention")
    cond_layers: str = _f("history,other,history,other,history",
                          "comma-separated conditioning stack, each 'history' or 'other'")
    ffn_mult: int = _f(4, "feed-forward expansion factor")
    m: int = _f(4, "prediction horizon in frames")
    h: int = _f(364, "history buffer length in frames")
    sparse_mode: str = _f("edge", "sparsity partition: 'edge' or 'joint'")
    sparse_ratio: float = _f(0.5, "fraction of edge units kept per query")
    sparse_temperature: float = _f(1.0, "Gumbel-softmax temperature")
    joint_group: str = _f("other", "joint-mode grouping: 'other' or 'ego'")
    # diffusion
    diffusion_steps: int = _f(50, "number of noise levels")
    schedule: str = _f("cosine", "noise schedule: 'cosine' or 'linear'")
    sampler: str = _f("ancestral", "reverse sampler: 'ancestral' or 'deterministic'")
    guidance: float = _f(3.5, "classifier-free guidance scale")
    cfg_mask_rate: float = _f(0.1, "probability of dropping the text condition in training")
    # optimiser
    lr: float = _f(1e-4, "peak learning rate")
    beta1: float = _f(0.9, "AdamW first-moment decay")
    beta2: float = _f(0.999, "AdamW second-moment decay")
    adam_eps: float = _f(1e-8, "AdamW denominator epsilon")
    weight_decay: float = _f(2e-5, "decoupled weight decay")
    warmup: int = _f(5000, "linear warm-up steps before the cosine decay")
    steps: int = _f(80000, "training steps")
    batch_size: int = _f(256, "windows per training step")
    checkpoint_every: int = _f(1000, "steps between periodic checkpoints")
    # collection
    scenarios: str = _f("approach,handshake,circle,push", "comma-separated reference scenarios")
    motions_per_scenario: int = _f(1, "reference motions generated per scenario")
    episode_length: int = _f(120, "frames per reference motion")
    sigma: float = _f(0.01, "std of the Gaussian noise added to executed actions")
    rollouts_per_motion: int = _f(12, "tracking attempts per reference motion")
    keep: int = _f(8, "successful episodes kept per reference motion")
    success_threshold: float = _f(0.5, "minimum mean interaction-graph reward of a kept episode")
    # control
    rollout_steps: int = _f(120, "frames generated by rollout and react")
    rollout_mode: str = _f("execute_horizon", "'execute_horizon' or 'replan_every_frame'")
    # seeds and paths
    seed: int = _f(0, "seed for collection, training noise and sampling")
    model_seed: int = _f(0, "seed for parameter initialisation")
    dataset: str = _f("dataset.iads", "dataset file")
    checkpoint: str = _f("model.idtc", "checkpoint file")
    loss_log: str = _f("loss.tsv", "training loss log")
    output: str = _f("rollout.iads", "trajectory dump written by rollout and react")

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.checkpoint_every < 1 or self.warmup < 0:
            raise ConfigError("steps, batch_size and checkpoint_every must be positive, warmup non-negative")
        if not 0.0 <= self.cfg_mask_rate <= 1.0:
            raise ConfigError("cfg_mask_rate must lie in [0, 1]")
        if self.lr <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("invalid optimiser constants")

    def body_spec(self) -> BodySpec:
        spec = load_body(self.body)
        if spec.J != self.J:
            raise ConfigError(f"config J={self.J} disagrees with body {self.body!r} (J={spec.J})")
        return spec

    def model_config(self) -> idt.ModelConfig:
        spec = self.body_spec()
        return idt.ModelConfig(
            J=spec.J, dof=spec.dof, extero=self.extero, d_model=self.d_model, blocks=self.blocks,
            heads=self.heads, m=self.m, h=self.h, cond_layers=split_list(self.cond_layers),
            ffn_mult=self.ffn_mult, sparse_mode=self.sparse_mode, sparse_ratio=self.sparse_ratio,
            sparse_temperature=self.sparse_temperature, sparse_heads=self.sparse_heads,
            joint_group=self.joint_group)

    def scenario_list(self) -> list[str]:
        return split_list(self.scenarios)

    def digest(self) -> bytes:
        """sha256 over everything that changes the meaning of a checkpoint or dump."""
        model = asdict(self.model_config())
        model["cond_layers"] = list(model["cond_layers"])
        payload = {"model": model, "body": body_to_dict(self.body_spec()),
                   "diffusion": [self.diffusion_steps, self.schedule]}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).digest()

    def to_text(self, paths: bool = True) -> str:
        """Round-trippable config text; ``paths=False`` drops file locations (checkpoint headers)."""
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self)
                       if paths or f.name not in PATH_FIELDS)


PATH_FIELDS = ("dataset", "checkpoint", "loss_log", "output")

PROFILES = {
    "paper": {},
    "desk": dict(body="desk", J=5, d_model=64, blocks=2, heads=4, sparse_heads=4,
                 cond_layers="history,other", steps=2000, warmup=100, batch_size=64,
                 checkpoint_every=500),
}


def split_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _coerce(name: str, raw, kind: type):
    if isinstance(raw, kind) and not isinstance(raw, bool):
        return raw
    text = str(raw).strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: expected {kind.__name__}, got {text!r}") from None
    return text


def _types() -> dict[str, type]:
    return {f.name: type(f.default) for f in fields(Config)}


def make_config(profile: str = "paper", overrides: dict | None = None) -> Config:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    values = dict(PROFILES[profile])
    values.update(overrides or {})
    types = _types()
    unknown = sorted(set(values) - set(types))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return replace(Config(), **{k: _coerce(k, v, types[k]) for k, v in values.items()})


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_config(path: str | Path | None = None, profile: str = "paper", overrides: dict | None = None) -> Config:
    """Profile defaults, then the file's keys, then explicit overrides."""
    values = parse_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    if "profile" in values:
        profile = values.pop("profile")
    return make_config(profile, values)


def config_from_text(text: str) -> Config:
    return make_config("paper", parse_text(text))


# ---------------------------------------------------------------------------
# body specs


def body_to_dict(spec: BodySpec) -> dict:
    return {"names": spec.names, "parents": spec.parents, "offsets": spec.offsets.tolist(),
            "dof_axes": spec.dof_axes, "masses": spec.masses.tolist(), "lower": spec.lower.tolist(),
            "upper": spec.upper.tolist(), "kp": spec.kp, "kd": spec.kd, "damping": spec.damping,
            "torque_limit": spec.torque_limit, "friction": spec.friction,
            "sites": {k: [j, list(off)] for k, (j, off) in spec.sites.items()},
            "contact_sites": spec.contact_sites}


def body_from_dict(d: dict) -> BodySpec:
    try:
        d = dict(d)
        d["sites"] = {k: (int(j), tuple(float(x) for x in off)) for k, (j, off) in d.get("sites", {}).items()}
        d["offsets"] = np.asarray(d["offsets"], dtype=np.float64)
        return BodySpec(**d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed body spec: {exc}") from exc


def load_body(name: str) -> BodySpec:
    if name == "desk":
        return desk_body()
    if name == "paper":
        return paper_body()
    path = Path(name)
    if not path.is_file():
        raise ConfigError(f"body spec {name!r} is neither 'desk', 'paper' nor a readable file")
    try:
        return body_from_dict(json.loads(path.read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
