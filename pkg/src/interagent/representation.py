"""Behaviour representation: proprioception, exteroception (RS / FIG) and 6D rotations.

All per-agent quantities are expressed in the agent's heading frame: the
frame at the root position rotated by the root yaw about the vertical axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DegenerateInputError
from .rotations import rot_z
from .simworld import AgentState, BodySpec, SimState, kinematics

EXTERO_KINDS = ("RS", "FIG", "SIG")
STD_FLOOR = 1e-6


def encode_rot6d(R: np.ndarray) -> np.ndarray:
    """First two columns of a rotation matrix, column-major."""
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def decode_rot6d(v6, tol: float = 1e-12) -> np.ndarray:
    """Gram-Schmidt the two stored columns back into a proper rotation."""
    v6 = np.asarray(v6, dtype=np.float64)
    a1, a2 = v6[..., 0:3], v6[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= tol):
        raise DegenerateInputError("first 6D column has zero length")
    b1 = a1 / n1
    u2 = a2 - (b1 * a2).sum(-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 <= tol * np.maximum(1.0, np.linalg.norm(a2, axis=-1, keepdims=True))):
        raise DegenerateInputError("6D columns are parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def proprio_dim(J: int) -> int:
    return 1 + 3 * (J - 1) + 6 * J + 3 * J + 3 * J


def extero_dim(J: int, kind: str) -> int:
    if kind == "RS":
        return proprio_dim(J)
    if kind in ("FIG", "SIG"):
        return 3 * J * J
    raise ConfigError(f"unknown exteroception kind {kind!r}")


@dataclass
class Proprio:
    root_height: float
    local_pos: np.ndarray  # (J-1) x 3
    rot6d: np.ndarray  # J x 6
    lin_vel: np.ndarray  # J x 3
    ang_vel: np.ndarray  # J x 3

    def flatten(self) -> np.ndarray:
        return np.concatenate([[self.root_height], self.local_pos.ravel(), self.rot6d.ravel(),
                               self.lin_vel.ravel(), self.ang_vel.ravel()])

    @classmethod
    def unflatten(cls, v: np.ndarray, J: int) -> "Proprio":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (proprio_dim(J),):
            raise DataError(f"proprio vector has shape {v.shape}, expected ({proprio_dim(J)},)")
        a = 1
        b = a + 3 * (J - 1)
        c = b + 6 * J
        d = c + 3 * J
        return cls(float(v[0]), v[a:b].reshape(J - 1, 3), v[b:c].reshape(J, 6),
                   v[c:d].reshape(J, 3), v[d:].reshape(J, 3))


@dataclass
class Extero:
    kind: str
    values: np.ndarray


def _heading_inv(agent: AgentState) -> np.ndarray:
    return rot_z(-agent.yaw)


def encode_proprio(agent: AgentState, spec: BodySpec) -> Proprio:
    if spec.J < 2:
        raise ConfigError("proprioception needs J >= 2")
    kin = kinematics(agent, spec)
    Hinv = _heading_inv(agent)
    local = kin.local_rot.copy()
    local[0] = Hinv @ kin.rot[0]
    return Proprio(
        root_height=float(agent.root_pos[2]),
        local_pos=(kin.pos[1:] - agent.root_pos) @ Hinv.T,
        rot6d=encode_rot6d(local),
        lin_vel=kin.vel @ Hinv.T,
        ang_vel=kin.angvel @ Hinv.T,
    )


def fig_world_edges(ego: AgentState, other: AgentState, spec: BodySpec) -> np.ndarray:
    """e[i, j] = p_i(other) - p_j(ego) in world coordinates, shape J x J x 3."""
    p_ego = kinematics(ego, spec).pos
    p_other = kinematics(other, spec).pos
    return p_other[:, None, :] - p_ego[None, :, :]


def build_fig(ego: AgentState, other: AgentState, spec: BodySpec) -> Extero:
    """Fully connected interaction graph, other-agent joint outer, ego joint inner."""
    e = fig_world_edges(ego, other, spec) @ _heading_inv(ego).T
    return Extero("FIG", e.reshape(-1))


def build_rs(ego: AgentState, other: AgentState, spec: BodySpec) -> Extero:
    """The other agent's proprioception layout re-expressed in the ego heading frame."""
    ko = kinematics(other, spec)
    Hinv = _heading_inv(ego)
    local = ko.local_rot.copy()
    local[0] = Hinv @ ko.rot[0]
    p = Proprio(
        root_height=float(other.root_pos[2]),
        local_pos=(ko.pos[1:] - ego.root_pos) @ Hinv.T,
        rot6d=encode_rot6d(local),
        lin_vel=ko.vel @ Hinv.T,
        ang_vel=ko.angvel @ Hinv.T,
    )
    return Extero("RS", p.flatten())


def build_extero(ego: AgentState, other: AgentState, spec: BodySpec, kind: str) -> Extero:
    if kind == "RS":
        return build_rs(ego, other, spec)
    if kind in ("FIG", "SIG"):
        return build_fig(ego, other, spec)
    raise ConfigError(f"unknown exteroception kind {kind!r}")


def frame_features(state: SimState, spec: BodySpec, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-agent proprioception (2 x Dp) and exteroception (2 x De) of one frame."""
    a, b = state.agents
    xp = np.stack([encode_proprio(a, spec).flatten(), encode_proprio(b, spec).flatten()])
    xe = np.stack([build_extero(a, b, spec, kind).values, build_extero(b, a, spec, kind).values])
    return xp, xe


# ---------------------------------------------------------------------------
# normalisation


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def fit_norm(data, floor: float = STD_FLOOR) -> NormStats:
    """Per-dimension statistics over the rows of one array or a list of arrays."""
    if isinstance(data, (list, tuple)):
        if not data:
            raise DataError("cannot fit normalisation on an empty dataset")
        data = np.concatenate([np.asarray(d, dtype=np.float64).reshape(-1, np.shape(d)[-1]) for d in data])
    data = np.asarray(data, dtype=np.float64)
    if data.size == 0 or data.shape[0] == 0:
        raise DataError("cannot fit normalisation on an empty dataset")
    mean = data.mean(axis=0)
    std = np.maximum(data.std(axis=0), floor)
    return NormStats(mean, std)


def normalize(x, stats: NormStats) -> np.ndarray:
    return (np.asarray(x) - stats.mean) / stats.std


def denormalize(x, stats: NormStats) -> np.ndarray:
    return np.asarray(x) * stats.std + stats.mean
