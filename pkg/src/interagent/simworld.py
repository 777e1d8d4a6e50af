"""Deterministic toy physics for two PD-driven articulated humanoids.

The dynamics are deliberately simple: every actuated degree of freedom is an
independent unit-inertia rotational joint, and the root is a point mass under
gravity held up by rigid contact sites (feet).  This is not an articulated
rigid-body simulator; it keeps the state / action / PD-control interface of a
physics-based character while costing a few microseconds per step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SimulationFault
from .rotations import axis_rotation, axis_vector, rot_z

GRAVITY = 9.81
TORQUE_LIMIT = 200.0
CONTACT_THRESHOLD = 0.005
DT = 1.0 / 30.0


@dataclass
class BodySpec:
    names: list[str]
    parents: list[int]
    offsets: np.ndarray  # J x 3, joint origin in the parent frame
    dof_axes: list[str]  # rotation axis sequence per joint, "" for a fixed joint
    masses: np.ndarray
    lower: np.ndarray  # per actuated dof
    upper: np.ndarray
    kp: float = 100.0
    kd: float = 20.0
    damping: float = 0.5
    torque_limit: float = TORQUE_LIMIT
    friction: float = 10.0
    sites: dict[str, tuple[int, tuple[float, float, float]]] = field(default_factory=dict)
    contact_sites: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        J = len(self.names)
        if not (len(self.parents) == J == len(self.dof_axes) == self.offsets.shape[0] == self.masses.shape[0]):
            raise ConfigError("body spec arrays disagree on the joint count")
        if J < 2:
            raise ConfigError("a body needs at least two joints")
        if self.parents[0] != -1 or any(not 0 <= p < j for j, p in enumerate(self.parents) if j > 0):
            raise ConfigError("topology must be a tree rooted at joint 0 with parents listed first")
        if self.lower.shape != (self.dof,) or self.upper.shape != (self.dof,):
            raise ConfigError("joint limits must have one entry per actuated dof")
        starts = np.cumsum([0] + [len(a) for a in self.dof_axes])
        self.dof_slices = [slice(int(starts[j]), int(starts[j + 1])) for j in range(J)]

    @property
    def J(self) -> int:
        return len(self.names)

    @property
    def dof(self) -> int:
        return sum(len(a) for a in self.dof_axes)

    @property
    def link_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.offsets, axis=1)

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    def index(self, name: str) -> int:
        return self.names.index(name)

    def clamp(self, q: np.ndarray) -> np.ndarray:
        return np.clip(q, self.lower, self.upper)


def desk_body() -> BodySpec:
    """Five joints (root, shoulders, elbows), eight actuated dofs, rigid feet under the root."""
    return BodySpec(
        names=["root", "l_shoulder", "l_elbow", "r_shoulder", "r_elbow"],
        parents=[-1, 0, 1, 0, 3],
        offsets=[[0, 0, 0], [0, 0.2, 0.5], [0, 0, -0.3], [0, -0.2, 0.5], [0, 0, -0.3]],
        dof_axes=["", "yxz", "y", "yxz", "y"],
        masses=[40.0, 3.0, 2.0, 3.0, 2.0],
        lower=[-3.0, -2.5, -1.5, -2.6, -3.0, -2.5, -1.5, -2.6],
        upper=[1.0, 2.5, 1.5, 0.05, 1.0, 2.5, 1.5, 0.05],
        sites={
            "l_hand": (2, (0.0, 0.0, -0.28)),
            "r_hand": (4, (0.0, 0.0, -0.28)),
            "l_foot": (0, (0.0, 0.1, -0.9)),
            "r_foot": (0, (0.0, -0.1, -0.9)),
        },
        contact_sites=["l_foot", "r_foot"],
    )


def paper_body() -> BodySpec:
    """Fifteen joints and 28 actuated dofs, laid out like a standard mocap humanoid."""
    names = ["root", "chest", "neck", "r_hip", "r_knee", "r_ankle", "r_shoulder", "r_elbow",
             "r_wrist", "l_hip", "l_knee", "l_ankle", "l_shoulder", "l_elbow", "l_wrist"]
    parents = [-1, 0, 1, 0, 3, 4, 1, 6, 7, 0, 9, 10, 1, 12, 13]
    offsets = [[0, 0, 0], [0, 0, 0.24], [0, 0, 0.22], [0, -0.085, -0.02], [0, 0, -0.42],
               [0, 0, -0.41], [0, -0.18, 0.2], [0, 0, -0.28], [0, 0, -0.26],
               [0, 0.085, -0.02], [0, 0, -0.42], [0, 0, -0.41], [0, 0.18, 0.2], [0, 0, -0.28],
               [0, 0, -0.26]]
    axes = ["", "xyz", "xyz", "yxz", "y", "yxz", "yxz", "y", "", "yxz", "y", "yxz", "yxz", "y", ""]
    dof = sum(len(a) for a in axes)
    lower = np.full(dof, -2.5)
    upper = np.full(dof, 2.5)
    return BodySpec(
        names=names, parents=parents, offsets=offsets, dof_axes=axes,
        masses=[12, 10, 5, 6, 4, 1, 2, 1.5, 0.5, 6, 4, 1, 2, 1.5, 0.5],
        lower=lower, upper=upper,
        sites={"r_hand": (8, (0, 0, -0.08)), "l_hand": (14, (0, 0, -0.08)),
               "r_foot": (5, (0.05, 0, -0.07)), "l_foot": (11, (0.05, 0, -0.07))},
        contact_sites=["l_foot", "r_foot"],
    )


@dataclass
class AgentState:
    root_pos: np.ndarray
    yaw: float
    root_vel: np.ndarray
    q: np.ndarray
    qd: np.ndarray

    def copy(self) -> "AgentState":
        return AgentState(self.root_pos.copy(), float(self.yaw), self.root_vel.copy(),
                          self.q.copy(), self.qd.copy())

    def vector(self) -> np.ndarray:
        return np.concatenate([self.root_pos, [self.yaw], self.root_vel, self.q, self.qd])

    @classmethod
    def from_vector(cls, v: np.ndarray, dof: int) -> "AgentState":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (7 + 2 * dof,):
            raise ConfigError(f"state vector of length {v.shape} does not match dof={dof}")
        return cls(v[0:3].copy(), float(v[3]), v[4:7].copy(), v[7:7 + dof].copy(), v[7 + dof:].copy())


@dataclass
class SimState:
    agents: tuple[AgentState, AgentState]
    time: float = 0.0

    def copy(self) -> "SimState":
        return SimState((self.agents[0].copy(), self.agents[1].copy()), self.time)


def standing_agent(spec: BodySpec, x: float = 0.0, y: float = 0.0, yaw: float = 0.0,
                   q: np.ndarray | None = None) -> AgentState:
    """An agent at rest with its contact sites exactly on the ground."""
    q = np.zeros(spec.dof) if q is None else np.asarray(q, dtype=np.float64).copy()
    agent = AgentState(np.array([x, y, 0.0]), yaw, np.zeros(3), q, np.zeros(spec.dof))
    z = site_positions(agent, spec, spec.contact_sites)[:, 2].min()
    agent.root_pos[2] = -z
    return agent


# ---------------------------------------------------------------------------
# kinematics


def local_rotation(axes: str, q: np.ndarray, qd: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation of a joint relative to its parent and its angular velocity (parent frame)."""
    R = np.eye(3)
    w = np.zeros(3)
    for k, ax in enumerate(axes):
        w = w + (R @ axis_vector(ax)) * qd[k]
        R = R @ axis_rotation(ax, q[k])
    return R, w


@dataclass
class Kinematics:
    pos: np.ndarray  # J x 3 world
    rot: np.ndarray  # J x 3 x 3 world
    local_rot: np.ndarray  # J x 3 x 3 relative to parent (root: relative to heading)
    vel: np.ndarray  # J x 3 world linear velocity
    angvel: np.ndarray  # J x 3 world angular velocity


def kinematics(agent: AgentState, spec: BodySpec) -> Kinematics:
    J = spec.J
    pos = np.zeros((J, 3))
    rot = np.zeros((J, 3, 3))
    local = np.zeros((J, 3, 3))
    vel = np.zeros((J, 3))
    angvel = np.zeros((J, 3))
    heading = rot_z(agent.yaw)
    for j in range(J):
        sl = spec.dof_slices[j]
        L, wl = local_rotation(spec.dof_axes[j], agent.q[sl], agent.qd[sl])
        local[j] = L
        p = spec.parents[j]
        if p < 0:
            pos[j] = agent.root_pos
            vel[j] = agent.root_vel
            rot[j] = heading @ L
            angvel[j] = heading @ wl
            continue
        r = rot[p] @ spec.offsets[j]
        pos[j] = pos[p] + r
        vel[j] = vel[p] + np.cross(angvel[p], r)
        rot[j] = rot[p] @ L
        angvel[j] = angvel[p] + rot[p] @ wl
    return Kinematics(pos, rot, local, vel, angvel)


def forward_kinematics(state, spec: BodySpec) -> np.ndarray:
    """World joint positions: J x 3 for one agent, 2 x J x 3 for a SimState."""
    if isinstance(state, SimState):
        return np.stack([kinematics(a, spec).pos for a in state.agents])
    return kinematics(state, spec).pos


def site_positions(agent: AgentState, spec: BodySpec, names, kin: Kinematics | None = None) -> np.ndarray:
    kin = kin or kinematics(agent, spec)
    out = np.zeros((len(names), 3))
    for k, name in enumerate(names):
        j, off = spec.sites[name]
        out[k] = kin.pos[j] + kin.rot[j] @ np.asarray(off)
    return out


def site_velocities(agent: AgentState, spec: BodySpec, names, kin: Kinematics | None = None) -> np.ndarray:
    kin = kin or kinematics(agent, spec)
    out = np.zeros((len(names), 3))
    for k, name in enumerate(names):
        j, off = spec.sites[name]
        out[k] = kin.vel[j] + np.cross(kin.angvel[j], kin.rot[j] @ np.asarray(off))
    return out


# ---------------------------------------------------------------------------
# dynamics


def pd_torque(q, qd, a, kp, kd, limit: float = TORQUE_LIMIT) -> np.ndarray:
    tau = kp * (np.asarray(a) - np.asarray(q)) - kd * np.asarray(qd)
    return np.clip(tau, -limit, limit)


def _joint_frame(agent: AgentState, spec: BodySpec, j: int) -> tuple[np.ndarray, np.ndarray]:
    """World position and rotation of joint j, walking only its ancestor chain."""
    chain = []
    while j >= 0:
        chain.append(j)
        j = spec.parents[j]
    pos, R = None, None
    for k in reversed(chain):
        sl = spec.dof_slices[k]
        L = np.eye(3)
        for ax, ang in zip(spec.dof_axes[k], agent.q[sl]):
            L = L @ axis_rotation(ax, ang)
        if pos is None:
            pos, R = agent.root_pos, rot_z(agent.yaw) @ L
        else:
            pos, R = pos + R @ spec.offsets[k], R @ L
    return pos, R


def contact_heights(agent: AgentState, spec: BodySpec) -> np.ndarray:
    z = np.empty(len(spec.contact_sites))
    for k, name in enumerate(spec.contact_sites):
        j, off = spec.sites[name]
        pos, R = _joint_frame(agent, spec, j)
        z[k] = pos[2] + (R @ np.asarray(off))[2]
    return z


def ground_contact(state: SimState, spec: BodySpec) -> tuple[SimState, np.ndarray]:
    """Lift any agent whose contact sites are below z=0 and report per-site contact flags."""
    out = state.copy()
    flags = np.zeros((2, len(spec.contact_sites)), dtype=bool)
    for i, agent in enumerate(out.agents):
        z = contact_heights(agent, spec)
        low = z.min()
        if low < 0.0:
            agent.root_pos[2] -= low
            z = z - low
            if agent.root_vel[2] < 0.0:
                agent.root_vel[2] = 0.0
        flags[i] = z <= CONTACT_THRESHOLD
    return out, flags


def _step_agent(agent: AgentState, cmd: np.ndarray, dt: float, spec: BodySpec,
                gravity: float) -> AgentState:
    tau = pd_torque(agent.q, agent.qd, cmd, spec.kp, spec.kd, spec.torque_limit)
    qdd = tau - spec.damping * agent.qd
    qd = agent.qd + dt * qdd
    q = agent.q + dt * qd
    below, above = q < spec.lower, q > spec.upper
    q = np.clip(q, spec.lower, spec.upper)
    qd = np.where((below & (qd < 0)) | (above & (qd > 0)), 0.0, qd)
    vel = agent.root_vel + dt * np.array([0.0, 0.0, -gravity])
    pos = agent.root_pos + dt * vel
    return AgentState(pos, agent.yaw, vel, q, qd)


def step(state: SimState, cmds, dt: float = DT, spec: BodySpec | None = None,
         gravity: float = GRAVITY) -> SimState:
    """Advance both agents by one semi-implicit Euler step."""
    if dt <= 0:
        raise ConfigError("dt must be positive")
    spec = spec or desk_body()
    agents = tuple(
        _step_agent(a, np.asarray(c, dtype=np.float64), dt, spec, gravity)
        for a, c in zip(state.agents, cmds)
    )
    pre = SimState(agents, state.time + dt)
    standing = [bool((contact_heights(a, spec) <= CONTACT_THRESHOLD).any()) for a in state.agents]
    new, _ = ground_contact(pre, spec)
    for i, agent in enumerate(new.agents):
        # horizontal friction while the agent was standing at the start of the step
        if standing[i]:
            agent.root_vel[:2] *= max(0.0, 1.0 - spec.friction * dt)
    for agent in new.agents:
        if not (np.all(np.isfinite(agent.vector()))):
            raise SimulationFault(f"non-finite state at t={new.time:.4f}")
    return new


def mechanical_energy(state: SimState, spec: BodySpec, gravity: float = GRAVITY) -> float:
    e = 0.0
    M = spec.total_mass
    for a in state.agents:
        e += 0.5 * float(a.qd @ a.qd) + 0.5 * M * float(a.root_vel @ a.root_vel) + M * gravity * a.root_pos[2]
    return e
