"""Procedural two-agent reference motions, a scripted tracking expert, the
interaction-graph reward and noisy-state / clean-action data collection."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .errors import ConfigError
from .rotations import wrap_angle
from .simworld import (DT, AgentState, BodySpec, SimState, forward_kinematics, ground_contact,
                       site_positions, standing_agent, step)

log = logging.getLogger(__name__)

SCENARIOS = {
    "approach": "two people reach out toward each other",
    "handshake": "two people shake hands",
    "circle": "two people wave their arms in circles",
    "push": "one person pushes the other person",
}
LAMBDA_POS = 2.0
LAMBDA_VEL = 0.1
LAMBDA_ROOT = 1.0
SUCCESS_THRESHOLD = 0.5
POS_GAIN = 0.5
VEL_GAIN = 0.1


def smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


@dataclass
class ReferenceMotion:
    scenario: str
    command: str
    root: np.ndarray  # [2, 3] fixed root positions
    yaw: np.ndarray  # [2]
    q: np.ndarray  # [2, T, dof]
    dt: float = DT

    @property
    def length(self) -> int:
        return self.q.shape[1]

    def qd(self) -> np.ndarray:
        """Joint velocities by forward differences; the last frame repeats the previous one."""
        d = np.diff(self.q, axis=1) / self.dt
        return np.concatenate([d, d[:, -1:]], axis=1)

    def state(self, t: int) -> SimState:
        t = min(max(t, 0), self.length - 1)
        qd = self.qd()
        return SimState(tuple(AgentState(self.root[i].copy(), float(self.yaw[i]), np.zeros(3),
                                         self.q[i, t].copy(), qd[i, t].copy()) for i in range(2)),
                        t * self.dt)


def _arm(spec: BodySpec, side: str) -> tuple[slice, str]:
    j = spec.index(f"{side}_shoulder")
    e = spec.index(f"{side}_elbow")
    sl = slice(spec.dof_slices[j].start, spec.dof_slices[e].stop)
    return sl, f"{side}_hand"


def solve_ik(agent: AgentState, spec: BodySpec, targets: dict[str, np.ndarray], q0: np.ndarray) -> np.ndarray:
    """Bounded least-squares fit of arm angles so that named hand sites reach world targets."""
    q = q0.copy()
    for side, target in targets.items():
        sl, site = _arm(spec, side)

        def residual(x, sl=sl, site=site, target=target):
            trial = agent.copy()
            trial.q = q.copy()
            trial.q[sl] = x
            return site_positions(trial, spec, [site])[0] - target

        lo, hi = spec.lower[sl], spec.upper[sl]
        x0 = np.clip(q[sl], lo + 1e-6, hi - 1e-6)
        q[sl] = least_squares(residual, x0, bounds=(lo, hi), xtol=1e-12, ftol=1e-12, gtol=1e-12).x
    return q


def _pose(spec: BodySpec, **arms) -> np.ndarray:
    """Pose from per-arm (pitch, roll, yaw, elbow) tuples."""
    q = np.zeros(spec.dof)
    for side, vals in arms.items():
        q[_arm(spec, side)[0]] = vals
    return spec.clamp(q)


def _blend(q_from: np.ndarray, q_to: np.ndarray, T: int, start: float, end: float) -> np.ndarray:
    s = smoothstep((np.arange(T) / (T - 1) - start) / (end - start))
    return q_from[None] + s[:, None] * (q_to - q_from)[None]


def gen_reference(scenario: str, length: int, seed: int, spec: BodySpec) -> ReferenceMotion:
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; choose from {sorted(SCENARIOS)}")
    if length < 30:
        raise ConfigError("reference motions need at least 30 frames")
    rng = np.random.default_rng(seed)
    gap = {"handshake": (0.85, 1.0), "push": (0.55, 0.65)}.get(scenario, (0.9, 1.3))
    d = rng.uniform(*gap)
    agents = [standing_agent(spec, -d / 2, 0.0, 0.0), standing_agent(spec, d / 2, 0.0, np.pi)]
    rest = np.zeros(spec.dof)
    start, end = rng.uniform(0.05, 0.15), rng.uniform(0.55, 0.75)
    T = length
    if scenario == "handshake":
        target = np.array([0.0, rng.uniform(-0.05, 0.05), agents[0].root_pos[2] + rng.uniform(0.25, 0.35)])
        goal = [solve_ik(a, spec, {"r": target}, _pose(spec, r=(-0.8, 0.0, 0.0, -0.6))) for a in agents]
        q = np.stack([_blend(rest, g, T, start, end) for g in goal])
    elif scenario == "approach":
        goal = [_pose(spec, l=(p, 0.1, 0.0, -0.3), r=(p, -0.1, 0.0, -0.3))
                for p in rng.uniform(-1.7, -1.3, size=2)]
        q = np.stack([_blend(rest, g, T, start, end) for g in goal])
    elif scenario == "circle":
        omega = 2 * np.pi * rng.uniform(0.5, 1.0)
        t = np.arange(T) * DT
        ramp = smoothstep(np.arange(T) / (T - 1) / end)
        q = np.zeros((2, T, spec.dof))
        for i, phase in enumerate((0.0, np.pi)):
            for side, sign in (("l", 1.0), ("r", -1.0)):
                sl = _arm(spec, side)[0]
                q[i, :, sl.start] = ramp * (-1.2 + 0.4 * np.sin(omega * t + phase))
                q[i, :, sl.start + 1] = ramp * sign * (0.3 + 0.3 * np.cos(omega * t + phase))
                q[i, :, sl.start + 3] = ramp * -0.5
        q = np.clip(q, spec.lower, spec.upper)
    else:  # push: agent 1 reaches for agent 2's shoulders, agent 2 braces
        kin2 = forward_kinematics(agents[1], spec)
        fwd = np.array([-1.0, 0.0, 0.0])  # agent 2 faces -x
        targets = {"l": kin2[spec.index("r_shoulder")] + 0.08 * fwd,
                   "r": kin2[spec.index("l_shoulder")] + 0.08 * fwd}
        goal1 = solve_ik(agents[0], spec, targets, _pose(spec, l=(-1.4, 0, 0, -0.3), r=(-1.4, 0, 0, -0.3)))
        goal2 = _pose(spec, l=(-0.6, 0.4, 0.0, -1.6), r=(-0.6, -0.4, 0.0, -1.6))
        q = np.stack([_blend(rest, goal1, T, start, end), _blend(rest, goal2, T, start + 0.1, end)])
    root = np.stack([a.root_pos for a in agents])
    return ReferenceMotion(scenario, SCENARIOS[scenario], root, np.array([0.0, np.pi]), q)


# ---------------------------------------------------------------------------
# expert and reward


def tracking_policy(state: SimState, ref_next: SimState, spec: BodySpec,
                    pos_gain: float = POS_GAIN, vel_gain: float = VEL_GAIN) -> list[np.ndarray]:
    """Reference next-frame angles plus proportional corrections on pose and velocity error."""
    cmds = []
    for a, r in zip(state.agents, ref_next.agents):
        cmds.append(spec.clamp(r.q + pos_gain * (r.q - a.q) + vel_gain * (r.qd - a.qd)))
    return cmds


@dataclass
class GraphFrame:
    """Joint positions/velocities and root channels of both agents at one frame."""
    pos: np.ndarray  # [2, J, 3]
    vel: np.ndarray  # [2, J, 3]
    root: np.ndarray  # [2, 8]: position, velocity, yaw, yaw rate


def graph_frame(state: SimState, prev: SimState | None, spec: BodySpec, dt: float = DT) -> GraphFrame:
    """Velocities by backward differences (zero on the first frame)."""
    pos = forward_kinematics(state, spec)
    if prev is None:
        vel, rvel, yaw_rate = np.zeros_like(pos), np.zeros((2, 3)), np.zeros(2)
    else:
        prev_pos = forward_kinematics(prev, spec)
        vel = (pos - prev_pos) / dt
        rvel = np.stack([(a.root_pos - b.root_pos) / dt for a, b in zip(state.agents, prev.agents)])
        yaw_rate = np.array([wrap_angle(a.yaw - b.yaw) / dt for a, b in zip(state.agents, prev.agents)])
    root = np.stack([np.concatenate([a.root_pos, rvel[i], [a.yaw, yaw_rate[i]]])
                     for i, a in enumerate(state.agents)])
    return GraphFrame(pos, vel, root)


def edge_weights(ref_edges: np.ndarray) -> np.ndarray:
    """Softmin over edge lengths: closer reference edges weigh more; sums to one."""
    d = np.linalg.norm(ref_edges, axis=-1).ravel()
    w = np.exp(-(d - d.min()))
    return (w / w.sum()).reshape(ref_edges.shape[:-1])


def cross_edges(x: np.ndarray) -> np.ndarray:
    """[2, J, 3] -> [J, J, 3] edges from each agent-1 joint j to each agent-2 joint i."""
    return x[1][:, None, :] - x[0][None, :, :]


def ig_terms(sim: GraphFrame, ref: GraphFrame) -> tuple[float, float, float]:
    """(d_pos, d_vel, root error)."""
    w = edge_weights(cross_edges(ref.pos))
    d_pos = float(np.sum(w * np.linalg.norm(cross_edges(ref.pos) - cross_edges(sim.pos), axis=-1)))
    d_vel = float(np.sum(w * np.linalg.norm(cross_edges(ref.vel) - cross_edges(sim.vel), axis=-1)))
    diff = ref.root - sim.root
    diff[:, 6] = wrap_angle(diff[:, 6])
    return d_pos, d_vel, float(np.sum(np.linalg.norm(diff, axis=-1)))


def ig_reward(sim: GraphFrame, ref: GraphFrame, lambda_pos: float = LAMBDA_POS,
              lambda_vel: float = LAMBDA_VEL, lambda_root: float = LAMBDA_ROOT) -> float:
    d_pos, d_vel, d_root = ig_terms(sim, ref)
    r_ig = np.exp(-lambda_pos * d_pos - lambda_vel * d_vel)
    r_root = np.exp(-lambda_root * d_root)
    return float(r_ig * r_root)


# ---------------------------------------------------------------------------
# data collection


def quantize(state: SimState) -> SimState:
    """Round every state channel to float32 so the state survives a file roundtrip exactly."""
    def q(a):
        return np.asarray(a, dtype=np.float32).astype(np.float64)
    return SimState(tuple(AgentState(q(a.root_pos), float(np.float32(a.yaw)), q(a.root_vel), q(a.q), q(a.qd))
                          for a in state.agents), float(np.float32(state.time)))


@dataclass
class EpisodeRecord:
    motion: ReferenceMotion
    states: list[SimState]  # T visited states
    actions: np.ndarray  # [2, T, dof] clean policy outputs
    executed: np.ndarray  # [2, T-1, dof] actions sent to the simulator
    contacts: np.ndarray  # [2, T, C]
    rewards: np.ndarray  # [T]
    success: bool
    seed: tuple[int, ...] = field(default=())

    @property
    def command(self) -> str:
        return self.motion.command

    @property
    def mean_reward(self) -> float:
        return float(self.rewards.mean())


def run_episode(motion: ReferenceMotion, spec: BodySpec, sigma: float, rng: np.random.Generator,
                threshold: float = SUCCESS_THRESHOLD) -> EpisodeRecord:
    """a_t = pi(s_t, ref_{t+1}); the simulator receives a_t + eps, the record keeps a_t."""
    if sigma < 0:
        raise ConfigError("action noise must be non-negative")
    T = motion.length
    state, flags = ground_contact(motion.state(0), spec)
    state = quantize(state)
    states, actions, executed, contacts, rewards = [], [], [], [], []
    prev_sim = prev_ref = None
    for t in range(T):
        ref_t = motion.state(t)
        rewards.append(ig_reward(graph_frame(state, prev_sim, spec), graph_frame(ref_t, prev_ref, spec)))
        a = tracking_policy(state, motion.state(t + 1), spec)
        states.append(state)
        contacts.append(flags)
        actions.append(np.stack(a))
        if t == T - 1:
            break
        noisy = [x + sigma * rng.standard_normal(x.shape) for x in a]
        executed.append(np.stack(noisy))
        prev_sim, prev_ref = state, ref_t
        state, flags = ground_contact(step(state, noisy, spec=spec), spec)
        state = quantize(state)
    rewards = np.array(rewards)
    return EpisodeRecord(motion, states, np.stack(actions, axis=1), np.stack(executed, axis=1),
                         np.stack(contacts, axis=1), rewards, bool(rewards.mean() >= threshold))


def collect_dataset(motions: list[ReferenceMotion], spec: BodySpec, sigma: float = 0.01,
                    rollouts_per_motion: int = 12, keep: int = 8, seed: int = 0,
                    threshold: float = SUCCESS_THRESHOLD) -> tuple[list[EpisodeRecord], list[EpisodeRecord]]:
    """Returns (kept, rejected). Motions with fewer than ``keep`` successes are skipped."""
    kept, rejected = [], []
    for k, motion in enumerate(motions):
        good = []
        for r in range(rollouts_per_motion):
            rng = np.random.default_rng([seed, k, r])
            ep = run_episode(motion, spec, sigma, rng, threshold)
            ep.seed = (seed, k, r)
            (good if ep.success else rejected).append(ep)
            if len(good) == keep:
                break
        if len(good) < keep:
            log.warning("motion %d (%s): %d/%d successful rollouts, skipped", k, motion.scenario,
                        len(good), keep)
            continue
        kept.extend(good)
    return kept, rejected
