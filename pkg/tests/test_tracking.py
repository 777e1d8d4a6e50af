import numpy as np
import pytest

from interagent import tracking as tk
from interagent.errors import ConfigError
from interagent.rotations import wrap_angle
from interagent.simworld import SimState, desk_body, ground_contact, site_positions, standing_agent, step

SPEC = desk_body()


@pytest.mark.parametrize("scenario", sorted(tk.SCENARIOS))
def test_reference_contract(scenario):
    m = tk.gen_reference(scenario, 120, 3, SPEC)
    assert m.q.shape == (2, 120, SPEC.dof) and m.length == 120
    assert m.command == tk.SCENARIOS[scenario]
    assert np.all(m.q >= SPEC.lower) and np.all(m.q <= SPEC.upper)
    again = tk.gen_reference(scenario, 120, 3, SPEC)
    assert np.array_equal(m.q, again.q) and np.array_equal(m.root, again.root)
    other = tk.gen_reference(scenario, 120, 4, SPEC)
    assert np.abs(other.q - m.q).max() > 0 or np.abs(other.root - m.root).max() > 0
    # C1: velocity changes per frame stay bounded (no jumps)
    assert np.abs(np.diff(m.qd(), axis=1)).max() * tk.DT < 0.1


@pytest.mark.parametrize("seed", range(5))
def test_handshake_hands_meet(seed):
    m = tk.gen_reference("handshake", 60, seed, SPEC)
    s = m.state(59)
    h1 = site_positions(s.agents[0], SPEC, ["r_hand"])[0]
    h2 = site_positions(s.agents[1], SPEC, ["r_hand"])[0]
    assert np.linalg.norm(h1 - h2) < 0.1


def test_reference_errors():
    with pytest.raises(ConfigError):
        tk.gen_reference("dance", 120, 0, SPEC)
    with pytest.raises(ConfigError):
        tk.gen_reference("push", 29, 0, SPEC)


def test_policy_zero_error_and_clamp():
    m = tk.gen_reference("circle", 60, 0, SPEC)
    ref = m.state(10)
    cmds = tk.tracking_policy(ref, ref, SPEC)
    assert all(np.array_equal(c, a.q) for c, a in zip(cmds, ref.agents))
    wild = ref.copy()
    for a in wild.agents:
        a.q = np.full(SPEC.dof, 10.0)
    for c in tk.tracking_policy(ref, wild, SPEC):
        assert np.all(c <= SPEC.upper) and np.all(c >= SPEC.lower)


def test_policy_hold_pose_settles_monotonically():
    target = np.array([-1.0, 0.5, 0.3, -1.0, -0.8, -0.4, -0.2, -1.2])
    hold = SimState((standing_agent(SPEC, 0, 0, 0, target), standing_agent(SPEC, 1, 0, np.pi, target)))
    state = SimState((standing_agent(SPEC, 0, 0, 0), standing_agent(SPEC, 1, 0, np.pi)))
    errs = []
    for _ in range(60):
        state = step(state, tk.tracking_policy(state, hold, SPEC), spec=SPEC)
        errs.append(np.linalg.norm(state.agents[0].q - target))
    assert all(b <= a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 0.05 * np.linalg.norm(target)


def frames(rng):
    m = tk.gen_reference("push", 40, int(rng.integers(100)), SPEC)
    t = int(rng.integers(1, 39))
    ref = tk.graph_frame(m.state(t), m.state(t - 1), SPEC)
    sim_state = m.state(t).copy()
    prev = m.state(t - 1).copy()
    for s in (sim_state, prev):
        for a in s.agents:
            a.q = a.q + rng.normal(0, 0.1, size=a.q.shape)
            a.root_pos = a.root_pos + rng.normal(0, 0.05, size=3)
            a.yaw = a.yaw + rng.normal(0, 0.1)
    return tk.graph_frame(sim_state, prev, SPEC), ref


def reward_oracle(sim, ref, lp=2.0, lv=0.1, lr=1.0):
    J = sim.pos.shape[1]
    e_ref = np.array([[ref.pos[1, i] - ref.pos[0, j] for i in range(J)] for j in range(J)])
    e_sim = np.array([[sim.pos[1, i] - sim.pos[0, j] for i in range(J)] for j in range(J)])
    v_ref = np.array([[ref.vel[1, i] - ref.vel[0, j] for i in range(J)] for j in range(J)])
    v_sim = np.array([[sim.vel[1, i] - sim.vel[0, j] for i in range(J)] for j in range(J)])
    lengths = np.linalg.norm(e_ref, axis=-1)
    w = np.exp(-lengths) / np.exp(-lengths).sum()
    d_pos = sum(w[j, i] * np.linalg.norm(e_ref[j, i] - e_sim[j, i]) for i in range(J) for j in range(J))
    d_vel = sum(w[j, i] * np.linalg.norm(v_ref[j, i] - v_sim[j, i]) for i in range(J) for j in range(J))
    root = 0.0
    for k in range(2):
        d = ref.root[k] - sim.root[k]
        d[6] = (d[6] + np.pi) % (2 * np.pi) - np.pi
        root += np.linalg.norm(d)
    return np.exp(-lp * d_pos - lv * d_vel), np.exp(-lr * root)


@pytest.mark.parametrize("seed", range(10))
def test_reward_matches_product_oracle(seed):
    sim, ref = frames(np.random.default_rng(seed))
    r_ig, r_root = reward_oracle(sim, ref)
    r = tk.ig_reward(sim, ref)
    assert 0 < r <= 1
    assert abs(r - r_ig * r_root) <= 1e-12


def test_reward_perfect_and_divergent():
    m = tk.gen_reference("handshake", 40, 0, SPEC)
    f = tk.graph_frame(m.state(20), m.state(19), SPEC)
    assert tk.ig_reward(f, f) == 1.0
    far = tk.GraphFrame(f.pos.copy(), f.vel, f.root)
    far.pos[1] += np.array([10.0, 0.0, 0.0])
    assert tk.ig_reward(far, f) < 1e-3


@pytest.mark.parametrize("term", ["pos", "vel", "root"])
def test_reward_monotone_in_each_term(term):
    m = tk.gen_reference("circle", 40, 1, SPEC)
    ref = tk.graph_frame(m.state(20), m.state(19), SPEC)
    rewards = []
    for mag in np.linspace(0, 2, 9):
        sim = tk.GraphFrame(ref.pos.copy(), ref.vel.copy(), ref.root.copy())
        if term == "pos":
            sim.pos[1, 2] += mag
        elif term == "vel":
            sim.vel[1, 2] += mag
        else:
            sim.root[0, 0] += mag
        rewards.append(tk.ig_reward(sim, ref))
    assert rewards[0] == 1.0 and all(b < a for a, b in zip(rewards, rewards[1:]))


def test_noiseless_collection_is_expert_rollout():
    m = tk.gen_reference("approach", 40, 0, SPEC)
    ep = tk.run_episode(m, SPEC, 0.0, np.random.default_rng(0))
    state = tk.quantize(ground_contact(m.state(0), SPEC)[0])
    for t in range(m.length):
        assert all(np.array_equal(a.vector(), b.vector()) for a, b in zip(state.agents, ep.states[t].agents))
        nxt = step(state, tk.tracking_policy(state, m.state(t + 1), SPEC), spec=SPEC)
        state = tk.quantize(ground_contact(nxt, SPEC)[0])


@pytest.fixture(scope="module")
def collection():
    motions = [tk.gen_reference(s, 60, k, SPEC) for k, s in enumerate(sorted(tk.SCENARIOS))]
    return tk.collect_dataset(motions, SPEC, sigma=0.01, rollouts_per_motion=4, keep=3, seed=1)


def test_clean_action_property(collection):
    kept, _ = collection
    assert len(kept) == 12
    for ep in kept:
        for t, s in enumerate(ep.states):
            expected = np.stack(tk.tracking_policy(s, ep.motion.state(t + 1), SPEC))
            assert np.array_equal(ep.actions[:, t], expected)
        assert ep.success and ep.mean_reward >= tk.SUCCESS_THRESHOLD


def test_action_noise_statistics(collection):
    kept, _ = collection
    deltas = np.concatenate([(ep.executed - ep.actions[:, :-1]).ravel() for ep in kept])
    assert 0.008 <= deltas.std() <= 0.012
    assert abs(deltas.mean()) < 0.002


def test_collection_determinism(collection):
    kept, _ = collection
    motions = [tk.gen_reference(s, 60, k, SPEC) for k, s in enumerate(sorted(tk.SCENARIOS))]
    again, _ = tk.collect_dataset(motions[:1], SPEC, sigma=0.01, rollouts_per_motion=4, keep=3, seed=1)
    for a, b in zip(kept[:3], again):
        assert np.array_equal(a.actions, b.actions) and np.array_equal(a.executed, b.executed)


def test_filtering_rejects_under_heavy_noise():
    motions = [tk.gen_reference(s, 60, k, SPEC) for k, s in enumerate(sorted(tk.SCENARIOS))]
    kept, rejected = tk.collect_dataset(motions, SPEC, sigma=0.5, rollouts_per_motion=4, keep=4, seed=0)
    assert all(ep.mean_reward >= tk.SUCCESS_THRESHOLD for ep in kept)
    assert len(rejected) >= 1


def test_skipped_motion_when_threshold_unreachable(caplog):
    m = tk.gen_reference("push", 40, 0, SPEC)
    kept, rejected = tk.collect_dataset([m], SPEC, sigma=0.01, rollouts_per_motion=2, keep=1, threshold=1.1)
    assert kept == [] and len(rejected) == 2
    assert "skipped" in caplog.text
