import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from interagent import evalphys as ev
from interagent.errors import DataError


def test_floating_examples():
    T = 30
    grounded = np.zeros((T, 2, 3))
    grounded[:, 1, 2] = 0.5
    assert ev.floating(grounded) < 1.0
    hover = np.zeros((T, 2, 3))
    hover[..., 2] = [0.1, 0.4]
    assert abs(ev.floating(hover) - 100.0) < 1e-9
    below = np.full((T, 1, 3), -0.02)
    assert ev.floating(below) == 0.0
    with pytest.raises(DataError):
        ev.floating(np.zeros((0, 2, 3)))


def test_skating_examples():
    T = 20
    feet = np.zeros((T, 2, 3))
    contact = np.ones((T, 2), dtype=bool)
    assert ev.skating(feet, contact) == 0.0
    feet[:, 0, 0] = 0.001 * np.arange(T)
    contact[:, 1] = False
    assert abs(ev.skating(feet, contact) - 1.0) <= 1e-9
    # sliding while airborne does not count
    feet[:, 1, 1] = 0.05 * np.arange(T)
    assert abs(ev.skating(feet, contact) - 1.0) <= 1e-9
    with pytest.raises(DataError):
        ev.skating(feet[:1], contact[:1])


def skating_oracle(feet, contact):
    total, count = 0.0, 0
    for t in range(len(feet) - 1):
        for e in range(feet.shape[1]):
            if contact[t, e] and contact[t + 1, e]:
                dx = feet[t + 1, e, 0] - feet[t, e, 0]
                dy = feet[t + 1, e, 1] - feet[t, e, 1]
                total += (dx * dx + dy * dy) ** 0.5
                count += 1
    return 0.0 if count == 0 else 1000.0 * total / count


def jerk_oracle(x):
    k = np.array([1.0, -3.0, 3.0, -1.0])  # convolution flips it into the forward stencil
    d3 = np.stack([[np.convolve(x[:, j, c], k, mode="valid") for c in range(3)] for j in range(x.shape[1])])
    return 1000.0 * np.sqrt((d3 ** 2).sum(axis=1)).mean()


@pytest.mark.parametrize("seed", range(20))
def test_metric_oracles(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(4, 40))
    x = rng.normal(0.0, 0.02, size=(T, 5, 3))
    contact = rng.random((T, 2)) < 0.6
    assert abs(ev.skating(x[:, :2], contact) - skating_oracle(x[:, :2], contact)) <= 1e-12
    assert abs(ev.jerk(x) - jerk_oracle(x)) <= 1e-12
    lowest = np.mean([max(min(x[t, :, 2]), 0.0) for t in range(T)]) * 1000.0
    assert abs(ev.floating(x) - lowest) <= 1e-12


def test_jerk_examples():
    t = np.arange(12, dtype=float)
    lin = np.zeros((12, 3, 3))
    lin[..., 0] = 0.25 * t[:, None] + 1.0
    lin[..., 2] = -0.125 * t[:, None]
    assert ev.jerk(lin) == 0.0
    cube = np.zeros((12, 1, 3))
    cube[:, 0, 0] = (t ** 3) / 1000.0  # t^3 millimeters
    assert abs(ev.jerk(cube) - 6.0) < 1e-9
    with pytest.raises(DataError):
        ev.jerk(lin[:3])


def yaw(x, a):
    c, s = np.cos(a), np.sin(a)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return x @ R.T


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-np.pi, np.pi), st.floats(-5, 5), st.floats(-5, 5))
def test_invariances(seed, angle, dx, dy):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(10, 4, 3))
    contact = rng.random((10, 4)) < 0.5
    shift = np.array([dx, dy, 0.0])
    assert abs(ev.jerk(x + shift) - ev.jerk(x)) <= 1e-9
    assert abs(ev.skating(x + shift, contact) - ev.skating(x, contact)) <= 1e-9
    assert abs(ev.floating(x + shift) - ev.floating(x)) <= 1e-9
    assert abs(ev.jerk(yaw(x, angle)) - ev.jerk(x)) <= 1e-9
    assert abs(ev.skating(yaw(x, angle), contact) - ev.skating(x, contact)) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_smoothing_reduces_jerk(seed):
    x = np.random.default_rng(seed).normal(size=(30, 3, 3))
    smooth = (x[:-2] + x[1:-1] + x[2:]) / 3.0
    assert ev.jerk(smooth) <= ev.jerk(x)


def test_purity_and_nonnegativity():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(10, 4, 3))
    contact = rng.random((10, 2)) < 0.5
    a = ev.evaluate(x, x, x[:, :2], contact)
    b = ev.evaluate(x.copy(), x.copy(), x[:, :2].copy(), contact.copy())
    assert a == b
    assert all(v >= 0 for v in a.as_dict().values())
