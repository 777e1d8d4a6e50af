"""Small rotation helpers shared by the simulator and the encoders."""
import numpy as np

_AXES = {"x": 0, "y": 1, "z": 2}
UNIT = np.eye(3)


def axis_rotation(axis: str, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == "y":
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if axis == "z":
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise ValueError(f"unknown axis {axis!r}")


def rot_z(angle: float) -> np.ndarray:
    return axis_rotation("z", angle)


def axis_vector(axis: str) -> np.ndarray:
    return UNIT[_AXES[axis]]


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues formula for an arbitrary (not necessarily unit) axis."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi
