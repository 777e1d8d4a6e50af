"""Physical-plausibility metrics over joint-position trajectories (meters in, millimeters out)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

MM = 1000.0


@dataclass(frozen=True)
class TrajMetrics:
    floating: float  # mm
    skating: float  # mm per frame
    jerk: float  # mm / frame^3

    def as_dict(self) -> dict[str, float]:
        return {"floating": self.floating, "skating": self.skating, "jerk": self.jerk}


def floating(effectors: np.ndarray) -> float:
    """Mean over frames of the lowest end-effector height, clamped at the ground.

    effectors: [T, E, 3]. Frames in contact contribute their (near zero) clearance as-is.
    """
    effectors = np.asarray(effectors, dtype=np.float64)
    if effectors.ndim != 3 or effectors.shape[0] == 0:
        raise DataError(f"floating needs [T, E, 3] positions, got {effectors.shape}")
    return float(np.maximum(effectors[..., 2].min(axis=1), 0.0).mean() * MM)


def skating(effectors: np.ndarray, contact: np.ndarray) -> float:
    """Mean horizontal displacement of end-effectors in contact at both t and t+1."""
    effectors = np.asarray(effectors, dtype=np.float64)
    contact = np.asarray(contact, dtype=bool)
    if effectors.shape[0] < 2:
        raise DataError("skating needs at least two frames")
    if contact.shape != effectors.shape[:2]:
        raise DataError(f"contact flags {contact.shape} do not match effectors {effectors.shape[:2]}")
    both = contact[1:] & contact[:-1]
    if not both.any():
        return 0.0
    slide = np.linalg.norm(effectors[1:, :, :2] - effectors[:-1, :, :2], axis=-1)
    return float(slide[both].mean() * MM)


def jerk(joints: np.ndarray) -> float:
    """Mean norm of the third finite difference over joints and frames."""
    joints = np.asarray(joints, dtype=np.float64)
    if joints.shape[0] < 4:
        raise DataError(f"jerk needs at least 4 frames, got {joints.shape[0]}")
    d3 = np.diff(joints, n=3, axis=0)
    return float(np.linalg.norm(d3, axis=-1).mean() * MM)


def evaluate(joints: np.ndarray, effectors: np.ndarray, feet: np.ndarray, contact: np.ndarray) -> TrajMetrics:
    """joints [T, J, 3], all end-effectors [T, E, 3], contact sites [T, C, 3] with flags [T, C]."""
    return TrajMetrics(floating(effectors), skating(feet, contact), jerk(joints))
