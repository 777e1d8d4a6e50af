"""Binary dataset / trajectory files and checkpoints (little-endian, 32-bit payloads).

Dataset and trajectory dumps share one framing. Besides the model channels x_p, x_e, x_a
every frame carries a world block x_w = [state vector, joint positions, site positions,
contact-site positions, contact flags] so that states can be replayed and metrics
recomputed from the file alone.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .representation import frame_features
from .simworld import AgentState, BodySpec, SimState, forward_kinematics, site_positions

DATASET_MAGIC = b"IADS"
CHECKPOINT_MAGIC = b"IDTC"
VERSION = 1
F32 = np.dtype("<f4")
_HEADER = struct.Struct("<4sIII4sffIIIIIII32s")
_EPISODE = struct.Struct("<IBf")


def world_dim(spec: BodySpec) -> int:
    return 7 + 2 * spec.dof + 3 * spec.J + 3 * len(spec.sites) + 4 * len(spec.contact_sites)


def world_block(state: SimState, contacts: np.ndarray, spec: BodySpec) -> np.ndarray:
    """[2, d_w] world channels of one frame."""
    joints = forward_kinematics(state, spec)
    rows = []
    for i, a in enumerate(state.agents):
        rows.append(np.concatenate([a.vector(), joints[i].ravel(),
                                    site_positions(a, spec, list(spec.sites)).ravel(),
                                    site_positions(a, spec, spec.contact_sites).ravel(),
                                    np.asarray(contacts[i], dtype=np.float64)]))
    return np.stack(rows)


@dataclass
class Episode:
    command: str
    xp: np.ndarray  # [2, T, d_p]
    xe: np.ndarray  # [2, T, d_e]
    xa: np.ndarray  # [2, T, d_a]
    xw: np.ndarray  # [2, T, d_w]
    success: bool = True
    mean_reward: float = float("nan")

    @property
    def length(self) -> int:
        return self.xp.shape[1]

    def _split(self, J: int, dof: int, E: int, C: int):
        sizes = [7 + 2 * dof, 3 * J, 3 * E, 3 * C, C]
        if sum(sizes) != self.xw.shape[-1]:
            raise FormatError(f"world block of width {self.xw.shape[-1]} does not match the body layout")
        return np.split(self.xw, np.cumsum(sizes)[:-1], axis=-1)

    def states(self, dof: int, J: int, E: int, C: int) -> list[SimState]:
        vec = self._split(J, dof, E, C)[0]
        return [SimState(tuple(AgentState.from_vector(vec[i, t], dof) for i in range(2)))
                for t in range(self.length)]

    def joints(self, J: int, dof: int, E: int, C: int) -> np.ndarray:
        """[2, T, J, 3]"""
        return self._split(J, dof, E, C)[1].reshape(2, self.length, J, 3)

    def sites(self, J: int, dof: int, E: int, C: int) -> np.ndarray:
        return self._split(J, dof, E, C)[2].reshape(2, self.length, E, 3)

    def feet(self, J: int, dof: int, E: int, C: int) -> np.ndarray:
        return self._split(J, dof, E, C)[3].reshape(2, self.length, C, 3)

    def contacts(self, J: int, dof: int, E: int, C: int) -> np.ndarray:
        return self._split(J, dof, E, C)[4] > 0.5


@dataclass
class DatasetFile:
    J: int
    dof: int
    kind: str
    d_p: int
    d_e: int
    d_a: int
    d_w: int
    E: int
    C: int
    frame_rate: float = 30.0
    guidance: float = 0.0
    digest: bytes = b"\0" * 32
    episodes: list[Episode] = field(default_factory=list)

    @property
    def layout(self) -> tuple[int, int, int, int]:
        return self.J, self.dof, self.E, self.C

    def states(self, ep: Episode) -> list[SimState]:
        return ep.states(self.dof, self.J, self.E, self.C)

    def joints(self, ep: Episode) -> np.ndarray:
        return ep.joints(*self.layout)

    def sites(self, ep: Episode) -> np.ndarray:
        return ep.sites(*self.layout)

    def feet(self, ep: Episode) -> np.ndarray:
        return ep.feet(*self.layout)

    def contacts(self, ep: Episode) -> np.ndarray:
        return ep.contacts(*self.layout)

    @classmethod
    def for_body(cls, spec: BodySpec, kind: str, d_p: int, d_e: int, **kw) -> "DatasetFile":
        return cls(spec.J, spec.dof, kind, d_p, d_e, spec.dof, world_dim(spec),
                   len(spec.sites), len(spec.contact_sites), **kw)

    # -- io ---------------------------------------------------------------

    def to_bytes(self) -> bytes:
        if len(self.digest) != 32:
            raise FormatError("digest must be 32 bytes")
        buf = io.BytesIO()
        buf.write(_HEADER.pack(DATASET_MAGIC, VERSION, self.J, self.dof, self.kind.encode("ascii"),
                               self.frame_rate, self.guidance, len(self.episodes), self.d_p, self.d_e,
                               self.d_a, self.d_w, self.E, self.C, self.digest))
        widths = (self.d_p, self.d_e, self.d_a, self.d_w)
        for ep in self.episodes:
            cmd = ep.command.encode("utf-8")
            buf.write(struct.pack("<I", len(cmd)) + cmd)
            buf.write(_EPISODE.pack(ep.length, int(ep.success), ep.mean_reward))
            arrays = (ep.xp, ep.xe, ep.xa, ep.xw)
            for x, w in zip(arrays, widths):
                if np.shape(x) != (2, ep.length, w):
                    raise FormatError(f"episode array of shape {np.shape(x)}, expected {(2, ep.length, w)}")
            for i in range(2):
                for x in arrays:
                    buf.write(np.ascontiguousarray(x[i], dtype=F32).tobytes())
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "DatasetFile":
        if len(data) < _HEADER.size:
            raise FormatError("file shorter than the dataset header")
        (magic, version, J, dof, kind, rate, guidance, n, d_p, d_e, d_a, d_w, E, C,
         digest) = _HEADER.unpack_from(data, 0)
        if magic != DATASET_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
        if version != VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        out = cls(J, dof, kind.rstrip(b"\0").decode("ascii"), d_p, d_e, d_a, d_w, E, C,
                  rate, guidance, digest)
        pos = _HEADER.size
        widths = (d_p, d_e, d_a, d_w)
        try:
            for _ in range(n):
                (ln,) = struct.unpack_from("<I", data, pos)
                pos += 4
                if pos + ln > len(data):
                    raise FormatError("command string runs past the end of the file")
                command = data[pos:pos + ln].decode("utf-8")
                pos += ln
                T, success, reward = _EPISODE.unpack_from(data, pos)
                pos += _EPISODE.size
                chans = [[], [], [], []]
                for _i in range(2):
                    for c, w in enumerate(widths):
                        count = T * w
                        if pos + 4 * count > len(data):
                            raise FormatError("episode payload shorter than its declared length")
                        arr = np.frombuffer(data, F32, count, pos).reshape(T, w)
                        chans[c].append(arr.astype(np.float64))
                        pos += 4 * count
                out.episodes.append(Episode(command, *(np.stack(ch) for ch in chans), bool(success),
                                            float(reward)))
        except struct.error as exc:
            raise FormatError(f"truncated dataset file: {exc}") from exc
        except UnicodeDecodeError as exc:
            raise FormatError(f"command string is not utf-8: {exc}") from exc
        if pos != len(data):
            raise FormatError(f"{len(data) - pos} trailing bytes after the declared episodes")
        return out

    @classmethod
    def load(cls, path: str | Path) -> "DatasetFile":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise FormatError(f"cannot read {path}: {exc}") from exc
        return cls.from_bytes(data)


def episode_from_states(command: str, states: list[SimState], actions: np.ndarray, contacts: np.ndarray,
                        spec: BodySpec, kind: str, success: bool = True,
                        mean_reward: float = float("nan")) -> Episode:
    """actions [2, T, dof]; contacts [2, T, C]."""
    feats = [frame_features(s, spec, kind) for s in states]
    xp = np.stack([f[0] for f in feats], axis=1)
    xe = np.stack([f[1] for f in feats], axis=1)
    xw = np.stack([world_block(s, contacts[:, t], spec) for t, s in enumerate(states)], axis=1)
    return Episode(command, xp, xe, np.asarray(actions, dtype=np.float64), xw, success, mean_reward)


def episode_from_record(record, spec: BodySpec, kind: str) -> Episode:
    """Dataset episode from a tracking EpisodeRecord; x_a holds the clean policy actions."""
    return episode_from_states(record.command, record.states, record.actions, record.contacts, spec, kind,
                               record.success, record.mean_reward)


def episode_from_trajectory(command: str, traj, spec: BodySpec, kind: str) -> Episode:
    """Trajectory dump episode; x_a holds the executed commands and x_p/x_e the model's view."""
    ep = episode_from_states(command, traj.states, traj.xa, traj.contacts, spec, kind)
    ep.xp, ep.xe = np.asarray(traj.xp), np.asarray(traj.xe)
    return ep


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config_text: str
    digest: bytes
    tensors: dict[str, np.ndarray]

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        text = self.config_text.encode("utf-8")
        buf.write(struct.pack("<4sI32sI", CHECKPOINT_MAGIC, VERSION, self.digest, len(text)) + text)
        buf.write(struct.pack("<I", len(self.tensors)))
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name], dtype=F32)
            key = name.encode("utf-8")
            buf.write(struct.pack("<I", len(key)) + key)
            buf.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            buf.write(arr.tobytes())
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        """Written to a sibling temp file first so a crash never leaves a torn checkpoint."""
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        try:
            magic, version, digest, ln = struct.unpack_from("<4sI32sI", data, 0)
            if magic != CHECKPOINT_MAGIC:
                raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
            if version != VERSION:
                raise FormatError(f"unsupported checkpoint version {version}")
            pos = 44
            text = data[pos:pos + ln].decode("utf-8")
            pos += ln
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            tensors = {}
            for _ in range(n):
                (kl,) = struct.unpack_from("<I", data, pos)
                name = data[pos + 4:pos + 4 + kl].decode("utf-8")
                pos += 4 + kl
                (ndim,) = struct.unpack_from("<I", data, pos)
                shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
                pos += 4 + 4 * ndim
                count = int(np.prod(shape))
                if pos + 4 * count > len(data):
                    raise FormatError(f"tensor {name!r} runs past the end of the file")
                tensors[name] = np.frombuffer(data, F32, count, pos).reshape(shape).astype(np.float64)
                pos += 4 * count
        except struct.error as exc:
            raise FormatError(f"truncated checkpoint: {exc}") from exc
        except UnicodeDecodeError as exc:
            raise FormatError(f"corrupt checkpoint text: {exc}") from exc
        if pos != len(data):
            raise FormatError(f"{len(data) - pos} trailing bytes in checkpoint")
        return cls(text, digest, tensors)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise FormatError(f"cannot read {path}: {exc}") from exc
        return cls.from_bytes(data)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
