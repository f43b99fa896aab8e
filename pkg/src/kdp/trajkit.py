"""Trajectory windows, clamping, keys, masks and the KDPW dataset format.

A window is an ``(H, D)`` array whose rows are ``(state, action)`` with the
state block in columns ``[0:d_s]`` and the action block in ``[d_s:D]``.
Batched functions accept ``(B, H, D)``. Clamping, keys and key distances all
operate in normalized space when used for training and planning.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    ShapeError,
    SpecError,
    TruncatedFileError,
    VersionMismatchError,
)

DATASET_MAGIC = b"KDPW"
DATASET_VERSION = 1
FLAG_REWARDS = 1
STD_FLOOR = 1e-6


@dataclass(frozen=True)
class WindowShape:
    H: int
    d_s: int
    d_a: int

    def __post_init__(self):
        if self.H < 1 or self.d_s < 1 or self.d_a < 1:
            raise ShapeError(f"invalid window shape {self}")

    @property
    def D(self):
        return self.d_s + self.d_a

    @property
    def size(self):
        return self.H * self.D


@dataclass(frozen=True)
class ConditionSpec:
    """Clamp specification: start state ``c`` plus an optional goal.

    ``goal_idx`` holds 0-based state indices; ``goal`` the values written at
    row ``t_goal``.
    """

    c: np.ndarray
    goal: np.ndarray | None = None
    goal_idx: tuple = ()
    t_goal: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "c", np.asarray(self.c))
        if self.goal is not None:
            object.__setattr__(self, "goal", np.asarray(self.goal))
            object.__setattr__(self, "goal_idx", tuple(int(i) for i in self.goal_idx))
            if self.goal.shape != (len(self.goal_idx),):
                raise SpecError("goal length must equal the number of goal indices")
            if self.t_goal is None:
                raise SpecError("goal given without t_goal")

    @property
    def has_goal(self):
        return self.goal is not None

    def validate(self, shape):
        if self.c.shape != (shape.d_s,):
            raise SpecError(f"condition has shape {self.c.shape}, expected ({shape.d_s},)")
        if self.has_goal:
            if not 0 <= self.t_goal < shape.H:
                raise SpecError(f"t_goal={self.t_goal} outside [0, {shape.H})")
            if any(i < 0 or i >= shape.d_s for i in self.goal_idx):
                raise SpecError(f"goal indices {self.goal_idx} outside state block")
            if self.t_goal == 0 and not np.array_equal(self.goal, self.c[list(self.goal_idx)]):
                raise SpecError("a goal on row 0 contradicts the start-state clamp")


def state_block(x, d_s):
    """``state(x)[t]`` for every row t."""
    return np.asarray(x)[..., : d_s]


def act_block(x, d_s):
    """``act(x)[t]`` for every row t."""
    return np.asarray(x)[..., d_s:]


def clamp(x, spec, shape=None):
    """Overwrite the first state (and goal coordinates, if any) of ``x``.

    Works on a single window or a batch sharing one spec. Returns a copy;
    every unclamped entry is the input bit for bit.
    """
    x = np.asarray(x)
    shape = shape or WindowShape(x.shape[-2], spec.c.shape[0], x.shape[-1] - spec.c.shape[0])
    spec.validate(shape)
    out = x.copy()
    out[..., 0, : shape.d_s] = spec.c
    if spec.has_goal:
        out[..., spec.t_goal, list(spec.goal_idx)] = spec.goal
    return out


def clamp_batch(x, c):
    """Per-sample state clamp: ``x[i, 0, :d_s] = c[i]`` for a ``(B, H, D)`` batch."""
    c = np.asarray(c)
    if x.ndim != 3 or c.ndim != 2 or c.shape[0] != x.shape[0]:
        raise ShapeError(f"clamp_batch: windows {x.shape} vs conditions {c.shape}")
    out = x.copy()
    out[:, 0, : c.shape[1]] = c
    return out


def constraint_mask(shape, spec=None):
    """Binary ``(H, D)`` mask: 1 where free, 0 where clamped."""
    m = np.ones((shape.H, shape.D), dtype=np.float32)
    m[0, : shape.d_s] = 0.0
    if spec is not None and spec.has_goal:
        spec.validate(shape)
        m[spec.t_goal, list(spec.goal_idx)] = 0.0
    return m


def key(x, d_s):
    """Key map: the initial state block, ``x[..., 0, :d_s]``."""
    return np.asarray(x)[..., 0, :d_s]


def key_distance(x, y, d_s):
    if np.shape(x) != np.shape(y):
        raise ShapeError("key_distance: window shapes differ")
    diff = key(x, d_s).astype(np.float64) - key(y, d_s)
    return float(np.sqrt(np.sum(diff * diff)))


def full_window_distance(x, y):
    if np.shape(x) != np.shape(y):
        raise ShapeError("full_window_distance: window shapes differ")
    diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.sqrt(np.sum(diff * diff)))


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float32), STD_FLOOR)

    @classmethod
    def identity(cls, D):
        return cls(np.zeros(D), np.ones(D))

    @classmethod
    def from_windows(cls, windows):
        flat = np.asarray(windows, dtype=np.float64).reshape(-1, windows.shape[-1])
        return cls(flat.mean(axis=0), flat.std(axis=0))

    def normalize(self, x):
        return ((np.asarray(x, dtype=np.float32) - self.mean) / self.std).astype(np.float32)

    def denormalize(self, x):
        return (np.asarray(x, dtype=np.float32) * self.std + self.mean).astype(np.float32)

    def normalize_state(self, s):
        d_s = np.shape(s)[-1]
        return ((np.asarray(s, dtype=np.float32) - self.mean[:d_s]) / self.std[:d_s]).astype(np.float32)

    def denormalize_state(self, s):
        d_s = np.shape(s)[-1]
        return (np.asarray(s, dtype=np.float32) * self.std[:d_s] + self.mean[:d_s]).astype(np.float32)

    def normalize_spec(self, spec):
        """Map a raw-unit ConditionSpec into normalized space."""
        if not spec.has_goal:
            return ConditionSpec(self.normalize_state(spec.c))
        idx = list(spec.goal_idx)
        goal = ((spec.goal - self.mean[idx]) / self.std[idx]).astype(np.float32)
        return ConditionSpec(self.normalize_state(spec.c), goal, spec.goal_idx, spec.t_goal)


@dataclass
class WindowDataset:
    """N raw-unit windows with optional per-step rewards and norm stats."""

    shape: WindowShape
    windows: np.ndarray
    rewards: np.ndarray | None = None
    norm: NormStats | None = None
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.windows = np.ascontiguousarray(self.windows, dtype=np.float32)
        if self.windows.ndim != 3 or self.windows.shape[1:] != (self.shape.H, self.shape.D):
            raise ShapeError(f"windows {self.windows.shape} do not match {self.shape}")
        if self.rewards is not None:
            self.rewards = np.ascontiguousarray(self.rewards, dtype=np.float32)
            if self.rewards.shape != self.windows.shape[:2]:
                raise ShapeError("rewards must be (N, H)")
        if self.norm is None:
            self.norm = NormStats.from_windows(self.windows) if len(self.windows) else \
                NormStats.identity(self.shape.D)

    def __len__(self):
        return self.windows.shape[0]

    @property
    def has_rewards(self):
        return self.rewards is not None

    def normalized(self):
        return self.norm.normalize(self.windows)


def windows_from_episode(states, actions, H, rewards=None):
    """Stride-1 sliding windows over one episode; returns (N, H, D) or None if too short."""
    states = np.asarray(states, dtype=np.float32)
    actions = np.asarray(actions, dtype=np.float32)
    T = len(actions)
    if T < H:
        return None, None
    rows = np.concatenate([states[:T], actions], axis=1)
    idx = np.arange(T - H + 1)[:, None] + np.arange(H)[None, :]
    win = rows[idx]
    rew = None if rewards is None else np.asarray(rewards, dtype=np.float32)[idx]
    return win, rew


def save_dataset(ds, path, manifest_path=None):
    """Write the KDPW binary file and its JSON sidecar manifest."""
    path = Path(path)
    s = ds.shape
    flags = FLAG_REWARDS if ds.has_rewards else 0
    body = bytearray(DATASET_MAGIC)
    body += struct.pack("<IIIIQI", DATASET_VERSION, s.H, s.d_s, s.d_a, len(ds), flags)
    body += ds.norm.mean.astype("<f4").tobytes()
    body += ds.norm.std.astype("<f4").tobytes()
    body += ds.windows.astype("<f4").tobytes()
    if ds.has_rewards:
        body += ds.rewards.astype("<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    path.write_bytes(bytes(body))
    manifest = dict(ds.manifest)
    manifest["rewards_present"] = ds.has_rewards
    mpath = Path(manifest_path) if manifest_path else path.with_suffix(path.suffix + ".json")
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


_HEADER = struct.Struct("<IIIIQI")


def load_dataset(path):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 + _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    if raw[:4] != DATASET_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    version, H, d_s, d_a, n, flags = _HEADER.unpack_from(raw, 4)
    if version != DATASET_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {DATASET_VERSION}")
    shape = WindowShape(H, d_s, d_a)
    D = shape.D
    n_floats = 2 * D + n * H * D + (n * H if flags & FLAG_REWARDS else 0)
    offset = 4 + _HEADER.size
    if len(raw) != offset + 4 * n_floats + 4:
        raise TruncatedFileError(
            f"{path}: expected {offset + 4 * n_floats + 4} bytes, found {len(raw)}")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise ChecksumError(f"{path}: CRC32 mismatch")
    flat = np.frombuffer(raw, dtype="<f4", count=n_floats, offset=offset).astype(np.float32)
    mean, std = flat[:D], flat[D:2 * D]
    k = 2 * D
    windows = flat[k:k + n * H * D].reshape(n, H, D)
    k += n * H * D
    rewards = flat[k:k + n * H].reshape(n, H) if flags & FLAG_REWARDS else None
    mpath = path.with_suffix(path.suffix + ".json")
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    return WindowDataset(shape, windows, rewards, NormStats(mean, std), manifest)
