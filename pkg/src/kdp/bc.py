"""Deterministic behavior-clone baseline: condition in, mean window out."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, TrainingError
from .numkit import AdamState, FeedForwardNet, adam_step, load_net, save_net
from .trajkit import NormStats, WindowShape, clamp_batch, constraint_mask


@dataclass(frozen=True)
class BCConfig:
    steps: int = 3000
    batch_size: int = 128
    hidden: tuple = (256, 256)
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("need steps >= 0, batch_size >= 1 and lr > 0")

    def to_dict(self):
        return asdict(self)


class BCPolicy:
    kind = "bc"

    def __init__(self, net, shape, norm=None):
        if net.sizes[0] != shape.d_s or net.sizes[-1] != shape.size:
            raise ConfigError(f"bc net sizes {net.sizes} do not fit {shape}")
        self.net = net
        self.shape = shape
        self.norm = norm or NormStats.identity(shape.D)

    def predict(self, c):
        c = np.asarray(c, dtype=np.float32).reshape(-1, self.shape.d_s)
        out = self.net.forward(c).reshape(-1, self.shape.H, self.shape.D)
        return clamp_batch(out, c)


def train_bc(dataset, cfg=None):
    """Squared-error regression of normalized windows on their keys."""
    cfg = cfg or BCConfig()
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    shape = dataset.shape
    rng = np.random.default_rng(cfg.seed)
    net = FeedForwardNet.init((shape.d_s, *cfg.hidden, shape.size), rng)
    policy = BCPolicy(net, shape, dataset.norm)
    X = dataset.normalized()
    mask = constraint_mask(shape)
    opt = AdamState(lr=cfg.lr)
    losses = []
    for _ in range(cfg.steps):
        idx = rng.integers(0, len(X), size=min(cfg.batch_size, len(X)))
        y = X[idx]
        c = y[:, 0, : shape.d_s]
        out, tape = net.forward_tape(c)
        diff = mask * (out.reshape(y.shape) - y)
        loss = float(np.mean(np.sum(diff.astype(np.float64) ** 2, axis=(1, 2))))
        if not np.isfinite(loss):
            raise TrainingError("non-finite bc loss", {"step": opt.step})
        net.backward(tape, ((2.0 / len(idx)) * diff).reshape(len(idx), -1))
        adam_step(net.params, tape.grads, opt)
        losses.append(loss)
    return policy, np.asarray(losses)


def save_bc(policy, stem, cfg=None):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    save_net(stem.with_suffix(".kdpn"), policy.net)
    meta = {
        "kind": BCPolicy.kind,
        "shape": [policy.shape.H, policy.shape.d_s, policy.shape.d_a],
        "norm_mean": policy.norm.mean.tolist(),
        "norm_std": policy.norm.std.tolist(),
    }
    if cfg is not None:
        meta["config"] = cfg.to_dict()
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=list) + "\n")


def load_bc(stem):
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    if meta.get("kind") != BCPolicy.kind:
        raise ConfigError(f"{stem}: not a bc checkpoint (kind={meta.get('kind')!r})")
    return BCPolicy(load_net(stem.with_suffix(".kdpn")), WindowShape(*meta["shape"]),
                    NormStats(meta["norm_mean"], meta["norm_std"]))
