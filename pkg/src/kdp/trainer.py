"""One-step generator training with a stop-gradient drifted target.

Each step draws a minibatch of dataset windows, uses their keys as the
conditions, generates one clamped window per condition, computes the keyed
drift against the minibatch, and regresses the generator output onto the
frozen target ``clamp(gen + V)`` with action-weighted squared error.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .drift import DriftConfig, drift_field
from .errors import ConfigError, TrainingError
from .numkit import AdamState, FeedForwardNet, adam_step, load_net, save_net
from .trajkit import NormStats, WindowShape, clamp_batch, constraint_mask

log = logging.getLogger(__name__)

LR_SCHEDULES = ("constant", "cosine")
REPORT_COLUMNS = ("step", "loss", "drift_rms", "wplus_entropy", "action_div", "ms_per_step")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    noise_dim: int = 64
    hidden: tuple = (256, 256)
    lambda_s: float = 1.0
    lambda_a: float = 10.0
    steps: int = 5000
    seed: int = 0
    drift: DriftConfig = field(default_factory=DriftConfig)
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eval_every: int = 500
    probe_states: int = 20
    probe_k: int = 64
    init_output_scale: float = 1.0
    lr_schedule: str = "constant"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if isinstance(self.drift, dict):
            object.__setattr__(self, "drift", DriftConfig(**self.drift))
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.batch_size == 1:
            log.warning("batch_size=1 leaves no negatives; repulsion is disabled in effect")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.lambda_s < 0 or self.lambda_a < 0 or (self.lambda_s == 0 and self.lambda_a == 0):
            raise ConfigError("lambda_s, lambda_a must be >= 0 and not both 0")

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        return config_hash(self.to_dict())


def config_hash(d):
    blob = json.dumps(d, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class GeneratorPolicy:
    """``g(z, c)`` -> flattened window, always composed with the clamp.

    Works in normalized units; ``norm`` maps raw env states in and out.
    """

    kind = "kdp"

    def __init__(self, net, shape, noise_dim, norm=None):
        if net.sizes[0] != noise_dim + shape.d_s or net.sizes[-1] != shape.size:
            raise ConfigError(f"net sizes {net.sizes} do not fit noise_dim={noise_dim}, {shape}")
        self.net = net
        self.shape = shape
        self.noise_dim = noise_dim
        self.norm = norm or NormStats.identity(shape.D)

    @classmethod
    def create(cls, shape, noise_dim=64, hidden=(256, 256), rng=None, norm=None,
               dtype=np.float32, output_scale=1.0):
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = (noise_dim + shape.d_s, *hidden, shape.size)
        net = FeedForwardNet.init(sizes, rng, dtype=dtype, output_scale=output_scale)
        return cls(net, shape, noise_dim, norm)

    def raw_output(self, z, c):
        inp = np.concatenate([z, c], axis=1)
        return self.net.forward(inp).reshape(-1, self.shape.H, self.shape.D)

    def generate(self, z, c):
        """Clamped windows for noise ``z`` (B, noise_dim) and conditions ``c`` (B, d_s)."""
        c = np.asarray(c, dtype=self.net.dtype)
        return clamp_batch(self.raw_output(z, c), c)


def sample_generator(policy, conditions, seed):
    """Draw one clamped window per condition with noise from ``seed``."""
    rng = np.random.default_rng(seed)
    c = np.asarray(conditions, dtype=policy.net.dtype)
    z = rng.standard_normal((len(c), policy.noise_dim)).astype(policy.net.dtype)
    return policy.generate(z, c)


def drifted_target(gen, V, c, spec_mask=None):
    """``clamp(gen + V)`` on detached copies; clamp is applied last."""
    target = np.array(gen, copy=True) + np.array(V, copy=True)
    target = clamp_batch(target, c)
    if spec_mask is not None:
        # goal-type clamps: restore every masked coordinate from gen (already clamped)
        target = np.where(spec_mask == 0, gen, target)
    return target


def loss_weights(shape, lambda_s, lambda_a, dtype=np.float32):
    w = np.empty((shape.H, shape.D), dtype=dtype)
    w[:, : shape.d_s] = lambda_s
    w[:, shape.d_s:] = lambda_a
    return w


def weighted_loss(gen, target, lambda_s, lambda_a, d_s):
    """Batch-mean of ``sum_t lambda_s |ds_t|^2 + lambda_a |da_t|^2``."""
    diff = np.asarray(gen, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    sq = diff * diff
    per = lambda_s * sq[..., :d_s].sum(axis=(-2, -1)) + lambda_a * sq[..., d_s:].sum(axis=(-2, -1))
    return float(np.mean(per))


def _entropy_rows(W):
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(W > 0, W * np.log(W), 0.0).sum(axis=1)
    return float(ent.mean())


def loss_and_grad(policy, z, c, target, lambda_s, lambda_a):
    """Loss against a frozen ``target`` and its gradient w.r.t. every parameter."""
    shape = policy.shape
    B = len(c)
    out, tape = policy.net.forward_tape(np.concatenate([z, c], axis=1))
    gen = clamp_batch(out.reshape(B, shape.H, shape.D), c)
    loss = weighted_loss(gen, target, lambda_s, lambda_a, shape.d_s)
    w = loss_weights(shape, lambda_s, lambda_a, dtype=out.dtype)
    mask = constraint_mask(shape).astype(out.dtype)
    # clamped outputs do not depend on the net: their cotangent is zero
    g = (2.0 / B) * w * mask * (gen - target)
    policy.net.backward(tape, g.reshape(B, -1))
    return loss, tape.grads, gen


class Trainer:
    """Holds the optimizer state and sampling stream for one training run."""

    def __init__(self, policy, data, cfg):
        self.policy = policy
        self.data = np.asarray(data, dtype=policy.net.dtype)  # normalized windows
        self.cfg = cfg
        self.opt = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.mask = constraint_mask(policy.shape)
        self._order = np.empty(0, dtype=np.int64)
        self._cursor = 0
        self.weights = loss_weights(policy.shape, cfg.lambda_s, cfg.lambda_a)
        self.step_count = 0

    def next_batch(self):
        """Sample without replacement within an epoch."""
        B = min(self.cfg.batch_size, len(self.data))
        if self._cursor + B > len(self._order):
            self._order = self.rng.permutation(len(self.data))
            self._cursor = 0
        idx = self._order[self._cursor:self._cursor + B]
        self._cursor += B
        return self.data[idx]

    def lr_at(self, step):
        if self.cfg.lr_schedule == "constant" or self.cfg.steps <= 1:
            return self.cfg.lr
        return 0.5 * self.cfg.lr * (1.0 + np.cos(np.pi * step / self.cfg.steps))

    def step(self, batch=None):
        t0 = time.perf_counter()
        self.opt.lr = self.lr_at(self.step_count)
        batch = self.next_batch() if batch is None else batch
        row = train_step(self.policy, batch, self.cfg, self.opt, self.rng, self.mask)
        self.step_count += 1
        row["step"] = self.step_count
        row["ms_per_step"] = 1e3 * (time.perf_counter() - t0)
        return row


def train_step(policy, data_batch, cfg, opt_state, rng, mask=None):
    """One optimizer step; returns a report row (without step index/timing)."""
    shape = policy.shape
    dtype = policy.net.dtype
    mask = constraint_mask(shape) if mask is None else mask
    B = len(data_batch)
    c = data_batch[:, 0, : shape.d_s].astype(dtype)
    z = rng.standard_normal((B, policy.noise_dim)).astype(dtype)
    inp = np.concatenate([z, c], axis=1)
    out, tape = policy.net.forward_tape(inp)
    gen = clamp_batch(out.reshape(B, shape.H, shape.D), c)

    drift = drift_field(gen, data_batch, cfg.drift, mask, shape.d_s)
    if not np.all(np.isfinite(drift.V)):
        raise TrainingError("non-finite drift", _diagnostics(data_batch, drift, opt_state))
    target = drifted_target(gen, drift.V, c)
    loss = weighted_loss(gen, target, cfg.lambda_s, cfg.lambda_a, shape.d_s)
    if not np.isfinite(loss):
        raise TrainingError("non-finite loss", _diagnostics(data_batch, drift, opt_state))

    w = loss_weights(shape, cfg.lambda_s, cfg.lambda_a, dtype=dtype)
    g = (2.0 / B) * w * mask.astype(dtype) * (gen - target)
    policy.net.backward(tape, g.reshape(B, -1))
    adam_step(policy.net.params, tape.grads, opt_state)
    return {
        "loss": loss,
        "drift_rms": float(np.mean(drift.raw_rms)),
        "wplus_entropy": float(np.mean([_entropy_rows(W) for W in drift.W_pos])),
        "action_div": float("nan"),
    }


def _diagnostics(batch, drift, opt_state):
    return {
        "step": opt_state.step,
        "batch": batch,
        "drift_rms": drift.raw_rms,
        "drift_nonfinite": int(np.size(drift.V) - np.isfinite(drift.V).sum()),
    }


def probe_conditions(dataset, n, seed=0):
    """``n`` dataset keys (normalized), spread by sorting on the first state dim."""
    keys = dataset.normalized()[:, 0, : dataset.shape.d_s]
    order = np.argsort(keys[:, 0], kind="stable")
    pick = order[np.linspace(0, len(order) - 1, n + 2).round().astype(int)[1:-1]]
    return keys[pick]


def first_action_diversity(policy, conditions, K, seed=0):
    """Mean over conditions of the per-dimension std (raw units) of K first actions."""
    rng = np.random.default_rng(seed)
    d_s = policy.shape.d_s
    vals = []
    for c in conditions:
        z = rng.standard_normal((K, policy.noise_dim)).astype(policy.net.dtype)
        win = policy.norm.denormalize(policy.generate(z, np.repeat(c[None], K, axis=0)))
        vals.append(win[:, 0, d_s:].astype(np.float64).std(axis=0).mean())
    return float(np.mean(vals))


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    config_hash: str = ""

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r["step"]] + [f"{r[k]:.9g}" for k in REPORT_COLUMNS[1:]])


def train(dataset, cfg, out_dir=None, progress=None):
    """Run ``cfg.steps`` training steps on a dataset; optionally checkpoint to ``out_dir``.

    Returns ``(policy, report)``. A numerical abort leaves the last periodic
    checkpoint in place and re-raises.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    policy = GeneratorPolicy.create(dataset.shape, cfg.noise_dim, cfg.hidden, rng, dataset.norm,
                                    output_scale=cfg.init_output_scale)
    report = TrainReport(config_hash=cfg.config_hash())
    if cfg.steps == 0:
        if out_dir is not None:
            save_policy(policy, Path(out_dir) / "policy", cfg)
        return policy, report
    trainer = Trainer(policy, dataset.normalized(), cfg)
    probes = probe_conditions(dataset, cfg.probe_states)
    for _ in range(cfg.steps):
        row = trainer.step()
        if cfg.eval_every and (row["step"] % cfg.eval_every == 0 or row["step"] == cfg.steps):
            row["action_div"] = first_action_diversity(policy, probes, cfg.probe_k, seed=cfg.seed)
            if out_dir is not None:
                save_policy(policy, Path(out_dir) / "policy", cfg)
            if progress:
                progress(row)
        report.rows.append(row)
    if out_dir is not None:
        save_policy(policy, Path(out_dir) / "policy", cfg)
    return policy, report


def save_policy(policy, stem, cfg=None, extra=None):
    """Write ``<stem>.kdpn`` and a ``<stem>.json`` sidecar with shape and norm stats."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    save_net(stem.with_suffix(".kdpn"), policy.net)
    meta = {
        "kind": policy.kind,
        "shape": [policy.shape.H, policy.shape.d_s, policy.shape.d_a],
        "noise_dim": getattr(policy, "noise_dim", 0),
        "norm_mean": policy.norm.mean.tolist(),
        "norm_std": policy.norm.std.tolist(),
    }
    if cfg is not None:
        meta["config"] = cfg.to_dict() if hasattr(cfg, "to_dict") else cfg
        meta["config_hash"] = config_hash(meta["config"])
    meta.update(extra or {})
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=list) + "\n")


def read_meta(stem):
    return json.loads(Path(stem).with_suffix(".json").read_text())


def load_policy(stem):
    meta = read_meta(stem)
    net = load_net(Path(stem).with_suffix(".kdpn"))
    shape = WindowShape(*meta["shape"])
    norm = NormStats(meta["norm_mean"], meta["norm_std"])
    return GeneratorPolicy(net, shape, meta["noise_dim"], norm)
