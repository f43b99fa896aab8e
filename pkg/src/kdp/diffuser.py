"""Minimal DDPM trajectory diffuser with inpainting conditioning.

This is the T-step comparator for planning cost: sampling runs T sequential
denoiser calls, each on the whole K-candidate batch.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError
from .metrics import ForwardCounter
from .numkit import AdamState, FeedForwardNet, adam_step, load_net, save_net
from .trajkit import NormStats, WindowShape, clamp, constraint_mask

TIME_EMBED_DIM = 16


class NoiseSchedule:
    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1 or np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigError("betas must be a non-empty vector in (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        # index 0 holds the t = 0 convention alpha_bar = 1
        self.alpha_bars = np.concatenate([[1.0], np.cumprod(self.alphas)])
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ConfigError("alpha_bar must be strictly decreasing")
        self.sigmas = np.sqrt(betas)

    @classmethod
    def linear(cls, T=20, beta_start=1e-4, beta_end=2e-2):
        return cls(np.linspace(beta_start, beta_end, T))

    @property
    def T(self):
        return len(self.betas)

    def alpha(self, t):
        return self.alphas[t - 1]

    def alpha_bar(self, t):
        return self.alpha_bars[t]

    def sigma(self, t):
        return self.sigmas[t - 1]


def forward_noise(x0, t, schedule, noise):
    """Closed-form marginal ``sqrt(ab_t) x0 + sqrt(1 - ab_t) noise``; ``t = 0`` returns x0."""
    if not 0 <= t <= schedule.T:
        raise ConfigError(f"t={t} outside [0, {schedule.T}]")
    ab = schedule.alpha_bar(t)
    return (np.sqrt(ab) * np.asarray(x0, dtype=np.float64)
            + np.sqrt(1.0 - ab) * np.asarray(noise, dtype=np.float64))


def forward_chain(x0, t, schedule, rng):
    """Sample x_t by iterating the one-step kernel ``t`` times."""
    x = np.asarray(x0, dtype=np.float64)
    for s in range(1, t + 1):
        a = schedule.alpha(s)
        x = np.sqrt(a) * x + np.sqrt(1.0 - a) * rng.standard_normal(x.shape)
    return x


def time_embedding(t, dim=TIME_EMBED_DIM):
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)], axis=1).astype(np.float32)


class Denoiser:
    """``eps(x_t, t, c)`` on normalized windows."""

    kind = "diffuser"

    def __init__(self, net, shape, schedule, norm=None):
        if net.sizes[0] != shape.size + TIME_EMBED_DIM + shape.d_s or net.sizes[-1] != shape.size:
            raise ShapeError(f"denoiser net sizes {net.sizes} do not fit {shape}")
        self.net = net
        self.shape = shape
        self.schedule = schedule
        self.norm = norm or NormStats.identity(shape.D)

    @classmethod
    def create(cls, shape, schedule, hidden=(256, 256), rng=None, norm=None, output_scale=0.1):
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = (shape.size + TIME_EMBED_DIM + shape.d_s, *hidden, shape.size)
        return cls(FeedForwardNet.init(sizes, rng, output_scale=output_scale), shape, schedule, norm)

    def inputs(self, x_t, t, c):
        B = len(x_t)
        t = np.broadcast_to(np.asarray(t), (B,))
        c = np.broadcast_to(np.asarray(c, dtype=np.float32), (B, self.shape.d_s))
        return np.concatenate(
            [np.asarray(x_t, dtype=np.float32).reshape(B, -1), time_embedding(t), c], axis=1)

    def predict(self, x_t, t, c):
        return self.net.forward(self.inputs(x_t, t, c)).reshape(x_t.shape)


@dataclass(frozen=True)
class DiffuserConfig:
    steps: int = 5000
    batch_size: int = 128
    hidden: tuple = (256, 256)
    lr: float = 3e-4
    T: int = 20
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("need steps >= 0, batch_size >= 1 and lr > 0")
        if self.T < 1:
            raise ConfigError("T must be >= 1")

    def to_dict(self):
        return asdict(self)

    def schedule(self):
        return NoiseSchedule.linear(self.T, self.beta_start, self.beta_end)


def denoising_loss_and_grad(den, x0, t, eps, want_grad=True):
    """Masked noise-prediction loss for a batch of clean normalized windows."""
    shape = den.shape
    B = len(x0)
    mask = constraint_mask(shape)
    ab = den.schedule.alpha_bars[t][:, None, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    # inpainting: clamped coordinates are shown clean and never scored
    x_t = np.where(mask == 0, x0, x_t).astype(np.float32)
    c = x0[:, 0, : shape.d_s]
    inp = den.inputs(x_t, t, c)
    if not want_grad:
        pred = den.net.forward(inp).reshape(B, shape.H, shape.D)
        return float(np.mean(np.sum(mask * (pred - eps) ** 2, axis=(1, 2)))), None
    out, tape = den.net.forward_tape(inp)
    pred = out.reshape(B, shape.H, shape.D)
    diff = mask * (pred - eps)
    loss = float(np.mean(np.sum(diff.astype(np.float64) ** 2, axis=(1, 2))))
    den.net.backward(tape, ((2.0 / B) * diff).reshape(B, -1).astype(np.float32))
    return loss, tape.grads


def train_denoiser(dataset, schedule=None, cfg=None):
    """Returns ``(denoiser, losses)`` with one loss value per step."""
    cfg = cfg or DiffuserConfig()
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    schedule = schedule or cfg.schedule()
    rng = np.random.default_rng(cfg.seed)
    den = Denoiser.create(dataset.shape, schedule, cfg.hidden, rng, dataset.norm)
    X = dataset.normalized()
    opt = AdamState(lr=cfg.lr)
    losses = []
    for _ in range(cfg.steps):
        idx = rng.integers(0, len(X), size=min(cfg.batch_size, len(X)))
        t = rng.integers(1, schedule.T + 1, size=len(idx))
        eps = rng.standard_normal(X[idx].shape).astype(np.float32)
        loss, grads = denoising_loss_and_grad(den, X[idx], t, eps)
        if not np.isfinite(loss):
            raise TrainingError("non-finite denoiser loss", {"step": opt.step})
        adam_step(den.net.params, grads, opt)
        losses.append(loss)
    return den, np.asarray(losses)


def sample(den, spec, K, rng, counter=None):
    """Reverse-process K candidates for a normalized ConditionSpec.

    The clamp is re-imposed after every reverse step; ``counter`` records one
    sequential forward of batch K per step.
    """
    shape = den.shape
    sch = den.schedule
    counter = counter if counter is not None else ForwardCounter()
    x = clamp(rng.standard_normal((K, shape.H, shape.D)), spec, shape)
    c = np.asarray(spec.c, dtype=np.float32)
    for t in range(sch.T, 0, -1):
        eps = den.predict(x, t, c).astype(np.float64)
        counter.record(K)
        a, ab = sch.alpha(t), sch.alpha_bar(t)
        mean = (x - (1.0 - a) / np.sqrt(1.0 - ab) * eps) / np.sqrt(a)
        if t > 1:
            mean = mean + sch.sigma(t) * rng.standard_normal(x.shape)
        x = clamp(mean, spec, shape)
    return x.astype(np.float32)


def save_denoiser(den, stem, cfg=None):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    save_net(stem.with_suffix(".kdpn"), den.net)
    meta = {
        "kind": Denoiser.kind,
        "shape": [den.shape.H, den.shape.d_s, den.shape.d_a],
        "betas": den.schedule.betas.tolist(),
        "norm_mean": den.norm.mean.tolist(),
        "norm_std": den.norm.std.tolist(),
    }
    if cfg is not None:
        meta["config"] = cfg.to_dict()
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=list) + "\n")


def load_denoiser(stem):
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    if meta.get("kind") != Denoiser.kind:
        raise ConfigError(f"{stem}: not a diffuser checkpoint (kind={meta.get('kind')!r})")
    return Denoiser(load_net(stem.with_suffix(".kdpn")), WindowShape(*meta["shape"]),
                    NoiseSchedule(meta["betas"]), NormStats(meta["norm_mean"], meta["norm_std"]))
