"""Learned window-return model used to rank candidate plans."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .errors import ConfigError
from .numkit import AdamState, FeedForwardNet, adam_step, load_net, save_net
from .trajkit import NormStats, WindowShape


@dataclass(frozen=True)
class ScorerConfig:
    steps: int = 3000
    batch_size: int = 256
    hidden: tuple = (128, 128)
    lr: float = 1e-3
    gamma: float = 0.99
    holdout_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("need steps >= 0, batch_size >= 1 and lr > 0")
        if not 0.0 < self.gamma <= 1.0 or not 0.0 <= self.holdout_frac < 1.0:
            raise ConfigError("need 0 < gamma <= 1 and 0 <= holdout_frac < 1")

    def to_dict(self):
        return asdict(self)


def window_return(rewards, gamma):
    """Discounted sum ``sum_t gamma**t * r_t`` along the last axis."""
    rewards = np.asarray(rewards, dtype=np.float64)
    disc = gamma ** np.arange(rewards.shape[-1])
    return rewards @ disc


class ReturnModel:
    """``J(window, c)`` on normalized inputs; output in return units.

    The net regresses standardized returns; ``label_mean``/``label_std`` map
    back. A freshly zeroed model therefore scores every input as 0.
    """

    kind = "scorer"

    def __init__(self, net, shape, gamma=0.99, norm=None, label_mean=0.0, label_std=1.0):
        if net.sizes[0] != shape.size + shape.d_s or net.sizes[-1] != 1:
            raise ConfigError(f"scorer net sizes {net.sizes} do not fit {shape}")
        if not 0 < gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        self.net = net
        self.shape = shape
        self.gamma = gamma
        self.norm = norm or NormStats.identity(shape.D)
        self.label_mean = float(label_mean)
        self.label_std = float(label_std)

    @classmethod
    def create(cls, shape, hidden=(128, 128), rng=None, gamma=0.99, norm=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        net = FeedForwardNet.init((shape.size + shape.d_s, *hidden, 1), rng)
        return cls(net, shape, gamma, norm)

    @classmethod
    def zeros(cls, shape, hidden=(128, 128), gamma=0.99):
        return cls(FeedForwardNet.zeros((shape.size + shape.d_s, *hidden, 1)), shape, gamma)

    def _inputs(self, windows, c):
        windows = np.asarray(windows, dtype=np.float32).reshape(-1, self.shape.size)
        c = np.asarray(c, dtype=np.float32).reshape(-1, self.shape.d_s)
        if len(c) == 1 and len(windows) > 1:
            c = np.repeat(c, len(windows), axis=0)
        return np.concatenate([windows, c], axis=1)

    def score_normalized(self, windows, c):
        """Scores for ``(K, H, D)`` normalized windows sharing normalized condition ``c``."""
        out = self.net.forward(self._inputs(windows, c))[:, 0]
        return out.astype(np.float64) * self.label_std + self.label_mean

    def score(self, window, condition):
        """Score raw-unit window(s) against a raw-unit condition."""
        w = self.norm.normalize(window)
        c = self.norm.normalize_state(condition)
        s = self.score_normalized(w, c)
        return float(s[0]) if np.ndim(window) == 2 else s


def score(model, window, condition):
    return model.score(window, condition)


def train_scorer(dataset, cfg=None, progress=None):
    """Squared-error regression of discounted window returns.

    Returns ``(model, info, losses)``; ``info`` holds the holdout relative
    error and Spearman rank correlation, ``losses`` the per-step training MSE.
    """
    cfg = cfg or ScorerConfig()
    if not dataset.has_rewards:
        raise ConfigError("scorer training needs a dataset with rewards")
    if len(dataset) < 2:
        raise ConfigError("scorer training needs at least two windows")
    rng = np.random.default_rng(cfg.seed)
    shape = dataset.shape
    X = dataset.normalized()
    C = X[:, 0, : shape.d_s]
    R = window_return(dataset.rewards, cfg.gamma)
    order = rng.permutation(len(X))
    n_hold = max(1, int(round(cfg.holdout_frac * len(X))))
    hold, fit = order[:n_hold], order[n_hold:]

    label_mean = float(R[fit].mean())
    label_std = float(R[fit].std())
    label_std = label_std if label_std > 1e-8 else 1.0
    model = ReturnModel.create(shape, cfg.hidden, rng, cfg.gamma, dataset.norm)
    model.label_mean, model.label_std = label_mean, label_std
    Y = ((R - label_mean) / label_std).astype(np.float32)

    opt = AdamState(lr=cfg.lr)
    losses = np.empty(cfg.steps)
    for step in range(cfg.steps):
        idx = fit[rng.integers(0, len(fit), size=min(cfg.batch_size, len(fit)))]
        inp = model._inputs(X[idx], C[idx])
        out, tape = model.net.forward_tape(inp)
        err = out[:, 0] - Y[idx]
        model.net.backward(tape, (2.0 / len(idx)) * err[:, None])
        adam_step(model.net.params, tape.grads, opt)
        losses[step] = float(np.mean(err * err))
        if progress and (step + 1) % 500 == 0:
            progress(step + 1, losses[step])

    pred = model.score_normalized(X[hold], C[hold]) if len(hold) else np.empty(0)
    info = {"holdout": int(len(hold))}
    if len(hold):
        denom = np.maximum(np.abs(R[hold]), 1e-8)
        info["holdout_rel_err"] = float(np.mean(np.abs(pred - R[hold]) / denom))
        info["holdout_spearman"] = float(spearmanr(pred, R[hold]).statistic) \
            if np.ptp(R[hold]) > 0 and np.ptp(pred) > 0 else float("nan")
    return model, info, losses


def save_scorer(model, stem, cfg=None):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    save_net(stem.with_suffix(".kdpn"), model.net)
    meta = {
        "kind": model.kind,
        "shape": [model.shape.H, model.shape.d_s, model.shape.d_a],
        "gamma": model.gamma,
        "label_mean": model.label_mean,
        "label_std": model.label_std,
        "norm_mean": model.norm.mean.tolist(),
        "norm_std": model.norm.std.tolist(),
    }
    if cfg is not None:
        meta["config"] = cfg.to_dict()
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=list) + "\n")


def load_scorer(stem):
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    if meta.get("kind") != ReturnModel.kind:
        raise ConfigError(f"{stem}: not a scorer checkpoint (kind={meta.get('kind')!r})")
    net = load_net(stem.with_suffix(".kdpn"))
    return ReturnModel(net, WindowShape(*meta["shape"]), meta["gamma"],
                       NormStats(meta["norm_mean"], meta["norm_std"]),
                       meta["label_mean"], meta["label_std"])
