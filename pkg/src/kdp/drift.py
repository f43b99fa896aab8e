"""Keyed attraction/repulsion drift field over minibatches of windows.

Given clamped generated windows ``gen`` and dataset windows ``data`` (both
``(B, H, D)``, normalized), neighbourhoods are formed from distances between
keys (initial state blocks), while the attraction and repulsion means are
weighted averages of full windows.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURES = (0.02, 0.05, 0.1, 0.2)
SINGLE_TEMPERATURE = (0.05,)


@dataclass(frozen=True)
class DriftConfig:
    temperatures: tuple = DEFAULT_TEMPERATURES
    eps: float = 1e-6
    use_keying: bool = True
    mask_self_negatives: bool = True
    repulsion_enabled: bool = True
    normalize_drift: bool = True

    def __post_init__(self):
        object.__setattr__(self, "temperatures", tuple(float(t) for t in self.temperatures))
        if not self.temperatures or any(t <= 0 for t in self.temperatures):
            raise ConfigError(f"temperatures must be non-empty and positive: {self.temperatures}")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")


# Each ablation is a single field change against the default config.
ABLATIONS = {
    "full": {},
    "no_keying": {"use_keying": False},
    "include_self_negatives": {"mask_self_negatives": False},
    "attraction_only": {"repulsion_enabled": False},
    "no_drift_norm": {"normalize_drift": False},
    "single_tau": {"temperatures": SINGLE_TEMPERATURE},
}


def ablated(cfg, name):
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; valid: {sorted(ABLATIONS)}")
    return replace(cfg, **ABLATIONS[name])


@dataclass
class DriftBatch:
    V: np.ndarray
    W_pos: list
    W_neg: list
    D_pos: np.ndarray
    D_neg: np.ndarray
    temperatures: tuple
    raw_rms: np.ndarray = field(default=None)
    degenerate_rows: int = 0


def _pairwise(a, b):
    diff = a[:, None, :].astype(np.float64) - b[None, :, :].astype(np.float64)
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def distance_matrices(gen, data, d_s, use_keying=True):
    """Return ``(D_pos, D_neg)``: gen-vs-data and gen-vs-gen distance matrices.

    With ``use_keying`` the distances compare initial state blocks only;
    otherwise whole flattened windows.
    """
    gen = np.asarray(gen)
    data = np.asarray(data)
    if gen.ndim != 3 or gen.shape != data.shape:
        raise ShapeError(f"gen {gen.shape} and data {data.shape} must both be (B, H, D)")
    if use_keying:
        kg, kd = gen[:, 0, :d_s], data[:, 0, :d_s]
    else:
        kg, kd = gen.reshape(len(gen), -1), data.reshape(len(data), -1)
    return _pairwise(kg, kd), _pairwise(kg, kg)


def softmax_weights(dist, tau, mask_diagonal=False):
    """Row-wise ``softmax(-dist / tau)``; masked diagonal entries get weight 0.

    A row with nothing left after masking (B = 1) comes back all zero.
    """
    if tau <= 0:
        raise ConfigError("tau must be positive")
    logits = -np.asarray(dist, dtype=np.float64) / tau
    if mask_diagonal:
        np.fill_diagonal(logits, -np.inf)
    row_max = logits.max(axis=1, keepdims=True)
    empty = ~np.isfinite(row_max[:, 0])
    row_max[empty] = 0.0
    e = np.exp(logits - row_max)
    total = e.sum(axis=1, keepdims=True)
    total[empty] = 1.0
    return e / total


def mask_drift(V, mask):
    mask = np.asarray(mask)
    if mask.shape != V.shape[-mask.ndim:]:
        raise ShapeError(f"mask {mask.shape} does not fit drift {V.shape}")
    return np.where(mask == 0, 0.0, V).astype(V.dtype)


def normalize_drift(V, eps):
    """Scale each sample to unit RMS: ``V / (sqrt(mean(V**2)) + eps)``."""
    V = np.asarray(V)
    axes = tuple(range(1, V.ndim)) if V.ndim > 2 else None
    if axes is None:
        rms = np.sqrt(np.mean(np.square(V, dtype=np.float64)))
        return (V / (rms + eps)).astype(V.dtype)
    rms = np.sqrt(np.mean(np.square(V, dtype=np.float64), axis=axes, keepdims=True))
    return (V / (rms + eps)).astype(V.dtype)


def drift_field(gen, data, cfg, mask, d_s):
    """Multi-temperature keyed drift for a batch; see module docstring.

    ``mask`` is ``(H, D)`` or ``(B, H, D)`` with 0 at clamped coordinates.
    """
    gen = np.asarray(gen)
    data = np.asarray(data)
    D_pos, D_neg = distance_matrices(gen, data, d_s, cfg.use_keying)
    B = gen.shape[0]
    flat_gen = gen.reshape(B, -1).astype(np.float64)
    flat_data = data.reshape(B, -1).astype(np.float64)

    V = np.zeros_like(flat_gen)
    W_pos, W_neg = [], []
    degenerate = 0
    M = len(cfg.temperatures)
    for tau in cfg.temperatures:
        wp = softmax_weights(D_pos, tau)
        W_pos.append(wp)
        mu_pos = wp @ flat_data
        if cfg.repulsion_enabled:
            wn = softmax_weights(D_neg, tau, mask_diagonal=cfg.mask_self_negatives)
            degenerate = max(degenerate, int((wn.sum(axis=1) == 0).sum()))
            W_neg.append(wn)
            V += (mu_pos - wn @ flat_gen) / M
        else:
            # mean shift toward the data: x_hat is the only reference point left
            V += (mu_pos - flat_gen) / M
    if degenerate:
        log.warning("%d sample(s) have no negatives after self-masking; repulsion set to 0",
                    degenerate)

    V = V.reshape(gen.shape)
    V = np.where(np.asarray(mask) == 0, 0.0, V)
    raw_rms = np.sqrt(np.mean(V.reshape(B, -1) ** 2, axis=1))
    if cfg.normalize_drift:
        V = V / (raw_rms[:, None, None] + cfg.eps)
    return DriftBatch(V.astype(gen.dtype), W_pos, W_neg, D_pos, D_neg,
                      cfg.temperatures, raw_rms, degenerate)


def dump_drift_csv(batch, path):
    """One row per (i, j, tau) with both weights and both distances."""
    B = batch.D_pos.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "tau", "w_pos", "w_neg", "d_pos", "d_neg"])
        for m, tau in enumerate(batch.temperatures):
            wn = batch.W_neg[m] if batch.W_neg else np.zeros((B, B))
            for i in range(B):
                for j in range(B):
                    w.writerow([i, j, tau, f"{batch.W_pos[m][i, j]:.9g}", f"{wn[i, j]:.9g}",
                                f"{batch.D_pos[i, j]:.9g}", f"{batch.D_neg[i, j]:.9g}"])
