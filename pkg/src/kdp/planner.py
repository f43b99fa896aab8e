"""Receding-horizon control with best-of-K ranking and action chunking.

Backends wrap a trained model behind one method, ``candidates``, which must
record every sequential network call on the supplied ``ForwardCounter``.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import diffuser
from .envs import EpisodeLog
from .errors import ConfigError, ShapeError
from .metrics import ForwardCounter, StepMetrics, p50
from .trajkit import ConditionSpec, clamp

METRICS_COLUMNS = ("episode", "success", "return", "steps", "nfe_total", "pl_p50_ms", "e2e_p50_ms")
BENCH_COLUMNS = ("method", "K", "T", "nfe", "bef", "pl_p50_ms", "e2e_p50_ms")


class KDPBackend:
    """One-step generator: K candidates in a single batched forward."""

    name = "kdp"
    bef_factor = 1

    def __init__(self, policy):
        self.policy = policy
        self.shape = policy.shape
        self.norm = policy.norm

    def candidates(self, spec, K, rng, counter):
        p = self.policy
        z = rng.standard_normal((K, p.noise_dim)).astype(p.net.dtype)
        c = np.broadcast_to(np.asarray(spec.c, dtype=p.net.dtype), (K, self.shape.d_s))
        out = p.raw_output(z, c)
        counter.record(K)
        return clamp(out, spec, self.shape)


class DiffusionBackend:
    name = "diffuser"
    bef_factor = 1

    def __init__(self, denoiser):
        self.denoiser = denoiser
        self.shape = denoiser.shape
        self.norm = denoiser.norm

    @property
    def T(self):
        return self.denoiser.schedule.T

    def candidates(self, spec, K, rng, counter):
        return diffuser.sample(self.denoiser, spec, K, rng, counter)


class BCBackend:
    """Deterministic regressor: always one candidate, whatever K is."""

    name = "bc"
    bef_factor = 1

    def __init__(self, policy):
        self.policy = policy
        self.shape = policy.shape
        self.norm = policy.norm

    def candidates(self, spec, K, rng, counter):
        out = self.policy.predict(spec.c[None])
        counter.record(1)
        return clamp(out, spec, self.shape)


@dataclass(frozen=True)
class PlannerConfig:
    K: int = 16
    L: int = 1
    ranked: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.L < 1:
            raise ConfigError("L must be >= 1")

    def check(self, shape):
        if self.L > shape.H:
            raise ConfigError(f"chunk length L={self.L} exceeds horizon H={shape.H}")


@dataclass
class PlanResult:
    selected: np.ndarray
    candidates: np.ndarray
    scores: np.ndarray | None
    executed: np.ndarray
    metrics: StepMetrics
    index: int = 0


def plan(backend, spec, cfg, scorer=None, rng=None):
    """Generate, rank and select one window for a raw-unit ConditionSpec.

    Candidates come back in raw units, re-clamped so the selected window
    satisfies the condition spec exactly.
    """
    shape = backend.shape
    cfg.check(shape)
    spec.validate(shape)
    if cfg.ranked and scorer is None:
        raise ConfigError("ranked planning needs a scorer")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    counter = ForwardCounter()
    t0 = time.perf_counter()
    nspec = backend.norm.normalize_spec(spec)
    cands = backend.candidates(nspec, cfg.K, rng, counter)
    scores = None
    idx = 0
    if cfg.ranked:
        scores = scorer.score_normalized(cands, nspec.c)
        idx = int(np.argmax(scores))  # first maximum: lowest index wins ties
    raw = clamp(backend.norm.denormalize(cands), spec, shape)
    pl_ms = 1e3 * (time.perf_counter() - t0)
    selected = raw[idx]
    executed = selected[: cfg.L, shape.d_s:]
    return PlanResult(selected, raw, scores, executed,
                      StepMetrics(counter.nfe, counter.bef, pl_ms), idx)


def _episode_limit(env):
    cfg = env.config
    return getattr(cfg, "max_steps", None) or getattr(cfg, "episode_length")


def rollout(env, backend, cfg, scorer=None, max_steps=None, rng=None):
    """Run one closed-loop episode. Returns ``(EpisodeLog, summary dict)``."""
    if (env.d_s, env.d_a) != (backend.shape.d_s, backend.shape.d_a):
        raise ShapeError(f"env dims ({env.d_s}, {env.d_a}) vs backend {backend.shape}")
    cfg.check(backend.shape)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    max_steps = max_steps if max_steps is not None else _episode_limit(env)
    at_goal = getattr(env, "at_goal", None)
    s = env.reset(rng)
    states, actions, rewards = [s], [], []
    pl, e2e = [], []
    nfe_total = bef_total = plans = 0
    nonfinite = done = False
    while len(actions) < max_steps and not done:
        t0 = time.perf_counter()
        res = plan(backend, ConditionSpec(s), cfg, scorer, rng)
        plans += 1
        nfe_total += res.metrics.nfe
        bef_total += res.metrics.bef
        for a in res.executed[: max_steps - len(actions)]:
            s, r = env.step(s, a)
            states.append(s)
            actions.append(a)
            rewards.append(r)
            if not np.all(np.isfinite(s)):
                nonfinite = done = True
                break
            if at_goal is not None and at_goal(s):
                done = True
                break
        pl.append(res.metrics.pl_ms)
        e2e.append(1e3 * (time.perf_counter() - t0))
    ep = EpisodeLog(states, np.reshape(actions, (len(actions), env.d_a)), rewards,
                    terminal=bool(at_goal(s)) if at_goal and not nonfinite else False)
    summary = {
        "success": bool(not nonfinite and env.success(ep)),
        "return": float(np.sum(rewards)),
        "steps": len(actions),
        "plan_calls": plans,
        "nfe_total": nfe_total,
        "bef_total": bef_total,
        "pl_p50_ms": p50(pl),
        "e2e_p50_ms": p50(e2e),
        "nonfinite": nonfinite,
    }
    return ep, summary


def evaluate(env_factory, backend, cfg, scorer=None, episodes=10, workers=1, max_steps=None,
             return_episodes=False):
    """``episodes`` independent rollouts; rows follow METRICS_COLUMNS order.

    Each episode has its own env (from ``env_factory``) and RNG stream spawned
    from ``cfg.seed``, so results do not depend on ``workers``.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(episodes)

    def one(i):
        ep, summ = rollout(env_factory(), backend, cfg, scorer, max_steps,
                           np.random.default_rng(seeds[i]))
        return {"episode": i, **summ}, ep

    if workers > 1 and episodes > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(one, range(episodes)))
    else:
        out = [one(i) for i in range(episodes)]
    rows = [r for r, _ in out]
    return (rows, [ep for _, ep in out]) if return_episodes else rows


def summarize(rows):
    if not rows:
        return {"episodes": 0, "success_rate": float("nan"), "mean_return": float("nan"),
                "pl_p50_ms": float("nan")}
    return {
        "episodes": len(rows),
        "success_rate": float(np.mean([r["success"] for r in rows])),
        "mean_return": float(np.mean([r["return"] for r in rows])),
        "pl_p50_ms": float(np.median([r["pl_p50_ms"] for r in rows])),
        "nonfinite": int(sum(r.get("nonfinite", False) for r in rows)),
    }


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow([r["episode"], int(r["success"]), f"{r['return']:.6g}", r["steps"],
                        r["nfe_total"], f"{r['pl_p50_ms']:.4f}", f"{r['e2e_p50_ms']:.4f}"])


def write_trajectory_csv(episodes, path):
    """Per-step state/action dump; the final state row has empty action cells."""
    d_s = episodes[0].states.shape[1] if episodes else 0
    d_a = episodes[0].actions.shape[1] if episodes else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "step", *(f"s{i}" for i in range(d_s)),
                    *(f"a{i}" for i in range(d_a))])
        for e, ep in enumerate(episodes):
            for t, s in enumerate(ep.states):
                a = ep.actions[t] if t < len(ep.actions) else [""] * d_a
                w.writerow([e, t, *(f"{v:.6g}" for v in s),
                            *(v if v == "" else f"{v:.6g}" for v in a)])


def action_diversity(backend, probe_conditions, K, seed=0):
    """Mean over raw-unit probe states of the per-dimension std of K first actions."""
    if K < 2:
        raise ConfigError("action diversity needs K >= 2")
    rng = np.random.default_rng(seed)
    d_s = backend.shape.d_s
    cfg = PlannerConfig(K=K, L=1, ranked=False, seed=seed)
    vals = []
    for c in np.asarray(probe_conditions):
        res = plan(backend, ConditionSpec(c), cfg, rng=rng)
        first = res.candidates[:, 0, d_s:].astype(np.float64)
        vals.append(first.std(axis=0).mean())
    return float(np.mean(vals))


@dataclass
class BenchEntry:
    backend: object
    Ks: tuple = (1, 16, 64)
    label: str = ""


def latency_bench(entries, conditions, env=None, n_timed=200, warmup=20, seed=0):
    """Time plan calls per (backend, K); rows follow BENCH_COLUMNS.

    ``conditions`` are raw states cycled through the calls. With ``env``, E2E
    additionally covers one env step on the first executed action.
    """
    conditions = np.asarray(conditions)
    rows = []
    for entry in entries:
        be = entry.backend
        for K in entry.Ks:
            cfg = PlannerConfig(K=K, L=1, ranked=False, seed=seed)
            rng = np.random.default_rng(seed)
            pl, e2e, nfe, bef = [], [], set(), set()
            for i in range(warmup + n_timed):
                c = conditions[i % len(conditions)]
                t0 = time.perf_counter()
                res = plan(be, ConditionSpec(c), cfg, rng=rng)
                if env is not None:
                    env.step(c, res.executed[0])
                t1 = time.perf_counter()
                if i >= warmup:
                    pl.append(res.metrics.pl_ms)
                    e2e.append(1e3 * (t1 - t0))
                    nfe.add(res.metrics.nfe)
                    bef.add(res.metrics.bef)
            if len(nfe) != 1 or len(bef) != 1:
                raise RuntimeError(f"{be.name}: forward counts varied across calls")
            rows.append({
                "method": entry.label or be.name,
                "K": K,
                "T": getattr(be, "T", 1),
                "nfe": nfe.pop(),
                "bef": bef.pop(),
                "pl_p50_ms": p50(pl),
                "e2e_p50_ms": p50(e2e),
            })
    return rows


def write_bench_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow([r["method"], r["K"], r["T"], r["nfe"], r["bef"],
                        f"{r['pl_p50_ms']:.4f}", f"{r['e2e_p50_ms']:.4f}"])
