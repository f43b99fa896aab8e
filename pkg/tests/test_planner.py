import math

import numpy as np
import pytest

from kdp.bc import BCPolicy
from kdp.diffuser import Denoiser, NoiseSchedule
from kdp.envs import Bimodal1D, make_env
from kdp.errors import ConfigError, ShapeError
from kdp.metrics import ForwardCounter, StepMetrics, p50
from kdp.numkit import FeedForwardNet
from kdp.planner import (METRICS_COLUMNS, BCBackend, BenchEntry, DiffusionBackend, KDPBackend,
                         PlannerConfig, action_diversity, evaluate, latency_bench, plan, rollout,
                         summarize, write_bench_csv, write_metrics_csv, write_trajectory_csv)
from kdp.trainer import GeneratorPolicy
from kdp.trajkit import ConditionSpec, NormStats, WindowShape, clamp

SHAPE = WindowShape(8, 1, 1)


def kdp_backend(shape=SHAPE, seed=0):
    pol = GeneratorPolicy.create(shape, 8, (16,), np.random.default_rng(seed))
    return KDPBackend(pol)


class StubBackend:
    """First action = first d_a noise coordinates, or constant when ``ignore_z``."""

    name = "stub"
    bef_factor = 1

    def __init__(self, shape=SHAPE, ignore_z=False):
        self.shape = shape
        self.norm = NormStats.identity(shape.D)
        self.ignore_z = ignore_z

    def candidates(self, spec, K, rng, counter):
        x = np.zeros((K, self.shape.H, self.shape.D))
        if not self.ignore_z:
            x[:, 0, self.shape.d_s:] = rng.standard_normal((K, self.shape.d_a))
        counter.record(K)
        return clamp(x, spec, self.shape)


class TableScorer:
    """Returns preset scores in order, ignoring the windows."""

    def __init__(self, scores):
        self.scores = np.asarray(scores, dtype=np.float64)

    def score_normalized(self, windows, c):
        return self.scores[: len(windows)]


def test_config_validation():
    for kw in ({"K": 0}, {"L": 0}):
        with pytest.raises(ConfigError):
            PlannerConfig(**kw)
    with pytest.raises(ConfigError):
        plan(kdp_backend(), ConditionSpec(np.zeros(1)), PlannerConfig(L=9, ranked=False))
    with pytest.raises(ConfigError):
        plan(kdp_backend(), ConditionSpec(np.zeros(1)), PlannerConfig(ranked=True))


def test_single_candidate_unranked():
    res = plan(kdp_backend(), ConditionSpec(np.array([0.4])), PlannerConfig(K=1, ranked=False))
    assert res.candidates.shape == (1, 8, 2)
    assert np.array_equal(res.selected, res.candidates[0])
    assert res.metrics.nfe == 1 and res.scores is None


def test_kdp_counts_are_structural():
    res = plan(kdp_backend(), ConditionSpec(np.zeros(1)), PlannerConfig(K=64, ranked=False))
    assert (res.metrics.nfe, res.metrics.bef) == (1, 64)


def test_diffusion_counts():
    den = Denoiser.create(SHAPE, NoiseSchedule.linear(20), (16,), np.random.default_rng(0))
    res = plan(DiffusionBackend(den), ConditionSpec(np.zeros(1)), PlannerConfig(K=16, ranked=False))
    assert (res.metrics.nfe, res.metrics.bef) == (20, 320)


def test_bc_backend_one_candidate():
    net = FeedForwardNet.init((1, 8, SHAPE.size), np.random.default_rng(0))
    res = plan(BCBackend(BCPolicy(net, SHAPE)), ConditionSpec(np.zeros(1)),
               PlannerConfig(K=16, ranked=False))
    assert len(res.candidates) == 1 and (res.metrics.nfe, res.metrics.bef) == (1, 1)


def test_selected_clamp_and_executed_actions():
    shape = WindowShape(6, 2, 2)
    pol = GeneratorPolicy.create(shape, 4, (8,), np.random.default_rng(1),
                                 norm=NormStats(np.arange(4.0), np.array([2.0, 3.0, 0.5, 1.5])))
    spec = ConditionSpec(np.array([1.3, -0.7]), np.array([4.0]), (1,), 5)
    res = plan(KDPBackend(pol), spec, PlannerConfig(K=8, L=3, ranked=False))
    assert np.array_equal(clamp(res.selected, spec, shape), res.selected)
    assert res.selected[5, 1] == 4.0
    assert np.array_equal(res.executed, res.selected[:3, 2:])


def test_tie_break_lowest_index():
    spec = ConditionSpec(np.zeros(1))
    cfg = PlannerConfig(K=4, ranked=True)
    assert plan(StubBackend(), spec, cfg, TableScorer([1, 1, 1, 1])).index == 0
    res = plan(StubBackend(), spec, cfg, TableScorer([0, 5, 5, 2]))
    assert res.index == 1 and np.array_equal(res.selected, res.candidates[1])


def test_selection_invariant_to_increasing_transform():
    spec = ConditionSpec(np.zeros(1))
    cfg = PlannerConfig(K=16, ranked=True, seed=3)
    scores = np.random.default_rng(0).standard_normal(16)
    a = plan(StubBackend(), spec, cfg, TableScorer(scores))
    b = plan(StubBackend(), spec, cfg, TableScorer(np.exp(3 * scores) + 7))
    assert a.index == b.index


def test_plan_reproducible():
    spec = ConditionSpec(np.array([0.2]))
    cfg = PlannerConfig(K=8, ranked=False, seed=5)
    assert np.array_equal(plan(kdp_backend(), spec, cfg).candidates,
                          plan(kdp_backend(), spec, cfg).candidates)


@pytest.mark.parametrize("L,calls", [(1, 20), (8, 3), (3, 7)])
def test_rollout_plan_call_count(L, calls):
    env = Bimodal1D()
    _, summ = rollout(env, kdp_backend(), PlannerConfig(K=2, L=L, ranked=False), max_steps=20)
    assert summ["steps"] == 20 and summ["plan_calls"] == calls == math.ceil(20 / L)
    assert summ["nfe_total"] == calls and summ["bef_total"] == 2 * calls


def test_rollout_shape_mismatch():
    with pytest.raises(ShapeError):
        rollout(make_env("pointmaze2d"), kdp_backend(), PlannerConfig(ranked=False), max_steps=3)


def test_rollout_stops_on_nonfinite():
    class Exploding(StubBackend):
        def candidates(self, spec, K, rng, counter):
            x = super().candidates(spec, K, rng, counter)
            x[:, :, 1] = np.nan
            return x

    _, summ = rollout(Bimodal1D(), Exploding(), PlannerConfig(K=2, ranked=False), max_steps=10)
    assert summ["nonfinite"] and not summ["success"] and summ["steps"] == 1


def test_action_diversity_oracles():
    probes = np.linspace(-1, 1, 5)[:, None]
    assert action_diversity(StubBackend(ignore_z=True), probes, 16) == 0.0
    div = action_diversity(StubBackend(), probes, 256)
    assert abs(div - 1.0) < 0.1
    with pytest.raises(ConfigError):
        action_diversity(StubBackend(), probes, 1)


def test_evaluate_independent_of_workers():
    cfg = PlannerConfig(K=4, L=2, ranked=False, seed=9)
    a = evaluate(Bimodal1D, kdp_backend(), cfg, episodes=4, max_steps=12)
    b = evaluate(Bimodal1D, kdp_backend(), cfg, episodes=4, workers=3, max_steps=12)
    keys = ("episode", "success", "return", "steps", "nfe_total")
    assert [[r[k] for k in keys] for r in a] == [[r[k] for k in keys] for r in b]
    assert summarize(a)["episodes"] == 4
    assert math.isnan(summarize([])["success_rate"])


def test_metrics_and_trajectory_csv(tmp_path):
    rows, eps = evaluate(Bimodal1D, kdp_backend(), PlannerConfig(K=2, ranked=False), episodes=2,
                         max_steps=5, return_episodes=True)
    write_metrics_csv(rows, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRICS_COLUMNS) and len(lines) == 3
    write_metrics_csv([], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines() == [",".join(METRICS_COLUMNS)]
    write_trajectory_csv(eps, tmp_path / "t.csv")
    t = (tmp_path / "t.csv").read_text().splitlines()
    assert t[0] == "episode,step,s0,a0" and len(t) == 1 + 2 * 6
    assert t[6].endswith(",")  # final state has no action


def test_latency_bench_rows(tmp_path):
    den = Denoiser.create(SHAPE, NoiseSchedule.linear(20), (16,), np.random.default_rng(0))
    entries = [BenchEntry(kdp_backend(), (1, 16, 64)), BenchEntry(DiffusionBackend(den), (1, 16, 64))]
    rows = latency_bench(entries, np.zeros((3, 1)), Bimodal1D(), n_timed=5, warmup=1)
    assert len(rows) == 6
    for r in rows:
        if r["method"] == "kdp":
            assert r["nfe"] == 1 and r["bef"] == r["K"]
        else:
            assert r["nfe"] == 20 and r["bef"] == 20 * r["K"] and r["T"] == 20
        assert r["pl_p50_ms"] >= 0 and r["e2e_p50_ms"] >= r["pl_p50_ms"] * 0.5
    write_bench_csv(rows, tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().startswith("method,K,T,nfe,bef,pl_p50_ms,e2e_p50_ms\n")


def test_forward_counter_and_p50():
    c = ForwardCounter()
    for _ in range(3):
        c.record(5)
    assert (c.nfe, c.bef) == (3, 15)
    assert p50([3.0, 1.0, 2.0]) == 2.0 and math.isnan(p50([]))
    m = StepMetrics(1, 4, 0.5)
    assert m.bef >= m.nfe and m.e2e_ms == 0.0
