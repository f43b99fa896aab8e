import logging

import numpy as np
import pytest

from kdp.drift import DriftConfig, drift_field
from kdp.envs import Bimodal1D, collect_dataset
from kdp.errors import ConfigError, TrainingError
from kdp.numkit import AdamState, FeedForwardNet
from kdp.trainer import (REPORT_COLUMNS, GeneratorPolicy, TrainConfig, Trainer, drifted_target,
                         load_policy, loss_and_grad, read_meta, sample_generator, save_policy,
                         train, train_step, weighted_loss)
from kdp.trajkit import NormStats, WindowDataset, WindowShape, clamp_batch, constraint_mask

from oracles import central_difference, rel_err

TINY = WindowShape(2, 1, 1)


def _tiny_policy(seed=0, dtype=np.float64):
    return GeneratorPolicy.create(TINY, noise_dim=2, hidden=(6,), rng=np.random.default_rng(seed),
                                  dtype=dtype)


@pytest.fixture(scope="module")
def bimodal_ds():
    return collect_dataset(Bimodal1D(), episodes=200, seed=0)


def test_config_validation(caplog):
    with pytest.raises(ConfigError):
        TrainConfig(lambda_s=0.0, lambda_a=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(lambda_a=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_schedule="step")
    with caplog.at_level(logging.WARNING):
        TrainConfig(batch_size=1)
    assert "no negatives" in caplog.text


def test_generated_key_equals_condition():
    policy = _tiny_policy(dtype=np.float32)
    c = np.random.default_rng(1).standard_normal((9, 1)).astype(np.float32)
    out = sample_generator(policy, c, seed=4)
    assert np.array_equal(out[:, 0, :1], c)
    assert np.array_equal(out, sample_generator(policy, c, seed=4))


def test_zero_net_outputs_clamped_zero_window():
    net = FeedForwardNet.zeros((3, 5, TINY.size))
    policy = GeneratorPolicy(net, TINY, 2)
    c = np.array([[0.7], [-2.0]], dtype=np.float32)
    assert np.array_equal(sample_generator(policy, c, 0), clamp_batch(np.zeros((2, 2, 2)), c))


def test_policy_rejects_mismatched_net():
    with pytest.raises(ConfigError):
        GeneratorPolicy(FeedForwardNet.zeros((4, TINY.size)), TINY, 2)


def test_drifted_target_examples():
    rng = np.random.default_rng(0)
    c = rng.standard_normal((3, 1))
    gen = clamp_batch(rng.standard_normal((3, 2, 2)), c)
    assert np.array_equal(drifted_target(gen, np.zeros_like(gen), c), gen)
    V = np.zeros_like(gen)
    V[..., 1:] = rng.standard_normal((3, 2, 1))
    tgt = drifted_target(gen, V, c)
    assert np.array_equal(tgt[..., :1], gen[..., :1])
    # a corrupted drift on the clamped coordinate is overwritten
    V[:, 0, 0] = 1e6
    assert np.array_equal(drifted_target(gen, V, c)[:, 0, :1], c)


def test_weighted_loss_examples():
    rng = np.random.default_rng(0)
    gen = rng.standard_normal((4, 3, 3))
    assert weighted_loss(gen, gen, 1.0, 10.0, 2) == 0.0
    tgt = gen.copy()
    tgt[1, 2, 2] += 1.0
    assert weighted_loss(gen, tgt, 1.0, 10.0, 2) == pytest.approx(10.0 / 4)
    tgt2 = gen.copy()
    tgt2[..., :2] += rng.standard_normal((4, 3, 2)) * 100
    assert weighted_loss(gen, tgt2, 0.0, 10.0, 2) == 0.0


def test_gradient_matches_finite_differences_with_frozen_target():
    policy = _tiny_policy()
    assert sum(p.size for p in policy.net.params) < 200
    rng = np.random.default_rng(0)
    z = rng.standard_normal((5, 2))
    c = rng.standard_normal((5, 1))
    target = clamp_batch(rng.standard_normal((5, 2, 2)), c)
    _, grads, _ = loss_and_grad(policy, z, c, target, 1.0, 10.0)

    def f():
        return weighted_loss(policy.generate(z, c), target, 1.0, 10.0, 1)

    for g, n in zip(grads, central_difference(f, policy.net.params)):
        assert rel_err(g, n) < 1e-3


def test_stop_gradient_ignores_target_dependence():
    """The implemented gradient is the frozen-target one, not that of loss(gen(psi), target(psi))."""
    policy = _tiny_policy(3)
    rng = np.random.default_rng(5)
    data = rng.standard_normal((6, 2, 2))
    c = data[:, 0, :1]
    z = rng.standard_normal((6, 2))
    cfg = DriftConfig(temperatures=(0.5, 1.0))
    mask = constraint_mask(TINY)

    def target_now():
        gen = policy.generate(z, c)
        return drifted_target(gen, drift_field(gen, data, cfg, mask, 1).V, c)

    frozen = target_now()
    _, grads, _ = loss_and_grad(policy, z, c, frozen, 1.0, 10.0)
    fd_frozen = central_difference(
        lambda: weighted_loss(policy.generate(z, c), frozen, 1.0, 10.0, 1), policy.net.params)
    fd_live = central_difference(
        lambda: weighted_loss(policy.generate(z, c), target_now(), 1.0, 10.0, 1), policy.net.params)
    for g, nf, nl in zip(grads, fd_frozen, fd_live):
        assert rel_err(g, nf) < 1e-3
    # the live-target derivative differs, so the check above is not vacuous
    assert max(rel_err(g, nl) for g, nl in zip(grads, fd_live)) > 1e-2


def test_train_step_deterministic_parameter_trajectory(bimodal_ds):
    cfg = TrainConfig(batch_size=16, noise_dim=4, hidden=(8,), steps=5, eval_every=0)

    def run():
        policy = GeneratorPolicy.create(bimodal_ds.shape, 4, (8,), np.random.default_rng(0))
        tr = Trainer(policy, bimodal_ds.normalized(), cfg)
        snaps = []
        for _ in range(5):
            tr.step()
            snaps.append(np.concatenate([p.ravel() for p in policy.net.params]))
        return snaps

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


def test_clamp_exact_through_training(bimodal_ds):
    cfg = TrainConfig(batch_size=8, noise_dim=4, hidden=(8,), steps=1)
    policy = GeneratorPolicy.create(bimodal_ds.shape, 4, (8,), np.random.default_rng(0))
    opt = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(0)
    batch = bimodal_ds.normalized()[:8]
    for _ in range(20):
        train_step(policy, batch, cfg, opt, rng)
        gen = sample_generator(policy, batch[:, 0, :1], 1)
        assert np.array_equal(gen[:, 0, :1], batch[:, 0, :1])


def test_nonfinite_aborts_with_diagnostics(bimodal_ds):
    cfg = TrainConfig(batch_size=4, noise_dim=4, hidden=(8,), steps=1)
    policy = GeneratorPolicy.create(bimodal_ds.shape, 4, (8,), np.random.default_rng(0))
    batch = bimodal_ds.normalized()[:4].copy()
    batch[0, 3, 1] = np.nan
    with pytest.raises(TrainingError) as info:
        train_step(policy, batch, cfg, AdamState(), np.random.default_rng(0))
    assert "batch" in info.value.diagnostics and "drift_rms" in info.value.diagnostics


def test_zero_steps_returns_initialized_policy(bimodal_ds, tmp_path):
    cfg = TrainConfig(steps=0, noise_dim=4, hidden=(8,))
    policy, report = train(bimodal_ds, cfg, out_dir=tmp_path)
    assert len(report) == 0
    ref = GeneratorPolicy.create(bimodal_ds.shape, 4, (8,), np.random.default_rng(0))
    for p, q in zip(policy.net.params, ref.net.params):
        assert np.array_equal(p, q)
    assert (tmp_path / "policy.kdpn").exists()


def test_empty_dataset_rejected():
    ds = WindowDataset(TINY, np.zeros((0, 2, 2), np.float32), norm=NormStats.identity(2))
    with pytest.raises(ConfigError):
        train(ds, TrainConfig(steps=1))


def test_report_and_checkpoint_round_trip(bimodal_ds, tmp_path):
    cfg = TrainConfig(batch_size=16, noise_dim=4, hidden=(8,), steps=6, eval_every=3, probe_k=8)
    policy, report = train(bimodal_ds, cfg, out_dir=tmp_path)
    assert len(report) == 6 and report.config_hash == cfg.config_hash()
    div = report.column("action_div")
    assert np.isnan(div[0]) and np.isfinite(div[2]) and np.isfinite(div[5])
    report.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS) and len(lines) == 7
    save_policy(policy, tmp_path / "p", cfg, {"ablation": None})
    back = load_policy(tmp_path / "p")
    z = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
    c = np.zeros((3, 1), np.float32)
    assert np.array_equal(back.generate(z, c), policy.generate(z, c))
    assert read_meta(tmp_path / "p")["config_hash"] == cfg.config_hash()


def test_cosine_schedule_endpoints(bimodal_ds):
    cfg = TrainConfig(steps=100, lr_schedule="cosine", noise_dim=4, hidden=(8,))
    tr = Trainer(GeneratorPolicy.create(bimodal_ds.shape, 4, (8,)), bimodal_ds.normalized(), cfg)
    assert tr.lr_at(0) == pytest.approx(cfg.lr) and tr.lr_at(100) == pytest.approx(0.0)
    const = Trainer(tr.policy, tr.data, TrainConfig(steps=100, noise_dim=4, hidden=(8,)))
    assert const.lr_at(50) == cfg.lr


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="normalized drift keeps the target a unit RMS step away, "
                   "so the loss measures drift direction rather than fit; see decisions ledger")
def test_bimodal_loss_decreases():
    ds = collect_dataset(Bimodal1D(), episodes=1000, seed=0)
    _, report = train(ds, TrainConfig(steps=5000, eval_every=0))
    loss = report.column("loss")
    assert loss[-100:].mean() < loss[:100].mean()
