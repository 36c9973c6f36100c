import math

import numpy as np
import pytest

from ilq.envs import make_env
from ilq.errors import ConfigError, ContractError, ShapeError
from ilq.experiments import boost_rate_check, expert_dataset
from ilq.imitation import (Batch, Dataset, QailConfig, build_qail_dataset, calibration_indices, il_loss,
                           nearest_rank, ptq_rtn, qbc_loss, total_loss, train_bc, train_qail, wqbc_alpha)
from ilq.policy import GaussianPolicy, encode_checkpoint

from conftest import loss_gradcheck


@pytest.mark.parametrize("lam", [0.0, 1.0, 2.0])
def test_total_loss_gradcheck(lam):
    assert loss_gradcheck(lam) < 1e-3


def test_nearest_rank():
    assert nearest_rank([5, 1, 4, 2, 3], 0.8) == 4
    assert nearest_rank(np.arange(10), 0.8) == 7
    assert nearest_rank([3.0], 0.8) == 3.0
    with pytest.raises(ContractError):
        nearest_rank([], 0.5)


def test_wqbc_alpha():
    assert wqbc_alpha(0.5, 0.4, 2.0) == 2.0
    assert wqbc_alpha(0.4, 0.4, 2.0) == 1.0
    with pytest.raises(ConfigError):
        wqbc_alpha(1.0, 0.0, 1.0)


def test_calibration_indices_seeded_and_minimum():
    a = calibration_indices(500, 0.1, 3)
    assert len(a) == 50 and np.array_equal(a, calibration_indices(500, 0.1, 3))
    assert len(np.unique(a)) == 50
    with pytest.raises(ContractError):
        calibration_indices(50, 0.1, 0)


def test_boost_rate_check_counts_top_fifth():
    scores = np.linspace(0.0, 1.0, 50)
    idx = np.arange(100, 150)
    thr = nearest_rank(scores, 0.8)
    rec = {"threshold": thr, "calib_idx": idx, "scores": scores, "boosted": idx[scores > thr]}
    c = boost_rate_check(rec)
    assert c["exact"] and c["boosted"] == 10
    rec["boosted"] = idx[scores >= thr]
    assert not boost_rate_check(rec)["exact"]


def _toy_dataset(n=40, env="cartpole", src="expert"):
    rng = np.random.default_rng(0)
    return Dataset(rng.normal(size=(n, 4)).astype(np.float32), rng.normal(size=(n, 1)).astype(np.float32),
                   np.array([src] * n), env)


def test_build_qail_dataset_union_and_env_check():
    d = build_qail_dataset(_toy_dataset(30), _toy_dataset(20, src="fp_policy"))
    assert len(d) == 50 and set(d.sources) == {"expert", "fp_policy"}
    with pytest.raises(ConfigError):
        build_qail_dataset(_toy_dataset(), _toy_dataset(env="griddrive", src="fp_policy"))


def test_losses_on_identical_student_and_errors():
    p = GaussianPolicy([4, 8, 1], seed=0)
    obs = np.random.default_rng(0).normal(size=(10, 4)).astype(np.float32)
    assert qbc_loss(p, p, obs).item() == 0.0
    with pytest.raises(ContractError):
        il_loss(p, (np.zeros((0, 4)), np.zeros((0, 1))))
    with pytest.raises(ShapeError):
        qbc_loss(p, GaussianPolicy([4, 8, 2]), obs)


def test_lambda_zero_equals_plain_nll():
    p = GaussianPolicy([4, 8, 1], seed=0)
    fp = GaussianPolicy([4, 8, 1], seed=1)
    d = _toy_dataset(16)
    loss, parts = total_loss(p, fp, Batch(d.obs, d.actions), QailConfig(lam=0.0))
    assert loss.item() == pytest.approx(il_loss(p, (d.obs, d.actions)).item())
    assert parts["qbc_loss"] == 0.0


def test_alpha_weighting_scales_qbc():
    p = GaussianPolicy([4, 8, 1], seed=0)
    fp = GaussianPolicy([4, 8, 1], seed=1)
    d = _toy_dataset(16)
    base = qbc_loss(p, fp, d.obs).item()
    assert qbc_loss(p, fp, d.obs, alpha=np.full(16, 2.0)).item() == pytest.approx(2 * base, rel=1e-6)


def test_config_validation():
    with pytest.raises(ConfigError):
        QailConfig.from_dict({"lam": 1.0, "gamma": 0.9})
    with pytest.raises(ConfigError):
        QailConfig(lam=-1)
    with pytest.raises(ConfigError):
        QailConfig(wqbc_enabled=True, beta=1.0)
    assert QailConfig.from_dict(QailConfig(bits=8).to_dict()) == QailConfig(bits=8)


@pytest.fixture(scope="module")
def cartpole_fp():
    env = make_env("cartpole")
    data = expert_dataset(env, 3, 0)
    fp = GaussianPolicy([4, 16, 16, 1], seed=0, log_std_init=-0.5)
    train_bc(fp, data, 200, seed=0)
    return env, data, fp


def test_qail_training_leaves_teacher_untouched(cartpole_fp):
    env, data, fp = cartpole_fp
    before = encode_checkpoint(fp)
    res = train_qail(fp, data, QailConfig(lam=1.0, steps=30, fp_episodes=2, log_every=10), env)
    assert encode_checkpoint(fp) == before
    assert res.policy.quantized and len(res.log) >= 3
    assert all(math.isfinite(r["total_loss"]) for r in res.log)
    assert set(res.d_qail.sources) == {"expert", "fp_policy"}


def test_qail_is_seed_deterministic(cartpole_fp):
    env, data, fp = cartpole_fp
    cfg = QailConfig(lam=1.0, steps=20, fp_episodes=2)
    a = train_qail(fp, data, cfg, env).policy
    b = train_qail(fp, data, cfg, env).policy
    assert encode_checkpoint(a) == encode_checkpoint(b)


def test_ptq_rtn_steps_are_fixed(cartpole_fp):
    env, _, fp = cartpole_fp
    q = ptq_rtn(fp, 4, env, episodes=1)
    assert q.quantized and all(not z.trainable for z in q.quantizers())


def test_wqbc_needs_grid(cartpole_fp):
    env, data, fp = cartpole_fp
    with pytest.raises(ConfigError):
        train_qail(fp, data, QailConfig(wqbc_enabled=True, steps=1, fp_episodes=1), env)


def test_wqbc_boosts_nearest_rank_top_fifth():
    env = make_env("griddrive")
    data = expert_dataset(env, 2, 0)
    fp = GaussianPolicy([env.obs_dim, 16, 2], seed=0)
    train_bc(fp, data, 20, fit_normalizer=False)
    res = train_qail(fp, data, QailConfig(wqbc_enabled=True, steps=5, fp_episodes=1, batch_size=64), env)
    assert res.wqbc
    for rec in res.wqbc:
        assert boost_rate_check(rec)["exact"]
