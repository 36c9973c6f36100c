import numpy as np
import pytest
from scipy.stats import entropy

from ilq.envs import make_env, rollout
from ilq.errors import ShapeError
from ilq.policy import GaussianPolicy
from ilq.saliency import (attdiv, attdiv_many, blur, gaussian_mask, gaussian_perturb, kl_divergence,
                          perturbed_batch, saliency_map, saliency_score)


@pytest.fixture(scope="module")
def grid_obs():
    env = make_env("griddrive")
    t = rollout("expert", env, 2, max_steps=30)
    return env, np.stack([s.obs for s in t.steps[::6]])


def _policy(seed, dim):
    return GaussianPolicy([dim, 16, 2], seed=seed)


def test_mask_peak_and_zero_sigma():
    m = gaussian_mask((16, 16), 3, 7)
    assert m[3, 7] == 1.0 and m.max() == 1.0
    assert not gaussian_mask((5, 5), 2, 2, sigma=0).any()


def test_perturb_zero_mask_is_identity():
    g = np.random.default_rng(0).random((8, 8)).astype(np.float32)
    np.testing.assert_array_equal(gaussian_perturb(g, 4, 4, sigma_mask=0), g)


def test_perturb_centre_takes_blurred_value():
    g = np.zeros((9, 9))
    g[4, 4] = 1.0
    out = gaussian_perturb(g, 4, 4)
    assert out[4, 4] == pytest.approx(blur(g)[4, 4])
    with pytest.raises(IndexError):
        gaussian_perturb(g, 9, 0)


def test_batched_perturbations_match_single(grid_obs):
    env, obs = grid_obs
    grid = obs[0, :256].reshape(16, 16)
    batch = perturbed_batch(grid)
    for i, j in [(0, 0), (5, 11), (15, 15)]:
        np.testing.assert_array_equal(batch[i * 16 + j], gaussian_perturb(grid, i, j))


def test_map_matches_scalar_scores(grid_obs):
    env, obs = grid_obs
    p = _policy(0, env.obs_dim)
    o = obs[1]
    sm = saliency_map(p, o)
    assert sm.values.shape == (16, 16) and np.all(sm.values >= 0)
    for i, j in [(2, 3), (8, 8), (15, 0)]:
        assert sm.values[i, j] == pytest.approx(saliency_score(p, o[:256].reshape(16, 16), o[256:], i, j),
                                                rel=1e-4, abs=1e-12)


def test_uniform_grid_has_zero_saliency():
    env = make_env("griddrive")
    p = _policy(0, env.obs_dim)
    obs = np.concatenate([np.full(256, 0.25, np.float32), np.ones(4, np.float32)])
    assert np.allclose(saliency_map(p, obs).values, 0.0, atol=1e-12)


def test_kl_against_scipy():
    rng = np.random.default_rng(0)
    a, b = rng.random(256), rng.random(256)
    assert kl_divergence(a, b) == pytest.approx(entropy(a + 1e-8, b + 1e-8), rel=1e-10)


def test_attdiv_self_is_zero_and_asymmetric(grid_obs):
    env, obs = grid_obs
    p, q = _policy(0, env.obs_dim), _policy(1, env.obs_dim)
    mean, per = attdiv_many(p, p, obs)
    assert mean == 0.0 and all(v == 0.0 for v in per)
    assert attdiv(q, p, obs[0]) > 0
    assert attdiv(q, p, obs[0]) != attdiv(p, q, obs[0])


def test_non_grid_observation_rejected():
    with pytest.raises(ShapeError):
        saliency_map(GaussianPolicy([4, 4, 1]), np.zeros(4))
