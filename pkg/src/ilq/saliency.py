"""Perturbation saliency over grid observations and attention divergence.

Observations are flat vectors whose first ``H*W`` entries are the occupancy
grid (row-major); the remaining scalar features are never perturbed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ShapeError

SIGMA_MASK = 1.5
SIGMA_BLUR = 2.0
KL_FLOOR = 1e-8


@dataclass
class SaliencyMap:
    values: np.ndarray
    policy_id: str = ""
    observation_id: str = ""

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    def to_json(self) -> dict:
        return {"policy_id": self.policy_id, "observation_id": self.observation_id,
                "map": self.values.tolist(), "mean_saliency": self.mean}


def gaussian_mask(shape: tuple[int, int], i: int, j: int, sigma: float = SIGMA_MASK) -> np.ndarray:
    """Unnormalized Gaussian bump with value 1 at (i, j); sigma 0 disables it."""
    if sigma == 0:
        return np.zeros(shape)
    rows, cols = np.indices(shape)
    d2 = (rows - i) ** 2 + (cols - j) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def blur(grid: np.ndarray, sigma: float = SIGMA_BLUR) -> np.ndarray:
    return gaussian_filter(np.asarray(grid, dtype=np.float64), sigma, mode="reflect")


def gaussian_perturb(grid, i: int, j: int, sigma_mask: float = SIGMA_MASK, sigma_blur: float = SIGMA_BLUR):
    grid = np.asarray(grid)
    h, w = grid.shape
    if not (0 <= i < h and 0 <= j < w):
        raise IndexError(f"location ({i}, {j}) outside a {h}x{w} grid")
    m = gaussian_mask(grid.shape, i, j, sigma_mask)
    out = grid * (1.0 - m) + blur(grid, sigma_blur) * m
    return out.astype(grid.dtype)


_mask_cache: dict[tuple, np.ndarray] = {}


def _all_masks(shape: tuple[int, int], sigma: float) -> np.ndarray:
    key = (shape, sigma)
    if key not in _mask_cache:
        h, w = shape
        _mask_cache[key] = np.stack([gaussian_mask(shape, i, j, sigma) for i in range(h) for j in range(w)])
    return _mask_cache[key]


def perturbed_batch(grid: np.ndarray, sigma_mask: float = SIGMA_MASK, sigma_blur: float = SIGMA_BLUR) -> np.ndarray:
    """All H*W perturbations of ``grid``, ordered by flat location index."""
    masks = _all_masks(grid.shape, sigma_mask)
    g = np.asarray(grid, dtype=np.float64)
    return (g * (1.0 - masks) + blur(g, sigma_blur) * masks).astype(grid.dtype)


def _split(obs: np.ndarray, grid_shape: tuple[int, int]):
    n = grid_shape[0] * grid_shape[1]
    obs = np.asarray(obs)
    if obs.ndim != 1 or obs.shape[0] < n:
        raise ShapeError(f"observation of shape {obs.shape} has no {grid_shape} grid prefix")
    return obs[:n].reshape(grid_shape), obs[n:]


def saliency_score(policy, obs_grid, obs_scalars, i: int, j: int,
                   sigma_mask: float = SIGMA_MASK, sigma_blur: float = SIGMA_BLUR) -> float:
    grid = np.asarray(obs_grid, dtype=np.float32)
    scalars = np.asarray(obs_scalars, dtype=np.float32)
    base = np.concatenate([grid.reshape(-1), scalars])
    pert = np.concatenate([gaussian_perturb(grid, i, j, sigma_mask, sigma_blur).reshape(-1), scalars])
    out = policy.outputs_np(np.stack([base, pert]))
    diff = (out[0] - out[1]).astype(np.float64)
    return 0.5 * float(diff @ diff)


def saliency_map(policy, obs, grid_shape=(16, 16), sigma_mask: float = SIGMA_MASK,
                 sigma_blur: float = SIGMA_BLUR, policy_id: str = "", observation_id: str = "") -> SaliencyMap:
    grid, scalars = _split(obs, grid_shape)
    pert = perturbed_batch(grid.astype(np.float32), sigma_mask, sigma_blur)
    n = pert.shape[0]
    batch = np.concatenate([pert.reshape(n, -1), np.broadcast_to(scalars, (n, scalars.shape[0]))], axis=1)
    batch = np.concatenate([np.asarray(obs, dtype=np.float32)[None, :], batch.astype(np.float32)])
    out = policy.outputs_np(batch).astype(np.float64)
    diff = out[1:] - out[0]
    values = 0.5 * np.einsum("ij,ij->i", diff, diff)
    return SaliencyMap(values.reshape(grid_shape), policy_id, observation_id)


def mean_saliency(policy, obs, grid_shape=(16, 16)) -> float:
    return saliency_map(policy, obs, grid_shape).mean


def mean_saliency_batch(policy, obs_batch, grid_shape=(16, 16)) -> np.ndarray:
    return np.array([mean_saliency(policy, o, grid_shape) for o in np.asarray(obs_batch)])


def normalize_map(values: np.ndarray, floor: float = KL_FLOOR) -> np.ndarray:
    p = np.asarray(values, dtype=np.float64) + floor
    return p / p.sum()


def kl_divergence(p_values: np.ndarray, q_values: np.ndarray, floor: float = KL_FLOOR) -> float:
    p = normalize_map(p_values, floor)
    q = normalize_map(q_values, floor)
    return max(float(np.sum(p * np.log(p / q))), 0.0)


def attdiv(policy_q, policy_fp, obs, grid_shape=(16, 16)) -> float:
    """KL(normalized saliency of ``policy_q`` || normalized saliency of ``policy_fp``)."""
    sq = saliency_map(policy_q, obs, grid_shape).values
    sf = saliency_map(policy_fp, obs, grid_shape).values
    return kl_divergence(sq, sf)


def attdiv_many(policy_q, policy_fp, obs_batch, grid_shape=(16, 16)) -> tuple[float, list[float]]:
    """Per-observation divergences and their mean."""
    per = [attdiv(policy_q, policy_fp, o, grid_shape) for o in np.asarray(obs_batch)]
    return float(np.mean(per)), per
