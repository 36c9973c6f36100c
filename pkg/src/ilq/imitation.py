"""Quantization-aware imitation learning.

Behaviour cloning loss, the output-matching regularizer toward a frozen
full-precision teacher (QBC), its saliency-weighted form (wQBC), RTN
post-training quantization and the end-to-end fine-tuning loop.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .envs import Trajectory, env_id, rollout
from .errors import ConfigError, ContractError, NonFiniteError, ShapeError
from .policy import GaussianPolicy, gaussian_log_prob
from .quant import QuantSpec
from .saliency import mean_saliency_batch
from .tensor import Tensor

log = logging.getLogger(__name__)

SOURCES = ("expert", "fp_policy")


@dataclass
class Dataset:
    obs: np.ndarray
    actions: np.ndarray
    sources: np.ndarray
    env: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.obs) != len(self.actions) or len(self.obs) != len(self.sources):
            raise ShapeError("dataset columns have different lengths")

    def __len__(self) -> int:
        return len(self.obs)

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory], source: str | None = None) -> Dataset:
        if not trajs:
            raise ContractError("cannot build a dataset from zero trajectories")
        envs = {t.env for t in trajs}
        if len(envs) != 1:
            raise ConfigError(f"trajectories come from several environments: {sorted(envs)}")
        obs = [s.obs for t in trajs for s in t.steps]
        acts = [s.action for t in trajs for s in t.steps]
        srcs = [source or t.source for t in trajs for _ in t.steps]
        return cls(np.asarray(obs, dtype=np.float32), np.asarray(acts, dtype=np.float32), np.asarray(srcs),
                   envs.pop(), {"episodes": len(trajs)})

    @classmethod
    def empty(cls, env: str, obs_dim: int, action_dim: int) -> Dataset:
        return cls(np.zeros((0, obs_dim), np.float32), np.zeros((0, action_dim), np.float32),
                   np.zeros(0, dtype="<U9"), env)


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    index: np.ndarray | None = None


@dataclass
class QailConfig:
    lam: float = 1.0
    beta: float = 2.0
    bits: int = 4
    act_bits: int | None = None
    input_bits: int | None = 8
    act_signed: bool = True
    method: str = "lsq"
    granularity: str = "per-tensor"
    lr: float = 3e-4
    steps: int = 2000
    batch_size: int = 256
    wqbc_enabled: bool = False
    threshold: float | None = None
    calib_fraction: float = 0.10
    calib_quantile: float = 0.80
    il_weight: float = 1.0
    fp_episodes: int = 40
    qbc_states: str = "dataset"
    ptq_calib_episodes: int = 5
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.wqbc_enabled and not self.beta > 1:
            raise ConfigError("wQBC needs beta > 1")
        if self.qbc_states not in ("dataset", "on_policy"):
            raise ConfigError(f"unknown qbc_states {self.qbc_states!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> QailConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown QailConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def weight_spec(self) -> QuantSpec:
        return QuantSpec(self.bits, True, self.granularity, self.method)

    def act_spec(self) -> QuantSpec:
        return QuantSpec(self.act_bits or self.bits, self.act_signed, "per-tensor", self.method)

    def input_spec(self) -> QuantSpec:
        return QuantSpec(self.input_bits or self.act_bits or self.bits, True, "per-tensor", self.method)


# ------------------------------------------------------------------ losses


def _as_batch(batch) -> Batch:
    if isinstance(batch, Batch):
        return batch
    obs, actions = batch
    return Batch(np.asarray(obs), np.asarray(actions))


def il_loss(policy: GaussianPolicy, batch) -> Tensor:
    """Mean negative log-likelihood of the batch actions."""
    b = _as_batch(batch)
    if len(b.obs) == 0:
        raise ContractError("il_loss on an empty batch")
    mu, log_std = policy.forward(b.obs)
    return T.scale(T.sum(gaussian_log_prob(mu, log_std, b.actions)), -1.0 / len(b.obs))


def _check_pair(policy_q: GaussianPolicy, policy_fp: GaussianPolicy) -> None:
    if policy_q.obs_dim != policy_fp.obs_dim or policy_q.action_dim != policy_fp.action_dim:
        raise ShapeError(f"student dims {policy_q.obs_dim}->{policy_q.action_dim} differ from teacher "
                         f"{policy_fp.obs_dim}->{policy_fp.action_dim}")


def qbc_distances(out_q: Tensor, teacher_out: np.ndarray) -> Tensor:
    """Per-state squared L2 distance between output vectors, shape (B,)."""
    return T.sum(T.square(T.sub(out_q, Tensor(teacher_out))), axis=1)


def qbc_loss(policy_q: GaussianPolicy, policy_fp: GaussianPolicy, batch_states, alpha=None) -> Tensor:
    """Mean (optionally alpha-weighted) output discrepancy to the frozen teacher."""
    _check_pair(policy_q, policy_fp)
    states = np.asarray(batch_states)
    # the teacher runs outside the tape, so no gradient can reach it
    teacher = policy_fp.outputs_np(states)
    d = qbc_distances(policy_q.outputs(states), teacher)
    if alpha is not None:
        d = T.mul(d, Tensor(np.asarray(alpha)))
    return T.mean(d)


def wqbc_alpha(mean_saliency: float, threshold: float, beta: float) -> float:
    if not beta > 1:
        raise ConfigError(f"wQBC boost beta must exceed 1, got {beta}")
    return beta if mean_saliency > threshold else 1.0


def total_loss(policy_q: GaussianPolicy, policy_fp: GaussianPolicy, batch, cfg: QailConfig,
               alpha=None, qbc_states=None) -> tuple[Tensor, dict]:
    """``il_weight * IL + lam * mean(alpha * QBC)`` plus its parts as floats.

    With ``qbc_states`` unset the QBC term uses the batch states, so one
    student forward pass feeds both terms.
    """
    _check_pair(policy_q, policy_fp)
    b = _as_batch(batch)
    if len(b.obs) == 0:
        raise ContractError("total_loss on an empty batch")
    out = policy_q.outputs(b.obs)
    a = policy_q.action_dim
    mu = T.slice_cols(out, 0, a)
    log_std = policy_q.log_std
    il = T.scale(T.sum(gaussian_log_prob(mu, log_std, b.actions)), -1.0 / len(b.obs))
    if cfg.lam == 0 and not cfg.wqbc_enabled:
        qbc = None
    elif qbc_states is None:
        d = qbc_distances(out, policy_fp.outputs_np(b.obs))
        if alpha is not None:
            d = T.mul(d, Tensor(np.asarray(alpha, dtype=d.data.dtype)))
        qbc = T.mean(d)
    else:
        qbc = qbc_loss(policy_q, policy_fp, qbc_states, alpha)
    total = T.scale(il, cfg.il_weight) if cfg.il_weight != 1.0 else il
    if qbc is not None and cfg.lam != 0:
        total = T.add(total, T.scale(qbc, cfg.lam))
    parts = {"il_loss": float(il.item()), "qbc_loss": 0.0 if qbc is None else float(qbc.item()),
             "total_loss": float(total.item())}
    return total, parts


# -------------------------------------------------------------- threshold


def nearest_rank(scores, quantile: float) -> float:
    s = np.sort(np.asarray(scores, dtype=np.float64))
    if s.size == 0:
        raise ContractError("percentile of an empty score list")
    rank = max(1, math.ceil(quantile * s.size))
    return float(s[rank - 1])


def calibration_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    k = int(round(fraction * n))
    if k < 10:
        raise ContractError(f"calibration sample of {k} states is too small (need >= 10)")
    return np.sort(np.random.default_rng([seed, 17]).choice(n, size=k, replace=False))


def calibrate_threshold(policy_q: GaussianPolicy, dataset: Dataset, fraction: float = 0.10,
                        quantile: float = 0.80, seed: int = 0, grid_shape=(16, 16)):
    """Nearest-rank ``quantile`` of mean saliency over a seeded sample.

    Returns ``(threshold, sample_indices, scores)``.
    """
    idx = calibration_indices(len(dataset), fraction, seed)
    scores = mean_saliency_batch(policy_q, dataset.obs[idx], grid_shape)
    return nearest_rank(scores, quantile), idx, scores


# ----------------------------------------------------------------- dataset


def build_qail_dataset(d_expert: Dataset, d_fp: Dataset) -> Dataset:
    """Multiset union: expert block first, then the FP-policy block."""
    if len(d_fp) and d_fp.env != d_expert.env:
        raise ConfigError(f"cannot merge datasets from {d_expert.env!r} and {d_fp.env!r}")
    return Dataset(np.concatenate([d_expert.obs, d_fp.obs.reshape(-1, d_expert.obs.shape[1])]),
                   np.concatenate([d_expert.actions, d_fp.actions.reshape(-1, d_expert.actions.shape[1])]),
                   np.concatenate([d_expert.sources, d_fp.sources]).astype(str), d_expert.env,
                   {"expert": len(d_expert), "fp_policy": len(d_fp)})


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of (epoch, indices) over uniformly shuffled epochs."""
    epoch = 0
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield epoch, perm[start : start + batch_size]
        epoch += 1


# --------------------------------------------------------------- PTQ init


def collect(policy, env, episodes: int, base_seed: int, source: str, deterministic: bool = True,
            policy_id: str = "policy") -> list[Trajectory]:
    return [rollout(policy, env, base_seed + i, deterministic=deterministic, policy_id=policy_id, source=source)
            for i in range(episodes)]


def calibration_states(policy_fp: GaussianPolicy, env, episodes: int, seed: int) -> np.ndarray:
    trajs = collect(policy_fp, env, episodes, 900_000 + 1000 * seed, "fp_policy")
    return np.asarray([s.obs for t in trajs for s in t.steps], dtype=np.float32)


def quantize_policy(policy_fp: GaussianPolicy, weight_spec: QuantSpec, act_spec: QuantSpec | None,
                    calib_obs: np.ndarray, input_spec: QuantSpec | None = None) -> GaussianPolicy:
    """Clone ``policy_fp`` and attach quantizers initialized for ``calib_obs``.

    Weight steps follow :func:`init_step_size`; each activation step is set
    from the min/max of that layer's activations given the already-quantized
    layers before it.
    """
    q = policy_fp.clone()
    q.net.attach_quantizers(weight_spec, act_spec, input_spec)
    if act_spec is not None or input_spec is not None:
        for layer, aq in enumerate(q.net.act_quantizers):
            if aq is None:
                continue
            acts: list[np.ndarray] = []
            aq.enabled = False
            q.forward_np(calib_obs, record_acts=acts)
            aq.enabled = True
            aq.calibrate_minmax(acts[layer])
    q.meta = dict(policy_fp.meta, quant_source="ptq")
    return q


def ptq_rtn(policy_fp: GaussianPolicy, bits: int, env, seed: int = 0, episodes: int = 5,
            granularity: str = "per-tensor", act_bits: int | None = None, act_signed: bool = True,
            input_bits: int | None = 8) -> GaussianPolicy:
    """Round-to-nearest PTQ: fixed steps, no training.

    Layer inputs (observations and tanh outputs) take both signs, so the
    activation quantizer is signed by default.
    """
    wspec = QuantSpec(bits, True, granularity, "rtn")
    aspec = QuantSpec(act_bits or bits, act_signed, "per-tensor", "rtn")
    ispec = QuantSpec(input_bits or act_bits or bits, True, "per-tensor", "rtn")
    return quantize_policy(policy_fp, wspec, aspec, calibration_states(policy_fp, env, episodes, seed), ispec)


# ----------------------------------------------------------------- training


@dataclass
class TrainResult:
    policy: GaussianPolicy
    log: list[dict]
    d_qail: Dataset | None = None
    # per-epoch wQBC calibration: threshold, sample indices, scores, boosted indices
    wqbc: list[dict] = field(default_factory=list)


class TrainingAborted(NonFiniteError):
    def __init__(self, msg: str, last_good: GaussianPolicy, log: list[dict]):
        super().__init__(msg)
        self.last_good = last_good
        self.log = log


def train_bc(policy: GaussianPolicy, dataset: Dataset, steps: int, lr: float = 1e-3, batch_size: int = 256,
             seed: int = 0, log_every: int = 100, fit_normalizer: bool = True) -> list[dict]:
    """Plain behaviour cloning of a full-precision policy (in place).

    With ``fit_normalizer`` the policy's input standardization is first fit
    to the dataset observations.
    """
    if fit_normalizer:
        policy.fit_normalizer(dataset.obs)
    opt = T.Adam(policy.parameters(), lr=lr)
    rng = np.random.default_rng([seed, 3])
    stream = minibatches(len(dataset), batch_size, rng)
    rows = []
    for step in range(steps):
        _, idx = next(stream)
        loss = il_loss(policy, Batch(dataset.obs[idx], dataset.actions[idx]))
        if not np.isfinite(loss.item()):
            raise NonFiniteError(f"non-finite BC loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % log_every == 0 or step == steps - 1:
            rows.append({"step": step, "il_loss": loss.item(), "lr": lr})
    return rows


def _snapshot(policy: GaussianPolicy) -> list[np.ndarray]:
    return [p.data.copy() for p in policy.parameters()]


def _restore(policy: GaussianPolicy, snap: list[np.ndarray]) -> None:
    for p, d in zip(policy.parameters(), snap):
        p.data = d.copy()


def train_qail(policy_fp: GaussianPolicy, d_expert: Dataset, cfg: QailConfig, env,
               d_fp: Dataset | None = None, log_path=None) -> TrainResult:
    """Fine-tune a fake-quantized copy of ``policy_fp`` on expert + teacher data.

    The teacher is never modified. ``d_fp`` may be supplied to skip the
    teacher rollouts (it must then come from ``policy_fp``).
    """
    if d_expert.env != env_id(env):
        raise ConfigError(f"expert data is from {d_expert.env!r}, environment is {env_id(env)!r}")
    policy_q = quantize_policy(policy_fp, cfg.weight_spec(), cfg.act_spec(),
                               calibration_states(policy_fp, env, cfg.ptq_calib_episodes, cfg.seed),
                               cfg.input_spec())
    if d_fp is None:
        trajs = collect(policy_fp, env, cfg.fp_episodes, 500_000 + 1000 * cfg.seed, "fp_policy", policy_id="fp")
        d_fp = Dataset.from_trajectories(trajs, source="fp_policy")
    data = build_qail_dataset(d_expert, d_fp)

    grid_shape = getattr(env, "grid_shape", None)
    if cfg.wqbc_enabled and grid_shape is None:
        raise ConfigError(f"wQBC needs a grid observation; {env_id(env)!r} has none")

    params = policy_q.parameters()
    opt = T.Adam(params, lr=cfg.lr)
    quantizers = policy_q.quantizers()
    rng = np.random.default_rng([cfg.seed, 11])
    stream = minibatches(len(data), cfg.batch_size, rng)
    alpha_all = np.ones(len(data), dtype=np.float32)
    calib_idx = None
    if cfg.wqbc_enabled:
        calib_idx = calibration_indices(len(data), cfg.calib_fraction, cfg.seed)
    on_policy_states = None
    epoch_seen = -1
    rows: list[dict] = []
    wqbc_records: list[dict] = []
    last_good = _snapshot(policy_q)
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step in range(cfg.steps):
            epoch, idx = next(stream)
            if epoch != epoch_seen:
                epoch_seen = epoch
                if cfg.wqbc_enabled:
                    scores = mean_saliency_batch(policy_q, data.obs[calib_idx], grid_shape)
                    thr = cfg.threshold if cfg.threshold is not None else nearest_rank(scores, cfg.calib_quantile)
                    alpha_all[:] = 1.0
                    alpha_all[calib_idx] = np.where(scores > thr, cfg.beta, 1.0)
                    wqbc_records.append({"epoch": epoch, "threshold": thr, "calib_idx": calib_idx, "scores": scores,
                                         "boosted": calib_idx[scores > thr]})
                if cfg.qbc_states == "on_policy":
                    trajs = collect(policy_q, env, 2, 700_000 + 1000 * cfg.seed + 2 * epoch, "fp_policy")
                    on_policy_states = np.asarray([s.obs for t in trajs for s in t.steps], dtype=np.float32)
            alpha = alpha_all[idx] if cfg.wqbc_enabled else None
            qbc_states = None
            if on_policy_states is not None:
                qbc_states = on_policy_states[rng.integers(0, len(on_policy_states), size=len(idx))]
            loss, parts = total_loss(policy_q, policy_fp, Batch(data.obs[idx], data.actions[idx], idx), cfg,
                                     alpha=alpha if qbc_states is None else None, qbc_states=qbc_states)
            if not math.isfinite(parts["total_loss"]):
                _restore(policy_q, last_good)
                raise TrainingAborted(f"non-finite loss at step {step}", policy_q, rows)
            opt.zero_grad()
            loss.backward()
            try:
                opt.step()
            except NonFiniteError as exc:
                _restore(policy_q, last_good)
                raise TrainingAborted(str(exc), policy_q, rows) from exc
            for q in quantizers:
                q.clamp_()
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                row = {"step": step, **parts, "alpha_mean": 1.0 if alpha is None else float(np.mean(alpha)),
                       "lr": cfg.lr}
                rows.append(row)
                if fh:
                    fh.write(json.dumps(row) + "\n")
                last_good = _snapshot(policy_q)
    finally:
        if fh:
            fh.close()
    policy_q.meta = dict(policy_fp.meta, quant_source="qail", qail=cfg.to_dict())
    return TrainResult(policy_q, rows, data, wqbc_records)
