"""Quantization-aware reinforcement learning: PPO on a fake-quantized actor.

The actor starts as an RTN/LSQ-initialized copy of a full-precision policy
and is updated with the clipped PPO objective, optionally regularized toward
the frozen full-precision teacher with the same output-matching term used in
imitation (QBC).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .envs import rollout
from .errors import ConfigError, ContractError, NonFiniteError, ShapeError
from .imitation import TrainingAborted, _restore, _snapshot, calibration_states, qbc_distances, quantize_policy
from .policy import LOG_2PI, Critic, GaussianPolicy, gaussian_log_prob, gaussian_log_prob_np
from .quant import QuantSpec
from .tensor import Tensor


@dataclass
class QarlConfig:
    lam: float = 1.0
    bits: int = 4
    act_bits: int | None = None
    input_bits: int | None = 8
    act_signed: bool = True
    method: str = "lsq"
    granularity: str = "per-tensor"
    lr: float = 1e-4
    critic_lr: float = 1e-3
    iterations: int = 20
    episodes_per_iter: int = 4
    epochs: int = 4
    minibatch_size: int = 256
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    critic_hidden: tuple = (256, 256)
    ptq_calib_episodes: int = 5
    seed: int = 0

    def __post_init__(self):
        self.critic_hidden = tuple(int(h) for h in self.critic_hidden)
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if not 0 < self.clip_eps < 1:
            raise ConfigError("clip_eps must lie in (0, 1)")
        if self.iterations < 0 or self.episodes_per_iter < 1 or self.epochs < 1 or self.minibatch_size < 1:
            raise ConfigError("iterations must be >= 0; episodes, epochs and minibatch size >= 1")
        if not (0 <= self.gamma <= 1 and 0 <= self.gae_lambda <= 1):
            raise ConfigError("gamma and gae_lambda must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> QarlConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown QarlConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["critic_hidden"] = list(self.critic_hidden)
        return d

    def weight_spec(self) -> QuantSpec:
        return QuantSpec(self.bits, True, self.granularity, self.method)

    def act_spec(self) -> QuantSpec:
        return QuantSpec(self.act_bits or self.bits, self.act_signed, "per-tensor", self.method)

    def input_spec(self) -> QuantSpec:
        return QuantSpec(self.input_bits or self.act_bits or self.bits, True, "per-tensor", self.method)


@dataclass
class ExperienceBuffer:
    """One iteration of on-policy experience, in episode order.

    ``logp_old`` is written when the sample is collected and never
    recomputed. ``last_value`` bootstraps a trailing unfinished episode.
    """

    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    logp_old: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    last_value: float = 0.0

    def add(self, obs, action, logp, reward: float, value: float, done: bool) -> None:
        self.obs.append(np.asarray(obs, dtype=np.float32))
        self.actions.append(np.asarray(action, dtype=np.float32))
        self.logp_old.append(float(logp))
        self.rewards.append(float(reward))
        self.values.append(float(value))
        self.dones.append(bool(done))

    def __len__(self) -> int:
        return len(self.rewards)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "obs": np.asarray(self.obs, dtype=np.float32),
            "actions": np.asarray(self.actions, dtype=np.float32),
            "logp_old": np.asarray(self.logp_old, dtype=np.float64),
            "rewards": np.asarray(self.rewards, dtype=np.float64),
            "values": np.asarray(self.values, dtype=np.float64),
            "dones": np.asarray(self.dones, dtype=bool),
        }


def gae_advantages(buffer: ExperienceBuffer, gamma: float = 0.99, lam: float = 0.95,
                   normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets.

    ``returns`` is computed from the raw advantages; only the returned
    advantages are standardized.
    """
    n = len(buffer)
    if n == 0:
        raise ContractError("GAE on an empty buffer")
    r = np.asarray(buffer.rewards, dtype=np.float64)
    v = np.asarray(buffer.values, dtype=np.float64)
    done = np.asarray(buffer.dones, dtype=np.float64)
    v_next = np.append(v[1:], buffer.last_value)
    delta = r + gamma * v_next * (1.0 - done) - v
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        running = delta[t] + gamma * lam * (1.0 - done[t]) * running
        adv[t] = running
    returns = adv + v
    if normalize:
        std = adv.std()
        adv = (adv - adv.mean()) / (std if std > 1e-8 else 1.0)
    return adv, returns


def ppo_clip_loss(logp_new: Tensor, logp_old, advantages, eps: float = 0.2) -> Tensor:
    """Negated clipped surrogate ``-mean(min(r*A, clip(r, 1-eps, 1+eps)*A))``."""
    logp_old = np.asarray(logp_old, dtype=logp_new.data.dtype)
    adv = np.asarray(advantages, dtype=logp_new.data.dtype)
    if logp_new.shape != logp_old.shape or logp_old.shape != adv.shape:
        raise ShapeError(f"misaligned PPO inputs {logp_new.shape}, {logp_old.shape}, {adv.shape}")
    with np.errstate(over="ignore"):
        ratio = T.exp(T.sub(logp_new, Tensor(logp_old)))
    if not np.all(np.isfinite(ratio.data)):
        raise NonFiniteError("non-finite PPO probability ratio")
    a = Tensor(adv)
    unclipped = T.mul(ratio, a)
    clipped = T.mul(T.clip(ratio, 1.0 - eps, 1.0 + eps), a)
    return T.scale(T.mean(T.minimum(unclipped, clipped)), -1.0)


def ppo_objective_terms(ratio, advantages, eps: float = 0.2) -> np.ndarray:
    """Per-sample ``min(r*A, clip(r)*A)`` without the tape."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def qarl_total_loss(ppo_loss: Tensor, qbc_loss: Tensor | None, lam: float) -> Tensor:
    if lam < 0:
        raise ConfigError("lam must be >= 0")
    if qbc_loss is None or lam == 0:
        return ppo_loss
    return T.add(ppo_loss, T.scale(qbc_loss, lam))


def gaussian_entropy(log_std: Tensor) -> Tensor:
    """Entropy of a diagonal Gaussian with the given log standard deviations."""
    k = log_std.size
    return T.add(T.sum(log_std), Tensor(np.asarray(0.5 * k * (1.0 + LOG_2PI), dtype=log_std.data.dtype)))


@dataclass
class QarlResult:
    policy: GaussianPolicy
    critic: Critic
    log: list[dict]


def _critic_for(policy_fp: GaussianPolicy, cfg: QarlConfig) -> Critic:
    critic = Critic([policy_fp.obs_dim, *cfg.critic_hidden, 1], seed=cfg.seed + 1)
    critic.obs_shift, critic.obs_scale = policy_fp.obs_shift.copy(), policy_fp.obs_scale.copy()
    return critic


def collect_buffer(policy: GaussianPolicy, critic: Critic, env, seeds: Sequence[int]) -> tuple[ExperienceBuffer, list]:
    """Stochastic episodes under ``policy``; log-probs and values are stored as collected."""
    buf = ExperienceBuffer()
    trajs = [rollout(policy, env, s, deterministic=False, policy_id="qarl") for s in seeds]
    for traj in trajs:
        if not traj.steps:
            continue
        obs = np.asarray([s.obs for s in traj.steps], dtype=np.float32)
        acts = np.asarray([s.action for s in traj.steps], dtype=np.float32)
        mu, _ = policy.forward_np(obs)
        logp = gaussian_log_prob_np(mu.astype(np.float64), policy.log_std.data.astype(np.float64), acts)
        vals = critic.value_np(obs)
        for t, step in enumerate(traj.steps):
            buf.add(step.obs, step.action, logp[t], step.reward, vals[t], step.done or t == len(traj.steps) - 1)
    return buf, trajs


def train_qarl(policy_fp: GaussianPolicy, env, cfg: QarlConfig, log_path=None) -> QarlResult:
    """PPO fine-tuning of a quantized copy of ``policy_fp``; the teacher is never modified."""
    policy_q = quantize_policy(policy_fp, cfg.weight_spec(), cfg.act_spec(),
                               calibration_states(policy_fp, env, cfg.ptq_calib_episodes, cfg.seed),
                               cfg.input_spec())
    critic = _critic_for(policy_fp, cfg)
    actor_opt = T.Adam(policy_q.parameters(), lr=cfg.lr)
    critic_opt = T.Adam(critic.parameters(), lr=cfg.critic_lr)
    quantizers = policy_q.quantizers()
    rng = np.random.default_rng([cfg.seed, 13])
    rows: list[dict] = []
    last_good = _snapshot(policy_q)
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for it in range(cfg.iterations):
            base = 300_000 + 1000 * cfg.seed + cfg.episodes_per_iter * it
            buf, trajs = collect_buffer(policy_q, critic, env, range(base, base + cfg.episodes_per_iter))
            adv, returns = gae_advantages(buf, cfg.gamma, cfg.gae_lambda)
            data = buf.arrays()
            teacher = policy_fp.outputs_np(data["obs"])
            n = len(buf)
            sums = {"ppo_loss": 0.0, "qbc_loss": 0.0, "value_loss": 0.0, "entropy": 0.0}
            n_updates = 0
            for _ in range(cfg.epochs):
                perm = rng.permutation(n)
                for start in range(0, n, cfg.minibatch_size):
                    idx = perm[start : start + cfg.minibatch_size]
                    out = policy_q.outputs(data["obs"][idx])
                    a_dim = policy_q.action_dim
                    mu = T.slice_cols(out, 0, a_dim)
                    logp = gaussian_log_prob(mu, policy_q.log_std, data["actions"][idx])
                    ppo = ppo_clip_loss(logp, data["logp_old"][idx], adv[idx], cfg.clip_eps)
                    qbc = T.mean(qbc_distances(out, teacher[idx])) if cfg.lam > 0 else None
                    ent = gaussian_entropy(policy_q.log_std)
                    actor_loss = T.sub(qarl_total_loss(ppo, qbc, cfg.lam), T.scale(ent, cfg.entropy_coef))
                    v = critic.value(data["obs"][idx])
                    target = Tensor(returns[idx].reshape(-1, 1).astype(v.data.dtype))
                    value_loss = T.scale(T.mean(T.square(T.sub(v, target))), cfg.value_coef)
                    if not (math.isfinite(actor_loss.item()) and math.isfinite(value_loss.item())):
                        _restore(policy_q, last_good)
                        raise TrainingAborted(f"non-finite QARL loss at iteration {it}", policy_q, rows)
                    actor_opt.zero_grad()
                    critic_opt.zero_grad()
                    # actor and critic share no parameters, so one backward serves both
                    T.backward(T.add(actor_loss, value_loss))
                    try:
                        actor_opt.step()
                        critic_opt.step()
                    except NonFiniteError as exc:
                        _restore(policy_q, last_good)
                        raise TrainingAborted(str(exc), policy_q, rows) from exc
                    for q in quantizers:
                        q.clamp_()
                    sums["ppo_loss"] += ppo.item()
                    sums["qbc_loss"] += 0.0 if qbc is None else qbc.item()
                    sums["value_loss"] += value_loss.item()
                    sums["entropy"] += ent.item()
                    n_updates += 1
            row = {"iter": it, "mean_return": float(np.mean([t.ret for t in trajs])),
                   **{k: s / n_updates for k, s in sums.items()}}
            rows.append(row)
            if fh:
                fh.write(json.dumps(row) + "\n")
            last_good = _snapshot(policy_q)
    finally:
        if fh:
            fh.close()
    policy_q.meta = dict(policy_fp.meta, quant_source="qarl", qarl=cfg.to_dict())
    return QarlResult(policy_q, critic, rows)
