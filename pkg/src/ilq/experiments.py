"""Seeded end-to-end experiments behind the reproduction report.

Every experiment derives all randomness from its seed arguments, so two runs
with the same arguments produce identical numbers on the same platform.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .envs import env_id, evaluate, make_env, rollout
from .errors import ConfigError
from .imitation import Dataset, QailConfig, collect, ptq_rtn, train_bc, train_qail
from .policy import GaussianPolicy, encode_checkpoint
from .qarl import QarlConfig, train_qarl
from .saliency import attdiv_many

EXPERT_SEED_BASE = 10_000
EVAL_SEED_BASE = 777_000
ATTDIV_SEED_BASE = 424_200


@dataclass
class TrainFpConfig:
    """Behaviour-cloning setup for the full-precision teacher."""

    env: str = "cartpole"
    hidden: tuple = (32, 32)
    expert_episodes: int = 20
    steps: int = 3000
    lr: float = 1e-3
    batch_size: int = 256
    log_std_init: float = -0.5
    normalize: bool = True
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.expert_episodes < 1 or self.steps < 0:
            raise ConfigError("expert_episodes must be >= 1 and steps >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> TrainFpConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown TrainFpConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# per-environment defaults; grid observations are already in [0, 1] and are
# not standardized (rarely occupied cells would get huge scales)
FP_DEFAULTS = {
    "cartpole": dict(hidden=(32, 32), expert_episodes=20, steps=3000, normalize=True),
    "griddrive": dict(hidden=(64, 64), expert_episodes=200, steps=6000, normalize=False),
    "griddrive-long": dict(hidden=(64, 64), expert_episodes=200, steps=6000, normalize=False),
}
QAIL_DEFAULTS = {
    "cartpole": dict(steps=3000, fp_episodes=10),
    "griddrive": dict(steps=1500, fp_episodes=20),
    "griddrive-long": dict(steps=1500, fp_episodes=20),
}
EVAL_EPISODES = 20


def fp_config(env_name: str, seed: int, **overrides) -> TrainFpConfig:
    if env_name not in FP_DEFAULTS:
        raise ConfigError(f"unknown environment {env_name!r}")
    return TrainFpConfig(env=env_name, seed=seed, **{**FP_DEFAULTS[env_name], **overrides})


def qail_config(env_name: str, seed: int, **overrides) -> QailConfig:
    return QailConfig(seed=seed, **{**QAIL_DEFAULTS[env_name], **overrides})


def expert_dataset(env, episodes: int, seed: int) -> Dataset:
    trajs = collect("expert", env, episodes, EXPERT_SEED_BASE * seed, "expert", policy_id="expert")
    return Dataset.from_trajectories(trajs, source="expert")


def train_fp(cfg: TrainFpConfig, dataset: Dataset | None = None, env=None) -> tuple[GaussianPolicy, Dataset]:
    env = env or make_env(cfg.env)
    if dataset is None:
        dataset = expert_dataset(env, cfg.expert_episodes, cfg.seed)
    if dataset.env != env_id(env):
        raise ConfigError(f"dataset is from {dataset.env!r}, config asks for {env_id(env)!r}")
    policy = GaussianPolicy([env.obs_dim, *cfg.hidden, env.action_dim], seed=cfg.seed, log_std_init=cfg.log_std_init)
    train_bc(policy, dataset, cfg.steps, cfg.lr, cfg.batch_size, cfg.seed, fit_normalizer=cfg.normalize)
    policy.meta = {"env": cfg.env, "train_fp": cfg.to_dict()}
    return policy, dataset


def eval_policy(policy, env, seed: int, episodes: int = EVAL_EPISODES):
    return evaluate(policy, env, episodes, EVAL_SEED_BASE + 100 * seed)


def _median(xs) -> float:
    return float(np.median(np.asarray(xs, dtype=np.float64)))


# ----------------------------------------------------------- cartpole trend


def cartpole_trend(seeds: Sequence[int] = range(5), bits: int = 4, qail_overrides: dict | None = None) -> dict:
    """FP vs RTN-PTQ vs QAIL-only vs QAIL+QBC average returns on cartpole."""
    env = make_env("cartpole")
    rows = []
    for seed in seeds:
        fp, data = train_fp(fp_config("cartpole", seed), env=env)
        rtn = ptq_rtn(fp, bits, env, seed=seed)
        only = train_qail(fp, data, qail_config("cartpole", seed, lam=0.0, bits=bits, **(qail_overrides or {})), env)
        qbc = train_qail(fp, data, qail_config("cartpole", seed, lam=1.0, bits=bits, **(qail_overrides or {})), env)
        rows.append({"seed": seed, "fp": eval_policy(fp, env, seed).avg_return,
                     "rtn": eval_policy(rtn, env, seed).avg_return,
                     "qail": eval_policy(only.policy, env, seed).avg_return,
                     "qail_qbc": eval_policy(qbc.policy, env, seed).avg_return})
    med = {k: _median([r[k] for r in rows]) for k in ("fp", "rtn", "qail", "qail_qbc")}
    checks = {
        "qbc_ge_qail": med["qail_qbc"] >= med["qail"],
        "qail_ge_rtn": med["qail"] >= med["rtn"],
        "qbc_ge_95pct_fp": med["qail_qbc"] >= 0.95 * med["fp"],
        "rtn_le_80pct_fp": med["rtn"] <= 0.80 * med["fp"],
    }
    return {"bits": bits, "per_seed": rows, "median": med, "checks": checks, "passed": all(checks.values())}


# ------------------------------------------------------------------- wQBC


def boost_rate_check(record: dict, beta_quantile: float = 0.80) -> dict:
    """Independent recount of one epoch's boosted calibration states."""
    scores = np.asarray(record["scores"], dtype=np.float64)
    n = scores.size
    thr = float(np.sort(scores)[max(1, math.ceil(beta_quantile * n)) - 1])
    expected = set(np.asarray(record["calib_idx"])[scores > thr].tolist())
    boosted = set(np.asarray(record["boosted"]).tolist())
    distinct = np.unique(scores).size == n
    top_count = n - math.ceil(beta_quantile * n)
    return {"n": n, "threshold": thr, "boosted": len(boosted), "expected": len(expected),
            "exact": boosted == expected and thr == record["threshold"] and (not distinct or len(boosted) == top_count)}


def wqbc_trend(seeds: Sequence[int] = range(5), env_name: str = "griddrive-long") -> dict:
    """QAIL+QBC vs QAIL+wQBC success on the long-horizon grid drive."""
    env = make_env(env_name)
    rows, boost = [], []
    for seed in seeds:
        fp, data = train_fp(fp_config(env_name, seed), env=env)
        qbc = train_qail(fp, data, qail_config(env_name, seed, lam=1.0), env)
        wq = train_qail(fp, data, qail_config(env_name, seed, lam=1.0, wqbc_enabled=True), env)
        checks = [boost_rate_check(r) for r in wq.wqbc]
        boost.append(all(c["exact"] for c in checks) and bool(checks))
        rows.append({"seed": seed, "fp": eval_policy(fp, env, seed).success_rate,
                     "qail_qbc": eval_policy(qbc.policy, env, seed).success_rate,
                     "qail_wqbc": eval_policy(wq.policy, env, seed).success_rate,
                     "boost_epochs": len(checks), "boosted_per_epoch": [c["boosted"] for c in checks][:3],
                     "calib_size": checks[0]["n"] if checks else 0})
    wins = sum(1 for r in rows if r["qail_wqbc"] >= r["qail_qbc"])
    return {"env": env_name, "per_seed": rows, "wqbc_ge_qbc_seeds": wins, "soft_passed": wins >= 3,
            "boost_rate_exact": all(boost), "passed": all(boost)}


# ----------------------------------------------------------------- AttDiv


def attdiv_states(env, n: int = 50, seed: int = 0, stride: int = 3) -> np.ndarray:
    """``n`` observations taken every ``stride`` steps from seeded expert episodes."""
    out: list[np.ndarray] = []
    ep = 0
    while len(out) < n:
        traj = rollout("expert", env, ATTDIV_SEED_BASE + 100 * seed + ep)
        out.extend(s.obs for s in traj.steps[::stride])
        ep += 1
    return np.asarray(out[:n], dtype=np.float32)


def attdiv_comparison(seed: int = 0, n_states: int = 50, bits: int = 4, env_name: str = "griddrive") -> dict:
    env = make_env(env_name)
    fp, data = train_fp(fp_config(env_name, seed), env=env)
    rtn = ptq_rtn(fp, bits, env, seed=seed)
    qbc = train_qail(fp, data, qail_config(env_name, seed, lam=1.0, bits=bits), env).policy
    states = attdiv_states(env, n_states, seed)
    ad_rtn, _ = attdiv_many(rtn, fp, states)
    ad_qbc, _ = attdiv_many(qbc, fp, states)
    ad_self, per_self = attdiv_many(fp, fp, states)
    return {"env": env_name, "seed": seed, "n_states": len(states), "attdiv_rtn": ad_rtn, "attdiv_qail_qbc": ad_qbc,
            "attdiv_self": ad_self, "self_exact_zero": all(v == 0.0 for v in per_self),
            "success": {"fp": eval_policy(fp, env, seed).success_rate, "rtn": eval_policy(rtn, env, seed).success_rate,
                        "qail_qbc": eval_policy(qbc, env, seed).success_rate},
            "passed": ad_qbc < ad_rtn and all(v == 0.0 for v in per_self)}


# ------------------------------------------------------------------- QARL


def qarl_trend(seeds: Sequence[int] = range(5), bits: int = 4, iterations: int = 20) -> dict:
    env = make_env("cartpole")
    rows = []
    for seed in seeds:
        fp, _ = train_fp(fp_config("cartpole", seed), env=env)
        only = train_qarl(fp, env, QarlConfig(lam=0.0, bits=bits, iterations=iterations, seed=seed))
        qbc = train_qarl(fp, env, QarlConfig(lam=1.0, bits=bits, iterations=iterations, seed=seed))
        rows.append({"seed": seed, "fp": eval_policy(fp, env, seed).avg_return,
                     "rtn": eval_policy(ptq_rtn(fp, bits, env, seed=seed), env, seed).avg_return,
                     "qarl": eval_policy(only.policy, env, seed).avg_return,
                     "qarl_qbc": eval_policy(qbc.policy, env, seed).avg_return})
    med = {k: _median([r[k] for r in rows]) for k in ("fp", "rtn", "qarl", "qarl_qbc")}
    return {"bits": bits, "per_seed": rows, "median": med, "passed": med["qarl_qbc"] >= med["qarl"]}


# ------------------------------------------------------------ determinism


def pipeline_metrics(seed: int = 0, env_name: str = "cartpole", qail_steps: int = 200) -> dict:
    """collect -> train_fp -> collect_fp -> qail -> eval with small budgets."""
    env = make_env(env_name)
    fp, data = train_fp(fp_config(env_name, seed, expert_episodes=5, steps=300), env=env)
    d_fp = Dataset.from_trajectories(collect(fp, env, 3, 500_000 + 1000 * seed, "fp_policy", policy_id="fp"),
                                     source="fp_policy")
    res = train_qail(fp, data, qail_config(env_name, seed, steps=qail_steps, lam=1.0), env, d_fp=d_fp)
    return {"fp": eval_policy(fp, env, seed, 5).to_dict(), "qail_qbc": eval_policy(res.policy, env, seed, 5).to_dict(),
            "final_loss": res.log[-1]["total_loss"] if res.log else None,
            "checkpoint_bytes": len(encode_checkpoint(res.policy))}


def metrics_json(metrics: dict) -> bytes:
    return json.dumps(metrics, sort_keys=True, separators=(",", ":")).encode("utf-8")


# ------------------------------------------------------------- reproduce


def reproduce(seeds: Sequence[int] = range(5), quick: bool = False) -> dict:
    """Run every trend experiment and collect one report."""
    seeds = list(seeds)[:2] if quick else list(seeds)
    report: dict = {}
    for name, fn in [("cartpole_trend", lambda: cartpole_trend(seeds)),
                     ("wqbc_trend", lambda: wqbc_trend(seeds)),
                     ("attdiv", lambda: attdiv_comparison(seeds[0])),
                     ("qarl_trend", lambda: qarl_trend(seeds)),
                     ("determinism", lambda: {"passed": metrics_json(pipeline_metrics()) == metrics_json(pipeline_metrics())})]:
        t0 = time.perf_counter()
        report[name] = fn()
        report[name]["seconds"] = round(time.perf_counter() - t0, 1)
    report["passed"] = all(v["passed"] for v in report.values() if isinstance(v, dict))
    return report
