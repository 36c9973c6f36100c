"""``ilq`` command-line entry point.

Every subcommand accepts ``--seed``, ``--out`` and ``--config``. A JSON config
overrides the command's defaults; flags given explicitly override the config.
Each run writes ``config.json`` (resolved settings plus toolkit version) into
its output directory next to its JSON/JSONL results.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import experiments as X
from .envs import env_id, evaluate, load_trajectories, make_env, metrics_from, save_trajectories
from .errors import ConfigError, IlqError
from .imitation import Dataset, QailConfig, collect, ptq_rtn, train_qail
from .kernels import bench, encode_packed_checkpoint
from .policy import load, save
from .qarl import QarlConfig, train_qarl
from .saliency import attdiv_many, saliency_map

log = logging.getLogger("ilq")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits on its own; route through the usage path instead
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ----------------------------------------------------------------- helpers


def _read_config(path, allowed: set[str]) -> dict:
    if not path:
        return {}
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    return d


def _resolve(args, defaults: dict, flag_names: tuple = ()) -> dict:
    """defaults < config file < explicitly given flags."""
    cfg = dict(defaults)
    cfg.update(_read_config(args.config, set(defaults)))
    for name in flag_names:
        v = getattr(args, name, None)
        if v is not None:
            cfg[name] = v
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _provenance(out: Path, command: str, cfg: dict) -> None:
    _write_json(out / "config.json", {"command": command, "version": __version__, "config": cfg})


def _table(rows: list[dict], cols: list[str]) -> str:
    cells = [[str(r.get(c, "")) if not isinstance(r.get(c), float) else f"{r[c]:.3f}" for c in cols] for r in rows]
    widths = [max(len(c), *(len(x[i]) for x in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(x.ljust(w) for x, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _policy_env(policy, name: str | None):
    name = name or policy.meta.get("env")
    if not name:
        raise ConfigError("checkpoint does not record its environment; pass --env")
    return make_env(name)


def _load_dataset(path) -> Dataset:
    return Dataset.from_trajectories(load_trajectories(path))


def _metrics_row(label: str, m) -> dict:
    return {"policy": label, **m.to_dict()}


# ---------------------------------------------------------------- commands


def cmd_collect_expert(args) -> int:
    cfg = _resolve(args, {"env": "cartpole", "episodes": 20, "seed": 0}, ("env", "episodes"))
    out = _outdir(args)
    env = make_env(cfg["env"])
    trajs = collect("expert", env, cfg["episodes"], X.EXPERT_SEED_BASE * cfg["seed"], "expert", policy_id="expert")
    save_trajectories(trajs, out / "expert.jsonl")
    m = metrics_from(trajs)
    _write_json(out / "metrics.json", m.to_dict())
    _provenance(out, "collect-expert", cfg)
    print(_table([_metrics_row("expert", m)], ["policy", "avg_return", "success_rate", "episodes"]))
    return EXIT_OK


def cmd_train_fp(args) -> int:
    base = X.TrainFpConfig().to_dict()
    env_name = args.env or _read_config(args.config, set(base)).get("env", base["env"])
    defaults = X.fp_config(env_name, 0).to_dict()
    cfg = _resolve(args, defaults, ("env", "steps"))
    fcfg = X.TrainFpConfig.from_dict(cfg)
    out = _outdir(args)
    env = make_env(fcfg.env)
    data = _load_dataset(args.dataset) if args.dataset else None
    policy, _ = X.train_fp(fcfg, data, env)
    save(policy, out / "policy.ilq")
    m = X.eval_policy(policy, env, fcfg.seed)
    _write_json(out / "metrics.json", m.to_dict())
    _provenance(out, "train-fp", fcfg.to_dict())
    print(_table([_metrics_row("fp", m)], ["policy", "avg_return", "success_rate", "episodes"]))
    return EXIT_OK


def cmd_collect_fp(args) -> int:
    cfg = _resolve(args, {"checkpoint": None, "env": None, "episodes": 20, "deterministic": True, "seed": 0},
                   ("checkpoint", "env", "episodes"))
    if not cfg["checkpoint"]:
        raise ConfigError("collect-fp needs --checkpoint")
    out = _outdir(args)
    policy = load(cfg["checkpoint"])
    env = _policy_env(policy, cfg["env"])
    trajs = collect(policy, env, cfg["episodes"], 500_000 + 1000 * cfg["seed"], "fp_policy",
                    deterministic=cfg["deterministic"], policy_id="fp")
    save_trajectories(trajs, out / "fp.jsonl")
    m = metrics_from(trajs)
    _write_json(out / "metrics.json", m.to_dict())
    _provenance(out, "collect-fp", cfg)
    print(_table([_metrics_row("fp", m)], ["policy", "avg_return", "success_rate", "episodes"]))
    return EXIT_OK


def cmd_quantize(args) -> int:
    cfg = _resolve(args, {"checkpoint": None, "env": None, "bits": 4, "act_bits": None, "input_bits": 8,
                          "granularity": "per-tensor", "calib_episodes": 5, "packed": False, "seed": 0},
                   ("checkpoint", "env", "bits"))
    if not cfg["checkpoint"]:
        raise ConfigError("quantize needs --checkpoint")
    out = _outdir(args)
    fp = load(cfg["checkpoint"])
    env = _policy_env(fp, cfg["env"])
    q = ptq_rtn(fp, cfg["bits"], env, seed=cfg["seed"], episodes=cfg["calib_episodes"],
                granularity=cfg["granularity"], act_bits=cfg["act_bits"], input_bits=cfg["input_bits"])
    q.meta = dict(q.meta, env=env_id(env))
    if cfg["packed"]:
        (out / "policy.ilq").write_bytes(encode_packed_checkpoint(q))
    else:
        save(q, out / "policy.ilq")
    m = X.eval_policy(q, env, cfg["seed"])
    _write_json(out / "metrics.json", m.to_dict())
    _provenance(out, "quantize", cfg)
    print(_table([_metrics_row(f"rtn-b{cfg['bits']}", m)], ["policy", "avg_return", "success_rate", "episodes"]))
    return EXIT_OK


def cmd_qail(args) -> int:
    qdefaults = QailConfig().to_dict()
    extra = {"checkpoint": None, "dataset": None, "fp_dataset": None, "env": None}
    cfg = _resolve(args, {**qdefaults, **extra}, ("checkpoint", "dataset", "fp_dataset", "env", "lam", "bits"))
    if not cfg["checkpoint"] or not cfg["dataset"]:
        raise ConfigError("qail needs --checkpoint and --dataset")
    out = _outdir(args)
    fp = load(cfg["checkpoint"])
    env = _policy_env(fp, cfg["env"])
    qcfg = QailConfig.from_dict({k: v for k, v in cfg.items() if k in qdefaults})
    d_fp = _load_dataset(cfg["fp_dataset"]) if cfg["fp_dataset"] else None
    res = train_qail(fp, _load_dataset(cfg["dataset"]), qcfg, env, d_fp=d_fp, log_path=out / "train_log.jsonl")
    res.policy.meta = dict(res.policy.meta, env=env_id(env))
    save(res.policy, out / "policy.ilq")
    if res.wqbc:
        with open(out / "wqbc_calibration.jsonl", "w", encoding="utf-8") as fh:
            for r in res.wqbc:
                fh.write(json.dumps(r, default=_jsonable) + "\n")
    m = X.eval_policy(res.policy, env, qcfg.seed)
    _write_json(out / "metrics.json", m.to_dict())
    _provenance(out, "qail", cfg)
    label = "qail+wqbc" if qcfg.wqbc_enabled else ("qail+qbc" if qcfg.lam > 0 else "qail")
    print(_table([_metrics_row(f"{label}-b{qcfg.bits}", m)], ["policy", "avg_return", "success_rate", "episodes"]))
    return EXIT_OK


def cmd_qarl(args) -> int:
    qdefaults = QarlConfig().to_dict()
    cfg = _resolve(args, {**qdefaults, "checkpoint": None, "env": None}, ("checkpoint", "env", "lam", "bits"))
    if not cfg["checkpoint"]:
        raise ConfigError("qarl needs --checkpoint")
    out = _outdir(args)
    fp = load(cfg["checkpoint"])
    env = _policy_env(fp, cfg["env"])
    qcfg = QarlConfig.from_dict({k: v for k, v in cfg.items() if k in qdefaults})
    res = train_qarl(fp, env, qcfg, log_path=out / "train_log.jsonl")
    res.policy.meta = dict(res.policy.meta, env=env_id(env))
    save(res.policy, out / "policy.ilq")
    m = X.eval_policy(res.policy, env, qcfg.seed)
    _write_json(out / "metrics.json", m.to_dict())
    _provenance(out, "qarl", cfg)
    label = "qarl+qbc" if qcfg.lam > 0 else "qarl"
    print(_table([_metrics_row(f"{label}-b{qcfg.bits}", m)], ["policy", "avg_return", "success_rate", "episodes"]))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args, {"checkpoints": [], "labels": None, "env": None, "episodes": X.EVAL_EPISODES, "seed": 0},
                   ("env", "episodes"))
    if args.checkpoints:
        cfg["checkpoints"] = args.checkpoints
    if args.labels:
        cfg["labels"] = args.labels
    if not cfg["checkpoints"]:
        raise ConfigError("eval needs at least one checkpoint")
    labels = cfg["labels"] or [Path(p).parent.name or Path(p).stem for p in cfg["checkpoints"]]
    if len(labels) != len(cfg["checkpoints"]):
        raise ConfigError("one label per checkpoint")
    out = _outdir(args)
    rows = []
    for label, path in zip(labels, cfg["checkpoints"]):
        p = load(path)
        env = _policy_env(p, cfg["env"])
        m = evaluate(p, env, cfg["episodes"], X.EVAL_SEED_BASE + 100 * cfg["seed"])
        rows.append({**_metrics_row(label, m), "env": env_id(env)})
    with open(out / "eval.jsonl", "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    _provenance(out, "eval", cfg)
    print(_table(rows, ["policy", "success_rate", "avg_return", "collisions_per_episode", "episodes"]))
    return EXIT_OK


def _grid_states(env, n: int, seed: int) -> np.ndarray:
    if getattr(env, "grid_shape", None) is None:
        raise ConfigError(f"{env_id(env)!r} has no grid observation")
    return X.attdiv_states(env, n, seed)


def cmd_saliency(args) -> int:
    cfg = _resolve(args, {"checkpoint": None, "env": None, "n_states": 10, "seed": 0},
                   ("checkpoint", "env", "n_states"))
    if not cfg["checkpoint"]:
        raise ConfigError("saliency needs --checkpoint")
    out = _outdir(args)
    p = load(cfg["checkpoint"])
    env = _policy_env(p, cfg["env"])
    states = _grid_states(env, cfg["n_states"], cfg["seed"])
    rows = []
    with open(out / "saliency.jsonl", "w", encoding="utf-8") as fh:
        for i, s in enumerate(states):
            sm = saliency_map(p, s, env.grid_shape, policy_id=str(cfg["checkpoint"]), observation_id=str(i))
            fh.write(json.dumps(sm.to_json()) + "\n")
            rows.append({"state": i, "mean_saliency": sm.mean, "max_saliency": float(sm.values.max())})
    _provenance(out, "saliency", cfg)
    print(_table(rows, ["state", "mean_saliency", "max_saliency"]))
    return EXIT_OK


def cmd_attdiv(args) -> int:
    cfg = _resolve(args, {"q": None, "fp": None, "env": None, "n_states": 50, "seed": 0},
                   ("q", "fp", "env", "n_states"))
    if not cfg["q"] or not cfg["fp"]:
        raise ConfigError("attdiv needs --q and --fp")
    out = _outdir(args)
    pq, pfp = load(cfg["q"]), load(cfg["fp"])
    env = _policy_env(pfp, cfg["env"])
    states = _grid_states(env, cfg["n_states"], cfg["seed"])
    mean, per = attdiv_many(pq, pfp, states, env.grid_shape)
    res = {"attdiv_mean": mean, "per_state": per, "n_states": len(per)}
    _write_json(out / "attdiv.json", res)
    _provenance(out, "attdiv", cfg)
    print(_table([{"q": Path(cfg["q"]).name, "fp": Path(cfg["fp"]).name, "attdiv": mean, "states": len(per)}],
                 ["q", "fp", "attdiv", "states"]))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _resolve(args, {"m": 1024, "n": 1024, "k": 1024, "bits": [8, 4], "reps": 30, "warmup": 5,
                          "threads": None, "seed": 0}, ("m", "n", "k", "reps", "threads"))
    if args.bits:
        cfg["bits"] = args.bits
    out = _outdir(args)
    reports = [bench(cfg["m"], cfg["n"], cfg["k"], b, cfg["reps"], cfg["warmup"], cfg["seed"], cfg["threads"])
               for b in cfg["bits"]]
    with open(out / "bench.jsonl", "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
    _provenance(out, "bench", cfg)
    rows = [{"kernel": f"W{r.bits}A{r.bits}", "median_ms": r.median_ns / 1e6, "fp32_ms": r.fp32_median_ns / 1e6,
             "speedup": r.speedup, "weight_bytes": r.weight_bytes, "fp32_weight_bytes": r.fp32_weight_bytes}
            for r in reports]
    print(_table(rows, ["kernel", "median_ms", "fp32_ms", "speedup", "weight_bytes", "fp32_weight_bytes"]))
    return EXIT_OK


def cmd_reproduce(args) -> int:
    cfg = _resolve(args, {"seeds": [0, 1, 2, 3, 4], "quick": False, "seed": 0}, ())
    if args.quick:
        cfg["quick"] = True
    out = _outdir(args)
    report = X.reproduce(cfg["seeds"], quick=cfg["quick"])
    _write_json(out / "report.json", report)
    _provenance(out, "reproduce", cfg)
    rows = [{"experiment": k, "passed": v["passed"], "seconds": v.get("seconds", "")}
            for k, v in report.items() if isinstance(v, dict)]
    print(_table(rows, ["experiment", "passed", "seconds"]))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ilq", description="Quantization-aware imitation and RL toolkit.")
    p.add_argument("--version", action="version", version=f"ilq {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def command(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--seed", type=int, default=None, help="experiment seed (default 0)")
        sp.add_argument("--out", default=f"runs/{name}", help="output directory")
        sp.add_argument("--config", default=None, help="JSON config; unknown fields are rejected")
        sp.set_defaults(func=fn)
        return sp

    envs = ["cartpole", "griddrive", "griddrive-long"]
    sp = command("collect-expert", cmd_collect_expert, "Roll out the scripted expert and save JSONL episodes.")
    sp.add_argument("--env", choices=envs)
    sp.add_argument("--episodes", type=int)

    sp = command("train-fp", cmd_train_fp, "Behaviour-clone the full-precision teacher policy.")
    sp.add_argument("--env", choices=envs)
    sp.add_argument("--dataset", help="expert JSONL (collected with the seed when omitted)")
    sp.add_argument("--steps", type=int)

    sp = command("collect-fp", cmd_collect_fp, "Roll out the FP policy and save JSONL episodes.")
    sp.add_argument("--checkpoint")
    sp.add_argument("--env", choices=envs)
    sp.add_argument("--episodes", type=int)

    sp = command("quantize", cmd_quantize, "Round-to-nearest post-training quantization.")
    sp.add_argument("--checkpoint")
    sp.add_argument("--env", choices=envs)
    sp.add_argument("--bits", type=int)

    sp = command("qail", cmd_qail, "Quantization-aware imitation fine-tuning (optionally with QBC/wQBC).")
    sp.add_argument("--checkpoint", help="FP teacher checkpoint")
    sp.add_argument("--dataset", help="expert JSONL")
    sp.add_argument("--fp-dataset", dest="fp_dataset", help="teacher JSONL (collected when omitted)")
    sp.add_argument("--env", choices=envs)
    sp.add_argument("--lam", type=float)
    sp.add_argument("--bits", type=int)

    sp = command("qarl", cmd_qarl, "Quantization-aware PPO fine-tuning (optionally with QBC).")
    sp.add_argument("--checkpoint", help="FP checkpoint used as initialization and teacher")
    sp.add_argument("--env", choices=envs)
    sp.add_argument("--lam", type=float)
    sp.add_argument("--bits", type=int)

    sp = command("eval", cmd_eval, "Evaluate checkpoints and print a comparison table.")
    sp.add_argument("checkpoints", nargs="*")
    sp.add_argument("--labels", nargs="+")
    sp.add_argument("--env", choices=envs)
    sp.add_argument("--episodes", type=int)

    sp = command("saliency", cmd_saliency, "Perturbation saliency maps over seeded grid states.")
    sp.add_argument("--checkpoint")
    sp.add_argument("--env", choices=envs)
    sp.add_argument("--n-states", dest="n_states", type=int)

    sp = command("attdiv", cmd_attdiv, "Attention divergence between a quantized and an FP policy.")
    sp.add_argument("--q")
    sp.add_argument("--fp")
    sp.add_argument("--env", choices=envs)
    sp.add_argument("--n-states", dest="n_states", type=int)

    sp = command("bench", cmd_bench, "Packed integer GEMM vs naive FP32 GEMM timings.")
    sp.add_argument("--m", type=int)
    sp.add_argument("--n", type=int)
    sp.add_argument("--k", type=int)
    sp.add_argument("--bits", type=int, nargs="+", choices=[4, 8])
    sp.add_argument("--reps", type=int)
    sp.add_argument("--threads", type=int)

    sp = command("reproduce", cmd_reproduce, "Run every trend experiment and write one report.")
    sp.add_argument("--quick", action="store_true", help="two seeds instead of five")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"ilq {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IlqError, OSError, ValueError) as exc:
        print(f"ilq {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
