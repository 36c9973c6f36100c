"""Acceptance criteria, one test and one PASS/FAIL line each.

Run ``pytest tests/test_acceptance.py -v`` (lines appear in the terminal
summary) or ``python tests/test_acceptance.py``.
"""

import math
import time

import numpy as np
import pytest

from ilq import experiments as X
from ilq import tensor as T
from ilq.envs import load_trajectories, make_env, rollout, save_trajectories
from ilq.kernels import bench, code_range, gemm_int, gemm_int_reference, pack
from ilq.policy import GaussianPolicy, decode_checkpoint, encode_checkpoint
from ilq.qarl import ppo_clip_loss, ppo_objective_terms
from ilq.quant import FakeQuantizer, QuantSpec, fake_quant_forward, freeze_rounding, lsq_grad_scale, rtn_quantize
from ilq.tensor import Tensor

from conftest import central_diff, loss_gradcheck, rel_err, report
from test_quant import brute_force_code


def test_criterion_01_rtn_oracle():
    t0 = time.perf_counter()
    w = np.linspace(-3.0, 3.0, 6001)
    mismatches = 0
    for bits in (2, 4, 8):
        for signed in (True, False):
            s = 3.0 / (2 ** (bits - 1))
            codes, deq = rtn_quantize(w, s, QuantSpec(bits, signed))
            ref = np.array([brute_force_code(x, s, bits, signed) for x in w])
            mismatches += int(np.sum(codes != ref)) + int(np.sum(deq != ref * s))
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and dt < 5
    report(1, ok, f"rtn_quantize vs scalar reference: {mismatches} mismatches over 6001 x 3 bits x 2, {dt:.2f}s")
    assert ok


def test_criterion_02_ste_lsq_gradcheck():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_w = worst_s = 0.0
    n_points = 0
    with T.precision(np.float64):
        while n_points < 1000:
            bits = int(rng.choice([2, 4, 8]))
            spec = QuantSpec(bits, bool(rng.integers(2)))
            s0 = float(rng.uniform(0.05, 0.5))
            v = rng.uniform(spec.qn - 2, spec.qp + 2, size=20)
            # non-boundary: away from rounding ties and clip edges by more than the FD step
            keep = (np.abs(v - np.floor(v) - 0.5) > 1e-3) & (np.abs(v - spec.qn) > 1e-3) & (np.abs(v - spec.qp) > 1e-3)
            v = v[keep]
            x = Tensor(v * s0, requires_grad=True)
            q = FakeQuantizer(spec, s0)
            up = rng.standard_normal(v.size)
            with freeze_rounding([q]):
                T.sum(T.mul(fake_quant_forward(x, q), Tensor(up))).backward()
                f = lambda: float(np.dot(fake_quant_forward(Tensor(x.data), q).data, up))
                fd_x = central_diff(f, x.data, 1e-5)
                fd_s = central_diff(f, q.step.data, 1e-5)
            worst_w = max(worst_w, rel_err(x.grad, fd_x))
            worst_s = max(worst_s, rel_err(q.step.grad / lsq_grad_scale(v.size, spec), fd_s))
            n_points += v.size
    dt = time.perf_counter() - t0
    ok = worst_w < 1e-4 and worst_s < 1e-4 and dt < 10
    report(2, ok, f"STE/LSQ vs central differences at {n_points} points: max rel err w {worst_w:.1e}, "
                  f"s {worst_s:.1e}, {dt:.2f}s")
    assert ok


def test_criterion_03_loss_gradcheck():
    t0 = time.perf_counter()
    errs = {lam: loss_gradcheck(lam, seed=int(lam)) for lam in (0.0, 1.0, 2.0)}
    dt = time.perf_counter() - t0
    ok = max(errs.values()) < 1e-3 and dt < 30
    report(3, ok, "total_loss gradcheck max rel err " +
           ", ".join(f"lam={k:g}: {v:.1e}" for k, v in errs.items()) + f", {dt:.2f}s")
    assert ok


def test_criterion_04_kernel_bit_exact():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    bad = 0
    for case in range(1000):
        bits = 4 if case % 2 else 8
        m, k, n = (int(v) for v in rng.integers(1, 257, size=3))
        lo, hi = code_range(bits, True)
        a = pack(rng.integers(lo, hi + 1, size=(m, k)), bits)
        b = pack(rng.integers(lo, hi + 1, size=(k, n)), bits)
        c, _ = gemm_int(a, b)
        bad += not np.array_equal(c, gemm_int_reference(a, b))
    dt = time.perf_counter() - t0
    ok = bad == 0 and dt < 60
    report(4, ok, f"gemm_int vs unpack-and-multiply reference: {bad}/1000 mismatches (4- and 8-bit), {dt:.1f}s")
    assert ok


def test_criterion_05_kernel_speedup():
    t0 = time.perf_counter()
    r8 = bench(1024, 1024, 1024, bits=8, reps=30, warmup=2)
    r4 = bench(64, 1024, 1024, bits=4, reps=30, warmup=1)
    dt = time.perf_counter() - t0
    ok = r8.speedup >= 1.5 and r4.weight_bytes * 8 == r4.fp32_weight_bytes and dt < 120
    report(5, ok, f"W8A8 1024^3 median {r8.median_ns / 1e6:.0f} ms vs FP32 {r8.fp32_median_ns / 1e6:.0f} ms "
                  f"= {r8.speedup:.2f}x (threads={r8.threads}); 4-bit weights {r4.weight_bytes} B vs FP32 "
                  f"{r4.fp32_weight_bytes} B, {dt:.0f}s")
    assert ok


def test_criterion_06_cartpole_trend():
    t0 = time.perf_counter()
    res = X.cartpole_trend(range(5), bits=4)
    dt = time.perf_counter() - t0
    med = res["median"]
    ok = res["passed"] and dt < 600
    report(6, ok, f"cartpole b=4 medians FP {med['fp']:.1f}, QAIL+QBC {med['qail_qbc']:.1f}, "
                  f"QAIL {med['qail']:.1f}, RTN {med['rtn']:.1f} "
                  f"({', '.join(k for k, v in res['checks'].items() if not v) or 'all orderings hold'}), {dt:.0f}s")
    assert ok


def test_criterion_07_wqbc():
    t0 = time.perf_counter()
    res = X.wqbc_trend(range(5))
    dt = time.perf_counter() - t0
    rows = res["per_seed"]
    rates = "; ".join(f"s{r['seed']} {r['qail_wqbc']:.2f}/{r['qail_qbc']:.2f}" for r in rows)
    boosted = rows[0]["boosted_per_epoch"][0]
    soft = "met" if res["soft_passed"] else "not met, logged"
    ok = res["boost_rate_exact"] and dt < 900
    report(7, ok, f"wQBC boost set exact nearest-rank top 20% every epoch: {res['boost_rate_exact']} "
                  f"({boosted}/{rows[0]['calib_size']} boosted); wQBC/QBC success {rates}; "
                  f"wQBC >= QBC in {res['wqbc_ge_qbc_seeds']}/5 seeds (soft, {soft}), {dt:.0f}s")
    assert ok


def test_criterion_08_attdiv():
    t0 = time.perf_counter()
    res = X.attdiv_comparison(seed=0, n_states=50)
    dt = time.perf_counter() - t0
    ok = res["passed"] and dt < 300
    report(8, ok, f"AttDiv over {res['n_states']} states: QAIL+QBC {res['attdiv_qail_qbc']:.4f} vs "
                  f"RTN {res['attdiv_rtn']:.4f}; attdiv(p, p) exactly 0: {res['self_exact_zero']}, {dt:.0f}s")
    assert ok


def test_criterion_09_qarl():
    t0 = time.perf_counter()
    cases = [(1.5, 1.0, 1.2), (1.5, -1.0, -1.5), (0.5, 1.0, 0.5), (0.5, -1.0, -0.8)]
    exact = all(ppo_objective_terms([r], [a], 0.2)[0] == pytest.approx(e, abs=1e-12) for r, a, e in cases)
    with T.precision(np.float64):
        exact &= all(-ppo_clip_loss(Tensor(np.log([r])), [0.0], [a], 0.2).item() == pytest.approx(e, abs=1e-12)
                     for r, a, e in cases)
    res = X.qarl_trend(range(5), bits=4)
    dt = time.perf_counter() - t0
    med = res["median"]
    ok = exact and res["passed"] and dt < 900
    report(9, ok, f"PPO clip cases exact: {exact}; cartpole b=4 medians QARL+QBC {med['qarl_qbc']:.1f} vs "
                  f"QARL {med['qarl']:.1f} (FP {med['fp']:.1f}, RTN {med['rtn']:.1f}), {dt:.0f}s")
    assert ok


def test_criterion_10_determinism(tmp_path):
    t0 = time.perf_counter()
    a = X.metrics_json(X.pipeline_metrics(seed=0))
    b = X.metrics_json(X.pipeline_metrics(seed=0))
    env = make_env("griddrive")
    p = GaussianPolicy([env.obs_dim, 16, 2], seed=5, log_std_init=-0.2)
    p.net.attach_quantizers(QuantSpec(4, True), QuantSpec(4, True), QuantSpec(8, True))
    buf = encode_checkpoint(p)
    ck_ok = encode_checkpoint(decode_checkpoint(buf)[0]) == buf
    trajs = [rollout(p, env, s, max_steps=40, deterministic=False) for s in range(3)]
    save_trajectories(trajs, tmp_path / "d.jsonl")
    save_trajectories(load_trajectories(tmp_path / "d.jsonl"), tmp_path / "e.jsonl")
    ds_ok = (tmp_path / "d.jsonl").read_bytes() == (tmp_path / "e.jsonl").read_bytes()
    dt = time.perf_counter() - t0
    ok = a == b and ck_ok and ds_ok and dt < 300
    report(10, ok, f"pipeline metrics JSON identical across runs: {a == b} ({len(a)} bytes); checkpoint "
                   f"round trip exact: {ck_ok}; dataset round trip exact: {ds_ok}, {dt:.0f}s")
    assert ok


if __name__ == "__main__":
    import inspect
    import sys
    import tempfile
    from pathlib import Path

    failed = 0
    for name, fn in sorted(inspect.getmembers(sys.modules[__name__], inspect.isfunction)):
        if name.startswith("test_criterion"):
            try:
                if "tmp_path" in inspect.signature(fn).parameters:
                    with tempfile.TemporaryDirectory() as d:
                        fn(Path(d))
                else:
                    fn()
            except AssertionError:
                failed += 1
    sys.exit(1 if failed else 0)
