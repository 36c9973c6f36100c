import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ilq.envs import make_env
from ilq.errors import ConfigError, ContractError, PackError, ShapeError
from ilq.imitation import quantize_policy
from ilq.kernels import (PackedMatrix, bench, code_range, decode_packed_checkpoint, encode_packed_checkpoint,
                         gemm_fp32_naive, gemm_int, gemm_int_reference, kernel_threads, max_inner_dim, pack,
                         packed_bytes, quantized_policy_forward, unpack)
from ilq.policy import GaussianPolicy
from ilq.quant import QuantSpec


def _random_pair(rng, m, k, n, bits):
    lo, hi = code_range(bits, True)
    a = pack(rng.integers(lo, hi + 1, size=(m, k)), bits, True, 0.5)
    b = pack(rng.integers(lo, hi + 1, size=(k, n)), bits, True, 0.25)
    return a, b


def test_nibble_layout_low_first():
    pm = pack(np.array([[7, -8]]), 4)
    assert pm.data.tolist() == [0x87]
    pm = pack(np.array([[1, 2, 3]]), 4)
    assert pm.data.tolist() == [0x21, 0x03]


def test_small_product_by_hand():
    a = pack(np.array([[1, 2], [3, 4]]), 4, True)
    b = pack(np.array([[5, 6], [7, 8]]), 4, False)
    c, s = gemm_int(a, b)
    np.testing.assert_array_equal(c, [[19, 22], [43, 50]])
    assert c.dtype == np.int32 and float(s) == 1.0


@given(st.integers(1, 9), st.integers(1, 9), st.sampled_from([4, 8]), st.booleans(), st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_pack_unpack_round_trip(rows, cols, bits, signed, seed):
    lo, hi = code_range(bits, signed)
    q = np.random.default_rng(seed).integers(lo, hi + 1, size=(rows, cols))
    pm = pack(q, bits, signed)
    assert pm.nbytes == packed_bytes(rows, cols, bits)
    np.testing.assert_array_equal(unpack(pm), q)


def test_pack_rejects_out_of_range_with_index():
    with pytest.raises(PackError, match=r"\(1, 0\)"):
        pack(np.array([[0, 1], [8, 0]]), 4, True)
    with pytest.raises(PackError):
        pack(np.array([[-1]]), 8, False)
    with pytest.raises(PackError):
        pack(np.array([[0.5]]), 8)
    with pytest.raises(ConfigError):
        pack(np.zeros((1, 1), int), 2)


@pytest.mark.parametrize("bits", [4, 8])
def test_gemm_matches_reference(bits):
    rng = np.random.default_rng(bits)
    for _ in range(60):
        m, k, n = rng.integers(1, 70, size=3)
        a, b = _random_pair(rng, m, k, n, bits)
        c, _ = gemm_int(a, b, threads=1)
        np.testing.assert_array_equal(c, gemm_int_reference(a, b))


def test_thread_count_does_not_change_result():
    rng = np.random.default_rng(0)
    a, b = _random_pair(rng, 200, 96, 40, 8)
    np.testing.assert_array_equal(gemm_int(a, b, threads=1)[0], gemm_int(a, b, threads=2)[0])


def test_extreme_codes_at_k_bound():
    k_max = max_inner_dim(8, True, 8, True)
    assert k_max == (2**31 - 1) // (128 * 128)
    k = 1000
    a = pack(np.full((2, k), -128), 8)
    b = pack(np.full((k, 3), -128), 8)
    np.testing.assert_array_equal(gemm_int(a, b)[0], np.full((2, 3), 128 * 128 * k))


def test_k_bound_and_shape_checks():
    k = max_inner_dim(8, True, 8, True) + 1
    a = PackedMatrix(1, k, 8, True, np.zeros(k, np.uint8))
    b = PackedMatrix(k, 1, 8, True, np.zeros(k, np.uint8))
    with pytest.raises(ContractError):
        gemm_int(a, b)
    with pytest.raises(ShapeError):
        gemm_int(pack(np.zeros((2, 3), int), 8), pack(np.zeros((2, 3), int), 8))


def test_scales_combine_per_row_and_per_column():
    a = pack(np.ones((2, 2), int), 8, scale=np.array([1.0, 2.0], np.float32), scale_axis=0)
    b = pack(np.ones((2, 3), int), 8, scale=np.array([1.0, 10.0, 100.0], np.float32), scale_axis=1)
    c, s = gemm_int(a, b)
    np.testing.assert_allclose(c * s, [[2, 20, 200], [4, 40, 400]])
    np.testing.assert_allclose(c * s, a.dequantize() @ b.dequantize())


def test_fp32_naive_matches_numpy():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((17, 9)).astype(np.float32)
    b = rng.standard_normal((9, 5)).astype(np.float32)
    np.testing.assert_allclose(gemm_fp32_naive(a, b), a @ b, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("wbits", [4, 8])
def test_integer_policy_forward_matches_fake_quant(wbits):
    env = make_env("cartpole")
    fp = GaussianPolicy([4, 32, 32, 1], seed=0)
    obs = np.random.default_rng(0).normal(size=(64, 4)).astype(np.float32)
    q = quantize_policy(fp, QuantSpec(wbits, True), QuantSpec(wbits, True), obs, QuantSpec(8, True))
    mu_fake, _ = q.forward_np(obs)
    np.testing.assert_allclose(quantized_policy_forward(q, obs), mu_fake, rtol=1e-5, atol=1e-6)
    with pytest.raises(ConfigError):
        quantized_policy_forward(fp, obs)
    del env


def test_packed_checkpoint_round_trip():
    fp = GaussianPolicy([4, 8, 1], seed=0)
    obs = np.random.default_rng(0).normal(size=(16, 4)).astype(np.float32)
    q = quantize_policy(fp, QuantSpec(4, True), QuantSpec(4, True), obs)
    buf = encode_packed_checkpoint(q)
    back, mats = decode_packed_checkpoint(buf)
    # the output layer keeps float weights
    assert set(mats) == {"w0"}
    assert mats["w0"].bits == 4 and mats["w0"].shape == (4, 8)
    np.testing.assert_array_equal(back.outputs_np(obs), q.outputs_np(obs))
    with pytest.raises(PackError):
        decode_packed_checkpoint(buf.replace(b"PKD1", b"XXXX"))


def test_bench_report_fields():
    r = bench(16, 16, 16, bits=4, reps=30, warmup=1)
    assert r.weight_bytes * 8 == r.fp32_weight_bytes
    assert r.median_ns > 0 and r.fp32_median_ns > 0 and r.speedup > 0
    with pytest.raises(ConfigError):
        bench(4, 4, 4, reps=5)


def test_thread_env(monkeypatch):
    monkeypatch.setenv("ILQ_THREADS", "3")
    assert kernel_threads() == 3
    monkeypatch.setenv("ILQ_THREADS", "zero")
    with pytest.raises(ConfigError):
        kernel_threads()
