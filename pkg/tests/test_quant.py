import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ilq import tensor as T
from ilq.errors import ConfigError, DomainError
from ilq.quant import (FakeQuantizer, QuantSpec, fake_quant_forward, freeze_rounding, init_step_size,
                       lsq_grad_scale, lsq_step_grad, rtn_quantize, ste_weight_grad)
from ilq.tensor import Tensor

from conftest import central_diff, rel_err


def brute_force_code(w: float, s: float, bits: int, signed: bool) -> int:
    """Scalar reference: clip to the code range, then round half to even."""
    lo, hi = (-(2 ** (bits - 1)), 2 ** (bits - 1) - 1) if signed else (0, 2**bits - 1)
    v = min(max(w / s, lo), hi)
    f = math.floor(v)
    d = v - f
    if d > 0.5 or (d == 0.5 and f % 2 == 1):
        f += 1
    return int(f)


@pytest.mark.parametrize("bits", [2, 4, 8])
@pytest.mark.parametrize("signed", [True, False])
def test_rtn_matches_scalar_reference(bits, signed):
    w = np.linspace(-3.0, 3.0, 6001)
    s = 0.05 if bits == 8 else 0.25
    codes, deq = rtn_quantize(w, s, QuantSpec(bits, signed))
    ref = np.array([brute_force_code(x, s, bits, signed) for x in w])
    np.testing.assert_array_equal(codes, ref)
    np.testing.assert_array_equal(deq, ref * s)


def test_rtn_ties_round_to_even():
    codes, _ = rtn_quantize(np.array([0.5, 1.5, 2.5, -0.5, -1.5]), 1.0, QuantSpec(4, True))
    np.testing.assert_array_equal(codes, [0, 2, 2, 0, -2])


def test_rtn_per_channel_rows():
    w = np.array([[1.0, -1.0], [1.0, -1.0]])
    codes, _ = rtn_quantize(w, np.array([0.5, 0.25]), QuantSpec(4, True, "per-channel"))
    np.testing.assert_array_equal(codes, [[2, -2], [4, -4]])


def test_bad_step_and_spec():
    with pytest.raises(DomainError):
        rtn_quantize(np.ones(3), 0.0, QuantSpec())
    with pytest.raises(ConfigError):
        QuantSpec(bits=1)
    with pytest.raises(ConfigError):
        QuantSpec(method="apot")
    with pytest.raises(ConfigError):
        QuantSpec.from_dict({"bits": 4, "zero_point": 3})


@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=64),
       st.floats(1e-3, 10.0), st.sampled_from([2, 3, 4, 8]), st.booleans())
@settings(max_examples=200, deadline=None)
def test_rtn_properties(ws, s, bits, signed):
    spec = QuantSpec(bits, signed)
    w = np.array(ws)
    codes, deq = rtn_quantize(w, s, spec)
    assert codes.min() >= spec.qn and codes.max() <= spec.qp
    # quantizing an already-quantized tensor is a no-op
    codes2, _ = rtn_quantize(deq, s, spec)
    np.testing.assert_array_equal(codes, codes2)
    inside = (w / s >= spec.qn) & (w / s <= spec.qp)
    assert np.all(np.abs(deq - w)[inside] <= s / 2 + 1e-9)


def test_ste_mask_boundaries_inclusive():
    spec = QuantSpec(2, True)  # codes -2..1
    w = np.array([-2.0, -2.01, 1.0, 1.01, 0.3])
    np.testing.assert_array_equal(ste_weight_grad(w, 1.0, spec, np.ones(5)), [1, 0, 1, 0, 1])


def test_lsq_grad_scale_and_init():
    spec = QuantSpec(4, True)
    assert lsq_grad_scale(100, spec) == pytest.approx(1 / math.sqrt(100 * 7))
    w = np.array([1.0, -3.0])
    assert init_step_size(w, spec) == pytest.approx(2 * 2.0 / math.sqrt(7))
    pc = init_step_size(np.array([[1.0, 1.0], [0.0, 0.0]]), QuantSpec(4, True, "per-channel"))
    assert pc[0] == pytest.approx(2 / math.sqrt(7)) and pc[1] > 0


def _non_boundary_points(rng, n, spec, s):
    """w/s at least 0.05 away from a rounding tie and from the clip edges."""
    out = []
    while len(out) < n:
        v = rng.uniform(spec.qn - 2, spec.qp + 2)
        if abs(v - math.floor(v) - 0.5) > 0.05 and abs(v - spec.qn) > 0.05 and abs(v - spec.qp) > 0.05:
            out.append(v * s)
    return np.array(out)


@pytest.mark.parametrize("signed", [True, False])
def test_fake_quant_gradcheck_against_frozen_surrogate(signed):
    rng = np.random.default_rng(7)
    spec = QuantSpec(4, signed)
    with T.precision(np.float64):
        s0 = 0.3
        w = Tensor(_non_boundary_points(rng, 50, spec, s0), requires_grad=True)
        q = FakeQuantizer(spec, s0)
        up = rng.standard_normal(50)
        with freeze_rounding([q]):
            T.sum(T.mul(fake_quant_forward(w, q), Tensor(up))).backward()
            f = lambda: float(np.dot(fake_quant_forward(Tensor(w.data), q).data, up))
            fd_w = central_diff(f, w.data)
            fd_s = central_diff(f, q.step.data)
        g = lsq_grad_scale(50, spec)
        assert rel_err(w.grad, fd_w) < 1e-4
        assert rel_err(q.step.grad / g, fd_s) < 1e-4


def test_numpy_gradients_match_tape():
    rng = np.random.default_rng(3)
    spec = QuantSpec(3, True)
    w = rng.standard_normal(40) * 2
    up = rng.standard_normal(40)
    with T.precision(np.float64):
        x = Tensor(w, requires_grad=True)
        q = FakeQuantizer(spec, 0.4)
        T.sum(T.mul(fake_quant_forward(x, q), Tensor(up))).backward()
    np.testing.assert_allclose(x.grad, ste_weight_grad(w, 0.4, spec, up))
    np.testing.assert_allclose(q.step.grad, lsq_step_grad(w, 0.4, spec, up))


def test_rtn_quantizer_step_is_frozen():
    q = FakeQuantizer(QuantSpec(4, True, method="rtn"), 0.1)
    x = Tensor(np.array([0.3, -0.2]), requires_grad=True)
    T.sum(fake_quant_forward(x, q)).backward()
    assert q.step.grad is None and x.grad is not None


def test_calibrate_minmax_signed_and_unsigned():
    q = FakeQuantizer(QuantSpec(8, True), 1.0, role="activation")
    q.calibrate_minmax(np.array([-2.56, 1.0]))
    assert float(q.step.data) == pytest.approx(2.56 / 128)
    u = FakeQuantizer(QuantSpec(8, False), 1.0, role="activation")
    u.calibrate_minmax(np.array([0.0, 2.55]))
    assert float(u.step.data) == pytest.approx(0.01)


def test_disabled_quantizer_is_identity():
    q = FakeQuantizer(QuantSpec(2, True), 1.0)
    q.enabled = False
    x = np.array([0.123, 5.0], dtype=np.float32)
    np.testing.assert_array_equal(q.forward_np(x), x)
