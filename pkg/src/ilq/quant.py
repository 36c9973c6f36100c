"""Symmetric fake quantization with straight-through gradients.

Signed specs use ``[-2^(b-1), 2^(b-1)-1]`` and unsigned specs ``[0, 2^b-1]``;
the unsigned range only suits non-negative activations. The step size
is either fixed (RTN) or a trainable parameter updated with the learned
step-size gradient (LSQ).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, DomainError
from .tensor import Tensor, _node, default_dtype

METHODS = ("rtn", "lsq")
GRANULARITIES = ("per-tensor", "per-channel")
MIN_STEP = 1e-9
ZERO_FALLBACK_STEP = 1e-3


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 4
    signed: bool = True
    granularity: str = "per-tensor"
    method: str = "lsq"

    def __post_init__(self):
        if not isinstance(self.bits, (int, np.integer)) or not 2 <= self.bits <= 16:
            raise ConfigError(f"bits must be an integer in [2, 16], got {self.bits!r}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown quantization method {self.method!r}")

    @property
    def qn(self) -> int:
        return -(2 ** (self.bits - 1)) if self.signed else 0

    @property
    def qp(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.signed else 2**self.bits - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> QuantSpec:
        unknown = set(d) - {"bits", "signed", "granularity", "method"}
        if unknown:
            raise ConfigError(f"unknown QuantSpec fields: {sorted(unknown)}")
        return cls(**d)


def _step_like(s, w: np.ndarray) -> np.ndarray:
    """Broadcast a scalar or per-row step vector against ``w``."""
    s = np.asarray(s, dtype=w.dtype)
    if s.ndim == 1 and w.ndim == 2:
        if s.shape[0] != w.shape[0]:
            raise DomainError(f"per-channel step has {s.shape[0]} entries for {w.shape[0]} rows")
        return s[:, None]
    return s


def rtn_quantize(w, s, spec: QuantSpec) -> tuple[np.ndarray, np.ndarray]:
    """Round-to-nearest quantization.

    Returns the integer codes ``clip(w/s)`` rounded half-to-even and their
    dequantized values ``codes * s``.
    """
    w = np.asarray(w)
    if not np.issubdtype(w.dtype, np.floating):
        w = w.astype(default_dtype())
    sb = _step_like(s, w)
    if np.any(~(sb > 0)):
        raise DomainError("step size must be strictly positive")
    v = np.clip(w / sb, spec.qn, spec.qp)
    q = np.rint(v)
    return q.astype(np.int32), (q * sb).astype(w.dtype)


def ste_mask(w, s, spec: QuantSpec) -> np.ndarray:
    w = np.asarray(w)
    v = w / _step_like(s, w)
    return (v >= spec.qn) & (v <= spec.qp)


def ste_weight_grad(w, s, spec: QuantSpec, upstream) -> np.ndarray:
    """Pass ``upstream`` through where ``Q_N <= w/s <= Q_P``, zero elsewhere."""
    upstream = np.asarray(upstream)
    return upstream * ste_mask(w, s, spec).astype(upstream.dtype)


def lsq_grad_scale(n_elements: int, spec: QuantSpec) -> float:
    return 1.0 / math.sqrt(n_elements * spec.qp)


def step_derivative(w, s, spec: QuantSpec) -> np.ndarray:
    """Per-element d(w_hat)/ds with rounding treated straight-through."""
    w = np.asarray(w)
    v = w / _step_like(s, w)
    inside = np.rint(v) - v
    return np.where(v < spec.qn, spec.qn, np.where(v > spec.qp, spec.qp, inside)).astype(w.dtype)


def lsq_step_grad(w, s, spec: QuantSpec, upstream, grad_scale: float | None = None) -> np.ndarray:
    w = np.asarray(w)
    s_arr = np.asarray(s)
    per_channel = s_arr.ndim == 1 and w.ndim == 2
    n = w.shape[1] if per_channel else w.size
    g = lsq_grad_scale(n, spec) if grad_scale is None else grad_scale
    contrib = np.asarray(upstream) * step_derivative(w, s, spec)
    total = contrib.sum(axis=1) if per_channel else contrib.sum()
    return (g * total).astype(w.dtype).reshape(s_arr.shape)


def init_step_size(w, spec: QuantSpec):
    """``2 * mean|w| / sqrt(Q_P)``, per row for per-channel specs."""
    w = np.asarray(w)
    if w.size == 0:
        raise DomainError("init_step_size on an empty tensor")
    if spec.granularity == "per-channel" and w.ndim == 2:
        s = 2.0 * np.abs(w).mean(axis=1) / math.sqrt(spec.qp)
        return np.where(s > 0, s, ZERO_FALLBACK_STEP).astype(w.dtype)
    s = 2.0 * float(np.abs(w).mean()) / math.sqrt(spec.qp)
    return s if s > 0 else ZERO_FALLBACK_STEP


class FakeQuantizer:
    """Quantize-dequantize op with a (possibly trainable) step size."""

    def __init__(self, spec: QuantSpec, step, role: str = "weight"):
        if role not in ("weight", "activation"):
            raise ConfigError(f"unknown quantizer role {role!r}")
        if role == "activation" and spec.granularity == "per-channel":
            raise ConfigError("per-channel granularity is only supported for weights")
        self.spec = spec
        self.role = role
        self.step = Tensor(np.asarray(step), requires_grad=spec.method == "lsq")
        if np.any(~(self.step.data > 0)):
            raise DomainError("step size must be strictly positive")
        self.enabled = True
        self._freeze: str | None = None
        self._residual: np.ndarray | None = None

    @property
    def trainable(self) -> bool:
        return self.spec.method == "lsq"

    def clamp_(self) -> None:
        self.step.data = np.maximum(self.step.data, MIN_STEP).astype(self.step.data.dtype)

    def calibrate_minmax(self, x: np.ndarray) -> None:
        """Set the step so the observed range maps onto the integer grid."""
        x = np.asarray(x)
        if self.spec.signed:
            s = max(float(x.max()) / self.spec.qp, float(-x.min()) / -self.spec.qn, 0.0)
        else:
            s = max(float(x.max()), 0.0) / self.spec.qp
        self.step.data = np.full_like(self.step.data, s if s > 0 else ZERO_FALLBACK_STEP)

    def __call__(self, x: Tensor) -> Tensor:
        return fake_quant_forward(x, self)

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        if not self.enabled:
            return x
        return _fq_values(x, self)[0]

    def state_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "role": self.role, "enabled": self.enabled}


def _fq_values(x: np.ndarray, q: FakeQuantizer):
    sb = _step_like(q.step.data, x)
    v = x / sb
    c = np.clip(v, q.spec.qn, q.spec.qp)
    if q._freeze == "replay":
        out = (c + q._residual) * sb
    else:
        r = np.rint(c)
        if q._freeze == "record":
            q._residual = r - c
            q._freeze = "replay"
        out = r * sb
    return out.astype(x.dtype), v


def fake_quant_forward(x: Tensor, q: FakeQuantizer) -> Tensor:
    """Differentiable fake quantization of ``x``.

    Backward routes the STE mask to ``x`` and, for LSQ quantizers, the
    grad-scaled step derivative to ``q.step``.
    """
    if not q.enabled:
        return x
    out, v = _fq_values(x.data, q)
    spec = q.spec
    s_arr = q.step.data
    per_channel = s_arr.ndim == 1 and x.data.ndim == 2
    n = x.shape[1] if per_channel else x.size
    gscale = lsq_grad_scale(n, spec)

    def fn(g):
        mask = (v >= spec.qn) & (v <= spec.qp)
        gx = g * mask
        if not q.step.requires_grad:
            return gx, None
        d = np.where(v < spec.qn, spec.qn, np.where(v > spec.qp, spec.qp, np.rint(v) - v))
        contrib = g * d
        total = contrib.sum(axis=1) if per_channel else contrib.sum()
        return gx, (gscale * total).astype(g.dtype).reshape(s_arr.shape)

    return _node(out, (x, q.step), fn)


@contextlib.contextmanager
def freeze_rounding(quantizers: Iterable[FakeQuantizer]) -> Iterator[None]:
    """Freeze each quantizer's rounding residual at the next forward pass.

    Within the block the quantizer is the smooth surrogate
    ``s * (clip(x/s) + r0)``: its value at the recording point equals the
    true quantized value and its exact derivative equals the STE/LSQ
    gradient, so it can be checked by finite differences.
    """
    qs = [q for q in quantizers if q is not None]
    for q in qs:
        q._freeze, q._residual = "record", None
    try:
        yield
    finally:
        for q in qs:
            q._freeze, q._residual = None, None
