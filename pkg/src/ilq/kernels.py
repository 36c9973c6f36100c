"""Packed low-bit integer matrices and CPU GEMM kernels.

Symmetric (zero-point free) W8A8 / W4A4 deployment path: integer codes are
bit-packed, multiplied with int32 accumulation and rescaled once per output
element. The benchmark harness compares against the repo's own naive FP32
GEMM on identical shapes.
"""

from __future__ import annotations

import json
import math
import os
import struct
import time
import warnings
from dataclasses import asdict, dataclass

import numba
import numpy as np

from .errors import ConfigError, ContractError, PackError, ShapeError
from .quant import rtn_quantize

PACK_MAGIC = b"PKD1"
PACK_VERSION = 1
INT32_MAX = 2**31 - 1
_ROW_BLOCK = 64


# ------------------------------------------------------------ packed storage


def code_range(bits: int, signed: bool) -> tuple[int, int]:
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2**bits - 1


@dataclass
class PackedMatrix:
    """Row-major integer matrix stored at 4 or 8 bits per value.

    4-bit values pair up by flat row-major index, low nibble first, so for
    an even column count the low nibble holds the even column. Signed values
    are two's complement nibbles/bytes. ``scale`` is a scalar, or a vector
    along ``scale_axis`` (0: one per row, 1: one per column).
    """

    rows: int
    cols: int
    bits: int
    signed: bool
    data: np.ndarray
    scale: float | np.ndarray = 1.0
    scale_axis: int | None = None

    def __post_init__(self):
        if self.bits not in (4, 8):
            raise ConfigError(f"packed matrices hold 4 or 8 bits, got {self.bits}")
        expected = math.ceil(self.rows * self.cols * self.bits / 8)
        if self.data.dtype != np.uint8 or self.data.ndim != 1 or self.data.size != expected:
            raise PackError(f"buffer must be {expected} uint8 bytes, got {self.data.dtype} x {self.data.size}")
        if self.scale_axis is None:
            self.scale = float(self.scale)
        else:
            n = self.rows if self.scale_axis == 0 else self.cols
            self.scale = np.asarray(self.scale, dtype=np.float32).reshape(-1)
            if self.scale.size != n:
                raise ShapeError(f"scale vector has {self.scale.size} entries, axis {self.scale_axis} has {n}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def nbytes(self) -> int:
        return int(self.data.size)

    @property
    def qmin(self) -> int:
        return code_range(self.bits, self.signed)[0]

    @property
    def qmax(self) -> int:
        return code_range(self.bits, self.signed)[1]

    def scale_vector(self, axis: int) -> np.ndarray:
        """Scale broadcast as a vector along ``axis``; per-tensor scales are repeated."""
        n = self.rows if axis == 0 else self.cols
        if self.scale_axis is None:
            return np.full(n, self.scale, dtype=np.float32)
        if self.scale_axis != axis:
            raise ContractError(f"scale runs along axis {self.scale_axis}, requested axis {axis}")
        return self.scale

    def dequantize(self) -> np.ndarray:
        q = unpack(self).astype(np.float32)
        if self.scale_axis is None:
            return q * np.float32(self.scale)
        return q * (self.scale[:, None] if self.scale_axis == 0 else self.scale[None, :])


def pack(codes, bits: int, signed: bool = True, scale=1.0, scale_axis: int | None = None) -> PackedMatrix:
    """Pack an integer matrix; raises :class:`PackError` naming the first out-of-range entry."""
    q = np.asarray(codes)
    if q.ndim != 2:
        raise ShapeError(f"pack expects a 2-D matrix, got shape {q.shape}")
    if q.size and not np.issubdtype(q.dtype, np.integer):
        if not np.all(q == np.rint(q)):
            bad = tuple(int(i) for i in np.argwhere(q != np.rint(q))[0])
            raise PackError(f"non-integer value {q[bad]!r} at index {bad}")
    if bits not in (4, 8):
        raise ConfigError(f"packed matrices hold 4 or 8 bits, got {bits}")
    lo, hi = code_range(bits, signed)
    bad_mask = (q < lo) | (q > hi)
    if bad_mask.any():
        bad = tuple(int(i) for i in np.argwhere(bad_mask)[0])
        raise PackError(f"value {int(q[bad])} at index {bad} outside [{lo}, {hi}] for {bits}-bit "
                        f"{'signed' if signed else 'unsigned'} packing")
    flat = q.astype(np.int64).reshape(-1)
    if bits == 8:
        data = (flat & 0xFF).astype(np.uint8)
    else:
        nib = (flat & 0xF).astype(np.uint8)
        if nib.size % 2:
            nib = np.append(nib, np.uint8(0))
        data = (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8)
    return PackedMatrix(q.shape[0], q.shape[1], bits, signed, data, scale, scale_axis)


@numba.njit(cache=True)
def _unpack4(data, n, signed):
    out = np.empty(n, np.int8)
    for i in range(n):
        byte = data[i >> 1]
        v = (byte >> 4) if (i & 1) else (byte & 0xF)
        if signed and v >= 8:
            v -= 16
        out[i] = v
    return out


def unpack(pm: PackedMatrix) -> np.ndarray:
    """Integer codes as an int32 (rows, cols) matrix."""
    return _unpack_narrow(pm).astype(np.int32)


def _unpack_narrow(pm: PackedMatrix) -> np.ndarray:
    # narrowest exact dtype: int8 for signed / 4-bit, uint8 for unsigned 8-bit
    n = pm.rows * pm.cols
    if pm.bits == 8:
        flat = pm.data.view(np.int8) if pm.signed else pm.data
    else:
        flat = _unpack4(pm.data, n, pm.signed)
    return flat[:n].reshape(pm.rows, pm.cols)


def packed_bytes(rows: int, cols: int, bits: int) -> int:
    return math.ceil(rows * cols * bits / 8)


# ------------------------------------------------------------------ kernels


def max_inner_dim(a_bits: int, a_signed: bool, b_bits: int, b_signed: bool) -> int:
    """Largest k whose worst-case dot product fits int32.

    The worst product uses the largest code magnitude, which for signed
    ranges is ``|Q_N| = 2^(b-1)``, one more than ``Q_P``.
    """
    a_mag = max(abs(v) for v in code_range(a_bits, a_signed))
    b_mag = max(abs(v) for v in code_range(b_bits, b_signed))
    return INT32_MAX // (a_mag * b_mag)


@numba.njit(cache=True)
def _gemm_rows(a, bt, c, i_lo, i_hi):
    # one contiguous dot product per output; B is pre-transposed so both
    # operands stream along k
    k = a.shape[1]
    n = bt.shape[0]
    for i in range(i_lo, i_hi):
        for j in range(n):
            acc = np.int32(0)
            for p in range(k):
                acc += np.int32(a[i, p]) * np.int32(bt[j, p])
            c[i, j] = acc


@numba.njit(cache=True)
def _gemm_serial(a, bt):
    c = np.empty((a.shape[0], bt.shape[0]), np.int32)
    _gemm_rows(a, bt, c, 0, a.shape[0])
    return c


@numba.njit(cache=True, parallel=True)
def _gemm_parallel(a, bt):
    m = a.shape[0]
    c = np.empty((m, bt.shape[0]), np.int32)
    n_blocks = (m + _ROW_BLOCK - 1) // _ROW_BLOCK
    for blk in numba.prange(n_blocks):
        lo = blk * _ROW_BLOCK
        _gemm_rows(a, bt, c, lo, min(lo + _ROW_BLOCK, m))
    return c


def kernel_threads() -> int:
    """Thread count from ``ILQ_THREADS`` (default: logical cores)."""
    raw = os.environ.get("ILQ_THREADS", str(os.cpu_count() or 1))
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"ILQ_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("ILQ_THREADS must be >= 1")
    return n


def gemm_int(a: PackedMatrix, b: PackedMatrix, threads: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exact int32 product of packed ``a`` (m x k) and ``b`` (k x n).

    Returns ``(c, scale)`` where ``c * scale`` is the dequantized product;
    ``scale`` is an (m, n)-broadcastable array built from a per-tensor or
    per-row scale on ``a`` and a per-tensor or per-column scale on ``b``.
    Each output element is reduced sequentially over k, so the result does
    not depend on the thread count.
    """
    if a.cols != b.rows:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    k_max = max_inner_dim(a.bits, a.signed, b.bits, b.signed)
    if a.cols > k_max:
        raise ContractError(f"k={a.cols} exceeds the int32-safe bound {k_max} for these bit widths")
    if a.scale_axis == 1 or b.scale_axis == 0:
        raise ContractError("scales must be per-row on the left operand and per-column on the right")
    av = _unpack_narrow(a)
    bt = np.ascontiguousarray(_unpack_narrow(b).T)
    threads = kernel_threads() if threads is None else threads
    if threads > 1:
        with warnings.catch_warnings():
            # numba probes for a TBB layer it may not use
            warnings.filterwarnings("ignore", message=".*TBB.*")
            numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
            c = _gemm_parallel(av, bt)
    else:
        c = _gemm_serial(av, bt)
    sa = np.float32(a.scale) if a.scale_axis is None else a.scale[:, None]
    sb = np.float32(b.scale) if b.scale_axis is None else b.scale[None, :]
    return c, np.asarray(sa * sb, dtype=np.float32)


def gemm_int_reference(a: PackedMatrix, b: PackedMatrix) -> np.ndarray:
    """Naive unpack-then-multiply oracle in exact int64, narrowed to int32."""
    c = unpack(a).astype(np.int64) @ unpack(b).astype(np.int64)
    return c.astype(np.int32)


@numba.njit(cache=True)
def gemm_fp32_naive(a, b):
    """Plain triple loop (i-k-j order) FP32 GEMM used as the speed baseline."""
    m, k = a.shape
    n = b.shape[1]
    c = np.zeros((m, n), np.float32)
    for i in range(m):
        for p in range(k):
            av = a[i, p]
            for j in range(n):
                c[i, j] += av * b[p, j]
    return c


# ------------------------------------------------------- policy deployment


def _container_bits(bits: int) -> int:
    if bits <= 4:
        return 4
    if bits <= 8:
        return 8
    raise ConfigError(f"no packed container for {bits}-bit codes")


def pack_weight(w: np.ndarray, quantizer) -> PackedMatrix:
    """Pack a (out, in) weight as the (in, out) right operand of ``x @ W.T``."""
    step = np.asarray(quantizer.step.data, dtype=np.float32)
    codes, _ = rtn_quantize(w, step, quantizer.spec)
    axis = 1 if step.ndim == 1 else None
    scale = step if axis is not None else float(step)
    return pack(codes.T, _container_bits(quantizer.spec.bits), True, scale, axis)


def pack_activation(x: np.ndarray, quantizer) -> PackedMatrix:
    step = float(np.asarray(quantizer.step.data))
    codes, _ = rtn_quantize(x, np.float32(step), quantizer.spec)
    return pack(codes, _container_bits(quantizer.spec.bits), quantizer.spec.signed, step)


def quantized_policy_forward(policy, obs, threads: int | None = None) -> np.ndarray:
    """Action mean through the integer deployment path.

    Each layer with both an input and a weight quantizer runs as an integer
    GEMM; other layers multiply dequantized values in float. With all
    quantizers disabled this is the plain float forward.
    """
    from .policy import GaussianPolicy

    if not isinstance(policy, GaussianPolicy):
        raise ConfigError("quantized_policy_forward expects a GaussianPolicy")
    net = policy.net
    if not net.quantized:
        raise ConfigError("policy carries no quantization spec")
    obs = np.asarray(obs)
    single = obs.ndim == 1
    x = policy.normalize(obs)
    if not any(q.enabled for q in net.quantizers()):
        mu = net.forward_np(x)
        return mu[0] if single else mu
    h = x.astype(np.float32)
    for i in range(net.n_layers):
        w = net.weights[i].data
        bias = net.biases[i].data
        aq, wq = net.act_quantizers[i], net.weight_quantizers[i]
        aq = aq if aq is not None and aq.enabled else None
        wq = wq if wq is not None and wq.enabled else None
        if aq is not None and wq is not None:
            c, s = gemm_int(pack_activation(h, aq), pack_weight(w, wq), threads)
            h = (c.astype(np.float32) * s + bias).astype(np.float32)
        else:
            if aq is not None:
                h = aq.forward_np(h)
            if wq is not None:
                w = wq.forward_np(w)
            h = (h @ w.T + bias).astype(np.float32)
        if i < net.n_layers - 1:
            h = np.tanh(h)
    return h[0] if single else h


# ------------------------------------------------------ packed checkpoints


def packed_weights(policy) -> dict[str, PackedMatrix]:
    net = policy.net
    return {f"w{i}": pack_weight(net.weights[i].data, q)
            for i, q in enumerate(net.weight_quantizers) if q is not None}


def encode_packed_checkpoint(policy) -> bytes:
    """ILQ1 checkpoint followed by a versioned packed-weights section."""
    from .policy import encode_checkpoint

    mats = packed_weights(policy)
    entries, blobs, offset = [], [], 0
    for name, pm in mats.items():
        entries.append({"name": name, "rows": pm.rows, "cols": pm.cols, "bits": pm.bits, "signed": pm.signed,
                        "scale_axis": pm.scale_axis,
                        "scale": pm.scale.tolist() if pm.scale_axis is not None else pm.scale,
                        "offset": offset, "nbytes": pm.nbytes})
        blobs.append(pm.data.tobytes())
        offset += pm.nbytes
    section = PACK_MAGIC + struct.pack("<II", PACK_VERSION, offset) + b"".join(blobs)
    meta = {"packed_section": {"version": PACK_VERSION, "entries": entries}}
    return encode_checkpoint(policy, extra_sections=section, extra_meta=meta)


def decode_packed_checkpoint(buf: bytes):
    """Returns ``(policy, packed matrices by name)``."""
    from .errors import TruncatedCheckpointError, VersionMismatchError
    from .policy import decode_checkpoint

    policy, meta, rest = decode_checkpoint(buf)
    info = meta.get("packed_section")
    if info is None:
        raise ConfigError("checkpoint has no packed-weights section")
    if len(rest) < 12 or rest[:4] != PACK_MAGIC:
        raise PackError("packed section missing or corrupt")
    version, total = struct.unpack("<II", rest[4:12])
    if version != PACK_VERSION:
        raise VersionMismatchError(f"packed section version {version}, expected {PACK_VERSION}")
    body = rest[12:]
    if len(body) < total:
        raise TruncatedCheckpointError("packed section truncated")
    mats = {}
    for e in info["entries"]:
        data = np.frombuffer(body, dtype=np.uint8, count=e["nbytes"], offset=e["offset"]).copy()
        mats[e["name"]] = PackedMatrix(e["rows"], e["cols"], e["bits"], e["signed"], data, e["scale"], e["scale_axis"])
    return policy, mats


# ---------------------------------------------------------------- benchmark


@dataclass
class BenchReport:
    m: int
    n: int
    k: int
    bits: int
    reps: int
    warmup: int
    median_ns: float
    p10_ns: float
    p90_ns: float
    fp32_median_ns: float
    fp32_p10_ns: float
    fp32_p90_ns: float
    speedup: float
    bytes_moved: int
    fp32_bytes_moved: int
    weight_bytes: int
    fp32_weight_bytes: int
    threads: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _time_ns(fn, reps: int, warmup: int) -> np.ndarray:
    for _ in range(warmup):
        fn()
    out = np.empty(reps, dtype=np.int64)
    for r in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        out[r] = time.perf_counter_ns() - t0
    return out


def bench(m: int, n: int, k: int, bits: int = 8, reps: int = 30, warmup: int = 5, seed: int = 0,
          threads: int | None = None) -> BenchReport:
    """Time ``gemm_int`` on random packed operands against the naive FP32 GEMM.

    Memory figures count packed operand bytes only (no runtime buffers).
    """
    if reps < 30:
        raise ConfigError("bench needs reps >= 30")
    if warmup < 0:
        raise ConfigError("warmup must be >= 0")
    rng = np.random.default_rng(seed)
    lo, hi = code_range(bits, True)
    a = pack(rng.integers(lo, hi + 1, size=(m, k)), bits, True, 0.01)
    b = pack(rng.integers(lo, hi + 1, size=(k, n)), bits, True, 0.02)
    af = rng.standard_normal((m, k)).astype(np.float32)
    bf = rng.standard_normal((k, n)).astype(np.float32)
    threads = kernel_threads() if threads is None else threads
    t_int = _time_ns(lambda: gemm_int(a, b, threads), reps, warmup)
    t_fp = _time_ns(lambda: gemm_fp32_naive(af, bf), reps, warmup)
    med, p10, p90 = (float(v) for v in np.percentile(t_int, [50, 10, 90]))
    fmed, fp10, fp90 = (float(v) for v in np.percentile(t_fp, [50, 10, 90]))
    return BenchReport(m, n, k, bits, reps, warmup, med, p10, p90, fmed, fp10, fp90, fmed / med,
                       a.nbytes + b.nbytes + 4 * m * n, 4 * (m * k + k * n + m * n),
                       b.nbytes, 4 * k * n, threads)
