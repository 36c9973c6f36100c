"""Diagonal-Gaussian MLP policies, value critics and checkpoint persistence."""

from __future__ import annotations

import copy
import json
import math
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    ShapeError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from .quant import FakeQuantizer, QuantSpec, fake_quant_forward, init_step_size
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)

MAGIC = b"ILQ1"
FORMAT_VERSION = 1


class MLP:
    """Tanh MLP with optional fake quantizers.

    Weights are stored (out_features, in_features); per-channel weight
    quantization therefore works along rows. Every layer but the last has a
    weight quantizer. ``act_quantizers[i]`` quantizes the input of layer
    ``i``: the raw observation for ``i == 0`` and a tanh output otherwise, so
    each quantized layer multiplies integer codes by integer codes.
    """

    def __init__(self, dims: Sequence[int], seed: int = 0, out_scale: float = 1.0):
        if len(dims) < 2:
            raise ConfigError("an MLP needs at least input and output dims")
        self.dims = [int(d) for d in dims]
        rng = np.random.default_rng(seed)
        dt = T.default_dtype()
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        n_layers = len(dims) - 1
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            if i == n_layers - 1:
                bound *= out_scale
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dt)
            b = rng.uniform(-bound, bound, size=(fan_out,)).astype(dt)
            self.weights.append(Tensor(w, requires_grad=True, name=f"w{i}"))
            self.biases.append(Tensor(b, requires_grad=True, name=f"b{i}"))
        self.weight_quantizers: list[FakeQuantizer | None] = [None] * n_layers
        self.act_quantizers: list[FakeQuantizer | None] = [None] * n_layers

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def quantized(self) -> bool:
        return any(q is not None for q in self.quantizers())

    def quantizers(self) -> list[FakeQuantizer]:
        return [q for q in self.weight_quantizers + self.act_quantizers if q is not None]

    def parameters(self, include_steps: bool = True) -> list[Tensor]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params += [w, b]
        if include_steps:
            params += [q.step for q in self.quantizers() if q.step.requires_grad]
        return params

    def attach_quantizers(self, weight_spec: QuantSpec | None, act_spec: QuantSpec | None,
                          input_spec: QuantSpec | None = None) -> None:
        """Attach quantizers; ``input_spec`` (default ``act_spec``) covers the raw observation."""
        input_spec = input_spec or act_spec
        # final layer weights stay full precision
        for i in range(self.n_layers):
            if weight_spec is not None and i < self.n_layers - 1:
                w = self.weights[i].data
                self.weight_quantizers[i] = FakeQuantizer(weight_spec, init_step_size(w, weight_spec), "weight")
            spec = input_spec if i == 0 else act_spec
            if spec is not None:
                self.act_quantizers[i] = FakeQuantizer(spec, 1.0, "activation")

    def set_quantizers_enabled(self, enabled: bool) -> None:
        for q in self.quantizers():
            q.enabled = enabled

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for i in range(self.n_layers):
            aq = self.act_quantizers[i]
            if aq is not None:
                h = fake_quant_forward(h, aq)
            w = self.weights[i]
            wq = self.weight_quantizers[i]
            if wq is not None:
                w = fake_quant_forward(w, wq)
            h = T.linear(h, w, self.biases[i])
            if i < self.n_layers - 1:
                h = T.tanh(h)
        return h

    def forward_np(self, x: np.ndarray, record_acts: list | None = None) -> np.ndarray:
        """No-grad forward; bit-identical to :meth:`forward`.

        ``record_acts`` collects each layer's input before its activation
        quantizer.
        """
        h = np.asarray(x, dtype=self.weights[0].data.dtype)
        for i in range(self.n_layers):
            if record_acts is not None:
                record_acts.append(h)
            aq = self.act_quantizers[i]
            if aq is not None:
                h = aq.forward_np(h)
            w = self.weights[i].data
            wq = self.weight_quantizers[i]
            if wq is not None:
                w = wq.forward_np(w)
            h = T.linear_np(h, w, self.biases[i].data)
            if i < self.n_layers - 1:
                h = np.tanh(h)
        return h


class GaussianPolicy:
    """``a ~ N(mu(s), diag(exp(log_std))^2)`` with a state-independent std."""

    def __init__(self, layer_dims: Sequence[int], seed: int = 0, log_std_init: float = 0.0, out_scale: float = 1.0):
        self.net = MLP(layer_dims, seed=seed, out_scale=out_scale)
        self.seed = seed
        self.log_std = Tensor(np.full(layer_dims[-1], log_std_init, dtype=T.default_dtype()), requires_grad=True,
                              name="log_std")
        # fixed input standardization, part of the policy (not trained)
        self.obs_shift = np.zeros(layer_dims[0], dtype=np.float32)
        self.obs_scale = np.ones(layer_dims[0], dtype=np.float32)
        self.meta: dict = {}

    def fit_normalizer(self, obs: np.ndarray, min_scale: float = 1e-6) -> None:
        """Standardize inputs with the per-feature mean and std of ``obs``."""
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim != 2 or obs.shape[1] != self.obs_dim:
            raise ShapeError(f"normalizer data has shape {obs.shape}, expected (n, {self.obs_dim})")
        self.obs_shift = obs.mean(axis=0).astype(np.float32)
        self.obs_scale = np.maximum(obs.std(axis=0), min_scale).astype(np.float32)

    @property
    def layer_dims(self) -> list[int]:
        return self.net.dims

    @property
    def obs_dim(self) -> int:
        return self.net.dims[0]

    @property
    def action_dim(self) -> int:
        return self.net.dims[-1]

    @property
    def quantized(self) -> bool:
        return self.net.quantized

    def parameters(self, include_steps: bool = True) -> list[Tensor]:
        return self.net.parameters(include_steps) + [self.log_std]

    def quantizers(self) -> list[FakeQuantizer]:
        return self.net.quantizers()

    def clone(self) -> GaussianPolicy:
        return copy.deepcopy(self)

    def _check_obs(self, obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(obs)
        if obs.ndim == 1:
            obs = obs[None, :]
        if obs.shape[-1] != self.obs_dim:
            raise ShapeError(f"observation has {obs.shape[-1]} features, policy expects {self.obs_dim}")
        return obs

    def normalize(self, obs) -> np.ndarray:
        obs = self._check_obs(obs)
        dt = self.net.weights[0].data.dtype
        return ((obs - self.obs_shift) / self.obs_scale).astype(dt)

    # taped forward -------------------------------------------------------

    def forward(self, obs) -> tuple[Tensor, Tensor]:
        x = obs if isinstance(obs, Tensor) else Tensor(self.normalize(obs))
        return self.net.forward(x), self.log_std

    def outputs(self, obs) -> Tensor:
        """Pre-distribution output vector ``[mu, log_std]`` per row."""
        mu, log_std = self.forward(obs)
        return T.concat([mu, T.broadcast_rows(log_std, mu.shape[0])], axis=1)

    # no-grad forward -----------------------------------------------------

    def forward_np(self, obs, record_acts: list | None = None) -> tuple[np.ndarray, np.ndarray]:
        mu = self.net.forward_np(self.normalize(obs), record_acts)
        return mu, np.exp(self.log_std.data)

    def outputs_np(self, obs) -> np.ndarray:
        mu = self.net.forward_np(self.normalize(obs))
        return np.concatenate([mu, np.broadcast_to(self.log_std.data, mu.shape)], axis=1)

    def act(self, obs, rng: np.random.Generator | None = None, deterministic: bool = True) -> np.ndarray:
        return sample(self, obs, rng, deterministic)

    def to_checkpoint_meta(self) -> dict:
        return {
            "kind": "gaussian_policy",
            "layer_dims": self.layer_dims,
            "seed": self.seed,
            **self.meta,
        }


def forward(policy: GaussianPolicy, obs) -> tuple[np.ndarray, np.ndarray]:
    """``(mu, sigma)`` for a single observation vector."""
    obs = np.asarray(obs)
    if obs.ndim != 1:
        raise ShapeError(f"forward expects one observation vector, got shape {obs.shape}")
    mu, sigma = policy.forward_np(obs)
    return mu[0], sigma


def log_prob(policy: GaussianPolicy, obs, action) -> Tensor:
    """Per-row Gaussian log-likelihood as a taped tensor of shape (B,)."""
    mu, log_std = policy.forward(obs)
    return gaussian_log_prob(mu, log_std, action)


def gaussian_log_prob(mu: Tensor, log_std: Tensor, action) -> Tensor:
    a = action if isinstance(action, Tensor) else Tensor(np.asarray(action).reshape(mu.shape))
    if a.shape != mu.shape:
        raise ShapeError(f"action shape {a.shape} does not match policy output {mu.shape}")
    z = T.mul(T.sub(a, mu), T.exp(T.scale(log_std, -1.0)))
    per_dim = T.sub(T.scale(T.square(z), -0.5), log_std)
    return T.sub(T.sum(per_dim, axis=1), Tensor(0.5 * LOG_2PI * mu.shape[1]))


def gaussian_log_prob_np(mu: np.ndarray, log_std: np.ndarray, action: np.ndarray) -> np.ndarray:
    z = (action - mu) * np.exp(-log_std)
    return (-0.5 * z * z - log_std).sum(axis=-1) - 0.5 * LOG_2PI * mu.shape[-1]


def sample(policy: GaussianPolicy, obs, rng: np.random.Generator | None, deterministic: bool = False) -> np.ndarray:
    mu, sigma = policy.forward_np(obs)
    mu = mu[0] if np.asarray(obs).ndim == 1 else mu
    if deterministic:
        return mu
    if rng is None:
        raise ValueError("stochastic sampling needs an explicit rng")
    z = rng.standard_normal(mu.shape).astype(mu.dtype)
    return mu + sigma * z


class Critic:
    """State-value network ``v(s)``; never shares parameters with the actor."""

    def __init__(self, layer_dims: Sequence[int], seed: int = 0):
        if layer_dims[-1] != 1:
            raise ConfigError("critic output dim must be 1")
        self.net = MLP(layer_dims, seed=seed)
        self.obs_shift = np.zeros(layer_dims[0], dtype=np.float32)
        self.obs_scale = np.ones(layer_dims[0], dtype=np.float32)

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def _normalize(self, obs) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs))
        return ((obs - self.obs_shift) / self.obs_scale).astype(self.net.weights[0].data.dtype)

    def value(self, obs) -> Tensor:
        """Values as a (B, 1) tensor."""
        return self.net.forward(Tensor(self._normalize(obs)))

    def value_np(self, obs) -> np.ndarray:
        return self.net.forward_np(self._normalize(obs))[:, 0]


# ------------------------------------------------------------- checkpoint


def _named_tensors(policy: GaussianPolicy) -> list[tuple[str, np.ndarray]]:
    out = []
    net = policy.net
    for i in range(net.n_layers):
        out.append((f"w{i}", net.weights[i].data))
        out.append((f"b{i}", net.biases[i].data))
    out.append(("log_std", policy.log_std.data))
    out.append(("obs_shift", policy.obs_shift))
    out.append(("obs_scale", policy.obs_scale))
    for i, q in enumerate(net.weight_quantizers):
        if q is not None:
            out.append((f"wq{i}.step", np.atleast_1d(q.step.data)))
    for i, q in enumerate(net.act_quantizers):
        if q is not None:
            out.append((f"aq{i}.step", np.atleast_1d(q.step.data)))
    return out


def _quant_meta(net: MLP) -> dict | None:
    if not net.quantized:
        return None
    wq = next((q for q in net.weight_quantizers if q is not None), None)
    aq = next((q for q in net.act_quantizers[1:] if q is not None), None)
    iq = net.act_quantizers[0]
    return {
        "weight": None if wq is None else wq.spec.to_dict(),
        "activation": None if aq is None else aq.spec.to_dict(),
        "input": None if iq is None else iq.spec.to_dict(),
        "enabled": all(q.enabled for q in net.quantizers()),
    }


def encode_checkpoint(policy: GaussianPolicy, extra_sections: bytes = b"", extra_meta: dict | None = None) -> bytes:
    tensors = _named_tensors(policy)
    meta = policy.to_checkpoint_meta()
    meta["quant"] = _quant_meta(policy.net)
    meta["tensors"] = [{"name": n, "shape": list(a.shape)} for n, a in tensors]
    if extra_meta:
        meta.update(extra_meta)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blobs = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in tensors)
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, len(meta_bytes))
    return header + meta_bytes + blobs + extra_sections


def save(policy: GaussianPolicy, path) -> None:
    Path(path).write_bytes(encode_checkpoint(policy))


def decode_checkpoint(buf: bytes) -> tuple[GaussianPolicy, dict, bytes]:
    """Parse a checkpoint; returns (policy, metadata, trailing section bytes)."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"not an ILQ1 checkpoint (magic {buf[:4]!r})")
    if len(buf) < 12:
        raise TruncatedCheckpointError("checkpoint header truncated")
    version, meta_len = struct.unpack("<II", buf[4:12])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    if len(buf) < 12 + meta_len:
        raise TruncatedCheckpointError("checkpoint metadata truncated")
    try:
        meta = json.loads(buf[12 : 12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint metadata: {exc}") from exc
    if meta.get("kind") != "gaussian_policy":
        raise CheckpointError(f"unsupported checkpoint kind {meta.get('kind')!r}")

    with T.precision(np.float32):
        policy = GaussianPolicy(meta["layer_dims"], seed=meta.get("seed", 0))
        q = meta.get("quant")
        if q is not None:
            wspec = QuantSpec.from_dict(q["weight"]) if q.get("weight") else None
            aspec = QuantSpec.from_dict(q["activation"]) if q.get("activation") else None
            ispec = QuantSpec.from_dict(q["input"]) if q.get("input") else None
            policy.net.attach_quantizers(wspec, aspec, ispec)
            policy.net.set_quantizers_enabled(q.get("enabled", True))
    policy.meta = {k: v for k, v in meta.items()
                   if k not in ("kind", "layer_dims", "seed", "quant", "tensors")}

    targets = dict(_target_slots(policy))
    offset = 12 + meta_len
    for entry in meta["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        if offset + nbytes > len(buf):
            raise TruncatedCheckpointError(f"blob {name!r} truncated")
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).astype(np.float32).reshape(shape)
        offset += nbytes
        if name not in targets:
            raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
        t, scalar = targets.pop(name)
        if scalar:
            arr = arr.reshape(()) if arr.size == 1 and t.data.ndim == 0 else arr
        if arr.shape != t.data.shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, expected {t.data.shape}")
        t.data = arr.copy()
    if targets:
        raise TruncatedCheckpointError(f"checkpoint missing tensors {sorted(targets)}")
    return policy, meta, buf[offset:]


class _ArraySlot:
    """Adapter giving a plain array attribute the ``.data`` interface of a Tensor."""

    def __init__(self, owner, attr: str):
        self.owner, self.attr = owner, attr

    @property
    def data(self) -> np.ndarray:
        return getattr(self.owner, self.attr)

    @data.setter
    def data(self, value: np.ndarray) -> None:
        setattr(self.owner, self.attr, value)


def _target_slots(policy: GaussianPolicy):
    net = policy.net
    for i in range(net.n_layers):
        yield f"w{i}", (net.weights[i], False)
        yield f"b{i}", (net.biases[i], False)
    yield "log_std", (policy.log_std, False)
    yield "obs_shift", (_ArraySlot(policy, "obs_shift"), False)
    yield "obs_scale", (_ArraySlot(policy, "obs_scale"), False)
    for i, q in enumerate(net.weight_quantizers):
        if q is not None:
            yield f"wq{i}.step", (q.step, True)
    for i, q in enumerate(net.act_quantizers):
        if q is not None:
            yield f"aq{i}.step", (q.step, True)


def load(path) -> GaussianPolicy:
    policy, meta, rest = decode_checkpoint(Path(path).read_bytes())
    if rest and "packed_section" not in meta:
        raise CheckpointError(f"{len(rest)} unexpected trailing bytes in checkpoint")
    return policy
