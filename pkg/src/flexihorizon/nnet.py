"""Dense networks with manual backpropagation, losses, AdamW and checkpoints.

Everything is plain numpy in double precision. Functions keep the dtype of their
inputs, so finite-difference checks can run in ``np.longdouble``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import InvalidInputError, ParseError
from .fdk import _huber

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths including input and output; activation follows every hidden layer."""

    widths: tuple
    activation: str = "relu"
    final_activation: bool = False
    seed: int = 0

    def __post_init__(self):
        if len(self.widths) < 2 or any(int(w) < 1 for w in self.widths):
            raise InvalidInputError(f"need at least one layer with positive widths, got {self.widths}")
        if self.activation not in _ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1


def _relu(z):
    return np.maximum(z, 0)


def _relu_grad(z, a):
    return (z > 0).astype(z.dtype)


def _tanh_grad(z, a):
    return 1 - a * a


_ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
    "identity": (lambda z: z, lambda z, a: np.ones_like(z)),
}


def init_params(spec: MlpSpec, rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """Glorot-uniform weights and zero biases."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    params = {}
    for k, (fan_in, fan_out) in enumerate(zip(spec.widths, spec.widths[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"W{k}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"b{k}"] = np.zeros(fan_out)
    return params


def mlp_forward(spec: MlpSpec, params, x):
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != spec.widths[0]:
        raise InvalidInputError(f"input of shape {x.shape} does not match width {spec.widths[0]}")
    act, _ = _ACTIVATIONS[spec.activation]
    cache = []
    h = x
    for k in range(spec.num_layers):
        z = h @ params[f"W{k}"] + params[f"b{k}"]
        last = k == spec.num_layers - 1
        a = act(z) if (not last or spec.final_activation) else z
        cache.append((h, z, a))
        h = a
    return h, cache


def mlp_backward(spec: MlpSpec, params, cache, grad_out):
    """Return ``(param_grads, input_grad)`` for a cache produced by :func:`mlp_forward`."""
    if len(cache) != spec.num_layers:
        raise InvalidInputError("cache does not match network depth")
    _, act_grad = _ACTIVATIONS[spec.activation]
    grads = {}
    g = np.asarray(grad_out)
    if g.shape != cache[-1][2].shape:
        raise InvalidInputError(f"output gradient shape {g.shape} != output shape {cache[-1][2].shape}")
    for k in range(spec.num_layers - 1, -1, -1):
        h, z, a = cache[k]
        last = k == spec.num_layers - 1
        if not last or spec.final_activation:
            g = g * act_grad(z, a)
        grads[f"W{k}"] = h.T @ g
        grads[f"b{k}"] = g.sum(axis=0)
        g = g @ params[f"W{k}"].T
    return grads, g


# -- losses ------------------------------------------------------------------------


def softmax(logits, axis=-1):
    z = np.asarray(logits)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _same_shape(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def cross_entropy(probs, one_hot) -> float:
    """``-sum(b * log(p))``, averaged over leading axes for batched input."""
    p, b = _same_shape(probs, one_hot)
    per = -(b * np.log(np.maximum(p, LOG_CLAMP))).sum(axis=-1)
    return float(np.mean(per))


def softmax_cross_entropy_grad(logits, one_hot):
    """Gradient of per-row cross entropy through softmax (not averaged)."""
    return softmax(logits) - one_hot


def squared_error(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def huber_loss(pred, target, delta: float) -> float:
    p, t = _same_shape(pred, target)
    if not delta > 0:
        raise InvalidInputError("delta must be positive")
    return float(np.mean(_huber(p - t, delta)))


def huber_loss_grad(pred, target, delta: float):
    """Gradient of the elementwise Huber sum (not averaged)."""
    return np.clip(pred - target, -delta, delta)


def laplace_nll(loc, scale, target) -> float:
    loc, target = _same_shape(loc, target)
    scale = np.asarray(scale)
    if scale.shape != loc.shape:
        raise InvalidInputError("scale shape must match location shape")
    if np.any(scale <= 0):
        raise InvalidInputError("Laplace scale must be positive")
    return float(np.mean(np.log(2 * scale) + np.abs(target - loc) / scale))


def laplace_nll_grad(loc, scale, target):
    """Gradients of the elementwise Laplace NLL sum w.r.t. ``loc`` and ``scale``."""
    r = target - loc
    return -np.sign(r) / scale, 1 / scale - np.abs(r) / (scale * scale)


def kl_divergence(p, q) -> float:
    p, q = _same_shape(p, q)
    val = (p * (np.log(np.maximum(p, LOG_CLAMP)) - np.log(np.maximum(q, LOG_CLAMP)))).sum(axis=-1)
    return float(np.mean(val))


def softplus(x):
    return np.logaddexp(0, x)


def sigmoid(x):
    return 0.5 * (1 + np.tanh(0.5 * x))


# -- optimizer ---------------------------------------------------------------------


@dataclass
class OptimState:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidInputError("learning rate must be positive")


def optimizer_step(params: dict, grads: dict, state: OptimState):
    """One AdamW update (decoupled weight decay, bias-corrected moments), in place."""
    state.step += 1
    bc1 = 1 - state.beta1**state.step
    bc2 = 1 - state.beta2**state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise InvalidInputError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p *= 1 - state.lr * state.weight_decay
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# -- gradient checking ---------------------------------------------------------------


def finite_diff_check(
    loss_fn: Callable,
    params: dict,
    step: float = 1e-5,
    n_samples: int | None = 20,
    seed: int = 0,
    fd_dtype=None,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn(params)`` must return ``(loss, grads)``. At most ``n_samples`` coordinates
    per parameter block are probed. ``fd_dtype`` (e.g. ``np.longdouble``) sets the
    precision of the perturbed evaluations.
    """
    _, grads = loss_fn(params)
    rng = np.random.default_rng(seed)
    dtype = fd_dtype or np.float64
    base = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
    h = dtype(step)
    worst = 0.0
    for name in sorted(grads):
        g = np.asarray(grads[name]).reshape(-1)
        size = g.size
        idx = np.arange(size) if n_samples is None or size <= n_samples else rng.choice(size, n_samples, replace=False)
        for i in idx:
            probe = dict(base)
            arr = base[name].copy().reshape(-1)
            orig = arr[i]
            arr[i] = orig + h
            probe[name] = arr.reshape(base[name].shape)
            up = loss_fn(probe)[0]
            arr = arr.copy()
            arr[i] = orig - h
            probe[name] = arr.reshape(base[name].shape)
            down = loss_fn(probe)[0]
            cd = float((up - down) / (2 * h))
            err = abs(float(g[i]) - cd) / max(1e-8, abs(cd))
            worst = max(worst, err)
    return worst


# -- checkpoints -------------------------------------------------------------------

MAGIC = b"FLXHCKPT"
FORMAT_VERSION = 1


def encode_checkpoint(params: dict, meta: dict | None = None) -> bytes:
    """Binary container: magic, version, JSON metadata, named float64 blocks, SHA-256."""
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    out += struct.pack("<I", len(meta_bytes)) + meta_bytes
    out += struct.pack("<I", len(params))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        key = name.encode()
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    out += hashlib.sha256(out).digest()
    return bytes(out)


def decode_checkpoint(blob: bytes) -> tuple[dict, dict]:
    if len(blob) < len(MAGIC) + 4 + 32 or blob[: len(MAGIC)] != MAGIC:
        raise ParseError("not a checkpoint (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ParseError("checkpoint checksum mismatch")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, body, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    (meta_len,) = take("<I")
    meta = json.loads(body[pos : pos + meta_len].decode())
    pos += meta_len
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = body[pos : pos + name_len].decode()
        pos += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(body):
        raise ParseError("trailing bytes in checkpoint")
    return params, meta


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, meta))


def load_checkpoint(path) -> tuple[dict, dict]:
    return decode_checkpoint(Path(path).read_bytes())
