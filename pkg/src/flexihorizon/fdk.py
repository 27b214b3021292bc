"""Huber-smoothed Fréchet distance kernel (FDK).

The exact Fréchet recursion ``R(i,j) = max(d_ij, min(R(i-1,j), R(i,j-1), R(i-1,j-1)))``
is relaxed by replacing the ``min`` over predecessors with a Gibbs-weighted harmonic
mean whose weights are ``exp(-beta * H(v, delta))``.  The relaxation

* never undershoots the exact distance and tightens monotonically as ``beta`` grows,
* is idempotent, so long runs of tied lattice cells do not accumulate bias,
* absorbs exact zeros, so identical curves score exactly zero,
* is symmetric in its two arguments.

Similarity is ``exp(-distance / gamma)``; ``epsilon`` adds a bonus per coincident
point pair to the similarity only.  All routines preserve the floating dtype of
their inputs (``np.longdouble`` works for high-precision checks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .trajgeo import pairwise_distances, points_of

COINCIDENCE_TOL = 1e-12


@dataclass(frozen=True)
class FdkParams:
    beta: float = 100.0
    gamma: float = 1.0
    delta: float = 0.1
    epsilon: float = 0.0

    def __post_init__(self):
        if not self.beta > 0:
            raise InvalidInputError(f"beta must be positive, got {self.beta}")
        if not self.gamma > 0:
            raise InvalidInputError(f"gamma must be positive, got {self.gamma}")
        if not self.delta > 0:
            raise InvalidInputError(f"delta must be positive, got {self.delta}")
        if not self.epsilon >= 0:
            raise InvalidInputError(f"epsilon must be non-negative, got {self.epsilon}")


def _huber(z, delta):
    a = np.abs(z)
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def huber(z, delta):
    """Huber smoothing: ``z**2 / 2`` inside ``[-delta, delta]``, linear outside."""
    if not delta > 0:
        raise InvalidInputError("delta must be positive")
    out = _huber(z, delta)
    return float(out) if np.ndim(out) == 0 else out


def _gibbs(values: np.ndarray, beta: float, delta: float) -> np.ndarray:
    logits = -beta * _huber(values, delta)
    w = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return w / w.sum(axis=-1, keepdims=True)


def soft_min_weighted(values, beta: float, delta: float) -> float:
    """``sum(v * w) / sum(w)`` with ``w = exp(-beta * huber(v, delta))``."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise InvalidInputError("soft minimum of an empty sequence")
    if not beta > 0:
        raise InvalidInputError("beta must be positive")
    return float((_gibbs(v, beta, delta) * v).sum())


def _soft_min_harmonic(values: np.ndarray, beta: float, delta: float):
    """Gibbs-weighted harmonic mean along the last axis and its Jacobian.

    Rows containing an exact zero return zero with a zero Jacobian.
    """
    p = _gibbs(values, beta, delta)
    zero = np.any(values == 0, axis=-1)
    inv = 1 / np.where(values == 0, 1, values)
    S = (p * inv).sum(axis=-1)
    hm = 1 / S
    dlogit = -beta * np.clip(values, -delta, delta)
    dS = -p * inv * inv + p * dlogit * (inv - S[..., None])
    jac = -(hm * hm)[..., None] * dS
    hm = np.where(zero, 0, hm)
    jac = np.where(zero[..., None], 0, jac)
    return hm, jac


def soft_min_harmonic(values, beta: float, delta: float) -> float:
    """Harmonic mean of ``values`` under the weights of :func:`soft_min_weighted`."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise InvalidInputError("soft minimum of an empty sequence")
    if np.any(v < 0):
        raise InvalidInputError("harmonic soft minimum needs non-negative values")
    if not beta > 0:
        raise InvalidInputError("beta must be positive")
    return float(_soft_min_harmonic(v, beta, delta)[0])


def _soft_lattice(dist: np.ndarray, beta: float, delta: float, with_tape: bool = False):
    """Relaxed Fréchet recursion over a batch of distance matrices ``(B, m, n)``."""
    B, m, n = dist.shape
    R = np.empty_like(dist)
    tape = {}
    R[:, 0, 0] = dist[:, 0, 0]
    for i in range(m):
        for j in range(n):
            if i == 0 and j == 0:
                continue
            # (up, left, diagonal): transposing swaps only the first two, keeping sums bitwise equal
            preds = [(a, b) for a, b in ((i - 1, j), (i, j - 1), (i - 1, j - 1)) if a >= 0 and b >= 0]
            if len(preds) == 1:
                s = R[:, preds[0][0], preds[0][1]]
                jin = None
            else:
                V = np.stack([R[:, a, b] for a, b in preds], axis=-1)
                s, jin = _soft_min_harmonic(V, beta, delta)
            d = dist[:, i, j]
            take_d = d >= s
            R[:, i, j] = np.where(take_d, d, s)
            if with_tape:
                tape[i, j] = (preds, jin, take_d)
    return R, tape


def _lattice_backward(dist: np.ndarray, tape) -> np.ndarray:
    """Adjoint of the final lattice cell with respect to every distance entry."""
    B, m, n = dist.shape
    adj = np.zeros_like(dist)
    gdist = np.zeros_like(dist)
    adj[:, m - 1, n - 1] = 1
    for i in range(m - 1, -1, -1):
        for j in range(n - 1, -1, -1):
            a = adj[:, i, j]
            if i == 0 and j == 0:
                gdist[:, 0, 0] += a
                continue
            preds, jin, take_d = tape[i, j]
            gdist[:, i, j] += np.where(take_d, a, 0)
            gs = np.where(take_d, 0, a)
            if jin is None:
                adj[:, preds[0][0], preds[0][1]] += gs
            else:
                for k, (pa, pb) in enumerate(preds):
                    adj[:, pa, pb] += gs * jin[:, k]
    return gdist


def _float_array(x) -> np.ndarray:
    a = np.asarray(x)
    return a if np.issubdtype(a.dtype, np.floating) else a.astype(np.float64)


def _batched(X, Y):
    a, b = _float_array(X), _float_array(Y)
    if a.ndim != 3 or b.ndim != 3 or a.shape[-1] != 2 or b.shape[-1] != 2:
        raise InvalidInputError("batched inputs must be (B, n, 2)")
    if a.shape[1] == 0 or b.shape[1] == 0:
        raise InvalidInputError("empty trajectory")
    if a.shape[0] != b.shape[0]:
        raise InvalidInputError("batch sizes differ")
    return a, b


def fdk_distance_batch(X, Y, params: FdkParams = FdkParams()) -> np.ndarray:
    a, b = _batched(X, Y)
    R, _ = _soft_lattice(pairwise_distances(a, b), params.beta, params.delta)
    return R[:, -1, -1]


def fdk_similarity_batch(X, Y, params: FdkParams = FdkParams()) -> np.ndarray:
    a, b = _batched(X, Y)
    dist = pairwise_distances(a, b)
    R, _ = _soft_lattice(dist, params.beta, params.delta)
    log_sim = -R[:, -1, -1] / params.gamma
    if params.epsilon > 0:
        coincident = (dist <= COINCIDENCE_TOL).sum(axis=(1, 2))
        log_sim = log_sim + params.epsilon * coincident / max(a.shape[1], b.shape[1])
    return np.exp(log_sim)


def _single(X, Y):
    if isinstance(X, np.ndarray) and X.dtype == np.longdouble:
        a, b = X, np.asarray(points_of(Y), dtype=np.longdouble)
    else:
        a, b = points_of(X), points_of(Y)
    if len(a) == 0 or len(b) == 0:
        raise InvalidInputError("empty trajectory")
    return a[None], b[None]


def fdk_similarity(X, Y, params: FdkParams = FdkParams()) -> float:
    return float(fdk_similarity_batch(*_single(X, Y), params)[0])


def fdk_distance(X, Y, params: FdkParams = FdkParams()):
    """Distance form of the kernel, ``-gamma * log(similarity)`` at ``epsilon = 0``.

    Returns a Python float, or a ``np.longdouble`` scalar for long-double input.
    """
    out = fdk_distance_batch(*_single(X, Y), params)[0]
    return out if out.dtype == np.longdouble else float(out)


def _unit_diffs(a, b):
    diff = a[..., :, None, :] - b[..., None, :, :]
    norm = np.hypot(diff[..., 0], diff[..., 1])
    safe = np.where(norm > 0, norm, 1)
    # zero-distance pairs contribute a zero subgradient
    return np.where((norm > 0)[..., None], diff / safe[..., None], 0)


def fdk_distance_grad_batch(X, Y, params: FdkParams = FdkParams()) -> np.ndarray:
    """Gradient of :func:`fdk_distance_batch` with respect to ``X``, shape ``(B, m, 2)``."""
    a, b = _batched(X, Y)
    dist = pairwise_distances(a, b)
    _, tape = _soft_lattice(dist, params.beta, params.delta, with_tape=True)
    gdist = _lattice_backward(dist, tape)
    return np.einsum("bij,bijk->bik", gdist, _unit_diffs(a, b))


def fdk_distance_grad(X, Y, params: FdkParams = FdkParams()) -> np.ndarray:
    return fdk_distance_grad_batch(*_single(X, Y), params)[0]
