"""Probability kernels and seeded randomness shared by every other module.

Dense arrays are plain ``numpy.ndarray`` objects in float64. Functions
operate on the last axis so a batch of logit vectors can be passed as an
``(N, K)`` array.
"""

import numpy as np

from .errors import DomainError, InputError

KL_FLOOR = 1e-12


def _check_logits(logits):
    f = np.asarray(logits, dtype=np.float64)
    if f.ndim == 0 or f.shape[-1] < 2:
        raise InputError(f"need at least 2 classes, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise InputError("logits must be finite")
    return f


def _check_temperature(T):
    T = np.asarray(T, dtype=np.float64)
    if not np.all(np.isfinite(T)) or np.any(T <= 0):
        raise DomainError(f"temperature must be positive and finite, got {T}")
    return T


def logsumexp(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def log_softmax_t(logits, T=1.0):
    f = _check_logits(logits)
    T = _check_temperature(T)
    if T.ndim:
        T = T[..., None]
    z = f / T
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax_t(logits, T=1.0):
    """Temperature-scaled softmax ``exp(f_k/T) / sum_j exp(f_j/T)``.

    ``T`` may be a scalar or an array broadcastable against the leading
    axes of ``logits`` (one temperature per sample).
    """
    f = _check_logits(logits)
    T = _check_temperature(T)
    if T.ndim:
        T = T[..., None]
    z = f / T
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def kl_divergence(p, q, floor=KL_FLOOR):
    """KL(p || q) along the last axis, with ``0 log 0 = 0``.

    Entries of ``q`` are floored at ``floor`` so saturated softmax outputs
    do not produce infinities.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InputError(f"length mismatch: {p.shape} vs {q.shape}")
    logq = np.log(np.maximum(q, floor))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - logq), 0.0)
    # rounding can leave tiny negatives when p == q
    return np.maximum(np.sum(terms, axis=-1), 0.0)


def make_rng(seed):
    """Counter-based generator (Philox) for a 64-bit seed."""
    return np.random.Generator(np.random.Philox(int(seed)))


def split_rng(rng, n):
    """Independent child generators; the parent is left usable."""
    return rng.spawn(n)


def derive_rng(seed, *keys):
    """Generator for a named sub-stream, independent of call order.

    ``derive_rng(s, 2, 1)`` always yields the same stream regardless of
    which other streams were drawn before it.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def gaussian_noise(rng, shape, variance):
    if variance < 0:
        raise DomainError(f"variance must be non-negative, got {variance}")
    if variance == 0:
        return np.zeros(shape, dtype=np.float64)
    return rng.normal(0.0, np.sqrt(variance), size=shape)
