"""Style/content decomposition of intermediate feature maps.

A feature map ``z`` of shape ``(C, H, W)`` (or a batch ``(N, C, H, W)``)
splits into per-channel spatial statistics, the *style*, and the
style-normalised residual, the *content*::

    z = sigma * content + mu

Swapping the statistics between two samples is the AdaIN operation.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InputError
from .numerics import gaussian_noise

EPS = 1e-5


@dataclass(frozen=True)
class StyleStats:
    mu: np.ndarray  # (..., C)
    sigma: np.ndarray  # (..., C)


def _as_feature(z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim < 3:
        raise InputError(f"feature map needs (C, H, W) axes, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InputError("feature map must be finite")
    return z


def style_of(z, eps=EPS):
    z = _as_feature(z)
    if z.shape[-1] * z.shape[-2] < 2:
        raise DomainError("spatial extent H*W must be at least 2")
    mu = z.mean(axis=(-2, -1))
    var = ((z - mu[..., None, None]) ** 2).mean(axis=(-2, -1))
    return StyleStats(mu=mu, sigma=np.sqrt(var + eps * eps))


def decompose(z, eps=EPS):
    """Return ``(StyleStats, content)`` using population variance over H*W.

    ``sigma = sqrt(var + eps**2)`` so constant channels give zero content
    instead of a division by zero.
    """
    z = _as_feature(z)
    s = style_of(z, eps)
    content = (z - s.mu[..., None, None]) / s.sigma[..., None, None]
    return s, content


def recompose(style, content):
    content = _as_feature(content)
    mu = np.asarray(style.mu, dtype=np.float64)
    sigma = np.asarray(style.sigma, dtype=np.float64)
    if mu.shape != content.shape[:-2] or sigma.shape != mu.shape:
        raise InputError(
            f"style shape {mu.shape}/{sigma.shape} does not match content {content.shape}"
        )
    return sigma[..., None, None] * content + mu[..., None, None]


def _same_shape(a, b):
    a, b = _as_feature(a), _as_feature(b)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def style_swap(z_i, z_j):
    """Content of ``z_i`` rendered in the style of ``z_j``."""
    z_i, z_j = _same_shape(z_i, z_j)
    _, c_i = decompose(z_i)
    return recompose(style_of(z_j), c_i)


def content_swap(z_i, z_j):
    """Style of ``z_i`` kept, content replaced by that of ``z_j``."""
    z_i, z_j = _same_shape(z_i, z_j)
    _, c_j = decompose(z_j)
    return recompose(style_of(z_i), c_j)


def content_noise(z, variance, rng):
    s, c = decompose(z)
    return recompose(s, c + gaussian_noise(rng, c.shape, variance))
