"""Plain-array numerical helpers shared by the models and the metrics."""

from __future__ import annotations

import warnings

import numpy as np


class ZeroNormWarning(RuntimeWarning):
    """A cosine similarity was requested for a zero vector."""


def softmax(logits):
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"softmax input is not finite: {x}")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        warnings.warn("cosine similarity of a zero vector; returning 0", ZeroNormWarning, stacklevel=2)
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _check_probs(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probabilities must be nonnegative")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("probabilities must sum to 1")
    return p


def _invert_cdf(p, u):
    cdf = np.cumsum(p, axis=-1)
    idx = (cdf <= u[..., None]).sum(axis=-1)
    # u can land past the last cumulative when rounding leaves cdf[-1] < 1;
    # fall back to the last index with positive mass
    last = p.shape[-1] - 1 - np.argmax(p[..., ::-1] > 0, axis=-1)
    return np.minimum(idx, last)


def sample_categorical(probs, rng) -> int:
    """Inverse-CDF draw using exactly one uniform from ``rng``."""
    p = _check_probs(probs)
    return int(_invert_cdf(p[None, :], np.array([rng.uniform()]))[0])


def sample_categorical_rows(probs, rng):
    """One draw per row of a (n, V) probability matrix, n uniforms consumed."""
    p = _check_probs(probs)
    return _invert_cdf(p, rng.uniform(p.shape[0])).astype(np.int64)


def grad_check(f, x, analytic, step=1e-5):
    """Max relative error between ``analytic`` and central differences of ``f``.

    ``f`` maps an array shaped like ``x`` to a float. The error per
    coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if not 0 < step <= 1e-2:
        raise ValueError("step must lie in (0, 1e-2]")
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite loss while probing coordinate {i}")
        num = (fp - fm) / (2 * step)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
