"""Numerically stable scalar/vector nonlinearities shared across modules.

Everything runs in double precision. The stable forms matter: raw scores
reach the tens once a model trains, and naive exp() overflows there.
"""

from __future__ import annotations

import numpy as np


def logistic(x):
    """Sigmoid with the large-|x| branches folded for stability."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def softmax(x, axis=-1):
    """Max-subtracted softmax along ``axis``."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softplus(x):
    """log(1 + exp(x)) without overflow, elementwise."""
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))
