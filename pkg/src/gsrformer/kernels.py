"""Hot row kernels with a compiled core and a numpy fallback.

The compiled module ``gsrformer._kernels`` is used when it imports and the
environment variable ``GSR_PURE_PYTHON`` is unset or ``0``. Both paths honour
the same contracts; they agree to rounding, not bit for bit, so a replay must
use the backend that produced the original run.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np


def _softmax_rows(x):
    m = x.max(axis=1, keepdims=True) if x.shape[1] else np.zeros((x.shape[0], 1), x.dtype)
    dead = ~np.isfinite(m)
    m = np.where(dead, 0.0, m)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(dead, 0.0, e / np.where(dead, 1.0, s))
    return out.astype(x.dtype, copy=False)


def _softmax_rows_backward(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def _log_softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    s = np.log(np.exp(x - m).sum(axis=1, keepdims=True)) + m
    return x - s


def _layer_norm_rows(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    d = x - mean
    var = (d * d).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = d * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def _layer_norm_rows_backward(gy, xhat, rstd, gamma):
    c = gy.shape[1]
    gh = gy * gamma
    m1 = gh.sum(axis=1, keepdims=True) / c
    m2 = (gh * xhat).sum(axis=1, keepdims=True) / c
    gx = rstd[:, None] * (gh - m1 - xhat * m2)
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def _sorted_sum_rows(x):
    if x.shape[1] == 0:
        return np.zeros(x.shape[0], dtype=x.dtype)
    # cumsum accumulates strictly left to right
    return np.cumsum(np.sort(x, axis=1), axis=1)[:, -1]


def _role_similarity_scan(q_feats, q_types, q_verb, offsets, e_types, e_feats, e_verbs):
    n = e_verbs.shape[0]
    total = np.zeros(n)
    shared = np.zeros(n, dtype=np.int64)
    owner = np.repeat(np.arange(n), np.diff(offsets))
    for a in range(q_feats.shape[0]):
        rows = np.flatnonzero(e_types == q_types[a])
        if rows.size == 0:
            continue
        # row-wise reduction: each entry's dot is independent of how many rows are scanned
        dots = np.clip((e_feats[rows] * q_feats[a]).sum(axis=1), -1.0, 1.0)
        total[owner[rows]] += dots
        shared[owner[rows]] += 1
    fallback = shared == 0
    scores = np.empty(n)
    scores[~fallback] = total[~fallback] / shared[~fallback]
    scores[fallback] = np.clip((e_verbs[fallback] * q_verb).sum(axis=1), -1.0, 1.0)
    return scores, fallback.astype(np.uint8)


fallback = SimpleNamespace(
    softmax_rows=_softmax_rows,
    softmax_rows_backward=_softmax_rows_backward,
    log_softmax_rows=_log_softmax_rows,
    layer_norm_rows=_layer_norm_rows,
    layer_norm_rows_backward=_layer_norm_rows_backward,
    sorted_sum_rows=_sorted_sum_rows,
    role_similarity_scan=_role_similarity_scan,
)

try:
    from gsrformer import _kernels as compiled
except ImportError:  # extension not built
    compiled = None

if compiled is not None and os.environ.get("GSR_PURE_PYTHON", "0") in ("", "0"):
    impl = compiled
    BACKEND = "compiled"
else:
    impl = fallback
    BACKEND = "python"


def _c(a):
    return np.ascontiguousarray(a)


def softmax_rows(x):
    return impl.softmax_rows(_c(x))


def softmax_rows_backward(y, gy):
    return impl.softmax_rows_backward(_c(y), _c(gy).astype(y.dtype, copy=False))


def log_softmax_rows(x):
    return impl.log_softmax_rows(_c(x))


def layer_norm_rows(x, gamma, beta, eps):
    x = _c(x)
    return impl.layer_norm_rows(x, _c(gamma).astype(x.dtype, copy=False),
                                _c(beta).astype(x.dtype, copy=False), float(eps))


def layer_norm_rows_backward(gy, xhat, rstd, gamma):
    return impl.layer_norm_rows_backward(_c(gy).astype(xhat.dtype, copy=False), _c(xhat), _c(rstd),
                                         _c(gamma).astype(xhat.dtype, copy=False))


def sorted_sum_rows(x):
    return impl.sorted_sum_rows(_c(x))


def role_similarity_scan(q_feats, q_types, q_verb, offsets, e_types, e_feats, e_verbs):
    return impl.role_similarity_scan(
        _c(q_feats).astype(np.float64, copy=False),
        _c(q_types).astype(np.int64, copy=False),
        _c(q_verb).astype(np.float64, copy=False),
        _c(offsets).astype(np.int64, copy=False),
        _c(e_types).astype(np.int64, copy=False),
        _c(e_feats).astype(np.float64, copy=False),
        _c(e_verbs).astype(np.float64, copy=False),
    )
