"""Hot inner loops, each in two flavours.

Every kernel exists as a pure-numpy function (``np_*``) and, when numba is
importable, as an ``@njit`` compiled twin (``nb_*``).  The public names
(``layer_norm_forward`` and friends) are bound once at import time:

* ``COSMAE_NUMBA=0`` (also ``false``/``off``/``no``) forces the numpy path;
* otherwise numba is used if it can be imported.

Both paths are deterministic and single-threaded. They agree to rounding
error, not bitwise, so a run is only reproducible within one backend.
``benchmarks/bench_kernels.py`` times one against the other.
"""

from __future__ import annotations

import math
import os

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)

try:  # pragma: no cover - depends on the environment
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False


def _env_wants_numba() -> bool:
    flag = os.environ.get("COSMAE_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


USE_NUMBA = HAVE_NUMBA and _env_wants_numba()
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def np_layer_norm_forward(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def np_layer_norm_backward(dy, xhat, rstd, gamma):
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def np_gelu_forward(x):
    u = _GELU_C * (x + 0.044715 * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def np_gelu_backward(x, dy):
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def np_softmax_forward(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def np_softmax_backward(y, dy):
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


_DIST_CHUNK_ELEMS = 1 << 23  # cap on the [rows, n_train, dim] temporary


def np_sq_distances(query, train):
    # exact differences (no |a|^2 - 2ab + |b|^2 shortcut) so equal points tie exactly
    n, m = query.shape[0], train.shape[0]
    out = np.empty((n, m), dtype=np.result_type(query, train))
    rows = max(1, _DIST_CHUNK_ELEMS // max(1, m * query.shape[1]))
    for lo in range(0, n, rows):
        diff = query[lo:lo + rows, None, :] - train[None, :, :]
        out[lo:lo + rows] = (diff * diff).sum(axis=-1)
    return out


def np_knn_indices(query, train, k, exclude_self):
    """k nearest rows of ``train`` for every row of ``query``.

    Ties in distance go to the lower training index. With ``exclude_self``
    row i of the query is assumed to be row i of ``train`` and is skipped.
    """
    d = np_sq_distances(query, train)
    if exclude_self:
        d[np.arange(d.shape[0]), np.arange(d.shape[0])] = np.inf
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def _bilinear_axis(n_out, start, length, n_in):
    # align_corners=False sampling of the crop window [start, start + length)
    src = (np.arange(n_out) + 0.5) * (length / n_out) - 0.5 + start
    src = np.clip(src, start, start + length - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    return i0, i1, w


def np_crop_resize(img, top, left, height, width, out):
    """Bilinear resample of ``img[:, top:top+height, left:left+width]`` to out x out."""
    _, h_in, w_in = img.shape
    y0, y1, wy = _bilinear_axis(out, top, height, h_in)
    x0, x1, wx = _bilinear_axis(out, left, width, w_in)
    wy = wy.astype(img.dtype)[:, None]
    wx = wx.astype(img.dtype)[None, :]
    a = img[:, y0][:, :, x0]
    b = img[:, y0][:, :, x1]
    c = img[:, y1][:, :, x0]
    d = img[:, y1][:, :, x1]
    top_row = a * (1 - wx) + b * wx
    bot_row = c * (1 - wx) + d * wx
    return (top_row * (1 - wy) + bot_row * wy).astype(img.dtype)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def nb_layer_norm_forward(x, gamma, beta, eps):
        n, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var += c * c
            var /= d
            r = 1.0 / math.sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gamma[j] + beta[j]
        return y, xhat, rstd

    @njit(cache=True)
    def nb_layer_norm_backward(dy, xhat, rstd, gamma):
        n, d = dy.shape
        dx = np.empty_like(dy)
        dgamma = np.zeros(d, dtype=dy.dtype)
        dbeta = np.zeros(d, dtype=dy.dtype)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                g = dy[i, j] * gamma[j]
                m1 += g
                m2 += g * xhat[i, j]
                dgamma[j] += dy[i, j] * xhat[i, j]
                dbeta[j] += dy[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                dx[i, j] = rstd[i] * (dy[i, j] * gamma[j] - m1 - xhat[i, j] * m2)
        return dx, dgamma, dbeta

    # 0.5 * (1 + tanh(u)) == 1 - 1 / (exp(2u) + 1); numba's scalar exp is
    # several times faster than its tanh and saturates cleanly at +-inf
    @njit(cache=True)
    def _nb_gelu_forward_flat(x):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            u = _GELU_C * (v + 0.044715 * v * v * v)
            out[i] = v * (1.0 - 1.0 / (math.exp(2.0 * u) + 1.0))
        return out

    @njit(cache=True)
    def _nb_gelu_backward_flat(x, dy):
        out = np.empty_like(x)
        for i in range(x.size):
            v = x[i]
            t = 1.0 - 2.0 / (math.exp(2.0 * _GELU_C * (v + 0.044715 * v * v * v)) + 1.0)
            du = _GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
            out[i] = dy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        return out

    def nb_gelu_forward(x):
        return _nb_gelu_forward_flat(np.ascontiguousarray(x).ravel()).reshape(x.shape)

    def nb_gelu_backward(x, dy):
        flat = _nb_gelu_backward_flat(
            np.ascontiguousarray(x).ravel(), np.ascontiguousarray(dy, dtype=x.dtype).ravel()
        )
        return flat.reshape(x.shape)

    @njit(cache=True)
    def _nb_softmax_forward_2d(x):
        n, d = x.shape
        y = np.empty_like(x)
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                e = math.exp(x[i, j] - m)
                y[i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(d):
                y[i, j] *= inv
        return y

    @njit(cache=True)
    def _nb_softmax_backward_2d(y, dy):
        n, d = y.shape
        dx = np.empty_like(y)
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += dy[i, j] * y[i, j]
            for j in range(d):
                dx[i, j] = y[i, j] * (dy[i, j] - s)
        return dx

    def nb_softmax_forward(x):
        x2 = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
        return _nb_softmax_forward_2d(x2).reshape(x.shape)

    def nb_softmax_backward(y, dy):
        y2 = np.ascontiguousarray(y).reshape(-1, y.shape[-1])
        dy2 = np.ascontiguousarray(dy, dtype=y.dtype).reshape(-1, y.shape[-1])
        return _nb_softmax_backward_2d(y2, dy2).reshape(y.shape)

    @njit(cache=True)
    def nb_sq_distances(query, train):
        nq, d = query.shape
        nt = train.shape[0]
        out = np.empty((nq, nt), dtype=np.float64)
        for i in range(nq):
            for j in range(nt):
                s = 0.0
                for c in range(d):
                    t = query[i, c] - train[j, c]
                    s += t * t
                out[i, j] = s
        return out

    @njit(cache=True)
    def nb_knn_indices(query, train, k, exclude_self):
        d = nb_sq_distances(query, train)
        nq = d.shape[0]
        out = np.empty((nq, k), dtype=np.int64)
        for i in range(nq):
            row = d[i].copy()
            if exclude_self:
                row[i] = np.inf
            order = np.argsort(row, kind="mergesort")
            for j in range(k):
                out[i, j] = order[j]
        return out

    @njit(cache=True)
    def nb_crop_resize(img, top, left, height, width, out):
        c_n, h_in, w_in = img.shape
        res = np.empty((c_n, out, out), dtype=img.dtype)
        sy = height / out
        sx = width / out
        for oy in range(out):
            fy = (oy + 0.5) * sy - 0.5 + top
            fy = min(max(fy, top), top + height - 1)
            y0 = int(math.floor(fy))
            y1 = min(y0 + 1, h_in - 1)
            wy = fy - y0
            for ox in range(out):
                fx = (ox + 0.5) * sx - 0.5 + left
                fx = min(max(fx, left), left + width - 1)
                x0 = int(math.floor(fx))
                x1 = min(x0 + 1, w_in - 1)
                wx = fx - x0
                for c in range(c_n):
                    t = img[c, y0, x0] * (1 - wx) + img[c, y0, x1] * wx
                    b = img[c, y1, x0] * (1 - wx) + img[c, y1, x1] * wx
                    res[c, oy, ox] = t * (1 - wy) + b * wy
        return res


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def _ln_forward_dispatch(x, gamma, beta, eps):
    x2 = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    y, xhat, rstd = nb_layer_norm_forward(
        x2, np.ascontiguousarray(gamma, dtype=x.dtype), np.ascontiguousarray(beta, dtype=x.dtype), eps
    )
    return y.reshape(x.shape), xhat.reshape(x.shape), rstd


def _ln_backward_dispatch(dy, xhat, rstd, gamma):
    d = xhat.shape[-1]
    dx, dg, db = nb_layer_norm_backward(
        np.ascontiguousarray(dy, dtype=xhat.dtype).reshape(-1, d),
        np.ascontiguousarray(xhat).reshape(-1, d),
        rstd,
        np.ascontiguousarray(gamma, dtype=xhat.dtype),
    )
    return dx.reshape(xhat.shape), dg, db


def _np_ln_forward_nd(x, gamma, beta, eps):
    y, xhat, rstd = np_layer_norm_forward(x.reshape(-1, x.shape[-1]), gamma, beta, eps)
    return y.reshape(x.shape), xhat.reshape(x.shape), rstd


def _np_ln_backward_nd(dy, xhat, rstd, gamma):
    d = xhat.shape[-1]
    dx, dg, db = np_layer_norm_backward(dy.reshape(-1, d), xhat.reshape(-1, d), rstd, gamma)
    return dx.reshape(xhat.shape), dg, db


if USE_NUMBA:
    layer_norm_forward = _ln_forward_dispatch
    layer_norm_backward = _ln_backward_dispatch
    gelu_forward = nb_gelu_forward
    gelu_backward = nb_gelu_backward
    softmax_forward = nb_softmax_forward
    softmax_backward = nb_softmax_backward

    def knn_indices(query, train, k, exclude_self=False):
        return nb_knn_indices(
            np.ascontiguousarray(query, dtype=np.float64),
            np.ascontiguousarray(train, dtype=np.float64),
            int(k),
            bool(exclude_self),
        )

    def crop_resize(img, top, left, height, width, out):
        return nb_crop_resize(np.ascontiguousarray(img), top, left, height, width, out)

else:
    layer_norm_forward = _np_ln_forward_nd
    layer_norm_backward = _np_ln_backward_nd
    gelu_forward = np_gelu_forward
    gelu_backward = np_gelu_backward
    softmax_forward = np_softmax_forward
    softmax_backward = np_softmax_backward

    def knn_indices(query, train, k, exclude_self=False):
        return np_knn_indices(
            np.asarray(query, dtype=np.float64), np.asarray(train, dtype=np.float64), int(k), bool(exclude_self)
        )

    crop_resize = np_crop_resize
