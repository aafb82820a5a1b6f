# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled float32 kernels. Signatures mirror ``_kernels_py``.

Built with -ffast-math so expf vectorizes; callers screen inputs for
non-finite values before they get here, and no kernel relies on inf.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport expf, sqrtf, logf

cnp.import_array()

cdef float GELU_C = <float>0.7978845608028654
cdef float GELU_A = <float>0.044715
cdef float ONE = 1.0
cdef float TWO = 2.0
cdef float HALF = 0.5
cdef float CLAMP = 15.0


cdef inline float _sig2(float z) noexcept nogil:
    # sigmoid(2z) == (1 + tanh z) / 2, without the cancellation of 1 - tanh^2
    z = CLAMP if z > CLAMP else z
    z = -CLAMP if z < -CLAMP else z
    cdef float e = expf(TWO * z)
    return e / (e + ONE)


cdef void _gelu(const float* x, float* y, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef float v
    for i in range(n):
        v = x[i]
        y[i] = v * _sig2(GELU_C * (v + GELU_A * v * v * v))


cdef void _gelu_grad(const float* x, const float* gy, float* gx, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef float v, v2, s
    cdef float a3 = <float>3.0 * GELU_A
    for i in range(n):
        v = x[i]
        v2 = v * v
        s = _sig2(GELU_C * (v + GELU_A * v2 * v))
        gx[i] = gy[i] * (s + TWO * v * s * (ONE - s) * GELU_C * (ONE + a3 * v2))


def gelu_forward(x):
    cdef float[::1] xf = np.ascontiguousarray(x).reshape(-1)
    out = np.empty(x.shape, dtype=np.float32)
    cdef float[::1] yf = out.reshape(-1)
    if xf.shape[0]:
        _gelu(&xf[0], &yf[0], xf.shape[0])
    return out


def gelu_backward(x, gy):
    cdef float[::1] xf = np.ascontiguousarray(x).reshape(-1)
    cdef float[::1] gf = np.ascontiguousarray(gy).reshape(-1)
    out = np.empty(x.shape, dtype=np.float32)
    cdef float[::1] of = out.reshape(-1)
    if xf.shape[0]:
        _gelu_grad(&xf[0], &gf[0], &of[0], xf.shape[0])
    return out


def layernorm_forward(x, gamma, beta, double eps):
    cdef float[:, ::1] xv = np.ascontiguousarray(x)
    cdef float[::1] g = np.ascontiguousarray(gamma)
    cdef float[::1] b = np.ascontiguousarray(beta)
    cdef Py_ssize_t n = xv.shape[0], d = xv.shape[1], i, j
    y = np.empty((n, d), dtype=np.float32)
    mean = np.empty(n, dtype=np.float32)
    rstd = np.empty(n, dtype=np.float32)
    cdef float[:, ::1] yv = y
    cdef float[::1] mv = mean
    cdef float[::1] rv = rstd
    cdef float s, mu, c, var, r
    cdef float epsf = <float>eps
    for i in range(n):
        s = 0.0
        for j in range(d):
            s = s + xv[i, j]
        mu = s / d
        var = 0.0
        for j in range(d):
            c = xv[i, j] - mu
            var = var + c * c
        var = var / d
        r = ONE / sqrtf(var + epsf)
        mv[i] = mu
        rv[i] = r
        for j in range(d):
            yv[i, j] = (xv[i, j] - mu) * r * g[j] + b[j]
    return y, mean, rstd


def layernorm_backward(gy, x, mean, rstd, gamma):
    cdef float[:, ::1] gyv = np.ascontiguousarray(gy)
    cdef float[:, ::1] xv = np.ascontiguousarray(x)
    cdef float[::1] mv = mean
    cdef float[::1] rv = rstd
    cdef float[::1] g = np.ascontiguousarray(gamma)
    cdef Py_ssize_t n = xv.shape[0], d = xv.shape[1], i, j
    gx = np.empty((n, d), dtype=np.float32)
    gg = np.zeros(d, dtype=np.float32)
    gb = np.zeros(d, dtype=np.float32)
    cdef float[:, ::1] gxv = gx
    cdef float[::1] ggv = gg
    cdef float[::1] gbv = gb
    cdef float mu, r, xh, gxh, s1, s2
    for i in range(n):
        mu = mv[i]
        r = rv[i]
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            xh = (xv[i, j] - mu) * r
            gxh = gyv[i, j] * g[j]
            s1 = s1 + gxh
            s2 = s2 + gxh * xh
            ggv[j] += gyv[i, j] * xh
            gbv[j] += gyv[i, j]
        s1 = s1 / d
        s2 = s2 / d
        for j in range(d):
            xh = (xv[i, j] - mu) * r
            gxv[i, j] = r * (gyv[i, j] * g[j] - s1 - xh * s2)
    return gx, gg, gb


cdef void _softmax_row(const float* x, float* y, Py_ssize_t lim, Py_ssize_t t, float sc) noexcept nogil:
    cdef Py_ssize_t j
    cdef float m = x[0] * sc, z, s = 0.0
    for j in range(1, lim):
        z = x[j] * sc
        m = z if z > m else m
    for j in range(lim):
        z = expf(x[j] * sc - m)
        y[j] = z
        s = s + z
    s = ONE / s
    for j in range(lim):
        y[j] = y[j] * s
    for j in range(lim, t):
        y[j] = 0.0


def softmax_forward(x, double scale, bint causal):
    shape = x.shape
    cdef Py_ssize_t t = shape[len(shape) - 1]
    out = np.empty(shape, dtype=np.float32)
    if t == 0 or out.size == 0:
        return out
    cdef float[:, ::1] xv = np.ascontiguousarray(x).reshape(-1, t)
    cdef float[:, ::1] ov = out.reshape(-1, t)
    cdef Py_ssize_t rows = xv.shape[0], r
    cdef float sc = <float>scale
    for r in range(rows):
        _softmax_row(&xv[r, 0], &ov[r, 0], (r % t) + 1 if causal else t, t, sc)
    return out


def softmax_backward(p, gp, double scale):
    shape = p.shape
    cdef Py_ssize_t t = shape[len(shape) - 1]
    out = np.empty(shape, dtype=np.float32)
    if t == 0 or out.size == 0:
        return out
    cdef float[:, ::1] pv = np.ascontiguousarray(p).reshape(-1, t)
    cdef float[:, ::1] gv = np.ascontiguousarray(gp).reshape(-1, t)
    cdef float[:, ::1] ov = out.reshape(-1, t)
    cdef Py_ssize_t rows = pv.shape[0], r, j
    cdef float sc = <float>scale, inner
    for r in range(rows):
        inner = 0.0
        for j in range(t):
            inner = inner + gv[r, j] * pv[r, j]
        for j in range(t):
            ov[r, j] = sc * pv[r, j] * (gv[r, j] - inner)
    return out


def cross_entropy_forward(logits, targets):
    cdef float[:, ::1] lv = np.ascontiguousarray(logits)
    cdef cnp.int64_t[::1] tv = np.ascontiguousarray(targets, dtype=np.int64)
    cdef Py_ssize_t n = lv.shape[0], v = lv.shape[1], i, j
    losses = np.empty(n, dtype=np.float32)
    probs = np.empty((n, v), dtype=np.float32)
    cdef float[::1] lo = losses
    cdef float[:, ::1] pv = probs
    cdef float m, s
    for i in range(n):
        _softmax_row(&lv[i, 0], &pv[i, 0], v, v, ONE)
        # loss from log-sum-exp, not log(prob), to keep tail precision
        m = lv[i, 0]
        for j in range(1, v):
            m = lv[i, j] if lv[i, j] > m else m
        s = 0.0
        for j in range(v):
            s = s + expf(lv[i, j] - m)
        lo[i] = logf(s) - (lv[i, tv[i]] - m)
    return losses, probs


def cross_entropy_backward(probs, targets, grow):
    cdef float[:, ::1] pv = np.ascontiguousarray(probs)
    cdef cnp.int64_t[::1] tv = np.ascontiguousarray(targets, dtype=np.int64)
    cdef float[::1] gr = np.ascontiguousarray(grow)
    cdef Py_ssize_t n = pv.shape[0], v = pv.shape[1], i, j
    out = np.empty((n, v), dtype=np.float32)
    cdef float[:, ::1] ov = out
    for i in range(n):
        for j in range(v):
            ov[i, j] = pv[i, j] * gr[i]
        ov[i, tv[i]] -= gr[i]
    return out


cdef void _adam(float* p, const float* g, float* m, float* v, Py_ssize_t n,
                float lr, float b1, float b2, float bc1, float bc2, float eps) noexcept nogil:
    cdef Py_ssize_t i
    cdef float gi, ob1 = ONE - b1, ob2 = ONE - b2
    for i in range(n):
        gi = g[i]
        m[i] = b1 * m[i] + ob1 * gi
        v[i] = b2 * v[i] + ob2 * (gi * gi)
        p[i] = p[i] - lr * (m[i] / bc1) / (sqrtf(v[i] / bc2) + eps)


def adam_update(p, g, m, v, double lr, double beta1, double beta2, double eps, long step):
    cdef float[::1] pv = p
    cdef float[::1] gv = g
    cdef float[::1] mv = m
    cdef float[::1] vv = v
    if pv.shape[0] == 0:
        return
    _adam(&pv[0], &gv[0], &mv[0], &vv[0], pv.shape[0], <float>lr, <float>beta1, <float>beta2,
          <float>(1.0 - beta1 ** step), <float>(1.0 - beta2 ** step), <float>eps)


cdef bint _all_finite(const cnp.uint32_t* bits, Py_ssize_t n) noexcept nogil:
    # exponent bits all set means inf or nan; integer test survives -ffast-math
    cdef Py_ssize_t i
    cdef cnp.uint32_t bad = 0
    for i in range(n):
        bad |= ((bits[i] & 0x7f800000u) == 0x7f800000u)
    return bad == 0


def all_finite(x):
    cdef cnp.uint32_t[::1] b = np.ascontiguousarray(x).reshape(-1).view(np.uint32)
    if b.shape[0] == 0:
        return True
    return _all_finite(&b[0], b.shape[0])
