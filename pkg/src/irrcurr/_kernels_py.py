"""Pure-numpy reference kernels.

Every function here has a compiled twin in ``_kernels.pyx`` with the same
signature. These also serve float64 inputs, which the compiled path rejects.
"""

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


def gelu_forward(x):
    dt = x.dtype.type
    inner = dt(GELU_C) * (x + dt(GELU_A) * x * x * x)
    return dt(0.5) * x * (dt(1.0) + np.tanh(inner))


def gelu_backward(x, gy):
    dt = x.dtype.type
    x2 = x * x
    t = np.tanh(dt(GELU_C) * (x + dt(GELU_A) * x2 * x))
    dinner = dt(GELU_C) * (dt(1.0) + dt(3.0 * GELU_A) * x2)
    return gy * (dt(0.5) * (dt(1.0) + t) + dt(0.5) * x * (dt(1.0) - t * t) * dinner)


def layernorm_forward(x, gamma, beta, eps):
    """Row-wise layer norm of a 2-D array. Returns (y, mean, rstd)."""
    dt = x.dtype.type
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = dt(1.0) / np.sqrt(var + dt(eps))
    y = xc * rstd[:, None] * gamma + beta
    return y, mean, rstd


def layernorm_backward(gy, x, mean, rstd, gamma):
    xhat = (x - mean[:, None]) * rstd[:, None]
    ggamma = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    gxhat = gy * gamma
    gx = rstd[:, None] * (
        gxhat
        - gxhat.mean(axis=1, keepdims=True)
        - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)
    )
    return gx, ggamma, gbeta


def softmax_forward(x, scale, causal):
    """Softmax over the last axis of ``scale * x``.

    With ``causal`` the last two axes are a square (query, key) block and keys
    past the query position are masked out.
    """
    dt = x.dtype.type
    z = x * dt(scale)
    if causal:
        t = x.shape[-1]
        mask = np.triu(np.ones((t, t), dtype=bool), k=1)
        z = np.where(mask, -np.inf, z).astype(x.dtype, copy=False)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p, gp, scale):
    dt = p.dtype.type
    inner = (gp * p).sum(axis=-1, keepdims=True)
    return dt(scale) * p * (gp - inner)


def cross_entropy_forward(logits, targets):
    """Per-row NLL of integer targets. Returns (losses, probs)."""
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    lse = np.log(s)
    rows = np.arange(logits.shape[0])
    losses = lse[:, 0] - z[rows, targets]
    return losses, e / s


def cross_entropy_backward(probs, targets, grow):
    g = probs * grow[:, None]
    rows = np.arange(probs.shape[0])
    g[rows, targets] -= grow
    return g


def adam_update(p, g, m, v, lr, beta1, beta2, eps, step):
    """In-place Adam step on flat float arrays."""
    dt = p.dtype.type
    m *= dt(beta1)
    m += dt(1.0 - beta1) * g
    v *= dt(beta2)
    v += dt(1.0 - beta2) * (g * g)
    bc1 = dt(1.0 - beta1**step)
    bc2 = dt(1.0 - beta2**step)
    p -= dt(lr) * (m / bc1) / (np.sqrt(v / bc2) + dt(eps))


def all_finite(x):
    return bool(np.isfinite(x).all())
