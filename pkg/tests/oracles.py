"""Slow, obviously-correct reference implementations used only by tests.

Everything here is written with explicit Python loops or float64 math and
shares no code with the package.
"""

import math

import numpy as np


def conv2d(x, w, b=None, stride=1, pad=0, groups=1):
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    cout_g = cout // groups
    for bi in range(n):
        for o in range(cout):
            g = o // cout_g
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cin_g):
                        ci = g * cin_g + c
                        for u in range(kh):
                            for v in range(kw):
                                y, xx = i * stride + u - pad, j * stride + v - pad
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += float(x[bi, ci, y, xx]) * float(w[o, c, u, v])
                    out[bi, o, i, j] = acc
    return out


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def matmul(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    return [[sum(float(a[i][t]) * float(b[t][j]) for t in range(k)) for j in range(m)] for i in range(n)]


def sha(q, k, v, scale):
    """q,k [N,L,d], v [N,L,Cv] -> [N,L,Cv]."""
    n, L, d = q.shape
    out = np.zeros((n, L, v.shape[2]))
    for b in range(n):
        for i in range(L):
            scores = [sum(float(q[b, i, t]) * float(k[b, j, t]) for t in range(d)) * scale for j in range(L)]
            p = softmax_row(scores)
            for c in range(v.shape[2]):
                out[b, i, c] = sum(p[j] * float(v[b, j, c]) for j in range(L))
    return out


def permute(x, axes):
    out_shape = tuple(x.shape[a] for a in axes)
    out = np.zeros(out_shape, dtype=x.dtype)
    for idx in np.ndindex(x.shape):
        out[tuple(idx[a] for a in axes)] = x[idx]
    return out


def window_partition(x, p):
    n, c, h, w = x.shape
    gh, gw = h // p, w // p
    out = np.zeros((n * gh * gw, c, p, p), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for y in range(h):
                for xx in range(w):
                    win = b * gh * gw + (y // p) * gw + (xx // p)
                    out[win, ch, y % p, xx % p] = x[b, ch, y, xx]
    return out


def batchnorm(x, gamma, beta, mean, var, eps):
    shape = (1, -1) + (1,) * (x.ndim - 2)
    r = lambda t: np.asarray(t, dtype=np.float64).reshape(shape)
    return (x.astype(np.float64) - r(mean)) / np.sqrt(r(var) + eps) * r(gamma) + r(beta)


def gelu(v):
    return 0.5 * v * (1 + math.erf(v / math.sqrt(2)))


def sigmoid(v):
    return 1 / (1 + np.exp(-v))


def shma(x, w, bn=None, scale=None):
    """float64 modulation attention.

    ``w`` maps q/k/v/m/o to [out, in] matrices (optionally with "<n>_b"
    biases); ``bn`` maps the same names to (gamma, beta, mean, var, eps).
    """
    n, c, h, wd = x.shape
    t = x.reshape(n, c, h * wd).astype(np.float64)

    def proj(name, inp):
        y = np.einsum("oc,ncl->nol", w[name], inp)
        if name + "_b" in w:
            y = y + w[name + "_b"][None, :, None]
        if bn and name in bn:
            g, b, m, v, eps = bn[name]
            y = (y - m[None, :, None]) / np.sqrt(v[None, :, None] + eps) * g[None, :, None] + b[None, :, None]
        return y

    q, k, v, m = proj("q", t), proj("k", t), proj("v", t), proj("m", t)
    d = q.shape[1]
    scale = d ** -0.5 if scale is None else scale
    ctx = np.zeros_like(v)
    for b in range(n):
        s = q[b].T @ k[b] * scale
        s = np.exp(s - s.max(axis=1, keepdims=True))
        s /= s.sum(axis=1, keepdims=True)
        ctx[b] = v[b] @ s.T
    mod = sigmoid(m) * sigmoid(ctx)
    return proj("o", mod).reshape(n, c, h, wd), mod.reshape(n, c, h, wd)
