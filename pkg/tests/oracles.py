"""Naive loop implementations used as references. Slow on purpose; no shared code with the package."""
import math

import numpy as np


def matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def softmax_rows(x):
    out = np.zeros(x.shape)
    for i in range(x.shape[0]):
        row = [float(v) for v in x[i]]
        top = max(row)
        e = [math.exp(v - top) for v in row]
        z = sum(e)
        out[i] = [v / z for v in e]
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    out = np.zeros(x.shape)
    for i in range(x.shape[0]):
        row = [float(v) for v in x[i]]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        for j, v in enumerate(row):
            out[i, j] = (v - mu) / math.sqrt(var + eps) * gamma[j] + beta[j]
    return out


def conv3x3(x, w, b, stride=1):
    h, wd, cin = x.shape
    cout = w.shape[3]
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                s = float(b[o])
                for di in range(3):
                    for dj in range(3):
                        y, xx = i * stride + di - 1, j * stride + dj - 1
                        if 0 <= y < h and 0 <= xx < wd:
                            for c in range(cin):
                                s += float(x[y, xx, c]) * float(w[di, dj, c, o])
                out[i, j, o] = s
    return out


def attention(q, k, v, d):
    """softmax(q k^T / sqrt(d)) v, one row at a time."""
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        logits = [float(np.dot(q[i], k[j])) / math.sqrt(d) for j in range(k.shape[0])]
        top = max(logits)
        e = [math.exp(z - top) for z in logits]
        z = sum(e)
        for j in range(k.shape[0]):
            out[i] += e[j] / z * v[j]
    return out


def bilinear_1d(n_in, n_out, i):
    """Source weights of output site i, align-corners-false convention."""
    src = max((i + 0.5) * n_in / n_out - 0.5, 0.0)
    i0 = min(int(math.floor(src)), n_in - 1)
    i1 = min(i0 + 1, n_in - 1)
    lam = src - i0
    return {i0: 1.0} if i0 == i1 else {i0: 1 - lam, i1: lam}


def rel_err(a, b):
    """Max absolute difference over the reference's max magnitude."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if not a.size:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(1e-12, float(np.max(np.abs(b)))))
