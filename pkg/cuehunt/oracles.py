"""Direct nested-loop versions of the autograd primitives.

Slow on purpose: each one follows the defining formula literally and is used
to cross-check the vectorized primitives.
"""

import math

import numpy as np


def conv2d_valid(x, k, b):
    C, H, W = x.shape
    K, _, kh, kw = k.shape
    out = np.zeros((K, H - kh + 1, W - kw + 1))
    for o in range(K):
        for i in range(H - kh + 1):
            for j in range(W - kw + 1):
                acc = b[o]
                for c in range(C):
                    for u in range(kh):
                        for v in range(kw):
                            acc += k[o, c, u, v] * x[c, i + u, j + v]
                out[o, i, j] = acc
    return out


def relu(x):
    out = np.empty_like(x, dtype=float)
    for idx, value in np.ndenumerate(x):
        out[idx] = value if value > 0 else 0.0
    return out


def stack3x3(x):
    C, H, W = x.shape
    out = np.zeros((9 * C, H - 2, W - 2))
    for c in range(C):
        for n in range(9):
            di, dj = divmod(n, 3)
            for i in range(H - 2):
                for j in range(W - 2):
                    out[c * 9 + n, i, j] = x[c, i + di, j + dj]
    return out


def stack3x3_kernels(channels):
    """Binary 9C×C×3×3 kernels whose valid convolution equals stack3x3."""
    k = np.zeros((9 * channels, channels, 3, 3))
    for c in range(channels):
        for n in range(9):
            k[c * 9 + n, c, n // 3, n % 3] = 1.0
    return k


def spatial_softmax(x, temperature=1.0):
    K, H, W = x.shape
    out = np.zeros_like(x, dtype=float)
    for c in range(K):
        peak = max(x[c, i, j] for i in range(H) for j in range(W))
        total = 0.0
        for i in range(H):
            for j in range(W):
                total += math.exp((x[c, i, j] - peak) / temperature)
        for i in range(H):
            for j in range(W):
                out[c, i, j] = math.exp((x[c, i, j] - peak) / temperature) / total
    return out


def weighted_pool(f, w):
    C, H, W = f.shape
    out = np.zeros(C)
    for c in range(C):
        for i in range(H):
            for j in range(W):
                out[c] += w[0, i, j] * f[c, i, j]
    return out


def broadcast_mul(v, m):
    out = np.zeros_like(m, dtype=float)
    for c, i, j in np.ndindex(*m.shape):
        out[c, i, j] = v[c] * m[c, i, j]
    return out


def softargmax(x, temperature=1.0):
    alphas = spatial_softmax(x, temperature)
    K, H, W = x.shape
    out = np.zeros((K, 2))
    for k in range(K):
        for i in range(H):
            for j in range(W):
                out[k, 0] += alphas[k, i, j] * (i / (H - 1) if H > 1 else 0.5)
                out[k, 1] += alphas[k, i, j] * (j / (W - 1) if W > 1 else 0.5)
    return out


def linear(x, w, b):
    out = np.zeros(w.shape[0])
    for m in range(w.shape[0]):
        out[m] = b[m] + sum(w[m, n] * x[n] for n in range(w.shape[1]))
    return out


def mse_loss(p, y):
    total = 0.0
    for row in range(p.shape[0]):
        total += (p[row, 0] - y[row, 0]) ** 2 + (p[row, 1] - y[row, 1]) ** 2
    return total / p.shape[0]


def bottleneck(f, layers):
    """Stack of 1×1 layers applied to each feature pixel on its own, ReLU between layers."""
    C, H, W = f.shape
    out = np.zeros((layers[-1][0].shape[0], H, W))
    for i in range(H):
        for j in range(W):
            v = np.array([f[c, i, j] for c in range(C)])
            for depth, (w, b) in enumerate(layers):
                v = linear(v, w[:, :, 0, 0], b)
                if depth < len(layers) - 1:
                    v = relu(v)
            out[:, i, j] = v
    return out


def _layers(params, prefix, depth):
    return [(params[f"{prefix}.{idx}.weight"], params[f"{prefix}.{idx}.bias"]) for idx in range(depth)]


def attention_scores(f, params, config):
    return bottleneck(f, _layers(params, "attention", len(config.attention_widths) + 1))


def combine_and_score(pooled, f, params, config):
    return bottleneck(broadcast_mul(pooled, f), _layers(params, "scorer", len(config.scorer_widths) + 1))
