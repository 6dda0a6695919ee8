"""Independent straight-line reference implementations.

These deliberately avoid FFTs, batching and every helper in ``cpdsense.model``
so that agreement with the package is meaningful.
"""

from __future__ import annotations

import math

import numpy as np


def circular_correlation(q, k):
    """``R[tau] = 1/(l d) sum_c sum_t q[(t + tau) % l, c] k[t, c]`` by double loop."""
    l, d = q.shape
    r = np.zeros(l)
    for tau in range(l):
        acc = 0.0
        for t in range(l):
            for c in range(d):
                acc += q[(t + tau) % l, c] * k[t, c]
        r[tau] = acc / (l * d)
    return r


def roll(v, tau):
    l = v.shape[0]
    return np.array([v[(t + tau) % l] for t in range(l)])


def top_k(scores, k):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:k]


def softmax(values):
    m = max(values)
    e = [math.exp(v - m) for v in values]
    s = sum(e)
    return [v / s for v in e]


def attention(x, w_q, w_k, w_v, w_out, num_heads, k):
    l, n = x.shape
    d = n // num_heads
    q, key, v = x @ w_q, x @ w_k, x @ w_v
    heads = []
    for h in range(num_heads):
        cols = slice(h * d, (h + 1) * d)
        r = circular_correlation(q[:, cols], key[:, cols])
        lags = top_k(list(r), k)
        weights = softmax([r[i] for i in lags])
        out = np.zeros((l, d))
        for w, tau in zip(weights, lags):
            out += w * roll(v[:, cols], tau)
        heads.append(out)
    return np.concatenate(heads, axis=1) @ w_out + x


def moving_average(x, kernel):
    l = x.shape[0]
    half = kernel // 2
    trend = np.zeros_like(x)
    for t in range(l):
        acc = np.zeros(x.shape[1])
        for j in range(-half, half + 1):
            acc = acc + x[min(max(t + j, 0), l - 1)]
        trend[t] = acc / kernel
    return trend


def gelu(x):
    return np.vectorize(lambda v: 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))))(x)


def conv3(x, weight, bias):
    """Same-padded kernel-3 convolution along axis 0; weight is (3, C_in, C_out)."""
    l = x.shape[0]
    out = np.tile(bias, (l, 1)).astype(float)
    for t in range(l):
        for tap in range(3):
            src = t + tap - 1
            if 0 <= src < l:
                out[t] += x[src] @ weight[tap]
    return out


def feed_forward(x, w1, b1, w2, b2):
    return x + gelu(conv3(gelu(conv3(x, w1, b1)), w2, b2))


def positional_table(positions, dims):
    out = np.zeros((positions, dims))
    for p in range(positions):
        for i in range(dims):
            angle = p / 10000.0 ** (2 * (i // 2) / dims)
            out[p, i] = math.sin(angle) if i % 2 == 0 else math.cos(angle)
    return out


def model_logits(x, params, config):
    """Full forward pass on one ``(l, N)`` input."""
    l, n = x.shape
    half = n // 2
    pe = np.zeros((l, n))
    pe[:, :half] = positional_table(l, half)
    pe[:, half:] = positional_table(n - half, l).T
    h = x + config.pe_amplitude * pe
    for i in range(config.num_layers):
        p = f"encoder.layers.{i}"
        h = attention(h, params[f"{p}.attn.w_q"], params[f"{p}.attn.w_k"], params[f"{p}.attn.w_v"],
                      params[f"{p}.attn.w_out"], config.num_heads, config.top_k)
        if config.use_decomposition:
            h = h - moving_average(h, config.decomp_kernel)
        h = feed_forward(h, params[f"{p}.ffn.conv1.weight"], params[f"{p}.ffn.conv1.bias"],
                         params[f"{p}.ffn.conv2.weight"], params[f"{p}.ffn.conv2.bias"])
        if config.use_decomposition:
            h = h - moving_average(h, config.decomp_kernel)
    z = h.mean(axis=0)
    layers = sum(1 for name in params if name.startswith("head.fc") and name.endswith(".weight"))
    for j in range(1, layers + 1):
        z = z @ params[f"head.fc{j}.weight"] + params[f"head.fc{j}.bias"]
        if j < layers:
            z = np.maximum(z, 0.0)
    return z


def central_difference(fn, array, step=1e-4):
    """Numerical gradient of scalar ``fn()`` w.r.t. every entry of ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        old = array[idx]
        array[idx] = old + step
        up = fn()
        array[idx] = old - step
        down = fn()
        array[idx] = old
        grad[idx] = (up - down) / (2 * step)
    return grad


def relative_error(numeric, analytic):
    """Tensor-level relative error ``|a - n| / max(|a|, |n|)`` (Frobenius norms)."""
    den = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-30)
    return float(np.linalg.norm(numeric - analytic) / den)
