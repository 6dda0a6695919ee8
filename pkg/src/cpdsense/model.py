"""Autocorrelation-attention encoder with an MLP classification head.

Pure numpy, float64, with hand-written backward passes.  Inputs are batches
shaped ``(batch, lags, features)``.  Every block has a ``*_forward`` that
returns ``(output, cache)`` and a matching ``*_backward`` that takes the
upstream gradient and the cache.  Parameter gradients are kept per sample and
summed over the batch with :func:`pairwise_sum`, so the reduction order is
fixed and a batch gradient equals the sum of its two half-batch gradients
bit for bit.

Lag shifting convention: ``roll_lags(v, tau)[t] = v[(t + tau) % l]``.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erf

Params = "OrderedDict[str, np.ndarray]"


class NonFiniteActivation(FloatingPointError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_lags: int = 150
    num_features: int = 232
    num_layers: int = 2
    num_heads: int = 8
    top_k_factor: float = 2.0
    decomp_kernel: int = 25
    ffn_hidden: int = 0  # 0 means 2 * num_features
    head_hidden: tuple[int, ...] = (128, 64)
    num_classes: int = 3
    pe_amplitude: float = 0.1
    use_decomposition: bool = True

    def __post_init__(self):
        object.__setattr__(self, "head_hidden", tuple(int(h) for h in self.head_hidden))
        if self.num_lags < 2 or self.num_features < 1:
            raise ValueError("need at least 2 lags and 1 feature")
        if self.num_features % self.num_heads:
            raise ValueError("num_features must be divisible by num_heads")
        if self.decomp_kernel % 2 == 0 or self.decomp_kernel < 1:
            raise ValueError("decomp_kernel must be odd and positive")
        if self.decomp_kernel > self.num_lags:
            raise ValueError("decomp_kernel longer than the lag axis")
        if self.top_k > self.num_lags:
            raise ValueError("top-k exceeds the number of lags")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def top_k(self) -> int:
        return max(1, int(math.floor(self.top_k_factor * math.log(self.num_lags))))

    @property
    def hidden(self) -> int:
        return self.ffn_hidden or 2 * self.num_features

    @property
    def head_dims(self) -> tuple[int, ...]:
        return (self.num_features, *self.head_hidden, self.num_classes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})

    def replace(self, **kw) -> "ModelConfig":
        d = self.to_dict()
        d.update(kw)
        return ModelConfig(**d)


# ---------------------------------------------------------------------------
# parameters


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Names and shapes of every tensor, in flat-serialisation order."""
    n, hid = config.num_features, config.hidden
    shapes = OrderedDict()
    for i in range(config.num_layers):
        p = f"encoder.layers.{i}"
        for w in ("w_q", "w_k", "w_v", "w_out"):
            shapes[f"{p}.attn.{w}"] = (n, n)
        shapes[f"{p}.ffn.conv1.weight"] = (3, n, hid)
        shapes[f"{p}.ffn.conv1.bias"] = (hid,)
        shapes[f"{p}.ffn.conv2.weight"] = (3, hid, n)
        shapes[f"{p}.ffn.conv2.bias"] = (n,)
    dims = config.head_dims
    for j in range(len(dims) - 1):
        shapes[f"head.fc{j + 1}.weight"] = (dims[j], dims[j + 1])
        shapes[f"head.fc{j + 1}.bias"] = (dims[j + 1],)
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> Params:
    """Glorot-uniform weights, zero biases."""
    params = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith("bias"):
            params[name] = np.zeros(shape)
            continue
        if len(shape) == 3:  # conv: (taps, in, out)
            fan_in, fan_out = shape[0] * shape[1], shape[0] * shape[2]
        else:
            fan_in, fan_out = shape
        a = math.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-a, a, size=shape)
    return params


def zero_params(config: ModelConfig) -> Params:
    return OrderedDict((k, np.zeros(s)) for k, s in param_shapes(config).items())


def flatten_params(params: Params) -> np.ndarray:
    return np.concatenate([np.ravel(v) for v in params.values()])


def unflatten_params(flat: np.ndarray, config: ModelConfig) -> Params:
    out = OrderedDict()
    offset = 0
    for name, shape in param_shapes(config).items():
        size = int(np.prod(shape))
        out[name] = np.asarray(flat[offset:offset + size], dtype=float).reshape(shape)
        offset += size
    if offset != flat.size:
        raise ValueError("flat parameter vector has the wrong length")
    return out


def encoder_param_names(params) -> list[str]:
    return [k for k in params if k.startswith("encoder.")]


def pairwise_sum(per_sample: np.ndarray) -> np.ndarray:
    """Sum over axis 0 with a fixed balanced tree (split at ``n // 2``)."""
    n = per_sample.shape[0]
    if n == 0:
        return np.zeros(per_sample.shape[1:])
    if n == 1:
        return per_sample[0].copy()
    h = n // 2
    return pairwise_sum(per_sample[:h]) + pairwise_sum(per_sample[h:])


# ---------------------------------------------------------------------------
# positional encoding


def _sinusoid_table(positions: int, dims: int) -> np.ndarray:
    """Transformer table ``[position, feature]``: sin on even, cos on odd features."""
    if dims == 0:
        return np.zeros((positions, 0))
    pos = np.arange(positions)[:, None]
    pair = np.arange(dims)[None, :] // 2
    freq = 1.0 / (10000.0 ** (2.0 * pair / dims))
    angle = pos * freq
    return np.where(np.arange(dims)[None, :] % 2 == 0, np.sin(angle), np.cos(angle))


def positional_encoding(num_lags: int, num_features: int, amplitude: float = 1.0) -> np.ndarray:
    """Two-axis sinusoidal encoding added to the ``l x N_s`` input.

    The first ``N_s // 2`` columns carry a lag-axis table (varies down the
    rows, frequency geometric in the column index).  The remaining columns
    carry a subcarrier-axis table (varies across the columns, frequency
    geometric in the row index).  Row ``i`` therefore identifies the lag and
    column ``j`` the subcarrier.
    """
    if num_lags <= 0 or num_features <= 0:
        raise ValueError("dimensions must be positive")
    half = num_features // 2
    pe = np.zeros((num_lags, num_features))
    pe[:, :half] = _sinusoid_table(num_lags, half)
    rest = num_features - half
    pe[:, half:] = _sinusoid_table(rest, num_lags).T
    return amplitude * pe


# ---------------------------------------------------------------------------
# autocorrelation attention


def roll_lags(v: np.ndarray, tau: int, axis: int = 0) -> np.ndarray:
    """Circular shift along the lag axis: ``out[t] = v[(t + tau) % l]``."""
    return np.roll(v, -int(tau), axis=axis)


def cross_correlation_fft(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Per-lag correlation score of two ``(..., l, d)`` series.

    ``R[tau] = (1 / (l d)) sum_c sum_t q[(t + tau) % l, c] k[t, c]``, computed
    as ``IFFT(FFT(q) * conj(FFT(k)))`` along the lag axis and averaged over
    the ``d`` features.
    """
    q = np.asarray(q, dtype=float)
    k = np.asarray(k, dtype=float)
    if q.shape != k.shape:
        raise ValueError("q and k must have the same shape")
    l = q.shape[-2]
    if l < 2:
        raise ValueError("need at least two lags")
    spec = np.fft.fft(q, axis=-2) * np.conj(np.fft.fft(k, axis=-2))
    corr = np.fft.ifft(spec, axis=-2)
    scale = max(float(np.max(np.abs(q), initial=0.0) * np.max(np.abs(k), initial=0.0)) * l, 1e-300)
    resid = float(np.max(np.abs(corr.imag), initial=0.0))
    # non-finite inputs are left to propagate to the caller's activation guard
    assert not np.isfinite(resid) or resid <= 1e-9 * scale, f"imaginary residue {resid:g} in real cross-correlation"
    return corr.real.mean(axis=-1) / l


def top_k_lags(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores along the last axis; ties go to the smaller lag."""
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _split_heads(x: np.ndarray, h: int) -> np.ndarray:
    b, l, n = x.shape
    return x.reshape(b, l, h, n // h).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, l, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * d)


def _bmm_t(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-sample ``a[i].T @ b[i]`` for ``(B, t, m)`` and ``(B, t, n)``."""
    return np.matmul(a.transpose(0, 2, 1), b)


def _lag_weight_vector(weights: np.ndarray, lags: np.ndarray, l: int) -> np.ndarray:
    """Scatter top-k softmax weights onto a dense ``(..., l)`` lag axis."""
    dense = np.zeros(weights.shape[:-1] + (l,))
    np.put_along_axis(dense, lags, weights, axis=-1)
    return dense


def _circ_corr(a: np.ndarray, b: np.ndarray, l: int) -> np.ndarray:
    """``out[tau] = sum_t a[t + tau] b[t]`` along axis 2 of ``(B, h, l, d)`` arrays."""
    return np.fft.irfft(np.fft.rfft(a, axis=2) * np.conj(np.fft.rfft(b, axis=2)), n=l, axis=2)


def _circ_conv(a: np.ndarray, b: np.ndarray, l: int) -> np.ndarray:
    """``out[u] = sum_s a[s] b[u - s]`` along axis 2."""
    return np.fft.irfft(np.fft.rfft(a, axis=2) * np.fft.rfft(b, axis=2), n=l, axis=2)


def attention_forward(x: np.ndarray, w_q, w_k, w_v, w_out, num_heads: int, top_k: int):
    """Multi-head autocorrelation attention with a residual connection.

    Per head: score every lag with :func:`cross_correlation_fft`, keep the
    ``top_k`` best lags, softmax their scores and sum the correspondingly
    shifted values.  The weighted sum of shifted copies is evaluated as one
    circular correlation with a sparse lag-weight vector.
    """
    b, l, n = x.shape
    d = n // num_heads
    qh = _split_heads(x @ w_q, num_heads)
    kh = _split_heads(x @ w_k, num_heads)
    vh = _split_heads(x @ w_v, num_heads)
    r = cross_correlation_fft(qh, kh)  # (B, h, l)
    lags = top_k_lags(r, top_k)  # (B, h, k)
    weights = softmax(np.take_along_axis(r, lags, axis=-1))
    dense = _lag_weight_vector(weights, lags, l)[..., None]  # (B, h, l, 1)
    agg = _circ_corr(vh, dense, l)
    a = _merge_heads(agg)
    out = a @ w_out + x
    cache = dict(x=x, qh=qh, kh=kh, vh=vh, lags=lags, weights=weights, dense=dense, a=a,
                 w_q=w_q, w_k=w_k, w_v=w_v, w_out=w_out, d=d)
    return out, cache


def attention_backward(dout: np.ndarray, cache: dict):
    """Returns ``dx`` and per-sample gradients of (w_q, w_k, w_v, w_out).

    Top-k lag selection is held fixed; gradients flow through the softmax
    scores and the shifted values.
    """
    x, a = cache["x"], cache["a"]
    qh, kh, vh = cache["qh"], cache["kh"], cache["vh"]
    lags, weights, dense = cache["lags"], cache["weights"], cache["dense"]
    b, l, n = x.shape
    h = qh.shape[1]
    d = cache["d"]

    g_out = _bmm_t(a, dout)
    dagg = _split_heads(dout @ cache["w_out"].T, h)  # (B, h, l, d)

    dvh = _circ_conv(dense, dagg, l)
    ddense = _circ_corr(vh, dagg, l).sum(axis=-1)  # (B, h, l)
    dweights = np.take_along_axis(ddense, lags, axis=-1)
    dscores = weights * (dweights - np.sum(weights * dweights, axis=-1, keepdims=True))
    dr = np.zeros((b, h, l, 1))
    np.put_along_axis(dr[..., 0], lags, dscores, axis=-1)

    # R[tau] = (1/(l d)) sum_c sum_t q[t + tau, c] k[t, c]
    dqh = _circ_conv(dr, kh, l) / (l * d)
    dkh = _circ_corr(qh, dr, l) / (l * d)

    dq, dk, dv = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)
    g_q, g_k, g_v = _bmm_t(x, dq), _bmm_t(x, dk), _bmm_t(x, dv)
    dx = dout + dq @ cache["w_q"].T + dk @ cache["w_k"].T + dv @ cache["w_v"].T
    return dx, (g_q, g_k, g_v, g_out)


# ---------------------------------------------------------------------------
# series decomposition


def trend_matrix(num_lags: int, kernel: int) -> np.ndarray:
    """Moving-average operator along the lag axis with replicate edge padding."""
    if kernel % 2 == 0 or kernel < 1:
        raise ValueError("kernel must be odd")
    if kernel > num_lags:
        raise ValueError("kernel longer than the series")
    half = kernel // 2
    m = np.zeros((num_lags, num_lags))
    for t in range(num_lags):
        for j in range(-half, half + 1):
            m[t, min(max(t + j, 0), num_lags - 1)] += 1.0
    return m / kernel


def series_decompose(x: np.ndarray, kernel: int, _m: np.ndarray | None = None):
    """Split ``x`` (``(..., l, N)``) into ``(seasonal, trend)``.

    ``trend`` is the replicate-padded moving average along the lag axis,
    adjusted at the rounding level so that ``seasonal + trend`` reproduces
    ``x`` wherever floating point allows it.
    """
    x = np.asarray(x, dtype=float)
    m = trend_matrix(x.shape[-2], kernel) if _m is None else _m
    trend = m @ x
    seasonal = x - trend
    trend = x - seasonal
    return seasonal, trend


def seasonal_backward(dseasonal: np.ndarray, m: np.ndarray) -> np.ndarray:
    return dseasonal - m.T @ dseasonal


# ---------------------------------------------------------------------------
# feed-forward


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    return 0.5 * x * (1.0 + erf(np.asarray(x) / _SQRT2))


def gelu_grad(x):
    x = np.asarray(x)
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _unfold3(x: np.ndarray) -> np.ndarray:
    """``(B, l, C)`` -> ``(B, l, 3C)`` holding ``x[t-1], x[t], x[t+1]`` (zero padded)."""
    l = x.shape[1]
    xp = np.pad(x, ((0, 0), (1, 1), (0, 0)))
    return np.concatenate([xp[:, 0:l], xp[:, 1:l + 1], xp[:, 2:l + 2]], axis=-1)


def conv1d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Kernel-3 'same' convolution along the lag axis; ``weight`` is ``(3, C_in, C_out)``."""
    cols = _unfold3(x)
    y = cols @ weight.reshape(-1, weight.shape[-1]) + bias
    return y, (cols, weight)


def conv1d_backward(dy: np.ndarray, cache):
    cols, weight = cache
    taps, cin, cout = weight.shape
    g_w = _bmm_t(cols, dy).reshape(-1, taps, cin, cout)
    g_b = dy.sum(axis=1)
    dcols = dy @ weight.reshape(-1, cout).T
    l = dy.shape[1]
    dxp = np.zeros((dy.shape[0], l + 2, cin))
    for tap in range(3):
        dxp[:, tap:tap + l] += dcols[..., tap * cin:(tap + 1) * cin]
    return dxp[:, 1:l + 1], g_w, g_b


def feed_forward_forward(x: np.ndarray, w1, b1, w2, b2):
    """conv -> GELU -> conv -> GELU, plus a residual connection."""
    h1, c1 = conv1d_forward(x, w1, b1)
    a1 = gelu(h1)
    h2, c2 = conv1d_forward(a1, w2, b2)
    out = x + gelu(h2)
    return out, (h1, c1, h2, c2)


def feed_forward_backward(dout: np.ndarray, cache):
    h1, c1, h2, c2 = cache
    dh2 = dout * gelu_grad(h2)
    da1, g_w2, g_b2 = conv1d_backward(dh2, c2)
    dh1 = da1 * gelu_grad(h1)
    dx, g_w1, g_b1 = conv1d_backward(dh1, c1)
    return dout + dx, (g_w1, g_b1, g_w2, g_b2)


# ---------------------------------------------------------------------------
# encoder, head, full model


def _check_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteActivation(f"non-finite activation in {where}")


def encoder_forward(x: np.ndarray, params, config: ModelConfig):
    """Encoder on inputs that already carry the positional encoding.

    Accepts ``(l, N)`` or ``(B, l, N)``; returns pooled features ``(N,)`` or
    ``(B, N)`` and a cache for :func:`encoder_backward`.
    """
    single = x.ndim == 2
    h = x[None] if single else x
    m = trend_matrix(config.num_lags, config.decomp_kernel) if config.use_decomposition else None
    layer_caches = []
    for i in range(config.num_layers):
        p = f"encoder.layers.{i}"
        att, c_att = attention_forward(h, params[f"{p}.attn.w_q"], params[f"{p}.attn.w_k"],
                                       params[f"{p}.attn.w_v"], params[f"{p}.attn.w_out"],
                                       config.num_heads, config.top_k)
        _check_finite(att, f"layer {i} attention")
        s1 = series_decompose(att, config.decomp_kernel, m)[0] if m is not None else att
        ff, c_ff = feed_forward_forward(s1, params[f"{p}.ffn.conv1.weight"], params[f"{p}.ffn.conv1.bias"],
                                        params[f"{p}.ffn.conv2.weight"], params[f"{p}.ffn.conv2.bias"])
        _check_finite(ff, f"layer {i} feed-forward")
        h = series_decompose(ff, config.decomp_kernel, m)[0] if m is not None else ff
        layer_caches.append((c_att, c_ff))
    pooled = h.mean(axis=1)
    cache = dict(layers=layer_caches, m=m, l=h.shape[1], single=single)
    return (pooled[0] if single else pooled), cache


def encoder_backward(dpooled: np.ndarray, cache: dict, config: ModelConfig):
    """Returns the input gradient and a dict of per-sample encoder gradients."""
    dp = dpooled[None] if cache["single"] else dpooled
    l, m = cache["l"], cache["m"]
    dh = np.repeat(dp[:, None, :] / l, l, axis=1)
    grads = {}
    for i in reversed(range(config.num_layers)):
        p = f"encoder.layers.{i}"
        c_att, c_ff = cache["layers"][i]
        if m is not None:
            dh = seasonal_backward(dh, m)
        dh, (g_w1, g_b1, g_w2, g_b2) = feed_forward_backward(dh, c_ff)
        if m is not None:
            dh = seasonal_backward(dh, m)
        dh, (g_q, g_k, g_v, g_o) = attention_backward(dh, c_att)
        grads.update({f"{p}.attn.w_q": g_q, f"{p}.attn.w_k": g_k, f"{p}.attn.w_v": g_v,
                      f"{p}.attn.w_out": g_o, f"{p}.ffn.conv1.weight": g_w1, f"{p}.ffn.conv1.bias": g_b1,
                      f"{p}.ffn.conv2.weight": g_w2, f"{p}.ffn.conv2.bias": g_b2})
    return (dh[0] if cache["single"] else dh), grads


def _num_head_layers(params) -> int:
    return sum(1 for k in params if k.startswith("head.fc") and k.endswith(".weight"))


def mlp_head(features: np.ndarray, params):
    """ReLU after every hidden layer, linear output logits."""
    x = features
    cache = []
    n = _num_head_layers(params)
    for j in range(1, n + 1):
        z = x @ params[f"head.fc{j}.weight"] + params[f"head.fc{j}.bias"]
        cache.append((x, z))
        x = np.maximum(z, 0.0) if j < n else z
    return x, cache


def mlp_head_backward(dlogits: np.ndarray, cache, params):
    grads = {}
    dz = dlogits
    n = len(cache)
    for j in range(n, 0, -1):
        x, z = cache[j - 1]
        if j < n:
            dz = dz * (z > 0)
        grads[f"head.fc{j}.weight"] = x[:, :, None] * dz[:, None, :]
        grads[f"head.fc{j}.bias"] = dz.copy()
        dz = dz @ params[f"head.fc{j}.weight"].T
    return dz, grads


def forward(inputs: np.ndarray, params, config: ModelConfig):
    """Raw ACF batch ``(B, l, N)`` -> logits ``(B, C)``; adds the positional encoding."""
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 2:
        inputs = inputs[None]
    if inputs.shape[1:] != (config.num_lags, config.num_features):
        raise ValueError(f"input shape {inputs.shape[1:]} does not match model "
                         f"({config.num_lags}, {config.num_features})")
    x = inputs + positional_encoding(config.num_lags, config.num_features, config.pe_amplitude)
    feats, enc_cache = encoder_forward(x, params, config)
    logits, head_cache = mlp_head(feats, params)
    _check_finite(logits, "head")
    return logits, (enc_cache, head_cache)


def predict_proba(inputs: np.ndarray, params, config: ModelConfig, batch_size: int = 64) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 2:
        inputs = inputs[None]
    out = [softmax(forward(inputs[i:i + batch_size], params, config)[0])
           for i in range(0, inputs.shape[0], batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, config.num_classes))


def backward(dlogits: np.ndarray, cache, params, config: ModelConfig):
    """Per-sample parameter gradients (leading batch axis) and the input gradient."""
    enc_cache, head_cache = cache
    dfeats, head_grads = mlp_head_backward(dlogits, head_cache, params)
    dx, enc_grads = encoder_backward(dfeats, enc_cache, config)
    per_sample = OrderedDict((k, enc_grads.get(k, head_grads.get(k))) for k in params)
    return per_sample, dx


# ---------------------------------------------------------------------------
# losses (defined here so gradient evaluation is self-contained)


@dataclass(frozen=True)
class LossSpec:
    kind: str = "ce"  # "ce" (softmax cross-entropy) or "bce" (sigmoid of z1 - z0)
    reduction: str = "mean"  # "mean" or "sum"
    weight: float = 1.0


BCE_CLAMP = 1e-7


def bce_loss(logit: np.ndarray, labels: np.ndarray, reduction: str = "mean"):
    """Binary cross-entropy on ``p = sigmoid(logit)``, ``p`` clamped to ``[1e-7, 1 - 1e-7]``.

    Returns ``(loss, dloss/dlogit)``.
    """
    z = np.asarray(logit, dtype=float)
    y = np.asarray(labels, dtype=float)
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    per = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    inside = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)
    grad = np.where(inside, p - y, 0.0)
    if reduction == "mean":
        return float(per.mean()), grad / z.size
    return float(per.sum()), grad


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray, reduction: str = "mean"):
    """Mean (or summed) ``-log softmax(logits)[label]``; returns ``(loss, dloss/dlogits)``."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=int)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    rows = np.arange(logits.shape[0])
    per = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    if reduction == "mean":
        return float(per.mean()), grad / logits.shape[0]
    return float(per.sum()), grad


def loss_and_logit_grad(logits: np.ndarray, labels: np.ndarray, loss: LossSpec):
    if loss.kind == "ce":
        value, dlogits = cross_entropy_loss(logits, labels, loss.reduction)
    elif loss.kind == "bce":
        if logits.shape[1] != 2:
            raise ValueError("bce loss needs a two-output head")
        value, dz = bce_loss(logits[:, 1] - logits[:, 0], labels, loss.reduction)
        dlogits = np.stack([-dz, dz], axis=1)
    else:
        raise ValueError(f"unknown loss kind {loss.kind!r}")
    return loss.weight * value, loss.weight * dlogits


def model_gradients(inputs: np.ndarray, labels: np.ndarray, params, config: ModelConfig,
                    loss: LossSpec = LossSpec()):
    """Loss value and the exact gradient of every parameter.

    Per-sample contributions are reduced with :func:`pairwise_sum`.
    """
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 2:
        inputs = inputs[None]
    if inputs.shape[0] == 0:
        raise ValueError("empty batch")
    logits, cache = forward(inputs, params, config)
    value, dlogits = loss_and_logit_grad(logits, labels, loss)
    per_sample, _ = backward(dlogits, cache, params, config)
    grads = OrderedDict()
    for k, g in per_sample.items():
        total = pairwise_sum(g)
        if not np.all(np.isfinite(total)):
            raise NonFiniteGradient(f"non-finite gradient for {k}")
        grads[k] = total
    return value, grads


def input_gradient(inputs: np.ndarray, labels: np.ndarray, params, config: ModelConfig,
                   loss: LossSpec = LossSpec()) -> np.ndarray:
    logits, cache = forward(inputs, params, config)
    _, dlogits = loss_and_logit_grad(logits, labels, loss)
    return backward(dlogits, cache, params, config)[1]
