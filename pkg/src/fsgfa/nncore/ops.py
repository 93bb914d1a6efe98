"""Differentiable operators on NCHW tensors.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to input gradients.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, log_decision, make_result


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# --------------------------------------------------------------------------
# elementwise / reductions


def add(a, b) -> Tensor:
    out = _data(a) + _data(b)
    return make_result(out, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    out = _data(a) - _data(b)
    return make_result(out, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad * bd
    return make_result(out, (a, b), lambda g: (g * bd, g * ad), "mul")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return make_result(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return make_result(out, (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    log_decision(mask)
    out = np.maximum(x.data, 0)
    return make_result(out, (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"cannot concatenate shapes {ref} and {t.shape} along channels")
    sizes = [t.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(sizes)))

    return make_result(out, tuple(tensors), back, "concat_channels")


def global_avg_pool(x: Tensor) -> Tensor:
    """N x C x H x W -> N x C spatial mean."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def back(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).astype(x.dtype),)

    return make_result(out, (x,), back, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x (N, E) @ weight (E, C) + bias (C,)."""
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def back(g):
        gb = g.sum(axis=0) if bias is not None else None
        return g @ weight.data.T, x.data.T @ g, gb

    return make_result(out, (x, weight, bias), back, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def back(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), back, "log_softmax")


# --------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Padded NHWC -> (N*Ho*Wo, kh*kw*C) patch matrix."""
    n, c = xp.shape[0], xp.shape[3]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add a (N*Ho*Wo, kh*kw*C) matrix back onto a padded NHWC array."""
    n, hp, wp, c = shape
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, :, i, j]
    return out


def _nhwc(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


def _pad_hw(a: np.ndarray, p: int) -> np.ndarray:
    return np.pad(a, ((0, 0), (p, p), (p, p), (0, 0))) if p else a


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0,
           bias: Optional[Tensor] = None) -> Tensor:
    """2-D cross-correlation. Results are NCHW views over channels-last memory."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: input shape {x.shape} incompatible with weight shape {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    n, c, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    w2 = weight.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    xl = _nhwc(x.data)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    cols = xl.reshape(-1, c) if pointwise else _im2col(_pad_hw(xl, padding), kh, kw, stride, ho, wo)
    out2 = cols @ w2.T
    if bias is not None:
        out2 += bias.data
    out = out2.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def back(g):
        g2 = _nhwc(g).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(cout, kh, kw, c).transpose(0, 3, 1, 2)
        gcols = g2 @ w2
        if pointwise:
            gx = gcols.reshape(n, h, w, c)
        else:
            gxp = _col2im(gcols, (n, h + 2 * padding, w + 2 * padding, c), kh, kw, stride, ho, wo)
            gx = gxp[:, padding : padding + h, padding : padding + w]
        gb = g2.sum(axis=0) if bias is not None else None
        return gx.transpose(0, 3, 1, 2), np.ascontiguousarray(gw), gb

    return make_result(out, (x, weight, bias), back, "conv2d")


def deconv_output_size(size: int, k: int, stride: int, padding: int, output_padding: int) -> int:
    return (size - 1) * stride - 2 * padding + k + output_padding


def deconv2d(x: Tensor, weight: Tensor, stride: int = 2, padding: int = 1, output_padding: int = 1,
             bias: Optional[Tensor] = None) -> Tensor:
    """Transposed convolution; ``weight`` is (Cin, Cout, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"deconv2d: input shape {x.shape} incompatible with weight shape {weight.shape}")
    n, cin, h, w = x.shape
    _, cout, kh, kw = weight.shape
    if not 0 <= output_padding < max(stride, 1) or padding < 0 or stride < 1:
        raise ValueError(f"deconv2d: bad geometry stride={stride} padding={padding} "
                         f"output_padding={output_padding}")
    ho = deconv_output_size(h, kh, stride, padding, output_padding)
    wo = deconv_output_size(w, kw, stride, padding, output_padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"deconv2d: geometry gives empty output for input {x.shape}")
    # scatter onto the full canvas, then crop the padding away
    hf, wf = (h - 1) * stride + kh + output_padding, (w - 1) * stride + kw + output_padding
    w2 = weight.data.transpose(0, 2, 3, 1).reshape(cin, -1)
    xs = _nhwc(x.data).reshape(-1, cin)
    cols = xs @ w2
    full = _col2im(cols, (n, hf, wf, cout), kh, kw, stride, h, w)
    out = full[:, padding : padding + ho, padding : padding + wo].transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def back(g):
        gfull = np.zeros((n, hf, wf, cout), dtype=g.dtype)
        gfull[:, padding : padding + ho, padding : padding + wo] = g.transpose(0, 2, 3, 1)
        gcols = _im2col(gfull, kh, kw, stride, h, w)
        gw = (xs.T @ gcols).reshape(cin, kh, kw, cout).transpose(0, 3, 1, 2)
        gx = (gcols @ w2.T).reshape(n, h, w, cin).transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, np.ascontiguousarray(gw), gb

    return make_result(out, (x, weight, bias), back, "deconv2d")


# --------------------------------------------------------------------------
# normalization and pooling


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, eps: float = 1e-5,
                momentum: float = 0.1) -> Tensor:
    """Batch normalization over N, H, W.

    In training mode the running buffers are updated in place with the
    unbiased batch variance.
    """
    n, c, h, w = x.shape
    if n == 0:
        raise ValueError("batchnorm2d: empty batch")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d: {c} channels but gamma {gamma.shape} / beta {beta.shape}")
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = n * h * w
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def back(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            m = n * h * w
            gx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), back, "batchnorm2d")


def maxpool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, kernel, stride, padding), conv_output_size(w, kernel, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x.data
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    log_decision(arg)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kernel):
            for j in range(kernel):
                sel = arg == i * kernel + j
                gp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * sel
        return (gp[:, :, padding : padding + h, padding : padding + w],)

    return make_result(np.ascontiguousarray(out), (x,), back, "maxpool2d")
