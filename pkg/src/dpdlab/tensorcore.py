"""Minimal differentiable numeric core.

Dense float64 tensors plus the handful of layer ops the locator needs
(conv2d, relu, sigmoid, bilinear upsample, average pool), each with an
explicit backward function. There is no taped graph: the network is a
fixed small pipeline and every backward pass is hand-composed, which
keeps gradient checking direct.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NonFiniteLossError, ShapeError


class Tensor:
    """Dense row-major float64 array with explicit shape metadata.

    Tensors are treated as immutable once produced by an op; only Param
    values are mutated (inside optimizer steps).
    """

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def ravel(self):
        """Row-major flat view of the values."""
        return self.data.ravel()

    def copy(self):
        return Tensor(self.data.copy())

    def __array__(self, dtype=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def tensor(data) -> Tensor:
    """Construct a Tensor from external data, rejecting non-finite values."""
    t = Tensor(data)
    if not np.all(np.isfinite(t.data)):
        raise ValueError("tensor contains non-finite values")
    return t


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


@dataclass
class Param:
    """Named trainable value with a same-shaped gradient accumulator."""

    name: str
    value: Tensor
    grad: Tensor

    @classmethod
    def of(cls, name: str, data) -> "Param":
        v = Tensor(data)
        return cls(name=name, value=v, grad=zeros(v.shape))

    def zero_grad(self):
        self.grad.data.fill(0.0)

    def copy(self, name: str | None = None) -> "Param":
        return Param.of(self.name if name is None else name, self.value.data.copy())


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_conv(name: str, c_out: int, c_in: int, k: int, rng: np.random.Generator):
    """Glorot-initialized kernel Param plus zero bias Param for one conv layer."""
    kernel = Param.of(f"{name}.kernel", glorot_uniform((c_out, c_in, k, k), c_in * k * k, c_out * k * k, rng))
    bias = Param.of(f"{name}.bias", np.zeros(c_out))
    return kernel, bias


# ---------------------------------------------------------------------------
# conv2d


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, k, k, ho, wo), dtype=np.float64)
    for a in range(k):
        ea = a + stride * (ho - 1) + 1
        for b in range(k):
            eb = b + stride * (wo - 1) + 1
            cols[:, a, b] = xp[:, a:ea:stride, b:eb:stride]
    return cols.reshape(c * k * k, ho * wo)


def _col2im(cols: np.ndarray, c: int, hp: int, wp: int, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    cols = cols.reshape(c, k, k, ho, wo)
    xp = np.zeros((c, hp, wp), dtype=np.float64)
    for a in range(k):
        ea = a + stride * (ho - 1) + 1
        for b in range(k):
            eb = b + stride * (wo - 1) + 1
            xp[:, a:ea:stride, b:eb:stride] += cols[:, a, b]
    return xp


@dataclass
class Conv2dCache:
    cols: np.ndarray
    x_shape: tuple
    kernel: Param
    bias: Param
    stride: int
    pad: int
    out_hw: tuple


def conv2d_fwd(x: Tensor, kernel: Param, bias: Param, stride: int = 1, pad: int = 0):
    """conv2d returning (output, cache) for the backward pass."""
    kc_out, kc_in, k, k2 = kernel.value.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel window must be square and odd, got {k}x{k2}")
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d input must be (C,H,W), got shape {x.shape}")
    c_in, h, w = x.shape
    if c_in != kc_in:
        raise ShapeError(f"input channel axis {c_in} does not match kernel input channels {kc_in}")
    if bias.value.shape != (kc_out,):
        raise ShapeError(f"bias shape {bias.value.shape} does not match kernel output channels {kc_out}")
    if stride not in (1, 2):
        raise ConfigError(f"stride must be 1 or 2, got {stride}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"spatial axes {h}x{w} too small for window {k} with pad {pad}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = kernel.value.data.reshape(kc_out, -1)
    out = (wmat @ cols + bias.value.data[:, None]).reshape(kc_out, ho, wo)
    cache = Conv2dCache(cols, x.shape, kernel, bias, stride, pad, (ho, wo))
    return Tensor(out), cache


def conv2d(x: Tensor, kernel: Param, bias: Param, stride: int = 1, pad: int = 0) -> Tensor:
    return conv2d_fwd(x, kernel, bias, stride, pad)[0]


def conv2d_bwd(dout: np.ndarray, cache: Conv2dCache) -> np.ndarray:
    """Accumulate kernel/bias grads, return gradient w.r.t. the input."""
    kernel, bias = cache.kernel, cache.bias
    c_out = kernel.value.shape[0]
    ho, wo = cache.out_hw
    dmat = dout.reshape(c_out, ho * wo)
    kernel.grad.data += (dmat @ cache.cols.T).reshape(kernel.value.shape)
    bias.grad.data += dmat.sum(axis=1)
    wmat = kernel.value.data.reshape(c_out, -1)
    dcols = wmat.T @ dmat
    c_in, h, w = cache.x_shape
    k = kernel.value.shape[2]
    p = cache.pad
    dxp = _col2im(dcols, c_in, h + 2 * p, w + 2 * p, k, cache.stride, ho, wo)
    return dxp[:, p:p + h, p:p + w] if p else dxp


# ---------------------------------------------------------------------------
# elementwise ops


def relu_fwd(x: Tensor):
    y = np.maximum(x.data, 0.0)
    return Tensor(y), x.data > 0.0


def relu(x: Tensor) -> Tensor:
    return relu_fwd(x)[0]


def relu_bwd(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_fwd(x: Tensor):
    y = _sigmoid(x.data)
    return Tensor(y), y


def sigmoid(x: Tensor) -> Tensor:
    return sigmoid_fwd(x)[0]


def sigmoid_bwd(dout: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dout * y * (1.0 - y)


# ---------------------------------------------------------------------------
# spatial resampling (both exactly linear: y = R x C^T per channel)

_interp_cache: dict = {}


def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    """Bilinear interpolation weights (align-corners) as a dense matrix."""
    key = ("up", n_in, factor)
    m = _interp_cache.get(key)
    if m is not None:
        return m
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        m[:, 0] = 1.0
    else:
        scale = (n_in - 1) / (n_out - 1)
        for i in range(n_out):
            pos = i * scale
            i0 = min(int(np.floor(pos)), n_in - 2)
            t = pos - i0
            m[i, i0] += 1.0 - t
            m[i, i0 + 1] += t
    _interp_cache[key] = m
    return m


def _pool_matrix(n_in: int, factor: int) -> np.ndarray:
    key = ("pool", n_in, factor)
    m = _interp_cache.get(key)
    if m is not None:
        return m
    n_out = n_in // factor
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        m[i, i * factor:(i + 1) * factor] = 1.0 / factor
    _interp_cache[key] = m
    return m


@dataclass
class ResampleCache:
    r: np.ndarray
    c: np.ndarray


def bilinear_upsample_fwd(x: Tensor, factor: int):
    if factor < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    if x.data.ndim != 3:
        raise ShapeError(f"upsample input must be (C,H,W), got shape {x.shape}")
    _, h, w = x.shape
    r = _interp_matrix(h, factor)
    c = _interp_matrix(w, factor)
    y = np.matmul(np.matmul(r, x.data), c.T)
    return Tensor(y), ResampleCache(r, c)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    return bilinear_upsample_fwd(x, factor)[0]


def bilinear_upsample_bwd(dout: np.ndarray, cache: ResampleCache) -> np.ndarray:
    return np.matmul(np.matmul(cache.r.T, dout), cache.c)


def avgpool2d_fwd(x: Tensor, factor: int):
    if x.data.ndim != 3:
        raise ShapeError(f"avgpool input must be (C,H,W), got shape {x.shape}")
    _, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"spatial axes {h}x{w} not divisible by pool factor {factor}")
    r = _pool_matrix(h, factor)
    c = _pool_matrix(w, factor)
    y = np.matmul(np.matmul(r, x.data), c.T)
    return Tensor(y), ResampleCache(r, c)


def avgpool2d(x: Tensor, factor: int) -> Tensor:
    return avgpool2d_fwd(x, factor)[0]


def avgpool2d_bwd(dout: np.ndarray, cache: ResampleCache) -> np.ndarray:
    return np.matmul(np.matmul(cache.r.T, dout), cache.c)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[], float], params: Sequence[Param], eps: float = 1e-5,
               n_coords: int = 100, seed: int = 0) -> float:
    """Compare analytic gradients of a scalar-valued f against central differences.

    f must zero nothing itself: grads are cleared here, then f() runs one
    forward+backward pass and returns the loss with every param grad filled.
    Returns the max over sampled coordinates of
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if not (1e-7 <= eps <= 1e-4):
        raise ConfigError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    params = list(params)

    def run() -> float:
        for p in params:
            p.zero_grad()
        val = float(f())
        if not np.isfinite(val):
            raise NonFiniteLossError(f"loss evaluated to {val} during gradient check")
        return val

    run()
    analytic = [p.grad.data.copy() for p in params]

    sizes = [p.value.size for p in params]
    offsets = np.cumsum([0] + sizes)
    total = offsets[-1]
    rng = np.random.default_rng(seed)
    picked = rng.choice(total, size=min(n_coords, total), replace=False)

    max_err = 0.0
    for flat in np.sort(picked):
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        off = int(flat - offsets[pi])
        vals = params[pi].value.data.ravel()
        orig = vals[off]
        vals[off] = orig + eps
        lp = run()
        vals[off] = orig - eps
        lm = run()
        vals[off] = orig
        numeric = (lp - lm) / (2.0 * eps)
        ana = analytic[pi].ravel()[off]
        err = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
        max_err = max(max_err, err)
    return max_err
