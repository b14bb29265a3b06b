"""Convolutional layer vocabulary: strided and transposed convolutions,
instance normalization, residual blocks and parameter containers."""

from __future__ import annotations

from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .autodiff import Tensor, _make, add, leaky_relu, matmul, relu, tanh
from .errors import DimensionError

LEAKY_SLOPE = 0.2
NORM_EPS = 1e-5


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    if size + 2 * padding < kernel:
        raise DimensionError(f"kernel {kernel} exceeds padded input {size + 2 * padding}")
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _im2col(xn: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of an NHWC array as rows of (N*ho*wo, kh*kw*C), channel fastest."""
    n, _, _, c = xn.shape
    sn, sh, sw, sc = xn.strides
    win = as_strided(xn, (n, ho, wo, kh, kw, c), (sn, sh * stride, sw * stride, sh, sw, sc),
                     writeable=False)
    return win.reshape(n * ho * wo, kh * kw * c)


def _col2im(cols: np.ndarray, out_shape: tuple[int, int, int, int], kh: int, kw: int,
            stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add rows back into an NHWC array."""
    n, _, _, c = out_shape
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros(out_shape, dtype=cols.dtype)
    he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + he : stride, j : j + we : stride, :] += cols[:, :, :, i, j, :]
    return out


def _wmat(w: np.ndarray) -> np.ndarray:
    """(O, C, kh, kw) -> (O, kh*kw*C) matching the :func:`_im2col` column order."""
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _pad_nhwc(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def _to_nchw(x: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(n, h, w, -1).transpose(0, 3, 1, 2))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of an (N, C, H, W) batch with (O, C, kh, kw) weights."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, weights expect {ci}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: {h}x{w} input too small for kernel {kh}x{kw}")
    xp = _pad_nhwc(_nhwc(x.data), padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = _wmat(weight.data)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    need_x, need_w = x.requires_grad, weight.requires_grad

    def backward(g):
        g2 = _nhwc(g).reshape(-1, o)
        dw = None
        if need_w:
            dw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        dx = None
        if need_x:
            dxp = _col2im(g2 @ wmat, xp.shape, kh, kw, stride, ho, wo)
            dx = dxp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)
        if bias is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(_to_nchw(out, n, ho, wo), inputs, backward, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; weights are (in_ch, out_ch, kh, kw)."""
    if x.ndim != 4:
        raise DimensionError(f"conv_transpose2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    ci, o, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"conv_transpose2d: input has {c} channels, weights expect {ci}")
    ho = conv_transpose_output_size(h, kh, stride, padding)
    wo = conv_transpose_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError("conv_transpose2d: padding leaves no output")
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    xflat = _nhwc(x.data).reshape(-1, c)
    # (Cin, kh*kw*Cout): the conv2d weight matrix read with roles swapped
    wmat = _wmat(weight.data)
    full = _col2im(xflat @ wmat, (n, hf, wf, o), kh, kw, stride, h, w)
    out = full[:, padding : padding + ho, padding : padding + wo, :]
    if bias is not None:
        out = out + bias.data
    need_x, need_w = x.requires_grad, weight.requires_grad

    def backward(g):
        gcols = _im2col(_pad_nhwc(_nhwc(g), padding), kh, kw, stride, h, w)
        dx = None
        if need_x:
            dx = _to_nchw(gcols @ wmat.T, n, h, w)
        dw = None
        if need_w:
            dw = (xflat.T @ gcols).reshape(c, kh, kw, o).transpose(0, 3, 1, 2)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out.transpose(0, 3, 1, 2)), inputs, backward,
                 "conv_transpose2d")


def instance_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
                  eps: float = NORM_EPS) -> Tensor:
    """Per-sample, per-channel standardization over spatial axes plus affine."""
    if x.ndim != 4:
        raise DimensionError(f"instance_norm expects (N, C, H, W), got {x.shape}")
    c = x.shape[1]
    mean = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gdata = np.ones(c, x.dtype) if gamma is None else gamma.data
    out = xhat * gdata.reshape(1, c, 1, 1)
    if beta is not None:
        out = out + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        dxhat = g * gdata.reshape(1, c, 1, 1)
        dx = inv * (dxhat - dxhat.mean(axis=(2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=(2, 3), keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3)))
        if beta is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x,) + tuple(t for t in (gamma, beta) if t is not None)
    return _make(out.astype(x.dtype, copy=False), inputs, backward, "instance_norm")


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class Module:
    """Minimal parameter container; attributes holding tensors or modules are tracked."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for k, p in self._params.items():
            yield prefix + k, p
        for k, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = _param(np.zeros((out_ch, in_ch, kernel, kernel), np.float32))
        self.bias = _param(np.zeros(out_ch, np.float32))
        if rng is not None:
            init_params(self, rng)

    @property
    def fan_in(self) -> int:
        _, c, kh, kw = self.weight.shape
        return c * kh * kw

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = _param(np.zeros((in_ch, out_ch, kernel, kernel), np.float32))
        self.bias = _param(np.zeros(out_ch, np.float32))
        if rng is not None:
            init_params(self, rng)

    @property
    def fan_in(self) -> int:
        # inputs feeding one output pixel
        c, _, kh, kw = self.weight.shape
        return max(1, c * kh * kw // (self.stride * self.stride))

    def forward(self, x):
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.weight = _param(np.zeros((in_features, out_features), np.float32))
        self.bias = _param(np.zeros(out_features, np.float32))
        if rng is not None:
            init_params(self, rng)

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        return add(matmul(x, self.weight), self.bias)


class InstanceNorm(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = _param(np.ones(channels, np.float32))
        self.beta = _param(np.zeros(channels, np.float32))

    def forward(self, x):
        return instance_norm(x, self.gamma, self.beta)


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "lrelu":
        return leaky_relu(x, LEAKY_SLOPE)
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "none":
        return x
    raise ValueError(f"unknown activation {kind!r}")


class ConvBlock(Module):
    """Convolution (plain or transposed), optional instance norm, activation."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, padding: int,
                 act: str, norm: bool, rng: np.random.Generator, transpose: bool = False):
        super().__init__()
        cls = ConvTranspose2d if transpose else Conv2d
        self.conv = cls(in_ch, out_ch, kernel, stride, padding, rng)
        self.norm = InstanceNorm(out_ch) if norm else None
        self.act = act

    def forward(self, x):
        y = self.conv(x)
        if self.norm is not None:
            y = self.norm(y)
        return activate(y, self.act)


class ResidualBlock(Module):
    """``x + norm(conv(act(norm(conv(x)))))`` with 3x3 same-size convolutions."""

    def __init__(self, channels: int, act: str, norm: bool, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, 1, 1, rng)
        self.conv2 = Conv2d(channels, channels, 3, 1, 1, rng)
        self.norm1 = InstanceNorm(channels) if norm else None
        self.norm2 = InstanceNorm(channels) if norm else None
        self.act = act

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.conv1.weight.shape[1]:
            raise DimensionError(
                f"residual block expects {self.conv1.weight.shape[1]} channels, got {x.shape}")
        y = self.conv1(x)
        if self.norm1 is not None:
            y = self.norm1(y)
        y = activate(y, self.act)
        y = self.conv2(y)
        if self.norm2 is not None:
            y = self.norm2(y)
        return x + y


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        object.__setattr__(self, "layers", list(layers))
        for i, layer in enumerate(layers):
            self._children[str(i)] = layer

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, i: int) -> Module:
        return self.layers[i]

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def init_params(layer: Module, rng: np.random.Generator | int) -> Module:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases, unit norm gains.

    Accepts a seed or a generator; a seed gives bit-identical results on every call.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    stack = [layer]
    while stack:
        mod = stack.pop(0)
        if isinstance(mod, (Conv2d, ConvTranspose2d, Linear)):
            std = np.sqrt(2.0 / mod.fan_in)
            w = mod.weight
            w.data[...] = rng.standard_normal(w.shape) * std
            mod.bias.data[...] = 0
        elif isinstance(mod, InstanceNorm):
            mod.gamma.data[...] = 1
            mod.beta.data[...] = 0
        else:
            stack.extend(mod._children.values())
    return layer
