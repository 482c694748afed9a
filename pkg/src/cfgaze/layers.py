"""Neural layers and the face/eye backbone stacks.

Every conv is 3x3 with 1 pixel of padding on each side, so spatial
reduction comes only from the 2x2/stride-2 max pools. A block is
conv -> ReLU -> batch norm, in that order. Weights use He (MSRA)
initialization: Normal(0, sqrt(2/fan_in)), zero biases.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import ShapeError, Tensor, _accumulate, _make_output


# ---------------------------------------------------------------------------
# convolution


def _nhwc_cols(x: np.ndarray, stride: int) -> tuple:
    """im2col in channel-last order: (N*Ho*Wo, 9*C) columns, tap-major.

    Channel-last keeps the innermost copy stride contiguous, which is what
    makes the GEMM path fast on this layout.
    """
    n, c, h, wd = x.shape
    xp = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, 9 * c)
    return np.ascontiguousarray(cols), ho, wo


def _weight_as_cols(w: np.ndarray) -> np.ndarray:
    """(O, C, 3, 3) kernel as a (9*C, O) matrix matching _nhwc_cols order."""
    return w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0])


def conv2d_forward_data(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    """3x3/padding-1 conv via im2col + GEMM; returns (output, columns).

    The columns are reused by conv2d_weight_grad during backward.
    """
    n = x.shape[0]
    o = w.shape[0]
    cols, ho, wo = _nhwc_cols(x, stride)
    out = cols @ _weight_as_cols(w)
    out += b
    return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)), cols


def conv2d_weight_grad(g: np.ndarray, cols: np.ndarray, c_in: int) -> np.ndarray:
    """d(loss)/d(kernel) from the forward columns: one GEMM."""
    o = g.shape[1]
    gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
    return (cols.T @ gmat).reshape(3, 3, c_in, o).transpose(3, 2, 0, 1)


def conv2d_input_grad(g: np.ndarray, w: np.ndarray, x_shape, stride: int) -> np.ndarray:
    """d(loss)/d(input).

    stride 1: a same-padded conv of g with the rotated, channel-swapped
    kernel (exact adjoint of padding-1 3x3 correlation). Other strides take
    the generic tap-scatter path.
    """
    n, c, h, wd = x_shape
    if stride == 1:
        w_rot = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (C, O, 3, 3)
        gcols, ho, wo = _nhwc_cols(g, 1)
        dx = gcols @ _weight_as_cols(w_rot)
        return np.ascontiguousarray(dx.reshape(n, ho, wo, c).transpose(0, 3, 1, 2))
    ho, wo = g.shape[2], g.shape[3]
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=g.dtype)
    gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, w.shape[0])
    wcols = _weight_as_cols(w)  # (9C, O), tap-major
    dcols = (gmat @ wcols.T).reshape(n, ho, wo, 3, 3, c)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride, :] += \
                dcols[:, :, :, ky, kx, :]
    return np.ascontiguousarray(dxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2))


class Conv2d:
    """3x3 convolution, padding 1, configurable stride."""

    def __init__(self, in_channels: int, out_channels: int, rng, stride: int = 1,
                 dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        fan_in = in_channels * 9
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_channels, in_channels, 3, 3))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"conv2d expects (N,{self.in_channels},H,W), got {tuple(x.shape)}")
        if x.shape[2] < 1 or x.shape[3] < 1:
            raise ShapeError(f"conv2d input too small: {tuple(x.shape)}")
        weight, bias, stride = self.weight, self.bias, self.stride
        x_shape = x.shape
        c_in = self.in_channels
        out, cols = conv2d_forward_data(x.data, weight.data, bias.data, stride)

        def _bw(g):
            _accumulate(weight, conv2d_weight_grad(g, cols, c_in))
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                _accumulate(x, conv2d_input_grad(g, weight.data, x_shape, stride))

        return _make_output(out, (x, weight, bias), _bw)

    def params(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class BatchNorm2d:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes by batch statistics and updates the running
    stats (unbiased variance, torch-style); eval mode uses the running
    stats and stays differentiable.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects (N,{self.channels},H,W), got {tuple(x.shape)}")
        gamma, beta, eps = self.gamma, self.beta, self.eps
        if train:
            n, _, h, w = x.shape
            m = n * h * w
            if n < 2:
                raise ValueError("batchnorm train mode needs batch size >= 2")
            mu = x.data.mean(axis=(0, 2, 3))
            var = x.data.var(axis=(0, 2, 3))
            self.running_mean[:] = (1 - self.momentum) * self.running_mean + self.momentum * mu
            unbiased = var * m / (m - 1)
            self.running_var[:] = (1 - self.momentum) * self.running_var + self.momentum * unbiased
            inv_std = 1.0 / np.sqrt(var + eps)
            xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
            out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

            def _bw(g):
                _accumulate(gamma, np.sum(g * xhat, axis=(0, 2, 3)))
                _accumulate(beta, np.sum(g, axis=(0, 2, 3)))
                if x.requires_grad:
                    dxhat = g * gamma.data[None, :, None, None]
                    sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                    dx = (inv_std[None, :, None, None] / m) * (
                        m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
                    _accumulate(x, dx)

            return _make_output(out, (x, gamma, beta), _bw)

        inv_std = 1.0 / np.sqrt(self.running_var + eps)
        xhat = (x.data - self.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def _bw_eval(g):
            _accumulate(gamma, np.sum(g * xhat, axis=(0, 2, 3)))
            _accumulate(beta, np.sum(g, axis=(0, 2, 3)))
            _accumulate(x, g * (gamma.data * inv_std)[None, :, None, None])

        return _make_output(out, (x, gamma, beta), _bw_eval)

    def params(self, prefix: str):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]

    def state(self, prefix: str):
        return self.params(prefix) + [
            (f"{prefix}.running_mean", self.running_mean),
            (f"{prefix}.running_var", self.running_var),
        ]


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2/stride-2 max pool; odd trailing rows/cols are padded with -inf.

    Gradient routes to the window argmax, first occurrence on ties.
    """
    n, c, h, w = x.shape
    hp, wp = h + (h % 2), w + (w % 2)
    if (h, w) != (hp, wp):
        data = np.pad(x.data, ((0, 0), (0, 0), (0, hp - h), (0, wp - w)),
                      constant_values=-np.inf)
    else:
        data = x.data
    ho, wo = hp // 2, wp // 2
    windows = data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, ho, wo, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def _bw(g):
        gw = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gp = gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hp, wp)
        _accumulate(x, gp[:, :, :h, :w])

    return _make_output(out, (x,), _bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean; gradient is uniform 1/(H*W)."""
    n, c, h, w = x.shape

    def _bw(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)))

    return _make_output(x.data.mean(axis=(2, 3)), (x,), _bw)


class Linear:
    """Affine map (N, in) -> (N, out), MSRA-initialized weight, zero bias."""

    def __init__(self, in_features: int, out_features: int, rng, dtype=np.float32,
                 weight_std=None):
        std = math.sqrt(2.0 / in_features) if weight_std is None else weight_std
        w = rng.normal(0.0, std, size=(in_features, out_features))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), T.expand0(self.bias, x.shape[0]))

    def params(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


# ---------------------------------------------------------------------------
# backbones


@dataclass(frozen=True)
class BackboneSpec:
    """Stack description: conv block channels, pool placement, input geometry."""

    channels: tuple
    pool_after: tuple  # 1-indexed block positions followed by a 2x2 max pool
    strides: tuple
    in_channels: int
    input_hw: tuple
    feature_dim: int = 256
    width_scale: float = 1.0

    def __post_init__(self):
        if len(self.strides) != len(self.channels):
            raise ValueError("strides and channels must have equal length")
        if min(self.channels) < 1 or self.feature_dim < 1:
            raise ValueError("channel counts must stay >= 1 (width_scale too small?)")
        bad = [p for p in self.pool_after if not 1 <= p <= len(self.channels)]
        if bad:
            raise ValueError(f"pool positions out of range: {bad}")

    def scaled(self, width_scale: float) -> "BackboneSpec":
        """Shrink channel counts (ceil) and the feature dim (round) for desk scale."""
        if width_scale == 1.0:
            return self
        return replace(
            self,
            channels=tuple(math.ceil(c * width_scale) for c in self.channels),
            feature_dim=int(round(self.feature_dim * width_scale)),
            width_scale=width_scale,
        )


FACE_SPEC = BackboneSpec(
    channels=(64, 64, 128, 128, 256, 256, 256, 256, 256, 256, 512, 512, 1024),
    pool_after=(2, 4, 7, 10),
    strides=(1,) * 13,
    in_channels=3,
    input_hw=(224, 224),
)

EYE_SPEC = BackboneSpec(
    channels=(64, 64, 128, 128, 128, 256, 256, 256, 512, 1024),
    pool_after=(2, 5, 8),
    strides=(1,) * 10,
    in_channels=1,
    input_hw=(36, 60),
)


class Backbone:
    """Conv blocks (conv -> ReLU -> BN) with pools, then GAP and a linear head."""

    def __init__(self, spec: BackboneSpec, seed: int, dtype=np.float32):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.convs = []
        self.bns = []
        c_in = spec.in_channels
        for c_out, stride in zip(spec.channels, spec.strides):
            self.convs.append(Conv2d(c_in, c_out, rng, stride=stride, dtype=dtype))
            self.bns.append(BatchNorm2d(c_out, dtype=dtype))
            c_in = c_out
        self.fc = Linear(spec.channels[-1], spec.feature_dim, rng, dtype=dtype)
        self._pool_after = frozenset(spec.pool_after)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns), start=1):
            x = bn.forward(T.relu(conv.forward(x)), train)
            if i in self._pool_after:
                x = maxpool2x2(x)
        return self.fc.forward(global_avg_pool(x))

    def params(self, prefix: str):
        out = []
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns), start=1):
            out += conv.params(f"{prefix}.block{i}.conv")
            out += bn.params(f"{prefix}.block{i}.bn")
        out += self.fc.params(f"{prefix}.fc")
        return out

    def state(self, prefix: str):
        out = []
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns), start=1):
            out += conv.params(f"{prefix}.block{i}.conv")
            out += bn.state(f"{prefix}.block{i}.bn")
        out += self.fc.params(f"{prefix}.fc")
        return out


def build_backbone(spec: BackboneSpec, seed: int, dtype=np.float32) -> Backbone:
    return Backbone(spec, seed, dtype=dtype)


# ---------------------------------------------------------------------------
# weight file: magic "CANW", u32 version, u32 count,
# then per tensor: u16 name length, UTF-8 name, tensor_core serialization

_WEIGHTS_MAGIC = b"CANW"
WEIGHTS_VERSION = 1


class WeightFileError(ValueError):
    pass


def save_weights(path, named_tensors, version: int = WEIGHTS_VERSION):
    """Write (name, array-or-Tensor) pairs; names are stable dotted paths."""
    items = list(named_tensors)
    blob = bytearray()
    blob += _WEIGHTS_MAGIC
    blob += struct.pack("<II", version, len(items))
    for name, value in items:
        raw = value.data if isinstance(value, Tensor) else np.asarray(value)
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += T.tensor_to_bytes(raw)
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_weights(path):
    """Read a weight file back as an ordered dict name -> float32 array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _WEIGHTS_MAGIC:
        raise WeightFileError(f"bad weight-file magic in {path}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != WEIGHTS_VERSION:
        raise WeightFileError(f"unsupported weight-file version {version}")
    offset = 12
    out = {}
    for _ in range(count):
        if offset + 2 > len(buf):
            raise WeightFileError("truncated weight file (name length)")
        (nlen,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset:offset + nlen].decode("utf-8")
        offset += nlen
        try:
            arr, offset = T.tensor_from_bytes(buf, offset)
        except ValueError as exc:
            raise WeightFileError(f"corrupt tensor {name!r}: {exc}") from exc
        out[name] = arr
    return out
