"""Deterministic float64 kernels over single-image feature grids.

Everything here works on one image at a time (no batch axis) and favours
exactness over speed: convolutions are direct tap sums, never im2col or FFT.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible.

    ``dim`` names the offending dimension (``"channels"``, ``"height"``, ...).
    """

    def __init__(self, message: str, dim: str | None = None):
        super().__init__(message)
        self.dim = dim


class Grid:
    """A dense channels x height x width array of float64 values."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeError(f"grid must be rank 3 (c, h, w), got rank {arr.ndim}", "rank")
        for name, n in zip(("channels", "height", "width"), arr.shape):
            if n < 1:
                raise ShapeError(f"grid {name} must be >= 1, got {n}", name)
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> "Grid":
        return cls(np.zeros((channels, height, width)))

    @classmethod
    def from_values(cls, channels: int, height: int, width: int, values) -> "Grid":
        """Build from a flat row-major (c, y, x) value sequence."""
        flat = np.asarray(values, dtype=np.float64).ravel()
        if flat.size != channels * height * width:
            raise ShapeError(
                f"expected {channels * height * width} values, got {flat.size}", "values"
            )
        return cls(flat.reshape(channels, height, width))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel()

    def __repr__(self):
        return f"Grid({self.channels}x{self.height}x{self.width})"

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    weights: np.ndarray | None = None  # (out, in, k, k)
    bias: np.ndarray | None = None  # (out,)
    transposed: bool = field(default=False, repr=False)

    def __post_init__(self):
        if self.kernel < 1:
            raise ValueError(f"kernel must be >= 1, got {self.kernel}")
        if not self.transposed and self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError("stride and dilation must be >= 1, padding >= 0")
        wshape = (self.out_channels, self.in_channels, self.kernel, self.kernel)
        if self.weights is None:
            self.weights = np.zeros(wshape)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != wshape:
            raise ShapeError(f"weights shape {self.weights.shape} != {wshape}", "weights")
        if self.bias is None:
            self.bias = np.zeros(self.out_channels)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.bias.shape != (self.out_channels,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.out_channels},)", "bias")

    @property
    def extent(self) -> int:
        """Effective kernel extent (k - 1) * r + 1."""
        return (self.kernel - 1) * self.dilation + 1

    def out_size(self, n: int) -> int:
        if self.transposed:
            return transposed_out_size(n, self.stride)
        return conv_out_size(n, self.kernel, self.stride, self.dilation, self.padding)


def conv_out_size(n: int, kernel: int, stride: int = 1, dilation: int = 1, padding: int = 0) -> int:
    return (n + 2 * padding - (kernel - 1) * dilation - 1) // stride + 1


def transposed_out_size(n: int, stride: int) -> int:
    return stride * n


def transposed_crop(kernel: int, stride: int, dilation: int) -> tuple[int, int]:
    """Rows removed (front, back) from the full scatter so that out = stride * in.

    The full scatter has (n - 1) * s + (k - 1) * d + 1 rows; the excess is
    split symmetrically, with an odd leftover taken from the front.
    """
    excess = (kernel - 1) * dilation + 1 - stride
    if excess < 0:
        raise ShapeError(
            f"kernel extent {(kernel - 1) * dilation + 1} is smaller than stride {stride}", "kernel"
        )
    return (excess + 1) // 2, excess // 2


def _check_channels(grid: Grid, expected: int):
    if grid.channels != expected:
        raise ShapeError(
            f"input has {grid.channels} channels, spec expects {expected}", "channels"
        )


def conv2d(x: Grid, spec: ConvSpec) -> Grid:
    """Direct-sum 2-D cross-correlation with zero padding."""
    _check_channels(x, spec.in_channels)
    oh = spec.out_size(x.height)
    ow = spec.out_size(x.width)
    if oh < 1:
        raise ShapeError(f"output height {oh} < 1", "height")
    if ow < 1:
        raise ShapeError(f"output width {ow} < 1", "width")
    p, s, d = spec.padding, spec.stride, spec.dilation
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    out = np.zeros((spec.out_channels, oh, ow))
    for ky in range(spec.kernel):
        y0 = ky * d
        for kx in range(spec.kernel):
            x0 = kx * d
            patch = xp[:, y0 : y0 + (oh - 1) * s + 1 : s, x0 : x0 + (ow - 1) * s + 1 : s]
            out += np.tensordot(spec.weights[:, :, ky, kx], patch, axes=(1, 0))
    out += spec.bias[:, None, None]
    return Grid(out)


def conv_transpose2d(x: Grid, spec: ConvSpec) -> Grid:
    """Transposed convolution with output size exactly stride * input size.

    ``spec.weights`` keeps the (out, in, k, k) layout used by :func:`conv2d`;
    ``spec.padding`` is ignored in favour of the implicit symmetric crop.
    """
    if spec.stride not in (1, 2):
        raise ValueError(f"transposed convolution supports stride 1 or 2, got {spec.stride}")
    _check_channels(x, spec.in_channels)
    s, d, k = spec.stride, spec.dilation, spec.kernel
    front, back = transposed_crop(k, s, d)
    fh = (x.height - 1) * s + (k - 1) * d + 1
    fw = (x.width - 1) * s + (k - 1) * d + 1
    full = np.zeros((spec.out_channels, fh, fw))
    for ky in range(k):
        y0 = ky * d
        for kx in range(k):
            x0 = kx * d
            contrib = np.tensordot(spec.weights[:, :, ky, kx], x.data, axes=(1, 0))
            full[:, y0 : y0 + (x.height - 1) * s + 1 : s, x0 : x0 + (x.width - 1) * s + 1 : s] += contrib
    out = full[:, front : fh - back, front : fw - back] + spec.bias[:, None, None]
    return Grid(out)


def pixel_shuffle(x: Grid, factor: int) -> Grid:
    """Rearrange (c*f*f, h, w) into (c, h*f, w*f).

    Output cell (c, y*f + i, x*f + j) takes input channel c*f*f + i*f + j at (y, x).
    """
    f = factor
    if f < 1:
        raise ValueError(f"factor must be >= 1, got {f}")
    if x.channels % (f * f):
        raise ShapeError(f"{x.channels} channels not divisible by factor^2 = {f * f}", "channels")
    c = x.channels // (f * f)
    a = x.data.reshape(c, f, f, x.height, x.width)
    return Grid(a.transpose(0, 3, 1, 4, 2).reshape(c, x.height * f, x.width * f))


def pixel_unshuffle(x: Grid, factor: int) -> Grid:
    """Inverse of :func:`pixel_shuffle`."""
    f = factor
    if x.height % f or x.width % f:
        raise ShapeError(f"spatial size {x.height}x{x.width} not divisible by {f}", "height")
    c, h, w = x.channels, x.height // f, x.width // f
    a = x.data.reshape(c, h, f, w, f)
    return Grid(a.transpose(0, 2, 4, 1, 3).reshape(c * f * f, h, w))


def concat_channels(inputs) -> Grid:
    inputs = list(inputs)
    if not inputs:
        raise ValueError("concat_channels needs at least one grid")
    h, w = inputs[0].height, inputs[0].width
    for g in inputs[1:]:
        if g.height != h:
            raise ShapeError(f"height mismatch: {g.height} vs {h}", "height")
        if g.width != w:
            raise ShapeError(f"width mismatch: {g.width} vs {w}", "width")
    return Grid(np.concatenate([g.data for g in inputs], axis=0))


def add_elementwise(a: Grid, b: Grid) -> Grid:
    for name, m, n in zip(("channels", "height", "width"), a.shape, b.shape):
        if m != n:
            raise ShapeError(f"{name} mismatch: {m} vs {n}", name)
    return Grid(a.data + b.data)


def mish_scalar(x):
    return x * np.tanh(np.logaddexp(0.0, x))


def mish(x: Grid) -> Grid:
    return Grid(mish_scalar(x.data))


def relu(x: Grid) -> Grid:
    return Grid(np.maximum(x.data, 0.0))


def batch_norm(x: Grid, mean, var, weight, bias, eps: float = 1e-5) -> Grid:
    """Inference-mode batch norm with fixed statistics."""
    scale = np.asarray(weight, dtype=np.float64) / np.sqrt(np.asarray(var, dtype=np.float64) + eps)
    shift = np.asarray(bias, dtype=np.float64) - np.asarray(mean, dtype=np.float64) * scale
    if scale.shape != (x.channels,):
        raise ShapeError(f"batch norm expects {scale.shape[0]} channels, got {x.channels}", "channels")
    return Grid(x.data * scale[:, None, None] + shift[:, None, None])


def max_pool2d(x: Grid, kernel: int = 3, stride: int = 2, padding: int = 1) -> Grid:
    oh = conv_out_size(x.height, kernel, stride, 1, padding)
    ow = conv_out_size(x.width, kernel, stride, 1, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"max pool output {oh}x{ow} is empty", "height" if oh < 1 else "width")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    out = np.full((x.channels, oh, ow), -np.inf)
    for ky in range(kernel):
        for kx in range(kernel):
            np.maximum(
                out,
                xp[:, ky : ky + (oh - 1) * stride + 1 : stride, kx : kx + (ow - 1) * stride + 1 : stride],
                out=out,
            )
    return Grid(out)
