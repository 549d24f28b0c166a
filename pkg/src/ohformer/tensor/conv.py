"""
Spatial kernels: convolution, bilinear sampling, nearest upsampling, pooling.

All kernels take NCHW arrays. Work is split per batch element through
``parallel_map`` and per-element partial weight gradients are summed in
batch order, so results are identical for any thread count.
"""

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ohformer.errors import ConfigurationError, DimensionError
from ohformer.tensor.core import Function, Tensor
from ohformer.tensor.parallel import parallel_map


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int, groups: int) -> np.ndarray:
    """[C, Hp, Wp] -> [g, C/g * kh * kw, oh * ow]"""
    channels = xp.shape[0]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2))
    return cols.reshape(groups, (channels // groups) * kh * kw, oh * ow)


class Conv2d(Function):
    def forward(self, x, w, stride: int, padding: int, groups: int):
        batch, channels = x.shape[:2]
        out_ch, _, kh, kw = w.shape
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        oh = (xp.shape[2] - kh) // stride + 1
        ow = (xp.shape[3] - kw) // stride + 1
        wg = w.reshape(groups, out_ch // groups, -1)

        def one(b):
            cols = _im2col(xp[b], kh, kw, stride, oh, ow, groups)
            return cols, np.matmul(wg, cols).reshape(out_ch, oh, ow)

        results = parallel_map(one, range(batch))
        self.save_for_backward(xp.shape, w, [r[0] for r in results], stride, padding, groups)
        return np.stack([r[1] for r in results])

    def backward(self, grad):
        xp_shape, w, cols, stride, padding, groups = self.saved
        out_ch, cin_g, kh, kw = w.shape
        oh, ow = grad.shape[2:]
        wg = w.reshape(groups, out_ch // groups, -1)

        def one(b):
            g = grad[b].reshape(groups, out_ch // groups, oh * ow)
            gw = np.matmul(g, np.swapaxes(cols[b], 1, 2)) if self.needs_input_grad[1] else None
            gx = None
            if self.needs_input_grad[0]:
                gcols = np.matmul(np.swapaxes(wg, 1, 2), g)
                gcols = gcols.reshape(groups * cin_g, kh, kw, oh, ow)
                gx = np.zeros(xp_shape[1:], dtype=grad.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gx[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, i, j]
            return gx, gw

        results = parallel_map(one, range(grad.shape[0]))
        gx = gw = None
        if self.needs_input_grad[0]:
            gx = np.stack([r[0] for r in results])
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
        if self.needs_input_grad[1]:
            gw = results[0][1].copy()
            for r in results[1:]:
                gw += r[1]
            gw = gw.reshape(w.shape)
        return gx, gw


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, groups: int = 1,
           bias: Optional[Tensor] = None) -> Tensor:
    """
    2D cross-correlation (no kernel flip) over NCHW input.

    Args:
        x: Input [B, C, H, W]
        w: Weights [O, C/groups, kh, kw]
        stride: Step between output positions
        padding: Zero padding on every side
        groups: Channel groups; ``groups == C`` is a depthwise convolution
        bias: Optional per-output-channel bias [O]

    Raises:
        DimensionError: channel counts do not match the grouping
        ConfigurationError: the kernel does not fit, output extent below 1
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weights", x.shape, w.shape)
    channels = x.shape[1]
    if channels % groups or w.shape[0] % groups or w.shape[1] != channels // groups:
        raise DimensionError(f"conv2d channels do not fit groups={groups}", x.shape, w.shape)
    oh = conv_output_size(x.shape[2], w.shape[2], stride, padding)
    ow = conv_output_size(x.shape[3], w.shape[3], stride, padding)
    if oh < 1 or ow < 1:
        raise ConfigurationError(
            f"conv2d output extent {oh}x{ow} for input {x.shape[2]}x{x.shape[3]}, "
            f"kernel {w.shape[2]}x{w.shape[3]}, stride {stride}, padding {padding}"
        )
    out = Conv2d.apply(x, w, stride=stride, padding=padding, groups=groups)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def _corners(coords: np.ndarray, height: int, width: int):
    """Yield (row, col, weight, d_weight/dy, d_weight/dx, valid) for the four bilinear taps."""
    y, x = coords[:, 0], coords[:, 1]
    y0f, x0f = np.floor(y), np.floor(x)
    fy, fx = y - y0f, x - x0f
    y0, x0 = y0f.astype(np.int64), x0f.astype(np.int64)
    taps = (
        (y0, x0, (1 - fy) * (1 - fx), -(1 - fx), -(1 - fy)),
        (y0, x0 + 1, (1 - fy) * fx, -fx, 1 - fy),
        (y0 + 1, x0, fy * (1 - fx), 1 - fx, -fy),
        (y0 + 1, x0 + 1, fy * fx, fx, fy),
    )
    for row, col, weight, dwy, dwx in taps:
        valid = (row >= 0) & (row < height) & (col >= 0) & (col < width)
        yield np.clip(row, 0, height - 1), np.clip(col, 0, width - 1), weight, dwy, dwx, valid


class BilinearSample(Function):
    def forward(self, x, coords):
        height, width = x.shape[2:]

        def one(b):
            out = np.zeros((x.shape[1], coords.shape[1]), dtype=x.dtype)
            for row, col, weight, _, _, valid in _corners(coords[b], height, width):
                out += x[b][:, row, col] * (weight * valid)
            return out

        self.save_for_backward(x, coords)
        return np.stack(parallel_map(one, range(x.shape[0])))

    def backward(self, grad):
        x, coords = self.saved
        channels, height, width = x.shape[1:]

        def one(b):
            gx = np.zeros((channels, height * width), dtype=x.dtype) if self.needs_input_grad[0] else None
            gc = np.zeros(coords.shape[1:], dtype=coords.dtype) if self.needs_input_grad[1] else None
            for row, col, weight, dwy, dwx, valid in _corners(coords[b], height, width):
                if gx is not None:
                    np.add.at(gx.T, row * width + col, (grad[b] * (weight * valid)).T)
                if gc is not None:
                    g_val = (grad[b] * x[b][:, row, col]).sum(axis=0) * valid
                    gc[:, 0] += g_val * dwy
                    gc[:, 1] += g_val * dwx
            if gx is not None:
                gx = gx.reshape(channels, height, width)
            return gx, gc

        results = parallel_map(one, range(x.shape[0]))
        gx = np.stack([r[0] for r in results]) if self.needs_input_grad[0] else None
        gc = np.stack([r[1] for r in results]) if self.needs_input_grad[1] else None
        return gx, gc


def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """
    Sample ``x`` [B, C, H, W] at real (y, x) positions ``coords`` [B, P, 2].

    Taps outside the grid contribute zero. Differentiable in both inputs.
    Returns [B, C, P].
    """
    if x.ndim != 4 or coords.ndim != 3 or coords.shape[-1] != 2 or coords.shape[0] != x.shape[0]:
        raise DimensionError("bilinear_sample expects x [B,C,H,W] and coords [B,P,2]", x.shape, coords.shape)
    return BilinearSample.apply(x, coords)


def nearest_index(fine: int, coarse: int) -> np.ndarray:
    """Map fine positions 0..fine-1 to coarse cells by floor(i * coarse / fine)."""
    return (np.arange(fine) * coarse) // fine


class NearestUpsample(Function):
    def forward(self, x, size: Tuple[int, int]):
        rows = nearest_index(size[0], x.shape[2])
        cols = nearest_index(size[1], x.shape[3])
        self.save_for_backward(x.shape, rows, cols)
        return x[:, :, rows][:, :, :, cols]

    def backward(self, grad):
        shape, rows, cols = self.saved
        out = np.zeros(shape, dtype=grad.dtype)
        np.add.at(out, (slice(None), slice(None), rows[:, None], cols[None, :]), grad)
        return (out,)


def nearest_upsample2d(x: Tensor, size: Tuple[int, int]) -> Tensor:
    """
    Nearest-neighbour upsampling of [B, C, h, w] to [B, C, H, W].

    Raises:
        ConfigurationError: target smaller than the source grid
    """
    height, width = size
    if height < x.shape[2] or width < x.shape[3]:
        raise ConfigurationError(f"upsample target {height}x{width} smaller than source {x.shape[2]}x{x.shape[3]}")
    if (height, width) == x.shape[2:]:
        return x
    return NearestUpsample.apply(x, size=(height, width))


class MaxPool2d(Function):
    def forward(self, x, kernel: int, stride: int, padding: int):
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
        oh = (xp.shape[2] - kernel) // stride + 1
        ow = (xp.shape[3] - kernel) // stride + 1
        win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
        win = win.reshape(*win.shape[:4], kernel * kernel)
        arg = win.argmax(axis=-1)
        self.save_for_backward(x.shape, xp.shape, arg, kernel, stride, padding)
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        shape, xp_shape, arg, kernel, stride, padding = self.saved
        batch, channels, oh, ow = grad.shape
        rows = np.arange(oh)[:, None] * stride + arg // kernel
        cols = np.arange(ow)[None, :] * stride + arg % kernel
        gx = np.zeros(xp_shape, dtype=grad.dtype)
        b_idx = np.arange(batch)[:, None, None, None]
        c_idx = np.arange(channels)[None, :, None, None]
        np.add.at(gx, (b_idx, c_idx, rows, cols), grad)
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        return (gx,)


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    if conv_output_size(x.shape[2], kernel, stride, padding) < 1:
        raise ConfigurationError(f"max_pool2d kernel {kernel} does not fit input {x.shape[2]}x{x.shape[3]}")
    return MaxPool2d.apply(x, kernel=kernel, stride=stride, padding=padding)


def avg_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Average pooling; padded cells are excluded from each window's count."""
    channels = x.shape[1]
    ones = np.ones((channels, 1, kernel, kernel), dtype=x.dtype)
    summed = conv2d(x, Tensor(ones), stride=stride, padding=padding, groups=channels)
    counts = conv2d(Tensor(np.ones((1, 1) + x.shape[2:], dtype=x.dtype)),
                    Tensor(ones[:1]), stride=stride, padding=padding)
    return summed / counts
