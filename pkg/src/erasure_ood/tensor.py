"""Dense NCHW kernels with hand-written backward passes.

Arrays are plain ``numpy.ndarray`` objects in N x C x H x W layout.  Every
kernel preserves the floating dtype of its input, so the same code runs in
float32 for training and in float64 when a finite-difference oracle needs
clean arithmetic.  Convolution is cross-correlation (no kernel flip) with
zero padding, lowered to a single matrix product via im2col.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when array dimensions are inconsistent with a kernel."""


class NonFiniteError(FloatingPointError):
    """Raised when a kernel produces NaN or Inf."""


@dataclass
class ConvParams:
    kernel: np.ndarray  # (C_out, C_in, k, k)
    bias: np.ndarray  # (C_out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3]:
            raise ShapeError(f"kernel must be (C_out, C_in, k, k), got {self.kernel.shape}")
        if self.kernel.shape[2] % 2 != 1:
            raise ShapeError(f"kernel size must be odd, got {self.kernel.shape[2]}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match C_out={self.kernel.shape[0]}"
            )
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")

    @property
    def k(self) -> int:
        return self.kernel.shape[2]

    @property
    def c_in(self) -> int:
        return self.kernel.shape[1]

    @property
    def c_out(self) -> int:
        return self.kernel.shape[0]

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.k) // self.stride + 1
        wo = (w + 2 * self.padding - self.k) // self.stride + 1
        return ho, wo


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values produced by {where}")
    return x


def _check_input(x: np.ndarray, p: ConvParams) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected N x C x H x W input, got shape {x.shape}")
    if x.shape[1] != p.c_in:
        raise ShapeError(f"input channel dim is {x.shape[1]}, kernel expects C_in={p.c_in}")
    ho, wo = p.output_hw(x.shape[2], x.shape[3])
    if ho < 1:
        raise ShapeError(f"input height {x.shape[2]} too small for k={p.k}, padding={p.padding}")
    if wo < 1:
        raise ShapeError(f"input width {x.shape[3]} too small for k={p.k}, padding={p.padding}")


def _pad_nhwc(x: np.ndarray, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    xh = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xh[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    return xh


def _im2col(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Return patches as a (N*Ho*Wo, k*k*C) matrix, columns ordered (ki, kj, c)."""
    n, c, h, w = x.shape
    ho, wo = p.output_hw(h, w)
    k, s = p.k, p.stride
    xh = _pad_nhwc(x, p.padding)
    win = sliding_window_view(xh, (k, k), axis=(1, 2))[:, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
    # (N, Ho, Wo, C, k, k) -> (N, Ho, Wo, k, k, C)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n * ho * wo, k * k * c)


def _kernel_matrix(p: ConvParams, dtype) -> np.ndarray:
    # (C_out, C_in, k, k) -> (C_out, k*k*C_in), matching the im2col column order
    return np.ascontiguousarray(p.kernel.transpose(0, 2, 3, 1), dtype=dtype).reshape(p.c_out, -1)


def _is_pointwise(p: ConvParams) -> bool:
    return p.k == 1 and p.stride == 1 and p.padding == 0


def conv2d_forward(x: np.ndarray, p: ConvParams, cols: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlate ``x`` with ``p.kernel`` and add ``p.bias``.

    ``cols`` may carry a precomputed im2col matrix for ``x`` (as returned by
    :func:`conv2d_forward_cached`) to avoid rebuilding it.
    """
    _check_input(x, p)
    n, _, h, w = x.shape
    ho, wo = p.output_hw(h, w)
    dt = x.dtype
    if _is_pointwise(p):
        xm = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(-1, p.c_in)
        out = xm @ p.kernel[:, :, 0, 0].astype(dt).T
    else:
        if cols is None:
            cols = _im2col(x, p)
        out = cols @ _kernel_matrix(p, dt).T
    out += p.bias.astype(dt, copy=False)
    return np.ascontiguousarray(out.reshape(n, ho, wo, p.c_out).transpose(0, 3, 1, 2))


def conv2d_forward_cached(x: np.ndarray, p: ConvParams) -> tuple[np.ndarray, np.ndarray | None]:
    """Forward pass that also returns the im2col matrix for reuse in backward."""
    _check_input(x, p)
    if _is_pointwise(p):
        return conv2d_forward(x, p), None
    cols = _im2col(x, p)
    return conv2d_forward(x, p, cols=cols), cols


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray,
                    cols: np.ndarray | None = None, need_grad_x: bool = True):
    """Gradients of ``sum(grad_out * conv2d_forward(x, p))``.

    Returns ``(grad_x, grad_kernel, grad_bias)``; ``grad_x`` is None when
    ``need_grad_x`` is False (first layer of a network).
    """
    _check_input(x, p)
    n, c, h, w = x.shape
    ho, wo = p.output_hw(h, w)
    if grad_out.shape != (n, p.c_out, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(n, p.c_out, ho, wo)}")
    dt = x.dtype
    grad_bias = grad_out.sum(axis=(0, 2, 3), dtype=np.float64).astype(p.bias.dtype)
    g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(-1, p.c_out)

    if _is_pointwise(p):
        xm = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(-1, c)
        grad_kernel = (g.T @ xm).reshape(p.kernel.shape).astype(p.kernel.dtype)
        grad_x = None
        if need_grad_x:
            gx = g @ p.kernel[:, :, 0, 0].astype(dt)
            grad_x = np.ascontiguousarray(gx.reshape(n, h, w, c).transpose(0, 3, 1, 2))
        return grad_x, grad_kernel, grad_bias

    if cols is None:
        cols = _im2col(x, p)
    k, s, pad = p.k, p.stride, p.padding
    gk = (cols.T @ g).T.reshape(p.c_out, k, k, c)
    grad_kernel = np.ascontiguousarray(gk.transpose(0, 3, 1, 2)).astype(p.kernel.dtype)
    if not need_grad_x:
        return None, grad_kernel, grad_bias

    return _input_grad(p, grad_out, h, w), grad_kernel, grad_bias


def _input_grad(p: ConvParams, grad_out: np.ndarray, h: int, w: int) -> np.ndarray:
    """Input gradient of a convolution.

    Stride 1: correlate the padded ``grad_out`` with the spatially flipped,
    channel-transposed kernel.  Larger strides: scatter-add the patch
    gradients back (col2im), which skips the zeros a dilated input would hold.
    """
    n, _, ho, wo = grad_out.shape
    k, s, pad = p.k, p.stride, p.padding
    hp, wp = h + 2 * pad, w + 2 * pad
    if s > 1:
        g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(-1, p.c_out)
        dcols = (g @ _kernel_matrix(p, grad_out.dtype)).reshape(n, ho, wo, k, k, p.c_in)
        dxh = np.zeros((n, hp, wp, p.c_in), dtype=grad_out.dtype)
        for i in range(k):
            for j in range(k):
                dxh[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
        return np.ascontiguousarray(dxh[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2))
    lh, lw = s * (ho - 1) + 1, s * (wo - 1) + 1
    gd = np.zeros((n, p.c_out, hp + k - 1, wp + k - 1), dtype=grad_out.dtype)
    gd[:, :, k - 1:k - 1 + lh:s, k - 1:k - 1 + lw:s] = grad_out
    flipped = np.ascontiguousarray(p.kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    q = ConvParams(flipped, np.zeros(p.c_in, dtype=p.kernel.dtype), 1, 0)
    dxp = conv2d_forward(gd, q)
    return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w])


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ShapeError(f"upsampling factor must be >= 1, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"expected N x C x H x W input, got shape {x.shape}")
    if factor == 1:
        return x.copy()
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample_nearest_backward(grad_out: np.ndarray, factor: int) -> np.ndarray:
    """Accumulate each output gradient into its source pixel."""
    if factor < 1:
        raise ShapeError(f"upsampling factor must be >= 1, got {factor}")
    n, c, h, w = grad_out.shape
    if h % factor or w % factor:
        raise ShapeError(f"grad_out spatial dims {(h, w)} not divisible by factor {factor}")
    return grad_out.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # x is the relu input (or output; the sign pattern is the same)
    return grad_out * (x > 0)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Backward of tanh given its *output* ``y``."""
    return grad_out * (1 - y * y)


def concat_channels(xs: list[np.ndarray]) -> np.ndarray:
    if not xs:
        raise ShapeError("concat_channels needs at least one array")
    ref = xs[0].shape
    for i, a in enumerate(xs):
        if a.ndim != 4:
            raise ShapeError(f"input {i} is not 4-D: {a.shape}")
        if a.shape[0] != ref[0] or a.shape[2:] != ref[2:]:
            raise ShapeError(f"input {i} has shape {a.shape}; N, H, W must match {ref}")
    return np.concatenate(xs, axis=1)


def split_channels(grad: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    """Backward of :func:`concat_channels`: split along the channel axis."""
    if sum(sizes) != grad.shape[1]:
        raise ShapeError(f"channel sizes {sizes} do not sum to {grad.shape[1]}")
    return np.split(grad, np.cumsum(sizes)[:-1], axis=1)
