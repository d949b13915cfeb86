"""Dense float64 tensors and convolution lowering.

Tensors are plain C-contiguous ``numpy.float64`` arrays. Activations are NCHW,
conv weights K x C x R x S, and the lowered weight matrix is K x (C*R*S) with
row index ``c*R*S + r*S + s`` -- the same ordering ``im2col`` uses for its rows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


def as_tensor(x) -> np.ndarray:
    t = np.ascontiguousarray(x, dtype=np.float64)
    if any(d < 1 for d in t.shape):
        raise ShapeError(f"tensor extents must be >= 1, got shape {t.shape}")
    return t


@dataclass(frozen=True)
class ConvGeometry:
    K: int
    C: int
    R: int
    S: int
    stride: int = 1
    padding: int = 0
    H: int | None = None
    W: int | None = None

    def __post_init__(self):
        for name in ("K", "C", "R", "S", "stride"):
            if getattr(self, name) < 1:
                raise ShapeError(f"ConvGeometry.{name} must be >= 1, got {getattr(self, name)}")
        if self.padding < 0:
            raise ShapeError(f"ConvGeometry.padding must be >= 0, got {self.padding}")
        if self.H is not None and self.W is not None:
            self.out_hw(self.H, self.W)

    @property
    def weight_shape(self):
        return (self.K, self.C, self.R, self.S)

    def with_input(self, H: int, W: int) -> "ConvGeometry":
        return ConvGeometry(self.K, self.C, self.R, self.S, self.stride, self.padding, H, W)

    def out_hw(self, H: int | None = None, W: int | None = None) -> tuple[int, int]:
        H = self.H if H is None else H
        W = self.W if W is None else W
        if H is None or W is None:
            raise ShapeError("input spatial extents are unresolved")
        Ho = (H + 2 * self.padding - self.R) // self.stride + 1
        Wo = (W + 2 * self.padding - self.S) // self.stride + 1
        if Ho < 1 or Wo < 1:
            raise ShapeError(
                f"kernel {self.R}x{self.S} (stride {self.stride}, padding {self.padding}) "
                f"does not fit input {H}x{W}"
            )
        return Ho, Wo


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed left-to-right reduction over the inner extent."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return kernels.matmul_ordered(a, b)


def _check_input(x: np.ndarray, g: ConvGeometry):
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    if x.shape[1] != g.C:
        raise ShapeError(f"input has {x.shape[1]} channels, geometry expects C={g.C} (input {x.shape})")
    if g.H is not None and (x.shape[2], x.shape[3]) != (g.H, g.W):
        raise ShapeError(f"input spatial {x.shape[2:]} does not match geometry {g.H}x{g.W}")
    return g.out_hw(x.shape[2], x.shape[3])


def im2col(x, g: ConvGeometry) -> np.ndarray:
    """Lower an NCHW input to a (C*R*S) x (N*H_out*W_out) patch matrix.

    Column ``n*H_out*W_out + oh*W_out + ow`` holds the receptive field of that
    output position; padded positions are materialized as zeros.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    _check_input(x, g)
    return kernels.im2col(x, g.R, g.S, g.stride, g.padding)


def col2im(cols, x_shape, g: ConvGeometry) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch columns back to NCHW."""
    N, C, H, W = x_shape
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    Ho, Wo = g.out_hw(H, W)
    if cols.shape != (C * g.R * g.S, N * Ho * Wo):
        raise ShapeError(f"col2im: columns {cols.shape} inconsistent with input {tuple(x_shape)}")
    return kernels.col2im(cols, N, C, H, W, g.R, g.S, g.stride, g.padding)


def _to_nchw(out2d: np.ndarray, N: int, Ho: int, Wo: int) -> np.ndarray:
    K = out2d.shape[0]
    return np.ascontiguousarray(out2d.reshape(K, N, Ho, Wo).transpose(1, 0, 2, 3))


def conv2d_forward(w, x, g: ConvGeometry, ordered: bool = False) -> np.ndarray:
    """Convolution as ``reshape(w, K x CRS) @ im2col(x)`` reshaped to NCHW.

    The default product goes through BLAS; ``ordered=True`` uses the
    fixed-order :func:`matmul` instead (slow, for reference checks).
    """
    w = np.ascontiguousarray(w, dtype=np.float64)
    if w.shape != g.weight_shape:
        raise ShapeError(f"weight shape {w.shape} does not match geometry {g.weight_shape}")
    x = np.ascontiguousarray(x, dtype=np.float64)
    Ho, Wo = _check_input(x, g)
    cols = kernels.im2col(x, g.R, g.S, g.stride, g.padding)
    w2 = w.reshape(g.K, -1)
    out = matmul(w2, cols) if ordered else w2 @ cols
    return _to_nchw(out, x.shape[0], Ho, Wo)


def conv2d_backward(gout, w, x, g: ConvGeometry, cols=None):
    """Gradients of :func:`conv2d_forward` w.r.t. the weight and the input."""
    N = x.shape[0]
    Ho, Wo = g.out_hw(x.shape[2], x.shape[3])
    if cols is None:
        cols = kernels.im2col(np.ascontiguousarray(x), g.R, g.S, g.stride, g.padding)
    g2 = np.ascontiguousarray(gout.transpose(1, 0, 2, 3)).reshape(g.K, N * Ho * Wo)
    dw = (g2 @ cols.T).reshape(g.weight_shape)
    dcols = w.reshape(g.K, -1).T @ g2
    dx = kernels.col2im(np.ascontiguousarray(dcols), N, g.C, x.shape[2], x.shape[3],
                        g.R, g.S, g.stride, g.padding)
    return dw, dx


def conv2d_gathered(w2d, x, g: ConvGeometry, columns) -> np.ndarray:
    """Convolution that keeps only selected rows of the lowered input.

    ``w2d`` is K x len(columns); ``columns`` index rows of ``im2col(x, g)``.
    This is how column- and shape-pruned layers execute after compaction.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    Ho, Wo = _check_input(x, g)
    columns = np.asarray(columns, dtype=np.intp)
    if w2d.shape != (g.K, len(columns)):
        raise ShapeError(f"gathered weight {w2d.shape} does not match ({g.K}, {len(columns)})")
    cols = kernels.im2col(x, g.R, g.S, g.stride, g.padding)[columns]
    return _to_nchw(w2d @ cols, x.shape[0], Ho, Wo)
