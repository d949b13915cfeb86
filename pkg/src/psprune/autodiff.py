"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Nodes are appended to a :class:`Tape` in execution order, which is already a
topological order, so backward is a single reverse sweep that visits every
node once. Ops are plain functions taking and returning :class:`Node`.
"""
from __future__ import annotations

import weakref
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .tensor import ConvGeometry, ShapeError, conv2d_backward, _to_nchw


class BackwardError(RuntimeError):
    pass


class Node:
    __slots__ = ("_tape", "index", "op", "value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, tape, index, op, value, parents, backward_fn, requires_grad, name=None):
        self._tape = weakref.ref(tape)  # weak: the tape owns its nodes, not the reverse
        self.index = index
        self.op = op
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def tape(self) -> "Tape":
        tape = self._tape()
        if tape is None:
            raise BackwardError("node outlived its tape")
        return tape

    @property
    def shape(self):
        return self.value.shape

    @property
    def input_ids(self):
        return [p.index for p in self.parents]

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape}, name={self.name!r})"


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self._backward_done = False

    def _append(self, op, value, parents, backward_fn, requires_grad, name=None) -> Node:
        node = Node(self, len(self.nodes), op, value, tuple(parents), backward_fn, requires_grad, name)
        self.nodes.append(node)
        return node

    def leaf(self, value, name=None, requires_grad=True) -> Node:
        return self._append("leaf", np.asarray(value, dtype=np.float64), (), None, requires_grad, name)

    def constant(self, value, name=None) -> Node:
        return self._append("const", np.asarray(value, dtype=np.float64), (), None, False, name)

    def record(self, op: str, value, parents: Sequence[Node], backward_fn: Callable) -> Node:
        """Record an op; ``backward_fn(grad_out)`` returns one grad (or None) per parent."""
        requires_grad = any(p.requires_grad for p in parents)
        return self._append(op, value, parents, backward_fn if requires_grad else None, requires_grad)

    def backward(self, loss: Node | None):
        if loss is None or not isinstance(loss, Node) or not any(n.op not in ("leaf", "const") for n in self.nodes):
            raise BackwardError("backward called before forward: no recorded loss")
        if loss.tape is not self:
            raise BackwardError("loss node belongs to a different tape")
        if loss.value.size != 1:
            raise BackwardError(f"loss must be scalar, got shape {loss.value.shape}")
        if self._backward_done:
            raise BackwardError("backward already ran on this tape")
        self._backward_done = True
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.index + 1]):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64)
                else:
                    parent.grad = parent.grad + g
        # closures pin intermediate activations; release them now that grads exist
        for node in self.nodes:
            node.backward_fn = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n.name: n.grad for n in self.nodes if n.op == "leaf" and n.name is not None and n.grad is not None}


def backward(tape: Tape, loss: Node | None) -> dict[str, np.ndarray]:
    """Run reverse mode from ``loss`` and return gradients of named leaves."""
    tape.backward(loss)
    return tape.grads()


# ---------------------------------------------------------------- elementwise

def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a.tape.record("add", a.value + b.value, (a, b), lambda g: (g, g))


def mul(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return a.tape.record("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Node, c: float) -> Node:
    return a.tape.record("scale", a.value * c, (a,), lambda g: (g * c,))


def total(a: Node) -> Node:
    shape = a.shape
    return a.tape.record("sum", np.array(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def relu(x: Node) -> Node:
    mask = x.value > 0
    return x.tape.record("relu", np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def concat(xs: Sequence[Node]) -> Node:
    sizes = [x.shape[1] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return xs[0].tape.record("concat", np.concatenate([x.value for x in xs], axis=1), xs, bw)


def select_channels(x: Node, index) -> Node:
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[:, index] = g
        return (out,)

    return x.tape.record("select", np.ascontiguousarray(x.value[:, index]), (x,), bw)


# ------------------------------------------------------------------- linear

def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.value, b.value
    return a.tape.record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def linear(x: Node, w: Node, b: Node | None = None) -> Node:
    """Fully connected layer on the flattened input; ``w`` is out x in."""
    xshape = x.shape
    xf = x.value.reshape(xshape[0], -1)
    if xf.shape[1] != w.shape[1]:
        raise ShapeError(f"linear expects {w.shape[1]} input features, got {xf.shape[1]} (input {xshape})")
    wv = w.value
    out = xf @ wv.T
    if b is not None:
        out = out + b.value
        parents = (x, w, b)
    else:
        parents = (x, w)

    def bw(g):
        grads = [(g @ wv).reshape(xshape), g.T @ xf]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return x.tape.record("linear", out, parents, bw)


def conv2d(x: Node, w: Node, g: ConvGeometry) -> Node:
    xv, wv = x.value, w.value
    if wv.shape != g.weight_shape:
        raise ShapeError(f"conv weight {wv.shape} does not match geometry {g.weight_shape}")
    if xv.ndim != 4 or xv.shape[1] != g.C:
        raise ShapeError(f"conv input {xv.shape} does not have C={g.C} channels")
    N = xv.shape[0]
    Ho, Wo = g.out_hw(xv.shape[2], xv.shape[3])
    cols = kernels.im2col(np.ascontiguousarray(xv), g.R, g.S, g.stride, g.padding)
    out = _to_nchw(wv.reshape(g.K, -1) @ cols, N, Ho, Wo)

    def bw(gout):
        dw, dx = conv2d_backward(gout, wv, xv, g, cols=cols)
        return dx, dw

    return x.tape.record("conv2d", out, (x, w), bw)


def conv2d_gathered(x: Node, w2d: Node, g: ConvGeometry, columns) -> Node:
    """Convolution over a subset of lowered input rows (compacted column/shape layers)."""
    xv, wv = x.value, w2d.value
    if xv.ndim != 4 or xv.shape[1] != g.C:
        raise ShapeError(f"conv input {xv.shape} does not have C={g.C} channels")
    columns = np.asarray(columns, dtype=np.intp)
    if wv.shape != (g.K, len(columns)):
        raise ShapeError(f"gathered weight {wv.shape} does not match ({g.K}, {len(columns)})")
    N, _, H, W = xv.shape
    Ho, Wo = g.out_hw(H, W)
    full = kernels.im2col(np.ascontiguousarray(xv), g.R, g.S, g.stride, g.padding)
    cols = full[columns]
    out = _to_nchw(wv @ cols, N, Ho, Wo)

    def bw(gout):
        g2 = np.ascontiguousarray(gout.transpose(1, 0, 2, 3)).reshape(g.K, -1)
        dw = g2 @ cols.T
        dfull = np.zeros_like(full)
        dfull[columns] = wv.T @ g2
        dx = kernels.col2im(dfull, N, g.C, H, W, g.R, g.S, g.stride, g.padding)
        return dx, dw

    return x.tape.record("conv2d_gathered", out, (x, w2d), bw)


# ----------------------------------------------------------------- pooling

def _pool_cols(xv, k, stride):
    N, C, H, W = xv.shape
    flat = np.ascontiguousarray(xv.reshape(N * C, 1, H, W))
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"pool window {k} does not fit input {H}x{W}")
    return kernels.im2col(flat, k, k, stride, 0), (N, C, H, W, Ho, Wo)


def avgpool2d(x: Node, kernel: int | None = None, stride: int | None = None) -> Node:
    """Average pooling; ``kernel=None`` pools globally to N x C x 1 x 1."""
    xv = x.value
    N, C, H, W = xv.shape
    if kernel is None:
        out = xv.mean(axis=(2, 3), keepdims=True)
        return x.tape.record("avgpool", out, (x,), lambda g: (np.broadcast_to(g / (H * W), xv.shape).copy(),))
    stride = stride or kernel
    cols, (N, C, H, W, Ho, Wo) = _pool_cols(xv, kernel, stride)
    out = cols.mean(axis=0).reshape(N, C, Ho, Wo)

    def bw(g):
        dcols = np.broadcast_to(g.reshape(1, -1) / (kernel * kernel), cols.shape)
        dx = kernels.col2im(np.ascontiguousarray(dcols), N * C, 1, H, W, kernel, kernel, stride, 0)
        return (dx.reshape(N, C, H, W),)

    return x.tape.record("avgpool", out, (x,), bw)


def maxpool2d(x: Node, kernel: int, stride: int | None = None) -> Node:
    stride = stride or kernel
    cols, (N, C, H, W, Ho, Wo) = _pool_cols(x.value, kernel, stride)
    arg = cols.argmax(axis=0)
    cidx = np.arange(cols.shape[1])
    out = cols[arg, cidx].reshape(N, C, Ho, Wo)

    def bw(g):
        dcols = np.zeros_like(cols)
        dcols[arg, cidx] = g.reshape(-1)
        return (kernels.col2im(dcols, N * C, 1, H, W, kernel, kernel, stride, 0).reshape(N, C, H, W),)

    return x.tape.record("maxpool", out, (x,), bw)


# -------------------------------------------------------------- batchnorm

def batchnorm(x: Node, gamma: Node, beta: Node, running_mean: np.ndarray, running_var: np.ndarray,
              train: bool, momentum: float = 0.1, eps: float = 1e-5, frozen=None) -> Node:
    """Per-channel batch normalization over N, H, W.

    In train mode batch statistics are used and ``running_mean``/``running_var``
    are updated in place, except for channels flagged in ``frozen``.
    """
    xv = x.value
    C = xv.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,) or running_mean.shape != (C,):
        raise ShapeError(f"batchnorm parameters do not match {C} channels of input {xv.shape}")
    bshape = (1, C, 1, 1)
    gv = gamma.value
    if train:
        count = xv.shape[0] * xv.shape[2] * xv.shape[3]
        mean = xv.mean(axis=(0, 2, 3))
        var = ((xv - mean.reshape(bshape)) ** 2).mean(axis=(0, 2, 3))
        unbiased = var * count / (count - 1) if count > 1 else var
        keep = np.ones(C, bool) if frozen is None else ~np.asarray(frozen, bool)
        running_mean[keep] = (1 - momentum) * running_mean[keep] + momentum * mean[keep]
        running_var[keep] = (1 - momentum) * running_var[keep] + momentum * unbiased[keep]
    else:
        mean, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gv.reshape(bshape) + beta.value.reshape(bshape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gx = g * gv.reshape(bshape)
        if train:
            m = xv.shape[0] * xv.shape[2] * xv.shape[3]
            dx = inv.reshape(bshape) * (
                gx - gx.sum(axis=(0, 2, 3)).reshape(bshape) / m
                - xhat * (gx * xhat).sum(axis=(0, 2, 3)).reshape(bshape) / m
            )
        else:
            dx = gx * inv.reshape(bshape)
        return dx, dgamma, dbeta

    return x.tape.record("batchnorm", out, (x, gamma, beta), bw)


# ------------------------------------------------------------------- loss

def cross_entropy(logits: Node, labels) -> Node:
    """Mean softmax cross-entropy; ``labels`` are integer class ids."""
    z = logits.value
    labels = np.asarray(labels)
    n, k = z.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k}): min {labels.min()}, max {labels.max()}")
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsumexp[:, None]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return logits.tape.record("cross_entropy", np.array(loss), (logits,), bw)
