"""Parameterized structured pruning of convolution weights.

Each pruning structure ``i`` of a K x C x R x S weight tensor owns a dense
parameter ``alpha[i]``. The forward pass uses ``q = w * nu`` where
``nu = alpha`` if ``|alpha| >= epsilon`` and 0 otherwise. The threshold is
skipped on the way back (straight-through), so pruned structures keep
receiving gradient and can come back.

Structure layouts (the shape of ``alpha``):

    column   (R, S, C)   one (r, s, c) row of the lowered K x CRS weight matrix
    channel  (C,)        every weight reading input feature map c
    shape    (R, S)      one kernel position across all K, C
    layer    ()          the whole tensor

``layer_channel`` combines the last two on one tensor: ``alpha`` has shape
(C + 1,), entry 0 gates the whole layer and entries 1..C gate the channels,
so a weight in channel c is scaled by ``nu[0] * nu[1 + c]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import Node
from .tensor import ShapeError

GRANULARITIES = ("column", "channel", "shape", "layer")
COMBINED = ("layer_channel",)
ALL_GRANULARITIES = GRANULARITIES + COMBINED
GRAD_RULES = ("paper_sum", "chain_rule")
STRUCTURE_REGULARIZERS = ("weight_decay", "l1")

ALPHA_STD = 0.1


def check_granularity(granularity: str) -> str:
    if granularity not in ALL_GRANULARITIES:
        raise ValueError(f"unknown granularity {granularity!r}; expected one of {ALL_GRANULARITIES}")
    return granularity


def alpha_shape(granularity: str, weight_shape) -> tuple:
    K, C, R, S = weight_shape
    return {
        "column": (R, S, C),
        "channel": (C,),
        "shape": (R, S),
        "layer": (),
        "layer_channel": (C + 1,),
    }[check_granularity(granularity)]


def broadcast_structure(values, granularity: str) -> np.ndarray:
    """View per-structure values so they broadcast against K x C x R x S."""
    values = np.asarray(values, dtype=np.float64)
    if granularity == "column":
        return values.transpose(2, 0, 1)[None]
    if granularity == "channel":
        return values[None, :, None, None]
    if granularity == "shape":
        return values[None, None]
    if granularity == "layer":
        return values.reshape(1, 1, 1, 1)
    if granularity == "layer_channel":
        return (values[0] * values[1:])[None, :, None, None]
    raise ValueError(f"unknown granularity {granularity!r}")


def member_matrix(t: np.ndarray, granularity: str) -> np.ndarray:
    """Arrange a K x C x R x S tensor as (members, structures), C-contiguous.

    Row order is the summation order of the gradient table: k for columns;
    k, r, s for channels; k, c for shapes; k, c, r, s for the whole layer.
    Column order is the flattened ``alpha`` order.
    """
    K, C, R, S = t.shape
    if granularity == "column":
        return np.ascontiguousarray(t.transpose(0, 2, 3, 1)).reshape(K, R * S * C)
    if granularity == "channel":
        return np.ascontiguousarray(t.transpose(0, 2, 3, 1)).reshape(K * R * S, C)
    if granularity == "shape":
        return np.ascontiguousarray(t).reshape(K * C, R * S)
    if granularity == "layer":
        return np.ascontiguousarray(t).reshape(-1, 1)
    raise ValueError(f"unknown granularity {granularity!r}")


def reduce_to_structures(t: np.ndarray, granularity: str) -> np.ndarray:
    """Sum a weight-shaped tensor over each structure's members, in fixed order."""
    if t.ndim != 4:
        raise ShapeError(f"expected a K x C x R x S tensor, got shape {t.shape}")
    if granularity == "layer_channel":
        return np.concatenate([reduce_to_structures(t, "layer").reshape(1), reduce_to_structures(t, "channel")])
    sums = kernels.column_sums(member_matrix(np.asarray(t, dtype=np.float64), granularity))
    return sums.reshape(alpha_shape(granularity, t.shape))


@dataclass
class SparseView:
    nu: np.ndarray
    active_mask: np.ndarray


def threshold(alpha, epsilon: float) -> SparseView:
    """Zero every ``alpha`` with ``|alpha| < epsilon``; the boundary stays active."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    alpha = np.asarray(alpha, dtype=np.float64)
    active = np.abs(alpha) >= epsilon
    return SparseView(np.where(active, alpha, 0.0), active)


@dataclass
class StructureSet:
    """Structure parameters of one conv layer.

    ``mask`` optionally overrides thresholding with an explicit active mask
    (fixed-sparsity and l1-norm baseline modes).
    """

    granularity: str
    alpha: np.ndarray
    epsilon: float = 0.1
    regularizer: str = "weight_decay"
    grad_rule: str = "paper_sum"
    mask: np.ndarray | None = None
    trainable: bool = True
    weight_shape: tuple | None = field(default=None, compare=False)

    def __post_init__(self):
        check_granularity(self.granularity)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.regularizer not in STRUCTURE_REGULARIZERS:
            raise ValueError(f"unknown structure regularizer {self.regularizer!r}")
        if self.grad_rule not in GRAD_RULES:
            raise ValueError(f"unknown grad_rule {self.grad_rule!r}; expected one of {GRAD_RULES}")
        if self.weight_shape is not None:
            expected = alpha_shape(self.granularity, self.weight_shape)
            if self.alpha.shape != expected:
                raise ShapeError(
                    f"alpha shape {self.alpha.shape} does not match {self.granularity} "
                    f"granularity for weight {tuple(self.weight_shape)} (expected {expected})"
                )

    @classmethod
    def for_weight(cls, weight_shape, granularity: str, seed=None, **kw) -> "StructureSet":
        shape = alpha_shape(granularity, weight_shape)
        alpha = init_alpha(shape, seed) if seed is not None else np.ones(shape)
        return cls(granularity, alpha, weight_shape=tuple(weight_shape), **kw)

    @property
    def n_structures(self) -> int:
        return int(self.alpha.size)

    def view(self) -> SparseView:
        if self.mask is None:
            return threshold(self.alpha, self.epsilon)
        active = np.asarray(self.mask, bool)
        return SparseView(np.where(active, self.alpha, 0.0), active)

    def check_weight(self, w_shape):
        if len(w_shape) != 4 or self.alpha.shape != alpha_shape(self.granularity, w_shape):
            raise ShapeError(
                f"weight shape {tuple(w_shape)} is inconsistent with {self.granularity} "
                f"structure parameters of shape {self.alpha.shape}"
            )


def psp_forward(w, s: StructureSet, view: SparseView | None = None) -> np.ndarray:
    """Structured sparse substitute ``q = w * nu`` broadcast over structure members."""
    w = np.asarray(w, dtype=np.float64)
    s.check_weight(w.shape)
    view = s.view() if view is None else view
    return w * broadcast_structure(view.nu, s.granularity)


def alpha_gradient(dE_dW, w, s: StructureSet) -> np.ndarray:
    """Gradient for ``alpha`` from the gradient at the substituted positions.

    ``paper_sum`` sums the incoming gradient over each structure's members;
    ``chain_rule`` weights each term by the raw weight first. The threshold is
    bypassed either way, so pruned structures get the same gradient as active ones.
    """
    dE_dW = np.asarray(dE_dW, dtype=np.float64)
    s.check_weight(dE_dW.shape)
    if s.grad_rule == "paper_sum":
        return reduce_to_structures(dE_dW, s.granularity)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != dE_dW.shape:
        raise ShapeError(f"weight shape {w.shape} does not match gradient shape {dE_dW.shape}")
    if s.granularity == "layer_channel":
        # each factor's derivative carries the other factor along
        nu = s.view().nu
        t = dE_dW * w
        return np.concatenate([reduce_to_structures(t * nu[1:][None, :, None, None], "layer").reshape(1),
                               reduce_to_structures(t * nu[0], "channel")])
    return reduce_to_structures(dE_dW * w, s.granularity)


def weight_gradient(dE_dQ, s: StructureSet, view: SparseView | None = None) -> np.ndarray:
    dE_dQ = np.asarray(dE_dQ, dtype=np.float64)
    s.check_weight(dE_dQ.shape)
    view = s.view() if view is None else view
    return dE_dQ * broadcast_structure(view.nu, s.granularity)


def init_alpha(shape, seed) -> np.ndarray:
    """Draw structure parameters from N(0, 0.1^2); ``seed`` may be an int or a sequence."""
    return np.random.default_rng(seed).normal(0.0, ALPHA_STD, size=shape)


def rank_by_l1_norm(w, granularity: str) -> np.ndarray:
    """Flat structure indices sorted by ascending sum of ``|w|`` (stable on ties)."""
    norms = reduce_to_structures(np.abs(np.asarray(w, dtype=np.float64)), granularity)
    return np.argsort(norms.ravel(), kind="stable")


def _lowest(order: np.ndarray, shape, fraction: float) -> np.ndarray:
    if not 0 <= fraction < 1:
        raise ValueError(f"target fraction must satisfy 0 <= fraction < 1, got {fraction}")
    n = int(np.prod(shape, dtype=np.int64))
    pruned = np.zeros(n, bool)
    pruned[order[: int(np.floor(fraction * n))]] = True
    return pruned.reshape(shape)


def apply_fixed_sparsity(s: StructureSet, target_fraction: float) -> np.ndarray:
    """Boolean mask (True = pruned) of the ``floor(fraction * n)`` smallest ``|alpha|``."""
    order = np.argsort(np.abs(s.alpha).ravel(), kind="stable")
    return _lowest(order, s.alpha.shape, target_fraction)


def l1_norm_mask(w, granularity: str, target_fraction: float) -> np.ndarray:
    """Boolean mask (True = pruned) of the structures with the smallest weight l1 norm."""
    w = np.asarray(w, dtype=np.float64)
    return _lowest(rank_by_l1_norm(w, granularity), alpha_shape(granularity, w.shape), target_fraction)


def effective_active(s: StructureSet) -> np.ndarray:
    """Per-member activity broadcast to the weight layout (False where the weight is zeroed)."""
    return broadcast_structure(s.view().active_mask.astype(np.float64), s.granularity) != 0


def lowered_rows(granularity: str, weight_shape, active_mask) -> np.ndarray:
    """Rows of the lowered K x CRS weight matrix that survive an active mask."""
    K, C, R, S = weight_shape
    full = np.broadcast_to(broadcast_structure(np.asarray(active_mask, float), granularity)[0], (C, R, S))
    return np.flatnonzero(full.reshape(-1) != 0)


def substitute(w: Node, alpha: Node, s: StructureSet) -> Node:
    """Autodiff op for ``q = w * nu(alpha)`` with the straight-through backward."""
    s.check_weight(w.shape)
    view = s.view()
    wv = w.value
    q = wv * broadcast_structure(view.nu, s.granularity)

    def bw(gq):
        return weight_gradient(gq, s, view), alpha_gradient(gq, wv, s)

    return w.tape.record("psp_substitute", q, (w, alpha), bw)
