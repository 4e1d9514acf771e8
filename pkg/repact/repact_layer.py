"""
RepAct activation layers.

During training a RepAct layer is a weighted sum of branch activations
(Identity, ReLU, PReLU, HardSwish by default) with trainable per-layer
weights.  Three variants differ in how the weights are used:

  I          weights used as they are
  II_SOFTMAX weights are logits, mapped through a softmax so they sum to one
  III_BN     raw weighted sum followed by a single-channel batch norm

For inference fuse() folds everything into one PiecewisePoly.
"""

import copy
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import configuration
from . import piecewise
from .errors import ValidationError

logger = configuration.logger


class RepActVariant(Enum):
    I = "I"
    II_SOFTMAX = "II_SOFTMAX"
    III_BN = "III_BN"


class Branch(Enum):
    IDENTITY = "identity"
    RELU = "relu"
    PRELU = "prelu"
    HARDSWISH = "hardswish"


DEFAULT_BRANCHES = (Branch.IDENTITY, Branch.RELU, Branch.PRELU, Branch.HARDSWISH)

MODES = ("train", "eval")


@dataclass
class BNState:
    """Single-channel batch norm applied to the whole fused map."""
    gamma: float = 1.0
    beta: float = 0.0
    running_mean: float = 0.0
    running_var: float = 1.0
    momentum: float = configuration.BN_MOMENTUM
    eps: float = configuration.BN_EPS

    def __post_init__(self):
        if self.running_var < 0:
            raise ValidationError(f"running_var must be >= 0, got {self.running_var}")
        if self.eps <= 0:
            raise ValidationError(f"eps must be > 0, got {self.eps}")
        if not 0 < self.momentum <= 1:
            raise ValidationError(f"momentum must be in (0, 1], got {self.momentum}")


@dataclass
class RepActParams:
    alphas: np.ndarray
    prelu_slope: float
    variant: RepActVariant
    bn: Optional[BNState] = None
    branch_set: tuple = field(default=DEFAULT_BRANCHES)

    def __post_init__(self):
        self.variant = RepActVariant(self.variant)
        self.branch_set = tuple(Branch(b) for b in self.branch_set)
        alphas = np.asarray(self.alphas)
        if not np.issubdtype(alphas.dtype, np.floating):
            alphas = alphas.astype(np.float64)
        self.alphas = alphas.reshape(-1)
        self.prelu_slope = float(self.prelu_slope)

        if not self.branch_set:
            raise ValidationError("a RepAct layer needs at least one branch")
        if self.alphas.size != len(self.branch_set):
            raise ValidationError(
                f"{len(self.branch_set)} branches need {len(self.branch_set)} alphas, got {self.alphas.size}"
            )
        if not np.all(np.isfinite(self.alphas)):
            raise ValidationError("alphas must be finite")
        if not math.isfinite(self.prelu_slope):
            raise ValidationError("prelu_slope must be finite")
        if (self.bn is not None) != (self.variant is RepActVariant.III_BN):
            raise ValidationError("BN state must be present exactly for the III_BN variant")

    def snapshot(self):
        return copy.deepcopy(self)


@dataclass
class RepActGrads:
    grad_x: np.ndarray
    grad_alphas: np.ndarray
    grad_slope: float
    grad_gamma: float = 0.0
    grad_beta: float = 0.0


@dataclass(frozen=True)
class ShapeSummary:
    negative_slope: float
    positive_slope: float
    curvature: float
    label: str


def init_repact(variant, branch_set=DEFAULT_BRANCHES, dtype=np.float64):
    """Evenly distributed branch weights (summing to one) and PReLU slope 0.25."""
    branch_set = tuple(Branch(b) for b in branch_set)
    if not branch_set:
        raise ValidationError("a RepAct layer needs at least one branch")
    variant = RepActVariant(variant)
    k = len(branch_set)
    bn = BNState() if variant is RepActVariant.III_BN else None
    return RepActParams(
        alphas=np.full(k, 1.0 / k, dtype=dtype),
        prelu_slope=configuration.PRELU_SLOPE_INIT,
        variant=variant,
        bn=bn,
        branch_set=branch_set,
    )


# -----------------------------------------------------------------------------
# Branches
# -----------------------------------------------------------------------------

def branch_poly(kind, t=configuration.PRELU_SLOPE_INIT):
    kind = Branch(kind)
    if kind is Branch.IDENTITY:
        return piecewise.make_identity()
    if kind is Branch.RELU:
        return piecewise.make_relu()
    if kind is Branch.PRELU:
        return piecewise.make_prelu(t)
    return piecewise.make_hardswish()


# The comparisons below are written as "x < b" so that NaN falls through to the
# identity part and propagates instead of being masked to zero.

def branch_value(kind, x, t):
    if kind is Branch.IDENTITY:
        return x
    if kind is Branch.RELU:
        return np.where(x < 0, 0, x).astype(x.dtype, copy=False)
    if kind is Branch.PRELU:
        return np.where(x < 0, x * t, x).astype(x.dtype, copy=False)
    knee = configuration.HARDSWISH_KNEE
    middle = (x * (1.0 / 6.0) + 0.5) * x
    return np.where(x < -knee, 0, np.where(x < knee, middle, x)).astype(x.dtype, copy=False)


def branch_derivative(kind, x, t):
    if kind is Branch.IDENTITY:
        return np.ones_like(x)
    if kind is Branch.RELU:
        return np.where(x < 0, 0, 1).astype(x.dtype, copy=False)
    if kind is Branch.PRELU:
        return np.where(x < 0, t, 1).astype(x.dtype, copy=False)
    knee = configuration.HARDSWISH_KNEE
    middle = x * (1.0 / 3.0) + 0.5
    return np.where(x < -knee, 0, np.where(x < knee, middle, 1)).astype(x.dtype, copy=False)


# -----------------------------------------------------------------------------
# Weights
# -----------------------------------------------------------------------------

def bn_scale(bn):
    """epsilon = gamma / sqrt(running_var + eps)."""
    denom = bn.running_var + bn.eps
    if denom <= 0:
        raise ValidationError(f"running_var + eps must be positive, got {denom}")
    return bn.gamma / math.sqrt(denom)


def bn_shift(bn):
    """beta' = beta - gamma * running_mean / sqrt(running_var + eps)."""
    return bn.beta - bn_scale(bn) * bn.running_mean


def effective_alphas(params):
    alphas = np.asarray(params.alphas, dtype=np.float64)
    if params.variant is RepActVariant.I:
        return alphas.copy()
    if params.variant is RepActVariant.II_SOFTMAX:
        e = np.exp(alphas - alphas.max())
        return e / e.sum()
    return bn_scale(params.bn) * alphas


def _check_mode(mode):
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")


def _weighted_branches(x, weights, params):
    t = params.prelu_slope
    y = None
    for w, kind in zip(weights, params.branch_set):
        term = x.dtype.type(w) * branch_value(kind, x, t)
        y = term if y is None else y + term
    return y


def _batch_stats(z):
    if z.size < 2:
        raise ValidationError("III_BN training needs more than one element to estimate a variance")
    return z.mean(), z.var()


# -----------------------------------------------------------------------------
# Forward / backward
# -----------------------------------------------------------------------------

def forward_train(x, params, mode="train"):
    """Multi-branch forward pass.

    Variants I and II sum the branches with effective_alphas().  Variant III
    sums with the raw alphas and batch-normalises the fused map; in train mode
    with the batch statistics (updating the running statistics in place), in
    eval mode with the running statistics.
    """
    _check_mode(mode)
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)

    if params.variant is not RepActVariant.III_BN:
        return _weighted_branches(x, effective_alphas(params), params)

    z = _weighted_branches(x, params.alphas, params)
    bn = params.bn
    if mode == "train":
        mean, var = _batch_stats(z)
        n = z.size
        bn.running_mean = (1 - bn.momentum) * bn.running_mean + bn.momentum * float(mean)
        bn.running_var = (1 - bn.momentum) * bn.running_var + bn.momentum * float(var) * n / (n - 1)
    else:
        mean, var = bn.running_mean, bn.running_var

    inv_std = 1.0 / math.sqrt(float(var) + bn.eps)
    return (x.dtype.type(bn.gamma * inv_std) * (z - x.dtype.type(mean)) + x.dtype.type(bn.beta))


def repact_backward(x, upstream_grad, params, mode="train"):
    _check_mode(mode)
    x = np.asarray(x)
    g = np.asarray(upstream_grad)
    if x.shape != g.shape:
        raise ValidationError(f"input shape {x.shape} does not match upstream gradient shape {g.shape}")

    t = params.prelu_slope
    outs = [branch_value(kind, x, t) for kind in params.branch_set]
    grad_gamma = grad_beta = 0.0

    if params.variant is RepActVariant.III_BN:
        bn = params.bn
        weights = np.asarray(params.alphas, dtype=np.float64)
        z = _weighted_branches(x, weights, params)
        if mode == "train":
            mean, var = _batch_stats(z)
        else:
            mean, var = bn.running_mean, bn.running_var
        inv_std = 1.0 / math.sqrt(float(var) + bn.eps)
        zhat = (z - mean) * inv_std
        grad_beta = float(g.sum())
        grad_gamma = float((g * zhat).sum())
        dzhat = g * bn.gamma
        if mode == "train":
            n = z.size
            dz = (inv_std / n) * (n * dzhat - dzhat.sum() - zhat * (dzhat * zhat).sum())
        else:
            dz = dzhat * inv_std
        dz = dz.astype(x.dtype, copy=False)
    else:
        weights = effective_alphas(params)
        dz = g

    grad_weights = np.array([np.sum(out * dz) for out in outs], dtype=np.float64)
    if params.variant is RepActVariant.II_SOFTMAX:
        # softmax Jacobian: d s_i / d a_j = s_i (delta_ij - s_j)
        grad_alphas = weights * (grad_weights - np.dot(weights, grad_weights))
    else:
        grad_alphas = grad_weights

    grad_slope = 0.0
    if Branch.PRELU in params.branch_set:
        w = weights[params.branch_set.index(Branch.PRELU)]
        grad_slope = float(w * np.sum(np.where(x < 0, x, 0) * dz))

    grad_x = None
    for w, kind in zip(weights, params.branch_set):
        term = x.dtype.type(w) * branch_derivative(kind, x, t) * dz
        grad_x = term if grad_x is None else grad_x + term

    return RepActGrads(grad_x, grad_alphas, grad_slope, grad_gamma, grad_beta)


# -----------------------------------------------------------------------------
# Fusion
# -----------------------------------------------------------------------------

def fuse(params):
    """Single-branch PiecewisePoly equal to the eval-mode forward pass."""
    polys = [branch_poly(kind, params.prelu_slope) for kind in params.branch_set]
    weights = effective_alphas(params)
    fused = piecewise.weighted_sum([(float(w), p) for w, p in zip(weights, polys)])
    if params.variant is RepActVariant.III_BN:
        fused = piecewise.add_constant(fused, bn_shift(params.bn))
    return piecewise.simplify(fused)


def shape_summary(poly, tol=0.1):
    """Coarse description of a fused activation's shape.

    linear     both tails share a slope and there is little curvature
    v-shaped   the tails slope in opposite directions
    relu-like  the negative tail is nearly flat
    leaky      anything else
    """
    negative = poly.segments[0][1]
    positive = poly.segments[-1][1]
    curvature = max(abs(seg[0]) for seg in poly.segments)
    scale = max(abs(negative), abs(positive), 1e-12)

    if abs(positive - negative) <= tol * scale and curvature <= tol * scale:
        label = "linear"
    elif negative * positive < 0:
        label = "v-shaped"
    elif abs(negative) <= tol * abs(positive):
        label = "relu-like"
    else:
        label = "leaky"
    return ShapeSummary(negative, positive, curvature, label)
