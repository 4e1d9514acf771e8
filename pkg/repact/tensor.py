"""
Minimal reverse-mode automatic differentiation over numpy arrays.

Operations executed while a Tape is active are recorded in order, each with
a closure that maps the gradient of its output to gradients of its inputs.
backward() walks the tape in reverse; since a node is always recorded after
everything it consumes, every node's gradient is complete before its own
rule runs.  Reductions go through numpy's fixed-order summation, so a given
build produces bit-identical gradients run after run.

    with Tape():
        loss = softmax_cross_entropy(linear(x, W, b), labels)
    backward(loss)
    W.grad
"""

import threading
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import configuration
from . import piecewise
from .errors import ValidationError
from .repact_layer import (
    RepActVariant,
    branch_poly,
    forward_train,
    repact_backward,
)

logger = configuration.logger

# Names of backward rules to corrupt on purpose; grad_check must catch them.
BACKWARD_FAULTS = set()

_state = threading.local()


class Tensor:
    """Dense float array of rank 0..4 with an optional gradient buffer."""

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        data = np.asarray(data, dtype=dtype)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if data.ndim > 4:
            raise ValidationError(f"tensors are limited to rank 4, got shape {data.shape}")
        if any(extent <= 0 for extent in data.shape):
            raise ValidationError(f"tensor extents must be positive, got shape {data.shape}")
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.tape = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


def parameter(data, name=None, dtype=None):
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: object
    segments: Optional[np.ndarray] = None


@dataclass
class Tape:
    """Ordered record of operations; recording order is a topological order."""
    nodes: list = field(default_factory=list)
    live: bool = True

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.stack.pop()
        return False

    def record(self, op, inputs, output, backward_fn, segments=None):
        output.tape = self
        output.node = len(self.nodes)
        self.nodes.append(Node(op, inputs, output, backward_fn, segments))

    def segment_signature(self):
        """Segment index of every activation input seen on this tape."""
        return [node.segments for node in self.nodes if node.segments is not None]


def active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _record(op, inputs, out_data, backward_fn, segments=None):
    requires_grad = any(t is not None and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires_grad)
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, out, backward_fn, segments)
    return out


def _needs(t):
    return t is not None and t.requires_grad


def backward(loss):
    """Populate .grad of every tensor that requires it, starting from a scalar loss."""
    if loss.data.ndim != 0:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None or not tape.live:
        raise ValidationError("loss is not on a live tape")

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes[: loss.node + 1]):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward(g)
        for inp, grad in zip(node.inputs, grads):
            if grad is None or not _needs(inp):
                continue
            grad = np.asarray(grad, dtype=inp.dtype).reshape(inp.shape)
            inp.grad = grad if inp.grad is None else inp.grad + grad
    tape.live = False


# -----------------------------------------------------------------------------
# Operators
# -----------------------------------------------------------------------------

def linear(x, W, b):
    """z = x W + b for x[N, Din], W[Din, Dout], b[Dout]."""
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.shape != (W.shape[1],) or x.shape[1] != W.shape[0]:
        raise ValidationError(f"linear shapes do not agree: x{x.shape} W{W.shape} b{b.shape}")
    out = x.data @ W.data + b.data

    def backward_fn(g):
        gx = g @ W.data.T if _needs(x) else None
        gW = x.data.T @ g if _needs(W) else None
        gb = g.sum(axis=0) if _needs(b) else None
        return gx, gW, gb

    return _record("linear", (x, W, b), out, backward_fn)


def _conv_windows(xp, kh, kw, stride):
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def conv2d(x, k, bias=None, stride=1, pad=0):
    """Cross-correlation of x[N, C, H, W] with k[O, C, Kh, Kw]."""
    if x.data.ndim != 4 or k.data.ndim != 4 or x.shape[1] != k.shape[1]:
        raise ValidationError(f"conv2d shapes do not agree: x{x.shape} k{k.shape}")
    if bias is not None and bias.shape != (k.shape[0],):
        raise ValidationError(f"conv2d bias must have shape ({k.shape[0]},), got {bias.shape}")
    if int(stride) != stride or stride < 1:
        raise ValidationError(f"stride must be a positive integer, got {stride}")
    if int(pad) != pad or pad < 0:
        raise ValidationError(f"pad must be a non-negative integer, got {pad}")
    stride, pad = int(stride), int(pad)

    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ValidationError(f"kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = _conv_windows(xp, kh, kw, stride)
    ho, wo = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, k.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward_fn(g):
        gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])) if _needs(k) else None
        gbias = g.sum(axis=(0, 2, 3)) if _needs(bias) else None
        gx = None
        if _needs(x):
            cols = np.tensordot(g, k.data, axes=([1], [0]))  # N, Ho, Wo, C, Kh, Kw
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, pad:pad + h, pad:pad + w]
        return gx, gk, gbias

    return _record("conv2d", (x, k, bias), out, backward_fn)


@dataclass
class BatchNormStats:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = configuration.CONV_BN_MOMENTUM
    eps: float = configuration.CONV_BN_EPS

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x, gamma, beta, stats, mode="train"):
    """Per-channel batch norm of x[N, C, H, W]."""
    if x.data.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValidationError(f"batchnorm2d shapes do not agree: x{x.shape} gamma{gamma.shape} beta{beta.shape}")
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")

    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if mode == "train":
        if m < 2:
            raise ValidationError("batchnorm2d training needs more than one element per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.running_mean = (1 - stats.momentum) * stats.running_mean + stats.momentum * mean
        stats.running_var = (1 - stats.momentum) * stats.running_var + stats.momentum * var * (m / (m - 1))
    else:
        mean, var = stats.running_mean, stats.running_var

    dtype = x.dtype
    inv_std = (1.0 / np.sqrt(var + stats.eps)).astype(dtype)
    xhat = (x.data - mean.astype(dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward_fn(g):
        gbeta = g.sum(axis=axes) if _needs(beta) else None
        ggamma = (g * xhat).sum(axis=axes) if _needs(gamma) else None
        gx = None
        if _needs(x):
            dxhat = g * gamma.data[None, :, None, None]
            if mode == "train":
                gx = (inv_std[None, :, None, None] / m) * (
                    m * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = dxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return _record("batchnorm2d", (x, gamma, beta), out, backward_fn)


def pool_avg_global(x):
    if x.data.ndim != 4:
        raise ValidationError(f"pool_avg_global needs a rank-4 input, got shape {x.shape}")
    h, w = x.shape[2], x.shape[3]
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _record("pool_avg_global", (x,), out, backward_fn)


def flatten(x):
    out = x.data.reshape(x.shape[0], -1)

    def backward_fn(g):
        return (g.reshape(x.shape),)

    return _record("flatten", (x,), out, backward_fn)


def sum_all(x):
    """Scalar sum of every element."""
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward_fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum_all", (x,), out, backward_fn)


def softmax_cross_entropy(logits, labels, label_smoothing=0.0):
    """Mean over the batch of -log softmax(logits)[label].

    With label smoothing s the target distribution is (1 - s) one-hot + s / K.
    """
    if logits.data.ndim != 2:
        raise ValidationError(f"logits must be [N, K], got shape {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValidationError(f"expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValidationError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    if not 0.0 <= label_smoothing < 1.0:
        raise ValidationError(f"label_smoothing must be in [0, 1), got {label_smoothing}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    target = np.zeros_like(log_probs)
    target[np.arange(n), labels] = 1.0
    if label_smoothing:
        target = target * (1.0 - label_smoothing) + label_smoothing / k
    loss = -(target * log_probs).sum() / n

    def backward_fn(g):
        return ((np.exp(log_probs) - target) * (g / n),)

    return _record("softmax_cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), backward_fn)


def _segment_ids(x, breakpoints):
    return np.searchsorted(np.asarray(breakpoints, dtype=x.dtype), x, side="right").astype(np.int8)


def piecewise_op(x, poly, op="piecewise"):
    """Evaluate a fused activation; its backward uses the segment derivative."""
    out = piecewise.evaluate_array(poly, x.data, check_finite=False)

    def backward_fn(g):
        return (g * piecewise.derivative_array(poly, x.data, check_finite=False),)

    return _record(op, (x,), out, backward_fn, segments=_segment_ids(x.data, poly.breakpoints))


def relu(x):
    return piecewise_op(x, piecewise.make_relu(), op="relu")


def hardswish(x):
    return piecewise_op(x, piecewise.make_hardswish(), op="hardswish")


# -----------------------------------------------------------------------------
# RepAct bridge
# -----------------------------------------------------------------------------

class RepActLeaves(NamedTuple):
    alphas: Tensor
    slope: Tensor
    gamma: Optional[Tensor] = None
    beta: Optional[Tensor] = None

    def bind(self, params):
        """Point params at the current leaf values (alphas share memory)."""
        params.alphas = self.alphas.data
        params.prelu_slope = float(self.slope.data)
        if params.bn is not None:
            params.bn.gamma = float(self.gamma.data)
            params.bn.beta = float(self.beta.data)
        return params


def repact_leaves(params, name="repact", dtype=np.float64):
    """Trainable leaves holding a RepAct layer's alpha, t (and gamma, beta)."""
    alphas = parameter(np.array(params.alphas, dtype=dtype), name=f"{name}.alphas")
    slope = parameter(np.array(params.prelu_slope, dtype=dtype), name=f"{name}.prelu_slope")
    if params.variant is RepActVariant.III_BN:
        gamma = parameter(np.array(params.bn.gamma, dtype=dtype), name=f"{name}.gamma")
        beta = parameter(np.array(params.bn.beta, dtype=dtype), name=f"{name}.beta")
        return RepActLeaves(alphas, slope, gamma, beta)
    return RepActLeaves(alphas, slope)


def _branch_breakpoints(params):
    points = {b for kind in params.branch_set for b in branch_poly(kind, params.prelu_slope).breakpoints}
    return sorted(points)


def repact_op(x, params, leaves=None, mode="train"):
    """Multi-branch RepAct forward on the tape.

    When leaves are given, params is first bound to them so that alpha, t,
    gamma and beta receive gradients.
    """
    if leaves is not None:
        leaves.bind(params)
    out = forward_train(x.data, params, mode)

    def backward_fn(g):
        grads = repact_backward(x.data, g, params, mode)
        gx = grads.grad_x
        if "repact" in BACKWARD_FAULTS:
            gx = gx * 2
        if leaves is None:
            return (gx,)
        result = [gx, grads.grad_alphas, np.asarray(grads.grad_slope)]
        if leaves.gamma is not None:
            result += [np.asarray(grads.grad_gamma), np.asarray(grads.grad_beta)]
        return tuple(result)

    inputs = (x,) if leaves is None else (x,) + tuple(t for t in leaves if t is not None)
    return _record("repact", inputs, out, backward_fn, segments=_segment_ids(x.data, _branch_breakpoints(params)))


# -----------------------------------------------------------------------------
# Gradient check
# -----------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict
    checked: dict
    excluded: int
    tol: float

    @property
    def unchecked(self):
        """Parameter groups without a single valid finite-difference sample."""
        return [name for name, count in self.checked.items() if count == 0]

    @property
    def passed(self):
        return not self.unchecked and all(err <= self.tol for err in self.max_rel_error.values())

    @property
    def worst(self):
        if not self.max_rel_error:
            return None, 0.0
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]


def _loss_and_signature(f):
    with Tape() as tape:
        loss = f()
    return float(loss.data), tape.segment_signature()


def _same_signature(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _central_difference(f, flat, idx, step, base_signature):
    """Richardson-extrapolated central difference at one element, or None if a breakpoint is crossed."""
    original = flat[idx]
    values = {}
    try:
        for offset in (step, -step, step / 2, -step / 2):
            flat[idx] = original + offset
            value, signature = _loss_and_signature(f)
            if not _same_signature(signature, base_signature):
                return None
            values[offset] = value
    finally:
        flat[idx] = original
    coarse = (values[step] - values[-step]) / (2 * step)
    fine = (values[step / 2] - values[-step / 2]) / step
    return (4 * fine - coarse) / 3


def grad_check(f, params, h=configuration.GRADCHECK_STEP, tol=configuration.GRADCHECK_TOL,
               scale_floor=configuration.GRADCHECK_SCALE_FLOOR, max_checks=None, seed=0):
    """Compare analytic gradients with central differences at step h.

    f rebuilds the graph from the current parameter values and returns a
    scalar loss.  params is a dict name -> Tensor (or a list of named
    tensors).  The differences at h and h/2 are combined by Richardson
    extrapolation, which removes the h^2 truncation term.

    A step that moves any activation input into another segment does not
    estimate the derivative; the element is then retried at the smaller
    steps of GRADCHECK_FALLBACK_DIVISORS and counted as excluded only if
    every step crosses.  max_checks is the number of valid samples wanted per
    parameter: elements are drawn in seeded random order until that many
    succeed or GRADCHECK_DRAW_FACTOR * max_checks elements have been tried.
    A parameter that ends with no valid sample fails the report.
    """
    if h <= 0:
        raise ValidationError(f"step h must be > 0, got {h}")
    if not isinstance(params, dict):
        params = {p.name: p for p in params}

    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = f()
    base_signature = tape.segment_signature()
    backward(loss)
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
                for name, p in params.items()}

    steps = [h / divisor for divisor in configuration.GRADCHECK_FALLBACK_DIVISORS]
    rng = np.random.default_rng(seed)
    max_rel_error, checked, excluded = {}, {}, 0
    for name, p in params.items():
        wanted, order = p.data.size, np.arange(p.data.size)
        if max_checks is not None and p.data.size > max_checks:
            wanted = max_checks
            order = rng.permutation(p.data.size)[:max_checks * configuration.GRADCHECK_DRAW_FACTOR]

        worst, count = 0.0, 0
        flat = p.data.reshape(-1)
        for idx in order:
            if count == wanted:
                break
            numeric = None
            for step in steps:
                numeric = _central_difference(f, flat, idx, step, base_signature)
                if numeric is not None:
                    break
            if numeric is None:
                excluded += 1
                continue
            exact = float(analytic[name].reshape(-1)[idx])
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), scale_floor)
            worst = max(worst, err)
            count += 1
        max_rel_error[name] = worst
        checked[name] = count
        if count == 0:
            logger.warning(f"grad_check {name}: every sample crossed a breakpoint, nothing checked")
        else:
            logger.debug(f"grad_check {name}: max rel error {worst:.3e} over {count} samples")

    return GradCheckReport(max_rel_error, checked, excluded, tol)
