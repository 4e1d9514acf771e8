"""
TinyCNN: a stack of conv -> batchnorm -> activation blocks followed by global
average pooling and a linear classifier.

The activation slot of every block is either a fixed baseline (ReLU,
HardSwish) or a RepAct layer.  For deployment each RepAct layer can be
replaced by its fused PiecewisePoly.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import configuration
from .errors import ValidationError
from .experiment import ConvBlockSpec
from .repact_layer import Branch, RepActParams, RepActVariant, fuse, init_repact
from .tensor import (
    BatchNormStats,
    RepActLeaves,
    Tensor,
    batchnorm2d,
    conv2d,
    hardswish,
    linear,
    parameter,
    piecewise_op,
    pool_avg_global,
    relu,
    repact_leaves,
    repact_op,
)

logger = configuration.logger

REPACT_ACTIVATIONS = {
    "repact_i": RepActVariant.I,
    "repact_ii": RepActVariant.II_SOFTMAX,
    "repact_iii": RepActVariant.III_BN,
}


@dataclass
class ConvBlock:
    name: str
    spec: ConvBlockSpec
    weight: Tensor
    gamma: Tensor
    beta: Tensor
    bn_stats: BatchNormStats
    act: Optional[RepActParams] = None
    act_leaves: Optional[RepActLeaves] = None


def conv_output_size(size, spec):
    return (size + 2 * spec.pad - spec.kernel) // spec.stride + 1


class TinyCNN:
    def __init__(self, in_channels, image_size, blocks, activation="repact_i", branch_set=None,
                 num_classes=10, seed=0, dtype="float32"):
        if activation not in ("relu", "hardswish") and activation not in REPACT_ACTIVATIONS:
            raise ValidationError(f"unknown activation {activation!r}")
        if not blocks:
            raise ValidationError("TinyCNN needs at least one conv block")
        self.in_channels = int(in_channels)
        self.image_size = int(image_size)
        self.block_specs = [b if isinstance(b, ConvBlockSpec) else ConvBlockSpec(**b) for b in blocks]
        self.activation = activation
        self.branch_set = tuple(Branch(b).value for b in branch_set) if branch_set is not None else None
        self.num_classes = int(num_classes)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)

        rng = np.random.default_rng(seed)
        self.blocks = []
        channels, size = self.in_channels, self.image_size
        for i, spec in enumerate(self.block_specs):
            size = conv_output_size(size, spec)
            if size < 1:
                raise ValidationError(f"block{i} ({spec}) leaves no spatial extent")
            fan_in = channels * spec.kernel * spec.kernel
            name = f"block{i}"
            weight = rng.standard_normal((spec.out_channels, channels, spec.kernel, spec.kernel)) * math.sqrt(2.0 / fan_in)
            block = ConvBlock(
                name=name,
                spec=spec,
                weight=parameter(weight, name=f"{name}.conv.weight", dtype=self.dtype),
                gamma=parameter(np.ones(spec.out_channels), name=f"{name}.bn.gamma", dtype=self.dtype),
                beta=parameter(np.zeros(spec.out_channels), name=f"{name}.bn.beta", dtype=self.dtype),
                bn_stats=BatchNormStats.fresh(spec.out_channels, self.dtype),
            )
            if activation in REPACT_ACTIVATIONS:
                kwargs = {} if self.branch_set is None else {"branch_set": self.branch_set}
                block.act = init_repact(REPACT_ACTIVATIONS[activation], **kwargs)
                block.act_leaves = repact_leaves(block.act, name=f"{name}.act")
            self.blocks.append(block)
            channels = spec.out_channels

        head = rng.standard_normal((channels, self.num_classes)) * math.sqrt(1.0 / channels)
        self.head_weight = parameter(head, name="head.weight", dtype=self.dtype)
        self.head_bias = parameter(np.zeros(self.num_classes), name="head.bias", dtype=self.dtype)
        logger.debug(f"TinyCNN assembled: {len(self.blocks)} blocks, activation={activation}, "
                     f"final extent {channels}x{size}x{size}")

    @classmethod
    def from_config(cls, config, dtype=None):
        from .datasets import input_shape_for

        channels, size = input_shape_for(config.dataset)
        return cls(channels, size, config.model, config.activation, config.branch_set,
                   config.num_classes, config.seed, dtype or config.dtype)

    # -------------------------------------------------------------------------
    # Forward
    # -------------------------------------------------------------------------

    def _activate(self, block, h, mode, fused):
        if self.activation == "relu":
            return relu(h)
        if self.activation == "hardswish":
            return hardswish(h)
        if fused is not None:
            return piecewise_op(h, fused[block.name], op="fused_repact")
        return repact_op(h, block.act, block.act_leaves, mode)

    def forward(self, x, mode="train", fused=None):
        """Logits for a batch x[N, C, H, W].

        fused maps block names to PiecewisePoly; when given, each RepAct
        layer is evaluated in its single-branch form.
        """
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=self.dtype)
        if h.data.ndim != 4 or h.shape[1:] != (self.in_channels, self.image_size, self.image_size):
            raise ValidationError(
                f"expected input [N, {self.in_channels}, {self.image_size}, {self.image_size}], got {h.shape}"
            )
        for block in self.blocks:
            h = conv2d(h, block.weight, stride=block.spec.stride, pad=block.spec.pad)
            h = batchnorm2d(h, block.gamma, block.beta, block.bn_stats, mode)
            h = self._activate(block, h, mode, fused)
        h = pool_avg_global(h)
        return linear(h, self.head_weight, self.head_bias)

    __call__ = forward

    # -------------------------------------------------------------------------
    # Parameters and state
    # -------------------------------------------------------------------------

    def parameters(self):
        """Ordered dict of trainable tensors keyed by name."""
        params = {}
        for block in self.blocks:
            for t in (block.weight, block.gamma, block.beta):
                params[t.name] = t
            if block.act_leaves is not None:
                for t in block.act_leaves:
                    if t is not None:
                        params[t.name] = t
        params["head.weight"] = self.head_weight
        params["head.bias"] = self.head_bias
        return params

    def repact_layers(self):
        """Block name -> RepActParams, bound to the current leaf values."""
        return {b.name: b.act_leaves.bind(b.act) for b in self.blocks if b.act is not None}

    def fused_polys(self):
        return {name: fuse(params) for name, params in self.repact_layers().items()}

    def state(self):
        """Every array needed to rebuild the model: parameters and running statistics."""
        state = {name: t.data.copy() for name, t in self.parameters().items()}
        for block in self.blocks:
            state[f"{block.name}.bn.running_mean"] = np.asarray(block.bn_stats.running_mean).copy()
            state[f"{block.name}.bn.running_var"] = np.asarray(block.bn_stats.running_var).copy()
            if block.act is not None and block.act.bn is not None:
                state[f"{block.name}.act.running_mean"] = np.array(block.act.bn.running_mean, dtype=np.float64)
                state[f"{block.name}.act.running_var"] = np.array(block.act.bn.running_var, dtype=np.float64)
        return state

    def load_state(self, state):
        expected = self.state()
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        if missing or unexpected:
            raise ValidationError(f"state does not match the model: missing {missing}, unexpected {unexpected}")
        for name, value in state.items():
            value = np.asarray(value)
            if value.shape != expected[name].shape:
                raise ValidationError(f"{name}: shape {value.shape} does not match model shape {expected[name].shape}")

        params = self.parameters()
        for name, value in state.items():
            if name in params:
                params[name].data[...] = value
        for block in self.blocks:
            block.bn_stats.running_mean = np.array(state[f"{block.name}.bn.running_mean"], dtype=self.dtype)
            block.bn_stats.running_var = np.array(state[f"{block.name}.bn.running_var"], dtype=self.dtype)
            if block.act is not None:
                block.act_leaves.bind(block.act)
                if block.act.bn is not None:
                    block.act.bn.running_mean = float(state[f"{block.name}.act.running_mean"])
                    block.act.bn.running_var = float(state[f"{block.name}.act.running_var"])

    def description(self):
        """JSON-friendly topology, enough to rebuild an identically shaped model."""
        return {
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "blocks": [vars(spec).copy() for spec in self.block_specs],
            "activation": self.activation,
            "branch_set": None if self.branch_set is None else list(self.branch_set),
            "num_classes": self.num_classes,
            "seed": self.seed,
            "dtype": self.dtype.name,
        }

    @classmethod
    def from_description(cls, desc):
        try:
            return cls(desc["in_channels"], desc["image_size"], desc["blocks"], desc["activation"],
                       desc.get("branch_set"), desc["num_classes"], desc.get("seed", 0), desc.get("dtype", "float32"))
        except (KeyError, TypeError) as e:
            raise ValidationError(f"invalid model description: {e}") from e
