"""RepAct: re-parameterizable adaptive activation functions.

Multi-branch weighted activations for training, folded into a single
piecewise polynomial for inference, plus the small numpy training stack
used to study them.
"""

from .piecewise import (
    PiecewisePoly,
    evaluate,
    evaluate_derivative,
    make_hardswish,
    make_identity,
    make_prelu,
    make_relu,
    op_count,
    weighted_sum,
)
from .repact_layer import (
    BNState,
    Branch,
    RepActParams,
    RepActVariant,
    effective_alphas,
    forward_train,
    fuse,
    init_repact,
    repact_backward,
)

__version__ = "0.1.0"
