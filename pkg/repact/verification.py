"""
Train/inference equivalence check for every RepAct layer of a model.

Each layer's multi-branch forward (eval mode, so variant III uses its
running statistics) is compared with the fused PiecewisePoly on random
inputs drawn uniformly from a fixed range.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import configuration
from . import piecewise
from .errors import ValidationError
from .repact_layer import forward_train, fuse

logger = configuration.logger


@dataclass
class VerifyReport:
    max_error: dict    # layer name -> max |multi-branch - fused|
    samples: int
    tol: float
    dtype: str

    @property
    def passed(self):
        return all(err <= self.tol for err in self.max_error.values())

    @property
    def worst(self):
        if not self.max_error:
            return None, 0.0
        name = max(self.max_error, key=self.max_error.get)
        return name, self.max_error[name]


def layer_error(params, poly, samples, seed=0, dtype="float64", value_range=configuration.VERIFY_RANGE):
    lo, hi = value_range
    x = np.random.default_rng(seed).uniform(lo, hi, size=samples).astype(dtype)
    reference = forward_train(x, params.snapshot(), mode="eval")
    fused = piecewise.evaluate_array(poly, x)
    return float(np.max(np.abs(reference - fused)))


def verify_layers(layers, fused=None, samples=configuration.VERIFY_SAMPLES, tol=configuration.VERIFY_TOL,
                  seed=0, dtype="float32", value_range=configuration.VERIFY_RANGE):
    """Max error per layer; fused defaults to a fresh fusion of each layer.

    Layer i draws its inputs from a generator seeded with (seed, i), so the
    report does not depend on how many workers run.
    """
    if samples < 1:
        raise ValidationError(f"samples must be >= 1, got {samples}")
    if tol < 0:
        raise ValidationError(f"tol must be >= 0, got {tol}")
    if dtype not in ("float32", "float64"):
        raise ValidationError(f"dtype must be float32 or float64, got {dtype!r}")

    names = list(layers)
    if fused is not None:
        missing = [name for name in names if name not in fused]
        if missing:
            raise ValidationError(f"fused model has no layer(s) {missing}")

    def check(index):
        name = names[index]
        poly = fused[name] if fused is not None else fuse(layers[name])
        return layer_error(layers[name], poly, samples, [seed, index], dtype, value_range)

    with ThreadPoolExecutor(max_workers=max(1, min(configuration.THREADS, len(names) or 1))) as pool:
        errors = list(pool.map(check, range(len(names))))

    report = VerifyReport(dict(zip(names, errors)), samples, tol, dtype)
    for name, err in report.max_error.items():
        logger.info(f"verify {name}: max |multi-branch - fused| = {err:.3e} ({'ok' if err <= tol else 'FAIL'})")
    return report
