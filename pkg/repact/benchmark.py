"""
Cost of fused RepAct layers compared with HardSwish.

The static per-element operation count is the contract: a fused layer may
cost at most one comparison and two multiplications more than HardSwish.
Wall-clock timing of the fused form against the explicit branch sum is
reported for information only.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import configuration
from . import piecewise
from .errors import ValidationError
from .repact_layer import forward_train

logger = configuration.logger

EXTRA_COMPARES = 1
EXTRA_MULTS = 2


@dataclass(frozen=True)
class LayerCost:
    name: str
    ops: tuple              # (compares, mults, adds) of the fused layer
    baseline: tuple         # the same for HardSwish
    coefficients: int       # stored inference parameters (breakpoints + segment coefficients)

    @property
    def within_bound(self):
        return (self.ops[0] - self.baseline[0] <= EXTRA_COMPARES
                and self.ops[1] - self.baseline[1] <= EXTRA_MULTS)


@dataclass(frozen=True)
class LayerTiming:
    name: str
    fused_ns: float         # per element
    branches_ns: float

    @property
    def ratio(self):
        return self.branches_ns / self.fused_ns if self.fused_ns > 0 else float("inf")


def coefficient_count(poly):
    return len(poly.breakpoints) + 3 * len(poly.segments)


def static_costs(layers):
    """LayerCost for every fused layer in a name -> PiecewisePoly mapping."""
    baseline = piecewise.op_count(piecewise.make_hardswish())
    costs = []
    for name, poly in layers.items():
        cost = LayerCost(name, piecewise.op_count(poly), baseline, coefficient_count(poly))
        logger.info(f"bench {name}: ops {cost.ops} vs HardSwish {baseline}, {cost.coefficients} coefficients")
        costs.append(cost)
    return costs


def _chunked(fn, x, workers):
    if workers <= 1 or x.size < 2 * workers:
        return fn(x)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.concatenate(list(pool.map(fn, np.array_split(x, workers))))


def _time_per_element(fn, x, repeats, workers):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        _chunked(fn, x, workers)
        best = min(best, time.perf_counter() - start)
    return best * 1e9 / x.size


def time_layers(layers, sources, elements=configuration.BENCH_ELEMENTS, repeats=configuration.BENCH_REPEATS,
                seed=0, workers=None):
    """Best-of-repeats ns/element: fused evaluation vs the multi-branch sum on the same buffer."""
    if elements < 1:
        raise ValidationError(f"elements must be >= 1, got {elements}")
    if repeats < 1:
        raise ValidationError(f"repeats must be >= 1, got {repeats}")
    workers = configuration.THREADS if workers is None else workers
    x = np.random.default_rng(seed).uniform(*configuration.VERIFY_RANGE, size=int(elements)).astype(np.float32)

    timings = []
    for name, poly in layers.items():
        params = sources[name].snapshot()
        fused_ns = _time_per_element(lambda chunk: piecewise.evaluate_array(poly, chunk), x, repeats, workers)
        branches_ns = _time_per_element(lambda chunk: forward_train(chunk, params, mode="eval"), x, repeats, workers)
        timing = LayerTiming(name, fused_ns, branches_ns)
        logger.info(f"bench {name}: fused {fused_ns:.2f} ns/elem, branches {branches_ns:.2f} ns/elem, "
                    f"ratio {timing.ratio:.2f}x")
        timings.append(timing)
    return timings
