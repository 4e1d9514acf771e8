"""
Piecewise polynomials of degree <= 2.

Every activation in this package has an inference form that is a
PiecewisePoly: ordered breakpoints b_1 < ... < b_m and m + 1 coefficient
triples (c2, c1, c0).  Segment i covers [b_i, b_{i+1}) with b_0 = -inf and
b_{m+1} = +inf, so a point sitting exactly on a breakpoint belongs to the
segment on its right.  A segment is evaluated in Horner form
(c2 * x + c1) * x + c0.

weighted_sum() is the re-parameterization step: a weighted sum of branch
polynomials is again a piecewise polynomial over the union of their
breakpoints, so a multi-branch activation collapses into a single branch.
"""

import bisect
import json
import math
from dataclasses import dataclass

import numpy as np

from . import configuration
from .errors import ValidationError

logger = configuration.logger


@dataclass(frozen=True)
class PiecewisePoly:
    breakpoints: tuple
    segments: tuple

    def __post_init__(self):
        breakpoints = tuple(float(b) for b in self.breakpoints)
        segments = tuple(_coerce_segment(seg) for seg in self.segments)

        if not all(math.isfinite(b) for b in breakpoints):
            raise ValidationError("breakpoints must be finite")
        if any(right <= left for left, right in zip(breakpoints, breakpoints[1:])):
            raise ValidationError(f"breakpoints must be strictly increasing, got {breakpoints}")
        if len(segments) != len(breakpoints) + 1:
            raise ValidationError(
                f"{len(breakpoints)} breakpoints need {len(breakpoints) + 1} segments, got {len(segments)}"
            )

        object.__setattr__(self, "breakpoints", breakpoints)
        object.__setattr__(self, "segments", segments)

    def __call__(self, x):
        if np.ndim(x) == 0:
            return evaluate(self, x)
        return evaluate_array(self, x)


def _coerce_segment(seg):
    """Normalise a coefficient sequence (highest power first) to a (c2, c1, c0) triple."""
    coeffs = tuple(float(c) for c in seg)
    if len(coeffs) > configuration.MAX_DEGREE + 1:
        raise ValidationError(f"segment {coeffs} exceeds degree {configuration.MAX_DEGREE}")
    if not all(math.isfinite(c) for c in coeffs):
        raise ValidationError(f"segment {coeffs} has non-finite coefficients")
    return (0.0,) * (3 - len(coeffs)) + coeffs


def _finite_scalar(x):
    x = float(x)
    if not math.isfinite(x):
        raise ValidationError(f"cannot evaluate at non-finite x={x}")
    return x


# -----------------------------------------------------------------------------
# Branch polynomials
# -----------------------------------------------------------------------------

def make_identity():
    return PiecewisePoly((), ((0.0, 1.0, 0.0),))


def make_relu():
    return PiecewisePoly((0.0,), ((0.0, 0.0, 0.0), (0.0, 1.0, 0.0)))


def make_prelu(t):
    """PReLU with negative-side slope t."""
    t = float(t)
    if not math.isfinite(t):
        raise ValidationError(f"PReLU slope must be finite, got {t}")
    return PiecewisePoly((0.0,), ((0.0, t, 0.0), (0.0, 1.0, 0.0)))


def make_hardswish():
    knee = configuration.HARDSWISH_KNEE
    return PiecewisePoly(
        (-knee, knee),
        ((0.0, 0.0, 0.0), (1.0 / 6.0, 0.5, 0.0), (0.0, 1.0, 0.0)),
    )


# -----------------------------------------------------------------------------
# Fusion
# -----------------------------------------------------------------------------

def _merge_breakpoints(points, tol):
    """Sorted union of breakpoints; points closer than tol collapse onto the leftmost."""
    merged = []
    for b in sorted(points):
        if merged and b - merged[-1] < tol:
            continue
        merged.append(b)
    return merged


def weighted_sum(terms, tol=configuration.BREAKPOINT_MERGE_TOL):
    """Fuse [(weight, poly), ...] into one PiecewisePoly.

    The result is defined on the union of the input breakpoints.  On every
    interval of that partition its coefficients are the weighted sum of the
    coefficients each input uses there.  Accumulation runs term by term in
    64-bit floats, so for the default branch set the coefficients equal the
    closed-form delta expressions evaluated left to right.
    """
    terms = list(terms)
    if not terms:
        raise ValidationError("weighted_sum needs at least one (weight, poly) term")
    for weight, _ in terms:
        if not math.isfinite(weight):
            raise ValidationError(f"weights must be finite, got {weight}")

    union = _merge_breakpoints([b for _, poly in terms for b in poly.breakpoints], tol)

    segments = []
    for j in range(len(union) + 1):
        acc = [0.0, 0.0, 0.0]
        for weight, poly in terms:
            index = 0 if j == 0 else bisect.bisect_right(poly.breakpoints, union[j - 1] + tol)
            c2, c1, c0 = poly.segments[index]
            acc[0] += weight * c2
            acc[1] += weight * c1
            acc[2] += weight * c0
        segments.append(tuple(acc))

    return PiecewisePoly(tuple(union), tuple(segments))


def simplify(p):
    """Merge neighbouring segments whose coefficients are identical."""
    breakpoints = []
    segments = [p.segments[0]]
    for b, seg in zip(p.breakpoints, p.segments[1:]):
        if seg == segments[-1]:
            continue
        breakpoints.append(b)
        segments.append(seg)
    return PiecewisePoly(tuple(breakpoints), tuple(segments))


def add_constant(p, c):
    """Add c to the zero-power coefficient of every segment."""
    return PiecewisePoly(p.breakpoints, tuple((c2, c1, c0 + c) for c2, c1, c0 in p.segments))


def is_continuous(p, tol=1e-9):
    for i, b in enumerate(p.breakpoints):
        left = _horner(p.segments[i], b)
        right = _horner(p.segments[i + 1], b)
        if abs(left - right) > tol:
            return False
    return True


# -----------------------------------------------------------------------------
# Evaluation
# -----------------------------------------------------------------------------

def _horner(segment, x):
    c2, c1, c0 = segment
    return (c2 * x + c1) * x + c0


def segment_index(p, x):
    return bisect.bisect_right(p.breakpoints, x)


def evaluate(p, x):
    x = _finite_scalar(x)
    return _horner(p.segments[segment_index(p, x)], x)


def evaluate_derivative(p, x):
    """Right derivative 2 * c2 * x + c1 of the segment containing x."""
    x = _finite_scalar(x)
    c2, c1, _ = p.segments[segment_index(p, x)]
    return 2.0 * c2 * x + c1


def _array_coefficients(p, x, check_finite=True):
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if check_finite and not np.all(np.isfinite(x)):
        raise ValidationError("cannot evaluate a piecewise polynomial at non-finite inputs")
    coeffs = np.asarray(p.segments, dtype=x.dtype)
    index = np.searchsorted(np.asarray(p.breakpoints, dtype=x.dtype), x, side="right")
    return x, coeffs[index]


def evaluate_array(p, x, check_finite=True):
    """Vectorised evaluate(); keeps the floating dtype of x.

    With check_finite=False non-finite inputs are not rejected and NaN
    propagates (the training path).
    """
    x, c = _array_coefficients(p, x, check_finite)
    return (c[..., 0] * x + c[..., 1]) * x + c[..., 2]


def derivative_array(p, x, check_finite=True):
    x, c = _array_coefficients(p, x, check_finite)
    return (2 * c[..., 0]) * x + c[..., 1]


def op_count(p):
    """Worst-case per-element cost of evaluate() as (compares, mults, adds).

    Segment lookup is a binary search over the boundaries, ceil(log2(segments))
    comparisons.  The densest segment is evaluated in Horner form, one
    multiply and one add per degree.
    """
    compares = (len(p.segments) - 1).bit_length()
    degree = 0
    for c2, c1, _ in p.segments:
        if c2 != 0.0:
            degree = 2
            break
        if c1 != 0.0:
            degree = 1
    return compares, degree, degree


# -----------------------------------------------------------------------------
# JSON document
# -----------------------------------------------------------------------------

def poly_to_document(p):
    return {
        "breakpoints": list(p.breakpoints),
        "segments": [list(seg) for seg in p.segments],
        "format_version": configuration.POLY_FORMAT_VERSION,
    }


def poly_from_document(doc):
    version = doc.get("format_version")
    if version != configuration.POLY_FORMAT_VERSION:
        raise ValidationError(f"unsupported piecewise polynomial format_version {version!r}")
    try:
        return PiecewisePoly(tuple(doc["breakpoints"]), tuple(tuple(s) for s in doc["segments"]))
    except KeyError as e:
        raise ValidationError(f"piecewise polynomial document is missing {e}") from e


def to_json(p):
    # repr() of a float is the shortest string that parses back to the same bits
    return json.dumps(poly_to_document(p))


def from_json(text):
    return poly_from_document(json.loads(text))
