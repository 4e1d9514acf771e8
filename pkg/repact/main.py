# Command line entry point for the RepAct toolkit

import argparse
import csv
import os
import sys
from datetime import datetime

import numpy as np

from . import configuration
from . import piecewise
from .benchmark import static_costs, time_layers
from .checkpoint import FusedModel, fuse_checkpoint, load_any, load_checkpoint, load_fused, save_checkpoint, save_fused
from .datasets import input_shape_for, load_dataset
from .errors import (
    CheckpointError,
    DatasetFormatError,
    NumericError,
    ValidationError,
    VerificationError,
)
from .experiment import load_config
from .metrics import MetricsLog, alpha_trajectory, grad_magnitude_curves
from .model import TinyCNN
from .repact_layer import shape_summary
from .tensor import BACKWARD_FAULTS, grad_check, softmax_cross_entropy
from .training import evaluate, train
from .verification import verify_layers

logger = configuration.logger
SEPARATOR = "---------------------------------------"

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors become ValidationError so they exit with code 1."""

    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


# -----------------------------------------------------------------------------
# Shared helpers
# -----------------------------------------------------------------------------

def _fused_layers(document):
    """(fused polys, multi-branch sources) of a checkpoint or fused document."""
    model = document.build_model()
    sources = model.repact_layers()
    if isinstance(document, FusedModel):
        return document.layers, sources
    return model.fused_polys(), sources


def _emit_rows(rows, header, out):
    if out:
        with open(out, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
        print(f"Wrote {len(rows)} rows to {out}")
    else:
        writer = csv.writer(sys.stdout)
        writer.writerow(header)
        writer.writerows(rows)


def _default_metrics_dir(checkpoint_dir):
    return os.path.join(os.path.dirname(os.path.abspath(checkpoint_dir)), "metrics")


# -----------------------------------------------------------------------------
# Subcommands
# -----------------------------------------------------------------------------

def cmd_train(args):
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
        config.validate()
    out = args.out or os.path.join("runs", datetime.now().strftime("%Y-%m-%d_%H-%M-%S"))

    result = train(config, data_root=args.data_root)
    save_checkpoint(result.checkpoint, os.path.join(out, "checkpoint"))
    result.metrics.write_csv(os.path.join(out, "metrics"))

    logger.info(f"Final test top-1: {result.final_top1:.4f}")
    print(f"Run written to {out}")
    print(f"final top-1: {result.final_top1:.4f}")
    return EXIT_OK


def cmd_eval(args):
    document = load_any(args.checkpoint)
    config = document.experiment_config()
    split = load_dataset(config.dataset, config.seed, config.num_classes, args.data_root)
    top1 = evaluate(document, split, fused=args.fused, batch_size=args.batch_size)
    print(f"top-1 ({'fused' if args.fused else 'multi-branch'}): {top1:.4f}")
    return EXIT_OK


def cmd_fuse(args):
    checkpoint = load_checkpoint(args.checkpoint)
    fused = fuse_checkpoint(checkpoint)
    save_fused(fused, args.out)
    for name, poly in fused.layers.items():
        print(f"{name}: {piecewise.to_json(poly)}")
    print(f"Fused model written to {args.out}")
    return EXIT_OK


def cmd_verify(args):
    if args.samples < 1:
        raise ValidationError(f"--samples must be >= 1, got {args.samples}")
    if args.tol < 0:
        raise ValidationError(f"--tol must be >= 0, got {args.tol}")
    fused, sources = _fused_layers(load_any(args.checkpoint))
    if args.fused:
        fused = load_fused(args.fused).layers

    report = verify_layers(sources, fused, args.samples, args.tol, args.seed, args.dtype)
    for name, err in report.max_error.items():
        print(f"{name}: max error {err:.3e}")
    name, err = report.worst
    if name is None:
        print("no RepAct layers to verify")
        return EXIT_OK
    print(f"worst layer: {name} ({err:.3e}, tol {args.tol:g})")
    if not report.passed:
        raise VerificationError(f"layer {name} deviates from its fused form by {err:.3e} > {args.tol:g}")
    return EXIT_OK


def cmd_curves(args):
    if args.alphas or args.gradients:
        log = MetricsLog.read_csv(args.metrics or _default_metrics_dir(args.checkpoint))
        if args.alphas:
            rows = alpha_trajectory(log, args.layer)
            k = len(rows[0].alphas)
            header = ["epoch"] + [f"alpha_{i}" for i in range(k)] + ["prelu_slope", "gamma", "beta"]
            table = [[r.epoch] + [repr(float(a)) for a in r.alphas] + [repr(r.prelu_slope),
                     "" if r.gamma is None else repr(r.gamma), "" if r.beta is None else repr(r.beta)]
                     for r in rows]
        else:
            curves = grad_magnitude_curves(log)
            if args.layer not in curves:
                raise ValidationError(f"no layer named {args.layer!r} in the gradient log (known: {sorted(curves)})")
            curve = curves[args.layer]
            header = ["epoch", "conv_abs_mean_grad", "bn_abs_mean_grad"]
            table = [[e, repr(c), repr(b)] for e, c, b in zip(curve["epoch"], curve["conv"], curve["bn"])]
        _emit_rows(table, header, args.out)
        return EXIT_OK

    fused, _ = _fused_layers(load_any(args.checkpoint))
    if args.layer not in fused:
        raise ValidationError(f"no RepAct layer named {args.layer!r} (known: {sorted(fused)})")
    poly = fused[args.layer]

    if args.summary:
        s = shape_summary(poly)
        print(f"{args.layer}: {s.label} (negative slope {s.negative_slope:.4f}, "
              f"positive slope {s.positive_slope:.4f}, curvature {s.curvature:.4f})")
        return EXIT_OK

    lo, hi = args.range
    if args.steps < 1:
        raise ValidationError(f"--steps must be >= 1, got {args.steps}")
    if not lo <= hi:
        raise ValidationError(f"--range needs lo <= hi, got {lo} {hi}")
    xs = np.linspace(lo, hi, args.steps)
    values = piecewise.evaluate_array(poly, xs)
    slopes = piecewise.derivative_array(poly, xs)
    table = [[repr(float(x)), repr(float(v)), repr(float(d))] for x, v, d in zip(xs, values, slopes)]
    _emit_rows(table, ["x", "value", "derivative"], args.out)
    return EXIT_OK


def cmd_bench(args):
    if args.elements < 1:
        raise ValidationError(f"--elements must be >= 1, got {args.elements}")
    if args.repeats < 1:
        raise ValidationError(f"--repeats must be >= 1, got {args.repeats}")
    fused, sources = _fused_layers(load_any(args.model))

    costs = static_costs(fused)
    baseline = piecewise.op_count(piecewise.make_hardswish())
    print(SEPARATOR)
    print("layer            compares mults adds  coefficients  within bound")
    for cost in costs:
        c, m, a = cost.ops
        print(f"{cost.name:<16} {c:>8} {m:>5} {a:>4}  {cost.coefficients:>12}  {'yes' if cost.within_bound else 'NO'}")
    print(f"{'HardSwish':<16} {baseline[0]:>8} {baseline[1]:>5} {baseline[2]:>4}")

    if not args.static_only:
        print(SEPARATOR)
        for t in time_layers(fused, sources, args.elements, args.repeats, args.seed):
            print(f"{t.name:<16} fused {t.fused_ns:8.2f} ns/elem  branches {t.branches_ns:8.2f} ns/elem  "
                  f"ratio {t.ratio:.2f}x")

    over = [cost.name for cost in costs if not cost.within_bound]
    if over:
        raise VerificationError(f"fused cost exceeds HardSwish by more than 1 compare / 2 mults in {over}")
    return EXIT_OK


def cmd_gradcheck(args):
    if args.tol <= 0:
        raise ValidationError(f"--tol must be > 0, got {args.tol}")
    config = load_config(args.config)
    model = TinyCNN.from_config(config, dtype="float64")
    channels, size = input_shape_for(config.dataset)
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.batch, channels, size, size))
    y = rng.integers(0, config.num_classes, size=args.batch)

    def loss():
        return softmax_cross_entropy(model.forward(x, "train"), y, config.label_smoothing)

    if args.corrupt_backward:
        BACKWARD_FAULTS.add("repact")
    try:
        report = grad_check(loss, model.parameters(), h=args.step, tol=args.tol,
                            max_checks=args.max_checks, seed=args.seed)
    finally:
        BACKWARD_FAULTS.discard("repact")

    for name, err in report.max_rel_error.items():
        print(f"{name:<24} max rel error {err:.3e} ({report.checked[name]} samples)")
    name, err = report.worst
    print(f"excluded {report.excluded} samples that crossed a breakpoint; worst {name} {err:.3e}")
    if report.unchecked:
        raise VerificationError(f"gradient check failed: no valid sample for {', '.join(report.unchecked)}")
    if not report.passed:
        raise VerificationError(f"gradient check failed: {name} has relative error {err:.3e} > {args.tol:g}")
    return EXIT_OK


# -----------------------------------------------------------------------------
# Parser
# -----------------------------------------------------------------------------

def build_parser():
    parser = ArgumentParser(prog="repact", description="Re-parameterizable adaptive activations: "
                                                       "train, fuse, verify and inspect tiny CNNs.")
    parser.add_argument("--log-dir", default=configuration.LOG_DIR, help="directory for the run log file")
    parser.add_argument("--debug", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("train", help="train a tiny CNN from a JSON experiment config")
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (default runs/<timestamp>)")
    p.add_argument("--data-root", help="dataset directory (overrides dataset.root)")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint on its test split")
    p.add_argument("--checkpoint", required=True, help="checkpoint or fused-model directory")
    p.add_argument("--fused", action="store_true", help="evaluate RepAct layers in their fused form")
    p.add_argument("--data-root", help="dataset directory (overrides dataset.root)")
    p.add_argument("--batch-size", type=int, default=256, help="evaluation batch size")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("fuse", help="replace every RepAct layer by its piecewise polynomial")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--out", required=True, help="fused-model output directory")
    p.set_defaults(handler=cmd_fuse)

    p = sub.add_parser("verify", help="check multi-branch and fused forms agree")
    p.add_argument("--checkpoint", required=True, help="checkpoint or fused-model directory")
    p.add_argument("--samples", type=int, default=configuration.VERIFY_SAMPLES,
                   help="random inputs per layer")
    p.add_argument("--tol", type=float, default=configuration.VERIFY_TOL, help="max allowed absolute error")
    p.add_argument("--seed", type=int, default=0, help="seed for the random inputs")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32", help="evaluation precision")
    p.add_argument("--fused", help="compare against this fused-model directory instead of a fresh fusion")
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("curves", help="CSV of a layer's fused activation, alpha trajectory or gradients")
    p.add_argument("--checkpoint", required=True, help="checkpoint or fused-model directory")
    p.add_argument("--layer", required=True, help="layer name, e.g. block0")
    p.add_argument("--range", nargs=2, type=float, default=[-6.0, 6.0], metavar=("LO", "HI"),
                   help="input range to sample")
    p.add_argument("--steps", type=int, default=121, help="number of uniform samples")
    p.add_argument("--out", help="write the CSV here instead of stdout")
    p.add_argument("--metrics", help="metrics directory (default: next to the checkpoint)")
    which = p.add_mutually_exclusive_group()
    which.add_argument("--alphas", action="store_true", help="emit the alpha trajectory instead")
    which.add_argument("--gradients", action="store_true", help="emit the gradient-magnitude curve instead")
    which.add_argument("--summary", action="store_true", help="print a one-line shape summary instead")
    p.set_defaults(handler=cmd_curves)

    p = sub.add_parser("bench", help="operation counts and timing of fused layers")
    p.add_argument("--model", required=True, help="fused-model (or checkpoint) directory")
    p.add_argument("--elements", type=int, default=configuration.BENCH_ELEMENTS,
                   help="buffer size for timing")
    p.add_argument("--repeats", type=int, default=configuration.BENCH_REPEATS, help="timing repeats")
    p.add_argument("--seed", type=int, default=0, help="seed for the timing buffer")
    p.add_argument("--static-only", action="store_true", help="skip the timing")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--tol", type=float, default=configuration.GRADCHECK_TOL, help="max relative error")
    p.add_argument("--step", type=float, default=configuration.GRADCHECK_STEP, help="finite-difference step h")
    p.add_argument("--batch", type=int, default=4, help="random batch size")
    p.add_argument("--max-checks", type=int, default=8, help="valid samples wanted per parameter")
    p.add_argument("--seed", type=int, default=0, help="seed for the batch and sampled elements")
    p.add_argument("--corrupt-backward", action="store_true",
                   help="deliberately break the RepAct backward rule (the check must fail)")
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.debug:
            logger.setLevel("DEBUG")
        configuration.enable_console_logging()
        log_file = configuration.enable_file_logging(args.log_dir)
        logger.info(f"repact {args.command} (log: {log_file})")
        return args.handler(args)
    except ValidationError as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, DatasetFormatError, CheckpointError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, VerificationError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
