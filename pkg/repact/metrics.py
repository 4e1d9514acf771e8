"""
Training diagnostics: per-epoch loss/accuracy, per-layer gradient magnitudes
and the per-layer trajectory of the RepAct branch weights.

Each family is written as its own CSV file with a header row.  Floats are
written with repr(), so two identical runs give byte-identical files.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import configuration
from .errors import ValidationError

logger = configuration.logger

EPOCHS_FILE = "epochs.csv"
STEPS_FILE = "steps.csv"
GRADIENTS_FILE = "grad_magnitude.csv"
ALPHAS_FILE = "alpha_trajectory.csv"


@dataclass
class MetricsLog:
    """Append-only record of a training run."""
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    gradients: list = field(default_factory=list)
    alphas: list = field(default_factory=list)

    def record_epoch(self, epoch, lr, train_loss, test_top1):
        self.epochs.append({"epoch": epoch, "lr": float(lr), "train_loss": float(train_loss),
                            "test_top1": float(test_top1)})

    def record_step(self, epoch, step, lr, loss):
        self.steps.append({"epoch": epoch, "step": step, "lr": float(lr), "loss": float(loss)})

    def record_gradients(self, epoch, layer, conv_abs_mean_grad, bn_abs_mean_grad):
        self.gradients.append({"epoch": epoch, "layer": layer,
                               "conv_abs_mean_grad": float(conv_abs_mean_grad),
                               "bn_abs_mean_grad": float(bn_abs_mean_grad)})

    def record_activations(self, epoch, layers):
        """Snapshot alpha, t (and gamma, beta) of every RepAct layer."""
        for name, params in layers.items():
            row = {"epoch": epoch, "layer": name,
                   "alphas": tuple(float(a) for a in params.alphas),
                   "prelu_slope": float(params.prelu_slope),
                   "gamma": None, "beta": None}
            if params.bn is not None:
                row["gamma"] = float(params.bn.gamma)
                row["beta"] = float(params.bn.beta)
            self.alphas.append(row)

    @property
    def layers(self):
        names = []
        for row in self.alphas + self.gradients:
            if row["layer"] not in names:
                names.append(row["layer"])
        return names

    # -------------------------------------------------------------------------
    # CSV
    # -------------------------------------------------------------------------

    def write_csv(self, directory):
        os.makedirs(directory, exist_ok=True)
        _write_rows(os.path.join(directory, EPOCHS_FILE), ["epoch", "lr", "train_loss", "test_top1"], self.epochs)
        _write_rows(os.path.join(directory, STEPS_FILE), ["epoch", "step", "lr", "loss"], self.steps)
        _write_rows(os.path.join(directory, GRADIENTS_FILE),
                    ["epoch", "layer", "conv_abs_mean_grad", "bn_abs_mean_grad"], self.gradients)

        k = max((len(row["alphas"]) for row in self.alphas), default=0)
        fieldnames = ["epoch", "layer"] + [f"alpha_{i}" for i in range(k)] + ["prelu_slope", "gamma", "beta"]
        rows = []
        for row in self.alphas:
            flat = {"epoch": row["epoch"], "layer": row["layer"], "prelu_slope": row["prelu_slope"],
                    "gamma": row["gamma"], "beta": row["beta"]}
            flat.update({f"alpha_{i}": a for i, a in enumerate(row["alphas"])})
            rows.append(flat)
        _write_rows(os.path.join(directory, ALPHAS_FILE), fieldnames, rows)
        logger.info(f"Metrics written to {directory}")

    @classmethod
    def read_csv(cls, directory):
        log = cls()
        for row in _read_rows(os.path.join(directory, EPOCHS_FILE)):
            log.record_epoch(int(row["epoch"]), row["lr"], row["train_loss"], row["test_top1"])
        steps_path = os.path.join(directory, STEPS_FILE)
        if os.path.exists(steps_path):
            for row in _read_rows(steps_path):
                log.record_step(int(row["epoch"]), int(row["step"]), row["lr"], row["loss"])
        for row in _read_rows(os.path.join(directory, GRADIENTS_FILE)):
            log.record_gradients(int(row["epoch"]), row["layer"], row["conv_abs_mean_grad"], row["bn_abs_mean_grad"])
        for row in _read_rows(os.path.join(directory, ALPHAS_FILE)):
            keys = sorted((k for k in row if k.startswith("alpha_") and row[k] != ""), key=lambda k: int(k[6:]))
            log.alphas.append({
                "epoch": int(row["epoch"]),
                "layer": row["layer"],
                "alphas": tuple(float(row[k]) for k in keys),
                "prelu_slope": float(row["prelu_slope"]),
                "gamma": float(row["gamma"]) if row["gamma"] else None,
                "beta": float(row["beta"]) if row["beta"] else None,
            })
        return log


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def _write_rows(path, fieldnames, rows):
    with open(path, "w", newline="") as csvfile:
        writer = csv.DictWriter(csvfile, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _cell(row.get(key)) for key in fieldnames})


def _read_rows(path):
    with open(path, newline="") as csvfile:
        return list(csv.DictReader(csvfile))


# -----------------------------------------------------------------------------
# Queries
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class AlphaRow:
    epoch: int
    alphas: np.ndarray
    prelu_slope: float
    gamma: float = None
    beta: float = None


def alpha_trajectory(log, layer):
    """Ordered (epoch, alphas, t) rows of one RepAct layer."""
    rows = [row for row in log.alphas if row["layer"] == layer]
    if not rows:
        known = sorted({row["layer"] for row in log.alphas})
        raise ValidationError(f"no RepAct layer named {layer!r} in the log (known: {known})")
    rows.sort(key=lambda row: row["epoch"])
    return [AlphaRow(row["epoch"], np.array(row["alphas"]), row["prelu_slope"], row["gamma"], row["beta"])
            for row in rows]


def grad_magnitude_curves(log):
    """Layer -> {"epoch": [...], "conv": [...], "bn": [...]} in epoch order."""
    curves = {}
    for row in sorted(log.gradients, key=lambda r: r["epoch"]):
        curve = curves.setdefault(row["layer"], {"epoch": [], "conv": [], "bn": []})
        curve["epoch"].append(row["epoch"])
        curve["conv"].append(row["conv_abs_mean_grad"])
        curve["bn"].append(row["bn_abs_mean_grad"])
    return curves


def abs_mean(*arrays):
    """Mean absolute value over the concatenation of arrays, skipping None."""
    parts = [np.abs(np.asarray(a, dtype=np.float64)).reshape(-1) for a in arrays if a is not None]
    if not parts:
        return 0.0
    return float(np.concatenate(parts).mean())
