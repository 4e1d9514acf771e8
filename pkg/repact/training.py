"""
Training loop, learning-rate schedules, SGD and evaluation.

A run is fully determined by its ExperimentConfig: weight init, subset
selection, batch order and augmentation all derive from config.seed.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import configuration
from .checkpoint import Checkpoint, FusedModel
from .datasets import iterate_batches, load_dataset
from .errors import NumericError, ValidationError
from .metrics import MetricsLog, abs_mean
from .model import TinyCNN
from .tensor import Tape, backward, softmax_cross_entropy

logger = configuration.logger
SEPARATOR = "---------------------------------------"


def learning_rate(schedule, epoch, step, steps_per_epoch, epochs):
    """Learning rate for a given step.

    An optional linear warm-up (warmup_epochs, applied per step) is followed
    by cosine annealing to min_lr over the remaining epochs or by step decay
    (multiply by gamma every step_size epochs).
    """
    params = schedule.params
    warmup = params.get("warmup_epochs", 0)
    global_step = epoch * steps_per_epoch + step
    warmup_steps = warmup * steps_per_epoch
    if global_step < warmup_steps:
        return schedule.initial * (global_step + 1) / warmup_steps

    after = max(epoch - warmup, 0)
    if schedule.kind == "cosine":
        min_lr = params.get("min_lr", 0.0)
        span = max(epochs - warmup, 1)
        return min_lr + 0.5 * (schedule.initial - min_lr) * (1.0 + math.cos(math.pi * after / span))
    return schedule.initial * params.get("gamma", 0.1) ** (after // params.get("step_size", 30))


def is_activation_param(name):
    return ".act." in name


def is_decayed_param(name):
    return name.endswith(".conv.weight") or name == "head.weight"


class SGD:
    """SGD with momentum; the buffer starts at the first gradient.

    Weight decay applies to conv and linear weights only.  RepAct parameters
    follow activation_lr (scaled by the schedule) when one is given.
    """

    def __init__(self, params, base_lr, momentum=configuration.SGD_MOMENTUM,
                 weight_decay=configuration.WEIGHT_DECAY, activation_lr=None):
        self.params = params
        self.base_lr = base_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.activation_lr = activation_lr
        self.buffers = {}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def rate_for(self, name, lr):
        if self.activation_lr is None or not is_activation_param(name):
            return lr
        return self.activation_lr * (lr / self.base_lr) if self.base_lr > 0 else 0.0

    def step(self, lr):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and is_decayed_param(name):
                g = g + self.weight_decay * p.data
            buf = self.buffers.get(name)
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buffers[name] = buf
            p.data -= (self.rate_for(name, lr) * buf).astype(p.dtype, copy=False)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: MetricsLog
    model: TinyCNN

    @property
    def final_top1(self):
        return self.metrics.epochs[-1]["test_top1"] if self.metrics.epochs else float("nan")


def _check_split(model, split):
    expected = (model.in_channels, model.image_size, model.image_size)
    if tuple(split.train_images.shape[1:]) != expected:
        raise ValidationError(f"dataset images are {split.train_images.shape[1:]}, model expects {expected}")
    if split.train_labels.max(initial=0) >= model.num_classes:
        raise ValidationError(f"dataset labels exceed num_classes={model.num_classes}")


def train(config, split=None, data_root=None):
    """Run the epoch loop and return the final checkpoint with its MetricsLog.

    Alpha snapshots are taken at the start of every epoch, gradient
    magnitudes are averaged over the epoch's steps.  A non-finite loss aborts
    with NumericError carrying the epoch and step.
    """
    config.validate()
    if split is None:
        split = load_dataset(config.dataset, config.seed, config.num_classes, data_root)
    model = TinyCNN.from_config(config)
    _check_split(model, split)

    params = model.parameters()
    optimizer = SGD(params, config.schedule.initial, config.momentum, config.weight_decay, config.activation_lr)
    log = MetricsLog()
    n = len(split.train_labels)
    steps_per_epoch = math.ceil(n / config.batch_size)

    logger.info(SEPARATOR)
    logger.info(f"Training {config.activation} on {split.name}: {n} train / {len(split.test_labels)} test, "
                f"{config.epochs} epochs, batch {config.batch_size}, seed {config.seed}")

    lr = config.schedule.initial
    for epoch in range(config.epochs):
        log.record_activations(epoch, model.repact_layers())
        loss_sum, seen = 0.0, 0
        grad_sums = {block.name: [0.0, 0.0] for block in model.blocks}
        steps = 0

        batches = iterate_batches(split.train_images, split.train_labels, config.batch_size, config.seed, epoch,
                                  shuffle=True, augment=config.dataset.augment,
                                  prefetch=min(config.prefetch, configuration.THREADS))
        for step, (x, y) in enumerate(batches):
            if len(y) < 2:
                logger.debug(f"Skipping a batch of {len(y)} sample at epoch {epoch}, step {step}")
                continue
            lr = learning_rate(config.schedule, epoch, step, steps_per_epoch, config.epochs)
            optimizer.zero_grad()
            with Tape():
                loss = softmax_cross_entropy(model.forward(x, "train"), y, config.label_smoothing)
            value = float(loss.data)
            if not math.isfinite(value):
                logger.error(f"Non-finite loss {value} at epoch {epoch}, step {step}")
                raise NumericError(f"training loss became {value}", epoch, step)
            backward(loss)

            for block in model.blocks:
                grad_sums[block.name][0] += abs_mean(block.weight.grad)
                grad_sums[block.name][1] += abs_mean(block.gamma.grad, block.beta.grad)
            optimizer.step(lr)

            loss_sum += value * len(y)
            seen += len(y)
            steps += 1
            if config.log_cadence and (step + 1) % config.log_cadence == 0:
                log.record_step(epoch, step, lr, value)
                logger.info(f"epoch {epoch} step {step + 1}/{steps_per_epoch}: loss {value:.4f}, lr {lr:.5f}")

        train_loss = loss_sum / seen if seen else float("nan")
        top1 = accuracy(model, split.test_images, split.test_labels, config.batch_size)
        log.record_epoch(epoch, lr, train_loss, top1)
        for block in model.blocks:
            conv, bn = grad_sums[block.name]
            log.record_gradients(epoch, block.name, conv / max(steps, 1), bn / max(steps, 1))
        logger.info(f"Epoch {epoch}: train loss {train_loss:.4f}, test top-1 {top1:.4f}")

    checkpoint = Checkpoint.from_model(model, config, final_top1=log.epochs[-1]["test_top1"])
    return TrainResult(checkpoint, log, model)


# -----------------------------------------------------------------------------
# Evaluation
# -----------------------------------------------------------------------------

def predict_logits(model, images, batch_size=256, fused=None):
    """Eval-mode logits for every image, computed without a tape."""
    chunks = []
    for start in range(0, len(images), batch_size):
        chunks.append(model.forward(images[start:start + batch_size], "eval", fused).data)
    if not chunks:
        return np.zeros((0, model.num_classes), dtype=model.dtype)
    return np.concatenate(chunks)


def accuracy(model, images, labels, batch_size=256, fused=None):
    if len(labels) == 0:
        raise ValidationError("cannot measure accuracy on an empty split")
    logits = predict_logits(model, images, batch_size, fused)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(checkpoint, split, fused=False, batch_size=256):
    """Top-1 accuracy of a checkpoint on split's test items.

    With fused=True every RepAct layer is evaluated through its fused
    PiecewisePoly instead of the branch sum.  A FusedModel is scored with the
    polynomials it stores; a plain checkpoint is fused on the fly.
    """
    model = checkpoint.build_model()
    _check_split(model, split)
    polys = None
    if fused:
        polys = checkpoint.layers if isinstance(checkpoint, FusedModel) else model.fused_polys()
    top1 = accuracy(model, split.test_images, split.test_labels, batch_size, polys)
    logger.info(f"Evaluated {'fused' if fused else 'multi-branch'} model: top-1 {top1:.4f}")
    return top1


def alpha_shift(model):
    """L1 distance of every RepAct layer's alphas from the even initialization."""
    shifts = {}
    for name, params in model.repact_layers().items():
        k = len(params.alphas)
        shifts[name] = float(np.abs(np.asarray(params.alphas, dtype=np.float64) - 1.0 / k).sum())
    return shifts


@dataclass(frozen=True)
class NonInferiority:
    candidate_mean: float
    baseline_mean: float
    margin: float

    @property
    def passed(self):
        return self.candidate_mean >= self.baseline_mean - self.margin


def non_inferiority(candidate_scores, baseline_scores, margin=0.005):
    """Is the candidate's mean score at most margin below the baseline's?"""
    if not candidate_scores or not baseline_scores:
        raise ValidationError("non_inferiority needs at least one score on each side")
    if margin < 0:
        raise ValidationError(f"margin must be >= 0, got {margin}")
    return NonInferiority(float(np.mean(candidate_scores)), float(np.mean(baseline_scores)), margin)
