"""Desk-scale training: loss, gradients, Adam, warmup + cosine schedule, toy data."""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError, DivergenceError
from .model import ModelConfig

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_acc")


def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_targets(logits, targets):
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    if np.any(targets < 0) or np.any(targets >= logits.shape[-1]):
        raise DimensionError("target index out of range")
    return targets


def cross_entropy(logits, targets):
    """Mean cross-entropy with log-sum-exp stabilization."""
    logits = np.atleast_2d(logits)
    targets = _check_targets(logits, np.atleast_1d(targets))
    logp = _log_softmax(logits)
    return float(-np.take_along_axis(logp, targets[:, None], axis=1).mean())


def cross_entropy_grad(logits, targets):
    """d(mean CE)/d(logits) = (softmax - onehot) / batch."""
    logits = np.atleast_2d(logits)
    targets = _check_targets(logits, np.atleast_1d(targets))
    g = np.exp(_log_softmax(logits))
    g[np.arange(len(targets)), targets] -= 1.0
    return g / len(targets)


def accuracy(logits, targets):
    logits = np.atleast_2d(logits)
    targets = _check_targets(logits, np.atleast_1d(targets))
    return float(np.mean(np.argmax(logits, axis=-1) == targets))


def backward(model, images, targets, loss_scale=1.0):
    """Loss and gradient of ``loss_scale * mean CE`` for every trainable tensor."""
    logits, cache = model.forward_cached(images)
    loss = cross_entropy(logits, targets)
    grads = model.backward(cache, loss_scale * cross_entropy_grad(logits, targets))
    return loss_scale * loss, grads


def numerical_gradient(model, images, targets, step=1e-5, names=None):
    """Central finite differences of the mean CE for every parameter element.

    Perturbing a parameter of block ``i`` only requires re-running the
    network from block ``i`` on, so the activations entering each block are
    computed once and reused.
    """
    acts = model.block_inputs(images)
    depth = model.config.depth
    names = sorted(model.params) if names is None else names
    grads = {}
    for name in names:
        if name.startswith("blocks."):
            start = int(name.split(".")[1])
            f = lambda: cross_entropy(model.logits_from(acts[start], start), targets)
        elif name.startswith(("norm.", "head.")):
            f = lambda: cross_entropy(model.logits_from(acts[depth], depth), targets)
        else:
            f = lambda: cross_entropy(model.forward(images), targets)
        p = model.params[name]
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            fp = f()
            p[idx] = old - step
            fm = f()
            p[idx] = old
            g[idx] = (fp - fm) / (2 * step)
        grads[name] = g
    return grads


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params, grads, lr=None):
        """In-place Adam update of ``params``."""
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name in sorted(grads):
            g = grads[name]
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class ScheduleConfig:
    base_lr: float = 5e-4
    warmup_epochs: int = 10
    total_epochs: int = 310
    eta_min: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigurationError("need 0 <= warmup_epochs < total_epochs")


def lr_at(schedule, epoch):
    """Linear warmup from 0 to ``base_lr``, then cosine decay towards ``eta_min``."""
    if not 0 <= epoch < schedule.total_epochs:
        raise ConfigurationError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    w = schedule.warmup_epochs
    if epoch < w:
        return schedule.base_lr * epoch / w
    progress = (epoch - w) / (schedule.total_epochs - w)
    return schedule.eta_min + 0.5 * (schedule.base_lr - schedule.eta_min) * (
        1.0 + math.cos(math.pi * progress)
    )


TOY_KINDS = ("quadrant-blob", "two-class-texture")


@dataclass
class ToyDataset:
    """Synthetic stand-in for an image classification benchmark.

    ``quadrant-blob``: a bright Gaussian blob in one of the four image
    quadrants on a background of Gaussian noise with standard deviation
    ``noise``; the label is the quadrant (row-major).
    ``two-class-texture``: horizontal vs. vertical stripes with random phase
    and period.
    """

    kind: str = "quadrant-blob"
    image_size: int = 16
    count: int = 512
    seed: int = 0
    channels: int = 1
    noise: float = 0.1

    def __post_init__(self):
        if self.kind not in TOY_KINDS:
            raise ConfigurationError(f"unknown toy dataset {self.kind!r}")
        if self.image_size % 2:
            raise ConfigurationError("toy images need an even size")

    @property
    def num_classes(self):
        return 4 if self.kind == "quadrant-blob" else 2

    def generate(self):
        """Returns ``(images [N, C, S, S], labels [N])``; identical for equal fields."""
        rng = np.random.default_rng([self.seed, TOY_KINDS.index(self.kind)])
        k = self.num_classes
        labels = rng.permutation(np.arange(self.count) % k)
        s = self.image_size
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
        images = self.noise * rng.standard_normal((self.count, self.channels, s, s))
        if self.kind == "quadrant-blob":
            half = s / 2
            sigma = s / 12
            margin = s / 8
            for n, lab in enumerate(labels):
                cy = (lab // 2) * half + rng.uniform(margin, half - margin)
                cx = (lab % 2) * half + rng.uniform(margin, half - margin)
                amp = rng.uniform(0.8, 1.2)
                images[n] += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        else:
            for n, lab in enumerate(labels):
                period = rng.uniform(3.0, 6.0)
                phase = rng.uniform(0, 2 * math.pi)
                axis = yy if lab == 0 else xx
                images[n] += np.sin(2 * math.pi * axis / period + phase)
        return images, labels

    def object_boxes(self, labels):
        """Quadrant bounding box ``(row0, row1, col0, col1)`` of each blob."""
        if self.kind != "quadrant-blob":
            raise ConfigurationError("only quadrant-blob images have object boxes")
        h = self.image_size // 2
        return [((l // 2) * h, (l // 2) * h + h, (l % 2) * h, (l % 2) * h + h) for l in labels]


@dataclass
class TrainResult:
    model: object
    metrics: list
    optimizer: AdamState


def evaluate(model, images, labels, batch_size=256):
    losses, correct = 0.0, 0
    for i in range(0, len(labels), batch_size):
        logits = model.forward(images[i:i + batch_size])
        y = labels[i:i + batch_size]
        losses += cross_entropy(logits, y) * len(y)
        correct += int(np.sum(np.argmax(logits, axis=-1) == y))
    return losses / len(labels), correct / len(labels)


def train(model, train_data, val_data, schedule, epochs=None, seed=0, batch_size=64):
    """Adam with a per-epoch learning rate from ``schedule``.

    ``train_data``/``val_data`` are ``(images, labels)`` pairs.  Runs
    ``epochs`` (default ``schedule.total_epochs``) and returns the model,
    one metrics row per epoch and the optimizer state.
    """
    epochs = schedule.total_epochs if epochs is None else epochs
    if epochs > schedule.total_epochs:
        raise ConfigurationError("more epochs requested than the schedule covers")
    x_tr, y_tr = train_data
    x_tr = np.asarray(x_tr, dtype=model.dtype)
    x_va = np.asarray(val_data[0], dtype=model.dtype)
    y_va = val_data[1]
    rng = np.random.default_rng(seed)
    opt = AdamState(lr=schedule.base_lr)
    metrics = []
    for epoch in range(epochs):
        lr = lr_at(schedule, epoch)
        order = rng.permutation(len(y_tr))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            loss, grads = backward(model, x_tr[idx], y_tr[idx])
            if not math.isfinite(loss):
                raise DivergenceError(f"loss became {loss} at epoch {epoch}, batch {i // batch_size}")
            opt.step(model.params, grads, lr)
        train_loss, train_acc = evaluate(model, x_tr, y_tr)
        _, val_acc = evaluate(model, x_va, y_va)
        row = {"epoch": epoch, "lr": lr, "train_loss": train_loss,
               "train_acc": train_acc, "val_acc": val_acc}
        log.info("epoch %d lr %.3g loss %.4f train %.3f val %.3f",
                 epoch, lr, train_loss, train_acc, val_acc)
        metrics.append(row)
    return TrainResult(model, metrics, opt)


def write_metrics_csv(metrics, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in metrics:
            writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])
    return path


def toy_model_config(dataset, **overrides):
    """Two-block model sized for a toy dataset: 4x4 patches, 8x8 tokens, 4 heads."""
    fields_ = dict(image_size=dataset.image_size, patch_size=4, in_channels=dataset.channels,
                   embed_h=8, embed_w=8, heads=4, depth=2, mlp_ratio=2,
                   num_classes=dataset.num_classes)
    fields_.update(overrides)
    return ModelConfig(**fields_)
