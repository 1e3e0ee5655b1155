"""Losses, label assignment, learning-rate schedules and momentum SGD."""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as tn
from .metrics import iou
from .roi import Box
from .tensor import Parameter, Tensor


# ---------------------------------------------------------------- losses

def bce_multilabel_loss(logits, targets) -> Tensor:
    """Sigmoid binary cross-entropy, mean over every (sample, class) entry."""
    logits = tn.as_tensor(logits)
    x = logits.value
    y = np.asarray(targets, dtype=x.dtype)
    if y.shape != x.shape:
        raise tn.ShapeError(f"bce: logits {x.shape} vs targets {y.shape}")
    n = x.size
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    sig = 1.0 / (1.0 + np.exp(-x))

    def backward(g):
        tn._accum(logits, g * (sig - y) / n)

    return tn._result(np.asarray(loss.mean()), (logits,), backward)


def ce_loss(logits, labels) -> Tensor:
    """Softmax cross-entropy against integer class labels, mean over samples."""
    logits = tn.as_tensor(logits)
    x = logits.value
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if x.ndim != 2 or x.shape[0] != labels.shape[0]:
        raise tn.ShapeError(f"ce: logits {x.shape} vs labels {labels.shape}")
    z = x - x.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(x.shape[0])
    loss = (logsum - z[rows, labels]).mean()
    probs = np.exp(z - logsum[:, None])
    probs[rows, labels] -= 1.0
    grad = probs / x.shape[0]

    def backward(g):
        tn._accum(logits, g * grad)

    return tn._result(np.asarray(loss), (logits,), backward)


# ------------------------------------------------------- label assignment

@dataclass(frozen=True)
class AssignConfig:
    iou_assign: float = 0.9
    train_score_min: float = 0.9
    test_score_min: float = 0.85

    def __post_init__(self):
        for name in ("iou_assign", "train_score_min", "test_score_min"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


def assign_labels(gt_boxes: Sequence[Box], gt_labels: Sequence[Iterable[int]],
                  pred_boxes: Sequence[Box], pred_scores: Sequence[float], num_classes: int,
                  cfg: AssignConfig = AssignConfig()) -> tuple[list[Box], np.ndarray]:
    """Training boxes and their multi-hot targets.

    Every ground-truth box is kept with its own labels. Predictions scoring at
    least ``train_score_min`` are added, each taking the union of labels of
    all ground-truth boxes it overlaps with IoU >= ``iou_assign``; a
    prediction may end up with no labels.
    """
    boxes: list[Box] = []
    targets = []
    for box, labels in zip(gt_boxes, gt_labels):
        t = np.zeros(num_classes)
        t[list(labels)] = 1.0
        boxes.append(box)
        targets.append(t)
    for box, score in zip(pred_boxes, pred_scores):
        if score < cfg.train_score_min:
            continue
        t = np.zeros(num_classes)
        for gbox, labels in zip(gt_boxes, gt_labels):
            if iou(box, gbox) >= cfg.iou_assign:
                t[list(labels)] = 1.0
        boxes.append(box)
        targets.append(t)
    return boxes, np.array(targets).reshape(len(boxes), num_classes)


def select_test_detections(pred_boxes: Sequence[Box], pred_scores: Sequence[float],
                           cfg: AssignConfig = AssignConfig()) -> list[int]:
    """Indices of detections kept at test time."""
    return [i for i, s in enumerate(pred_scores) if s >= cfg.test_score_min]


# -------------------------------------------------------------- schedules

@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant learning rate.

    ``milestones`` holds ``(iteration, multiplier)`` pairs; a multiplier
    applies from its iteration on. Values are computed in exact decimal
    arithmetic so ``0.0003 x 0.1`` is 3e-05, not 2.9999999999999997e-05.
    """

    base_lr: float
    milestones: tuple[tuple[int, float], ...]
    total_iterations: int
    weight_decay: float = 0.0
    reference_batch: int = 16

    def __post_init__(self):
        its = [m[0] for m in self.milestones]
        if any(b <= a for a, b in zip(its, its[1:])) or any(i < 0 for i in its):
            raise ValueError(f"schedule milestones must be strictly increasing: {its}")

    def lr_at(self, iteration: int) -> float:
        return lr_at(iteration, self)

    def scaled_to(self, total_iterations: int) -> "Schedule":
        """Same shape, milestones moved proportionally."""
        f = Fraction(total_iterations, self.total_iterations)
        ms = tuple((int(round(it * f)), m) for it, m in self.milestones)
        return replace(self, milestones=ms, total_iterations=total_iterations)

    def for_batch(self, batch_size: int) -> "Schedule":
        """Linear scaling rule relative to ``reference_batch``."""
        if batch_size == self.reference_batch:
            return self
        lr = float(Fraction(repr(self.base_lr)) * Fraction(batch_size, self.reference_batch))
        return replace(self, base_lr=lr, reference_batch=batch_size)


def lr_at(iteration: int, schedule: Schedule) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    mult = 1.0
    for it, m in schedule.milestones:
        if iteration >= it:
            mult = m
    return float(Fraction(repr(schedule.base_lr)) * Fraction(repr(mult)))


PRESETS: dict[str, Schedule] = {
    "ava-140k": Schedule(0.04, ((100_000, 0.1), (120_000, 0.01)), 140_000, 1e-6),
    "epic-verb-36k": Schedule(0.0003, ((28_000, 0.1), (32_000, 0.01)), 36_000, 1e-5),
    "epic-noun-50k": Schedule(0.001, ((40_000, 0.1), (45_000, 0.01)), 50_000, 1e-6),
    "charades-24k": Schedule(0.02, ((20_000, 0.1),), 24_000, 1.25e-5),
    # Synthetic long-range task.
    "desk": Schedule(0.005, ((900, 0.1),), 1200, 1e-5),
}


def preset(name: str) -> Schedule:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown schedule preset {name!r}; choose from {sorted(PRESETS)}") from None


# -------------------------------------------------------------- optimizer

class SGD:
    """Momentum SGD: ``v <- m*v + g + wd*p``; ``p <- p - lr*v``.

    Weight decay applies only to parameters with ``decay=True`` (weights,
    not biases or LN affine terms). Frozen parameters are skipped.
    """

    def __init__(self, params: Sequence[Parameter], schedule: Schedule, momentum: float = 0.9,
                 weight_decay: float | None = None):
        self.params = list(params)
        self.schedule = schedule
        self.momentum = momentum
        self.weight_decay = schedule.weight_decay if weight_decay is None else weight_decay
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self, iteration: int) -> float:
        lr = self.schedule.lr_at(iteration)
        for p, v in zip(self.params, self.velocity):
            if p.frozen:
                p.zero_grad()
                continue
            g = p.grad
            if p.decay and self.weight_decay:
                g = g + self.weight_decay * p.value
            v *= self.momentum
            v += g
            p.value = (p.value - lr * v).astype(p.value.dtype, copy=False)
            p.zero_grad()
        return lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def sgd_step(params: Sequence[Parameter], state: SGD, iteration: int) -> float:
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("optimizer state was built for different parameters")
    return state.step(iteration)


# ----------------------------------------------------------------- loops

def freeze(params: Iterable[Parameter]) -> None:
    for p in params:
        p.frozen = True


def fit(loss_fn: Callable[[int], Tensor], optimizer: SGD, iterations: int, *,
        start: int = 0, log: Callable[[int, float], None] | None = None,
        log_every: int = 50) -> list[float]:
    """Run ``iterations`` SGD steps; ``loss_fn(it)`` builds the loss under a tape."""
    history = []
    for it in range(start, start + iterations):
        with tn.Tape() as tape:
            loss = loss_fn(it)
        tape.backward(loss)
        optimizer.step(it - start)
        value = float(loss.value)
        history.append(value)
        if log is not None and ((it - start + 1) % log_every == 0 or it == start + iterations - 1):
            log(it + 1, float(np.mean(history[-log_every:])))
    return history
