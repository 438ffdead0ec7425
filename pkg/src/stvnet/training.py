"""Soft-Dice + L1 objective, Adam, augmentation and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .engine import Tape, Tensor, add, backward, div, mul, neg, no_record, tabs, tsum
from .errors import ShapeError, SpecError, TrainingDivergedError
from .metrics import dsc
from .networks import Network, NetworkSpec, binarize, build

log = logging.getLogger(__name__)

DICE_SMOOTH = 1e-6
LOG_COLUMNS = ("epoch", "split", "loss", "dsc")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 300
    batch_size: int = 4
    l1_weight: float = 1e-5
    # "weighted" uses l1_weight; "literal" adds the raw |W|_1 (weight 1)
    l1_mode: str = "weighted"
    window_T: int = 2
    seed: int = 0
    augment: bool = True
    folds: int = 5
    # stop once the epoch's mean training DSC reaches this value
    stop_at_train_dsc: float | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise SpecError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise SpecError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise SpecError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.folds < 2:
            raise SpecError(f"folds must be >= 2, got {self.folds}")
        if self.l1_mode not in ("weighted", "literal"):
            raise SpecError(f"l1_mode must be 'weighted' or 'literal', got {self.l1_mode!r}")
        if self.l1_weight < 0:
            raise SpecError(f"l1_weight must be >= 0, got {self.l1_weight}")

    @property
    def effective_l1(self) -> float:
        return 1.0 if self.l1_mode == "literal" else self.l1_weight

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------

def dice_loss(pred: Tensor, target) -> Tensor:
    """Negative soft Dice, averaged over the batch.

    ``pred`` is ``(N, 1, X, Y, Z)`` or a single unbatched volume of any
    shape; ``target`` matches it.  Per sample the score is
    ``2 sum(p*y) / (sum(p) + sum(y) + 1e-6)``; the constant only guards
    the denominator, so an empty prediction of an empty target scores 0.
    """
    y = np.asarray(target)
    if y.shape != pred.shape:
        raise ShapeError(f"prediction {pred.shape} and target {y.shape} differ")
    yt = Tensor(y, dtype=pred.dtype)
    batched = pred.ndim == 5
    axes = tuple(range(1, pred.ndim)) if batched else None
    n = pred.shape[0] if batched else 1
    inter = tsum(mul(pred, yt), axis=axes)
    y_sum = y.sum(axis=axes, dtype=np.float64)
    denom = add(tsum(pred, axis=axes), Tensor(y_sum + DICE_SMOOTH, dtype=pred.dtype))
    score = div(mul(inter, 2.0), denom)
    return neg(div(tsum(score), float(n)))


def l1_penalty(params: Network | Sequence[Tensor], weight: float = 1e-5) -> Tensor:
    """``weight * sum |w|`` over every trainable tensor."""
    if isinstance(params, Network):
        params = params.parameters()
    total = None
    for p in params:
        s = tsum(tabs(p))
        total = s if total is None else add(total, s)
    if total is None:
        return Tensor(0.0)
    return mul(total, float(weight))


def objective(net: Network, pred: Tensor, target, l1_weight: float) -> tuple[Tensor, Tensor, Tensor]:
    """``(total, dice, l1)`` with ``total = dice + l1``."""
    d = dice_loss(pred, target)
    r = l1_penalty(net, l1_weight)
    return add(d, r), d, r


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **kw)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float):
    """One bias-corrected Adam update, applied in place.  Returns ``params``."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError(f"{len(params)} parameters, {len(grads)} gradients, {len(state.m)} moment slots")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if lr:
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

def _rotate(vol: np.ndarray, angle: float, order: int) -> np.ndarray:
    return ndimage.rotate(vol, angle, axes=(0, 1), reshape=False, order=order, mode="constant", cval=0.0)


def augment(volumes: np.ndarray, masks: np.ndarray, rng: np.random.Generator,
            max_angle: float = 15.0, flip: bool | None = None, angle: float | None = None):
    """Random left-right flip (p = 0.5) then an in-plane rotation.

    ``volumes`` is ``(T, X, Y, Z)`` and ``masks`` ``(M, X, Y, Z)``; every
    volume and mask of the sample gets the same transform.  The flip
    reverses the x axis; the rotation turns the x-y plane about the volume
    centre by ``U(-max_angle, max_angle)`` degrees, linear interpolation for
    intensities and nearest neighbour for masks.  ``flip``/``angle`` pin
    the random draws (both are still consumed from ``rng``).
    """
    volumes = np.asarray(volumes)
    masks = np.asarray(masks)
    if volumes.shape[1:] != masks.shape[1:]:
        raise ShapeError(f"volume extent {volumes.shape[1:]} differs from mask extent {masks.shape[1:]}")
    draw_flip = rng.random() < 0.5
    draw_angle = rng.uniform(-max_angle, max_angle)
    flip = draw_flip if flip is None else flip
    angle = draw_angle if angle is None else angle
    if flip:
        volumes = volumes[:, ::-1]
        masks = masks[:, ::-1]
    if angle != 0.0:
        volumes = np.stack([_rotate(v, angle, 1) for v in volumes])
        masks = np.stack([_rotate(m, angle, 0) for m in masks])
    return np.ascontiguousarray(volumes), np.ascontiguousarray(masks)


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------

@dataclass
class ArrayDataset:
    """Training samples: ``windows (N, T, X, Y, Z)`` and last-gate ``masks (N, X, Y, Z)``."""

    windows: np.ndarray
    masks: np.ndarray

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float32)
        self.masks = np.asarray(self.masks, dtype=np.uint8)
        if self.windows.ndim != 5 or self.masks.ndim != 4:
            raise ShapeError(f"expected windows (N,T,X,Y,Z) and masks (N,X,Y,Z), "
                             f"got {self.windows.shape} and {self.masks.shape}")
        if len(self.windows) != len(self.masks) or self.windows.shape[2:] != self.masks.shape[1:]:
            raise ShapeError(f"windows {self.windows.shape} and masks {self.masks.shape} do not pair up")

    def __len__(self) -> int:
        return len(self.windows)


class LogRow(NamedTuple):
    epoch: int
    split: str
    loss: float
    dsc: float


@dataclass
class TrainResult:
    net: Network
    log: list[LogRow] = field(default_factory=list)


def mean_dsc(pred_prob: np.ndarray, masks: np.ndarray) -> float:
    hard = binarize(pred_prob)
    return float(np.mean([dsc(p, m) for p, m in zip(hard, masks)]))


def evaluate(net: Network, data: ArrayDataset, l1_weight: float, batch_size: int = 4) -> tuple[float, float]:
    """Eval-mode ``(mean total loss, mean DSC)`` over ``data``."""
    losses, scores = [], []
    with no_record():
        penalty = float(l1_penalty(net, l1_weight).data)
        for lo in range(0, len(data), batch_size):
            x = data.windows[lo:lo + batch_size]
            y = data.masks[lo:lo + batch_size, None]
            out = net.forward(x, training=False)
            losses.append(float(dice_loss(out, y).data) * len(x))
            scores.extend(dsc(p, m) for p, m in zip(binarize(out.data[:, 0]), y[:, 0]))
    return sum(losses) / len(data) + penalty, float(np.mean(scores))


def train(dataset: ArrayDataset, spec: NetworkSpec, cfg: TrainConfig,
          validation: ArrayDataset | None = None, net: Network | None = None,
          on_epoch: Callable[[LogRow], None] | None = None) -> TrainResult:
    """Fit one network on ``dataset``.

    Each epoch shuffles the samples with a generator seeded from
    ``cfg.seed``, augments them when enabled, and takes one Adam step per
    batch.  A ``train`` log row (mean loss, mean hard DSC of the training
    forward passes) is written per epoch, plus a ``val`` row when
    ``validation`` is given.  A non-finite loss aborts with
    :class:`TrainingDivergedError`.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if dataset.windows.shape[1] != spec.window_T:
        raise ShapeError(f"samples hold {dataset.windows.shape[1]} gates, spec expects {spec.window_T}",
                         axis="gate")
    net = net or build(spec, seed=cfg.seed)
    params = net.parameters()
    adam = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed + 1)
    l1 = cfg.effective_l1
    result = TrainResult(net)
    t = spec.window_T

    for epoch in range(net.epoch + 1, net.epoch + cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        losses, scores = [], []
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            x = dataset.windows[idx]
            y = dataset.masks[idx]
            if cfg.augment:
                pairs = [augment(xi, yi[None], rng) for xi, yi in zip(x, y)]
                x = np.stack([p[0] for p in pairs])
                y = np.stack([p[1][0] for p in pairs])
            with Tape() as tape:
                out = net.forward(x, training=True)
                total, _, _ = objective(net, out, y[:, None], l1)
            value = float(total.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, b, f"loss became {value}")
            grads = backward(tape, total)
            adam_step(adam, params, [grads.get(p, np.zeros_like(p.data)) for p in params], cfg.learning_rate)
            losses.append(value * len(idx))
            scores.extend(dsc(p, m) for p, m in zip(binarize(out.data[:, 0]), y))
        net.epoch = epoch
        row = LogRow(epoch, "train", sum(losses) / len(dataset), float(np.mean(scores)))
        result.log.append(row)
        if on_epoch:
            on_epoch(row)
        log.debug("epoch %d train loss %.5f dsc %.4f", epoch, row.loss, row.dsc)
        if validation is not None and len(validation):
            vloss, vdsc = evaluate(net, validation, l1, cfg.batch_size)
            vrow = LogRow(epoch, "val", vloss, vdsc)
            result.log.append(vrow)
            if on_epoch:
                on_epoch(vrow)
        if cfg.stop_at_train_dsc is not None and row.dsc >= cfg.stop_at_train_dsc:
            log.info("training DSC %.4f reached at epoch %d; stopping", row.dsc, epoch)
            break
    return result


def write_log(rows: Sequence[LogRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r.epoch, r.split, repr(r.loss), repr(r.dsc)])
