"""Loss, metrics, SGD with cosine decay, and the train/eval loops."""
from __future__ import annotations

import ctypes
import logging
import math
import sys
from dataclasses import dataclass

import numpy as np

from . import nn
from .autograd import Function, backward, no_grad
from .data import SegSample, augment
from .model import ModelConfig, ParamStore, init_params, lgmsnet_forward
from .tensor import Rng, Tensor, add, div, mul, tsum

log = logging.getLogger(__name__)

DICE_SMOOTH = 1.0
BCE_WEIGHT = 0.5


def tune_allocator() -> None:
    """Keep large temporaries on the heap instead of fresh mmap pages
    (glibc only; a no-op elsewhere)."""
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# loss


class BCEWithLogits(Function):
    """Mean binary cross-entropy of sigmoid(z) against y, in the stable form
    max(z, 0) - z*y + log(1 + exp(-|z|))."""

    tag = "bce_with_logits"

    @staticmethod
    def forward(ctx, z, y):
        ctx.save(z, y)
        return np.asarray((np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean())

    @staticmethod
    def backward(ctx, g):
        z, y = ctx.saved
        s = nn.logistic(z)
        return g * (s - y) / z.size, None


def _check_target(logits: Tensor, y: Tensor):
    if logits.shape != y.shape:
        raise ValueError(f"logits {logits.shape} and target {y.shape} differ in shape")
    if not np.all((y.data == 0) | (y.data == 1)):
        raise ValueError("target must be binary")


def bce_with_logits(logits: Tensor, y: Tensor) -> Tensor:
    _check_target(logits, y)
    return BCEWithLogits.apply(logits, y)


def dice_loss(prob: Tensor, y: Tensor, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - (2 sum(p y) + s) / (sum(p) + sum(y) + s) over the whole tensor."""
    inter = tsum(mul(prob, y))
    num = add(mul(inter, 2.0), smooth)
    den = add(add(tsum(prob), tsum(y)), smooth)
    return _one_minus(div(num, den))


def _one_minus(x: Tensor) -> Tensor:
    return add(mul(x, -1.0), 1.0)


def seg_loss(logits: Tensor, y: Tensor) -> Tensor:
    """0.5 * BCE + Dice loss, both on sigmoid probabilities."""
    _check_target(logits, y)
    bce = BCEWithLogits.apply(logits, y)
    return add(mul(bce, BCE_WEIGHT), dice_loss(nn.sigmoid(logits), y))


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricReport:
    """Pooled overlap metrics: IoU = |P&G| / |P|G|, F1 = 2|P&G| / (|P| + |G|),
    with counts summed over every pixel of every sample. Both are 1 when
    prediction and target are empty."""

    iou: float
    f1: float
    loss: float = 0.0
    count: int = 0
    intersection: int = 0
    pred_area: int = 0
    target_area: int = 0

    @classmethod
    def from_counts(cls, inter: int, pred: int, target: int, loss: float = 0.0, count: int = 0):
        union = pred + target - inter
        if union == 0:
            iou = f1 = 1.0
        else:
            iou = inter / union
            f1 = 2 * inter / (pred + target)
        return cls(iou, f1, loss, count, int(inter), int(pred), int(target))

    def merge(self, other: "MetricReport") -> "MetricReport":
        n = self.count + other.count
        loss = (self.loss * self.count + other.loss * other.count) / n if n else 0.0
        return MetricReport.from_counts(
            self.intersection + other.intersection,
            self.pred_area + other.pred_area,
            self.target_area + other.target_area,
            loss,
            n,
        )

    def to_dict(self) -> dict:
        return {"iou": self.iou, "f1": self.f1, "loss": self.loss, "count": self.count}


def metrics(pred_mask, y) -> MetricReport:
    p = np.asarray(pred_mask.data if isinstance(pred_mask, Tensor) else pred_mask)
    g = np.asarray(y.data if isinstance(y, Tensor) else y)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and target {g.shape} differ in shape")
    p = p.astype(bool)
    g = g.astype(bool)
    n = p.shape[0] if p.ndim == 4 else 1
    return MetricReport.from_counts(int((p & g).sum()), int(p.sum()), int(g.sum()), count=n)


def binarize(logits) -> np.ndarray:
    """Threshold at sigmoid(logit) >= 0.5, i.e. logit >= 0."""
    z = logits.data if isinstance(logits, Tensor) else logits
    return (z >= 0).astype(np.float32)


# ---------------------------------------------------------------------------
# optimization


@dataclass
class Hyper:
    lr: float = 0.02
    epochs: int = 50
    batch: int = 8
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    augment: bool = True
    max_steps: int | None = None


def cosine_lr(step: int, total: int, base: float) -> float:
    """Cosine decay from ``base`` at step 0 to 0 at step ``total - 1``."""
    if total <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total - 1) / (total - 1)))


def sgd_step(store: ParamStore, grads: dict, slots: dict, lr: float, momentum: float, weight_decay: float):
    """Heavy-ball SGD: v <- m v + (g + wd w); w <- w - lr v.

    ``grads`` is consumed: its arrays serve as scratch space.
    """
    for name, p in store.trainable():
        v = slots[name]
        v *= momentum
        v += grads[name]
        if weight_decay:
            np.multiply(p.data, weight_decay, out=grads[name])
            v += grads[name]
        if lr:
            # in place: parameters only change between forward passes
            np.multiply(v, lr, out=grads[name])
            p.data -= grads[name]


@dataclass
class TrainState:
    step: int
    params: ParamStore
    slots: dict[str, np.ndarray]
    rng: Rng
    lr: float
    total_steps: int
    best: ParamStore | None = None
    best_iou: float = -1.0
    best_epoch: int = -1


@dataclass
class TraceRow:
    epoch: int
    split: str
    loss: float
    iou: float
    f1: float

    def csv(self) -> str:
        return f"{self.epoch},{self.split},{self.loss:.6f},{self.iou:.6f},{self.f1:.6f}"


def stack(samples: list[SegSample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


def batches(samples, batch: int, epoch: int, rng: Rng, do_augment: bool):
    """Shuffled drop-last batches; order and augmentation depend only on
    (seed, epoch, sample index)."""
    order = rng.stream("shuffle", epoch).permutation(len(samples))
    for start in range(0, len(order) - batch + 1, batch):
        idx = order[start : start + batch]
        chosen = [
            augment(samples[i], rng.stream("augment", epoch, int(i))) if do_augment else samples[i]
            for i in idx
        ]
        yield stack(chosen)


def train_step(cfg, store, images, masks, training=True):
    names = [n for n, _ in store.trainable()]
    leaves = [store[n] for n in names]
    logits = lgmsnet_forward(Tensor(images), cfg, store, training=training)
    loss = seg_loss(logits, Tensor(masks))
    grads = backward(loss, wrt=leaves)
    return loss.item(), logits, {n: grads[t].data for n, t in zip(names, leaves)}


def evaluate(cfg: ModelConfig, store: ParamStore, samples, batch: int = 8) -> MetricReport:
    """Inference-mode loss and pooled metrics over ``samples``."""
    report = MetricReport.from_counts(0, 0, 0)
    with no_grad():
        for start in range(0, len(samples), batch):
            images, masks = stack(samples[start : start + batch])
            logits = lgmsnet_forward(Tensor(images), cfg, store, training=False)
            loss = seg_loss(logits, Tensor(masks)).item()
            m = metrics(binarize(logits), masks)
            m.loss = loss
            report = report.merge(m)
    return report


def predict(cfg: ModelConfig, store: ParamStore, images: np.ndarray) -> np.ndarray:
    with no_grad():
        return binarize(lgmsnet_forward(Tensor(images), cfg, store, training=False))


def train_loop(
    cfg: ModelConfig,
    train: list[SegSample],
    val: list[SegSample],
    hyper: Hyper,
    store: ParamStore | None = None,
) -> tuple[TrainState, list[TraceRow]]:
    """SGD + momentum with per-step cosine decay. Evaluates ``val`` after every
    epoch and keeps a copy of the parameters with the best validation IoU."""
    cfg.validate()
    if {s.id for s in train} & {s.id for s in val}:
        raise ValueError("train and val splits share sample ids")
    if len(train) < hyper.batch:
        raise ValueError(f"{len(train)} training samples cannot fill a batch of {hyper.batch}")
    tune_allocator()
    rng = Rng(hyper.seed)
    if store is None:
        store = init_params(cfg, rng)
    per_epoch = len(train) // hyper.batch
    total = per_epoch * hyper.epochs
    if hyper.max_steps is not None:
        total = min(total, hyper.max_steps)
    state = TrainState(
        step=0,
        params=store,
        slots={n: np.zeros_like(t.data) for n, t in store.trainable()},
        rng=rng,
        lr=hyper.lr,
        total_steps=total,
    )
    trace: list[TraceRow] = []
    for epoch in range(hyper.epochs):
        if state.step >= total:
            break
        seen = MetricReport.from_counts(0, 0, 0)
        for images, masks in batches(train, hyper.batch, epoch, rng, hyper.augment):
            if state.step >= total:
                break
            state.lr = cosine_lr(state.step, total, hyper.lr)
            loss, logits, grads = train_step(cfg, store, images, masks)
            if not math.isfinite(loss):
                raise NonFiniteLoss(state.step, loss)
            sgd_step(store, grads, state.slots, state.lr, hyper.momentum, hyper.weight_decay)
            m = metrics(binarize(logits), masks)
            m.loss = loss
            seen = seen.merge(m)
            state.step += 1
        trace.append(TraceRow(epoch, "train", seen.loss, seen.iou, seen.f1))
        if val:
            rep = evaluate(cfg, store, val, hyper.batch)
            trace.append(TraceRow(epoch, "val", rep.loss, rep.iou, rep.f1))
            if rep.iou > state.best_iou:
                state.best_iou, state.best_epoch = rep.iou, epoch
                state.best = store.copy()
        log.info("epoch %d: %s", epoch, " ".join(r.csv() for r in trace[-2:]))
    if state.best is None:
        state.best = store.copy()
    return state, trace
