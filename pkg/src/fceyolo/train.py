"""Desk-scale training: center-cell target assignment, a simplified detection
loss, SGD with momentum and coupled weight decay, and the loop around them."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import functional as F
from .data import Sample, image_to_array
from .graph import STRIDES, Model
from .nn import BatchNorm2d
from .tensor import (
    Tape, Tensor, add, clip, concat, div, getitem, maximum, minimum, mul, no_grad, reshape, sub, tabs, tsum,
)


# ------------------------------------------------------------------ assignment


@dataclass
class Positive:
    image: int
    level: int
    row: int
    col: int
    class_id: int
    box: tuple  # xyxy pixels


@dataclass
class Targets:
    """Per-level class targets (N, nc, h, w) plus the list of positive cells."""

    cls: list
    positives: list = field(default_factory=list)
    collisions: int = 0  # boxes dropped because their cell was taken

    @property
    def num_pos(self) -> int:
        return len(self.positives)


def assign_level(side: float, strides: Sequence[int] = STRIDES, factor: float = 1.0) -> int:
    """Index of the largest stride s with side >= factor * s, else the finest level."""
    for k in range(len(strides) - 1, -1, -1):
        if side >= factor * strides[k]:
            return k
    return 0


def assign_targets(boxes: Sequence[Sequence[tuple]], image_hw: tuple, num_classes: int,
                   strides: Sequence[int] = STRIDES, factor: float = 1.0) -> Targets:
    """One positive cell per box: the cell holding its center, on the level
    picked by :func:`assign_level` from the box's longer side.

    ``boxes[n]`` lists (class_id, (x1, y1, x2, y2)) for image n.  When two
    boxes land on the same cell the first keeps it.
    """
    h, w = image_hw
    n = len(boxes)
    cls = [np.zeros((n, num_classes, h // s, w // s)) for s in strides]
    taken = set()
    tg = Targets(cls)
    for b, items in enumerate(boxes):
        for class_id, box in items:
            x1, y1, x2, y2 = box
            lvl = assign_level(max(x2 - x1, y2 - y1), strides, factor)
            s = strides[lvl]
            gh, gw = h // s, w // s
            col = min(int((x1 + x2) / 2 // s), gw - 1)
            row = min(int((y1 + y2) / 2 // s), gh - 1)
            if (b, lvl, row, col) in taken:
                tg.collisions += 1
                continue
            taken.add((b, lvl, row, col))
            cls[lvl][b, class_id, row, col] = 1.0
            tg.positives.append(Positive(b, lvl, row, col, class_id, tuple(float(v) for v in box)))
    return tg


def targets_from_samples(samples: Sequence[Sample], num_classes: int, strides=STRIDES, factor: float = 1.0) -> Targets:
    h, w = samples[0].image.shape[:2]
    boxes = [[(l.class_id, l.to_xyxy(w, h)) for l in s.labels] for s in samples]
    return assign_targets(boxes, (h, w), num_classes, strides, factor)


# ------------------------------------------------------------------ loss


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    iou: float = 2.0
    l1: float = 0.5


def box_iou(a: Tensor, b: np.ndarray) -> Tensor:
    """Row-wise IoU of (P, 4) predicted boxes against fixed (P, 4) targets."""
    iw = clip(sub(minimum(a[:, 2], b[:, 2]), maximum(a[:, 0], b[:, 0])), lo=0.0)
    ih = clip(sub(minimum(a[:, 3], b[:, 3]), maximum(a[:, 1], b[:, 1])), lo=0.0)
    inter = mul(iw, ih)
    area_a = mul(clip(sub(a[:, 2], a[:, 0]), lo=0.0), clip(sub(a[:, 3], a[:, 1]), lo=0.0))
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return div(inter, add(sub(add(area_a, area_b), inter), 1e-9))


@dataclass
class LossParts:
    total: Tensor
    cls: float
    iou: float
    l1: float


def toy_loss(maps: Sequence[Tensor], targets: Targets, reg_max: int = 16, strides: Sequence[int] = STRIDES,
             weights: LossWeights = LossWeights()) -> LossParts:
    """BCE on every class logit, plus (1 - IoU) and L1 on DFL distances at positives.

    The BCE sum is normalized by max(1, positives); box terms are means over
    positives, the L1 term summing its four sides (in stride units).
    """
    npos = max(1, targets.num_pos)
    r4 = 4 * reg_max
    cls_sum = None
    for m, t in zip(maps, targets.cls):
        term = tsum(F.bce_with_logits(m[:, r4:], t))
        cls_sum = term if cls_sum is None else add(cls_sum, term)
    cls_term = mul(cls_sum, 1.0 / npos)
    if not targets.positives:
        return LossParts(mul(cls_term, weights.cls), float(cls_term.data), 0.0, 0.0)

    rows, anchors, tboxes, svec = [], [], [], []
    for lvl, m in enumerate(maps):
        ps = [p for p in targets.positives if p.level == lvl]
        if not ps:
            continue
        idx = (np.array([p.image for p in ps]), slice(0, r4),
               np.array([p.row for p in ps]), np.array([p.col for p in ps]))
        rows.append(getitem(m, idx))  # (P, 4R)
        s = strides[lvl]
        anchors += [((p.col + 0.5) * s, (p.row + 0.5) * s) for p in ps]
        tboxes += [p.box for p in ps]
        svec += [s] * len(ps)
    logits = reshape(concat(rows, axis=0), (-1, 4, reg_max))
    dist = tsum(mul(F.softmax(logits, axis=-1), np.arange(reg_max, dtype=np.float64)), axis=-1)  # (P, 4)
    anc = np.array(anchors)
    sv = np.array(svec, dtype=np.float64)[:, None]
    tb = np.array(tboxes)
    sign = np.array([-1.0, -1.0, 1.0, 1.0])
    centers = np.concatenate([anc, anc], axis=1)
    pred = add(centers, mul(dist, sign * sv))
    tdist = np.clip((tb - centers) * sign / sv, 0.0, reg_max - 1 - 0.01)
    iou_term = mul(tsum(sub(1.0, box_iou(pred, tb))), 1.0 / targets.num_pos)
    l1_term = mul(tsum(tabs(sub(dist, tdist))), 1.0 / targets.num_pos)
    total = add(add(mul(cls_term, weights.cls), mul(iou_term, weights.iou)), mul(l1_term, weights.l1))
    return LossParts(total, float(cls_term.data), float(iou_term.data), float(l1_term.data))


# ------------------------------------------------------------------ optimizer


@dataclass
class OptimState:
    lr: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 5e-4
    velocity: dict = field(default_factory=dict)  # id(param) -> array


def sgd_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: OptimState) -> None:
    """v <- m v + g + wd w;  w <- w - lr v.  Parameters without a gradient are skipped."""
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        v = state.velocity.get(id(p))
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + g + state.weight_decay * p.data
        state.velocity[id(p)] = v
        p.data = (p.data - state.lr * v).astype(p.data.dtype)


def clip_grad_norm(grads: Sequence[Optional[np.ndarray]], max_norm: float) -> list:
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads if g is not None))
    if total <= max_norm:
        return list(grads)
    k = max_norm / (total + 1e-6)
    return [None if g is None else g * k for g in grads]


def recalibrate_bn(model: Model, samples: Sequence[Sample], batch: int = 16) -> None:
    """Replace every batch-norm running estimate by the population mean and
    (biased) variance of its input over ``samples``, under the current weights.

    The exponential running average lags weights that are still moving; after
    a short run it can be far from the statistics the final weights produce.
    """
    bns = [m for m in model.modules() if isinstance(m, BatchNorm2d)]
    saved = [b.momentum for b in bns]
    sums = [[0.0, 0.0, 0] for _ in bns]  # sum of means, sum of second moments, count
    model.train()
    try:
        for b in bns:
            b.momentum = 1.0
        for i in range(0, len(samples), batch):
            with no_grad():
                model(_batch(samples[i:i + batch]))
            for b, acc in zip(bns, sums):
                n = b.last_count
                var = b.running_var * (n - 1) / n if n > 1 else b.running_var
                acc[0] = acc[0] + n * b.running_mean
                acc[1] = acc[1] + n * (var + b.running_mean ** 2)
                acc[2] += n
        for b, (s1, s2, n) in zip(bns, sums):
            mean = s1 / n
            b.running_mean[:] = mean
            b.running_var[:] = np.maximum(s2 / n - mean ** 2, 0.0)
    finally:
        for b, mom in zip(bns, saved):
            b.momentum = mom
        model.eval()


# ------------------------------------------------------------------ loop


class DivergenceError(RuntimeError):
    """Loss became non-finite."""


@dataclass
class TrainConfig:
    steps: int = 200
    batch: int = 16
    lr: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 5e-4
    seed: int = 0
    assign_factor: float = 1.0
    clip_grad_norm: Optional[float] = 10.0  # None disables clipping
    recalibrate_bn: bool = True
    log_every: int = 0  # 0 disables progress printing


@dataclass
class TrainResult:
    losses: list
    grad_nonzero: set  # names of parameters that received a nonzero gradient
    param_names: list

    @property
    def dead_params(self) -> list:
        return [n for n in self.param_names if n not in self.grad_nonzero]

    def to_csv(self) -> str:
        return "step,loss\n" + "".join(f"{i},{v:.8f}\n" for i, v in enumerate(self.losses))


def _batch(samples: Sequence[Sample]) -> Tensor:
    return Tensor(np.stack([image_to_array(s.image) for s in samples]))


def train_loop(model: Model, samples: Sequence[Sample], cfg: TrainConfig = TrainConfig(),
               loss_csv: Optional[Union[str, Path]] = None) -> TrainResult:
    """Plain SGD over seeded mini-batches; records the loss at every step."""
    if not samples:
        raise ValueError("training set is empty")
    nc, reg_max = model.config.num_classes, model.config.reg_max
    named = list(model.named_parameters())
    params = [p for _, p in named]
    state = OptimState(cfg.lr, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    bs = min(cfg.batch, len(samples))
    order, cursor = rng.permutation(len(samples)), 0
    losses, seen = [], set()
    model.train()
    for step in range(cfg.steps):
        if cursor + bs > len(order):
            order, cursor = rng.permutation(len(samples)), 0
        batch = [samples[i] for i in order[cursor:cursor + bs]]
        cursor += bs
        targets = targets_from_samples(batch, nc, factor=cfg.assign_factor)
        model.zero_grad()
        try:
            with Tape() as tape:
                parts = toy_loss(model(_batch(batch)), targets, reg_max)
            value = float(parts.total.data)
            if not math.isfinite(value):
                raise DivergenceError(
                    f"loss is {value} at step {step} (cls {parts.cls}, iou {parts.iou}, l1 {parts.l1})")
            tape.backward(parts.total)
        except FloatingPointError as e:  # the engine refuses non-finite intermediates
            raise DivergenceError(f"training diverged at step {step}: {e}") from e
        for name, p in named:
            if p.grad is not None and np.any(p.grad != 0):
                seen.add(name)
        grads = [p.grad for p in params]
        if cfg.clip_grad_norm is not None:
            grads = clip_grad_norm(grads, cfg.clip_grad_norm)
        sgd_step(params, grads, state)
        losses.append(value)
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            print(f"step {step:4d}  loss {value:.4f}  cls {parts.cls:.4f}  iou {parts.iou:.4f}  l1 {parts.l1:.4f}")
    if cfg.recalibrate_bn:
        recalibrate_bn(model, samples, bs)
    model.eval()
    result = TrainResult(losses, seen, [n for n, _ in named])
    if loss_csv is not None:
        Path(loss_csv).write_text(result.to_csv())
    return result
