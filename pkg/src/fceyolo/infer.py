"""Post-processing of raw head maps: DFL decode, confidence filter, NMS."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import cv2
import numpy as np

from .data import letterbox, image_to_array
from .functional import _sigmoid_np
from .graph import STRIDES, Model
from .metrics import Detection, iou_matrix, score_order
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class DecodeConfig:
    reg_max: int = 16
    conf: float = 0.25
    iou: float = 0.45
    max_det: int = 300
    class_aware: bool = True

    def __post_init__(self):
        if not (0.0 <= self.conf <= 1.0 and 0.0 <= self.iou <= 1.0):
            raise ValueError("thresholds must lie in [0, 1]")
        if self.reg_max < 1 or self.max_det < 1:
            raise ValueError("reg_max and max_det must be positive")


def dfl_expectation(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Expected bin index under a softmax over ``axis``."""
    z = logits - logits.max(axis=axis, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=axis, keepdims=True)
    bins = np.arange(logits.shape[axis], dtype=np.float64)
    shape = [1] * logits.ndim
    shape[axis] = -1
    return (p * bins.reshape(shape)).sum(axis=axis)


def anchor_centers(h: int, w: int, stride: int) -> tuple:
    """Cell-center coordinates in pixels, each of shape (h, w)."""
    ys, xs = np.meshgrid((np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride, indexing="ij")
    return xs, ys


def decode_level(raw: np.ndarray, stride: int, reg_max: int) -> tuple:
    """One level (N, 4R+nc, h, w) -> boxes (N, h, w, 4) xyxy pixels, scores (N, h, w, nc)."""
    n, c, h, w = raw.shape
    box = raw[:, :4 * reg_max].reshape(n, 4, reg_max, h, w).astype(np.float64)
    dist = dfl_expectation(box, axis=2) * stride  # (N, 4, h, w): l, t, r, b
    ax, ay = anchor_centers(h, w, stride)
    boxes = np.stack([ax - dist[:, 0], ay - dist[:, 1], ax + dist[:, 2], ay + dist[:, 3]], axis=-1)
    scores = _sigmoid_np(raw[:, 4 * reg_max:].astype(np.float64)).transpose(0, 2, 3, 1)
    return boxes, scores


def decode(maps: Sequence, strides: Sequence[int] = STRIDES, cfg: DecodeConfig = DecodeConfig(),
           image_ids: Optional[Sequence[str]] = None, image_hw: Optional[tuple] = None) -> list:
    """Raw maps to per-image detection lists (before NMS).

    Each cell yields its best class when that score exceeds ``cfg.conf``.
    Boxes are clipped to ``image_hw`` (default: the network input implied
    by the first map); boxes that collapse under clipping are dropped.
    """
    arrays = [m.data if isinstance(m, Tensor) else np.asarray(m) for m in maps]
    if len(arrays) != len(strides):
        raise ValueError(f"{len(arrays)} maps for {len(strides)} strides")
    n = arrays[0].shape[0]
    nc = arrays[0].shape[1] - 4 * cfg.reg_max
    if nc < 1 or any(a.shape[1] != 4 * cfg.reg_max + nc for a in arrays):
        raise ValueError(f"map channels {[a.shape[1] for a in arrays]} do not match 4*{cfg.reg_max} + classes")
    if image_hw is None:
        image_hw = (arrays[0].shape[2] * strides[0], arrays[0].shape[3] * strides[0])
    ids = list(image_ids) if image_ids is not None else [str(i) for i in range(n)]
    out = [[] for _ in range(n)]
    for raw, s in zip(arrays, strides):
        boxes, scores = decode_level(raw, s, cfg.reg_max)
        boxes[..., 0::2] = boxes[..., 0::2].clip(0, image_hw[1])
        boxes[..., 1::2] = boxes[..., 1::2].clip(0, image_hw[0])
        cls = scores.argmax(-1)
        best = np.take_along_axis(scores, cls[..., None], -1)[..., 0]
        for b, i, j in zip(*np.nonzero(best > cfg.conf)):
            x1, y1, x2, y2 = (float(v) for v in boxes[b, i, j])
            if x2 > x1 and y2 > y1:
                out[b].append(Detection(ids[b], int(cls[b, i, j]), (x1, y1, x2, y2), float(best[b, i, j])))
    return out


def nms(dets: Sequence[Detection], iou_thr: float = 0.45, class_aware: bool = True,
        max_det: Optional[int] = None) -> list:
    """Greedy suppression by descending score (stable on ties).

    A kept box suppresses later boxes of the same class (any class when
    ``class_aware`` is off) whose IoU with it exceeds ``iou_thr``.
    """
    if not dets:
        return []
    order = score_order([d.score for d in dets])
    boxes = np.array([dets[i].box for i in order], dtype=np.float64)
    cls = np.array([dets[i].class_id for i in order])
    ious = iou_matrix(boxes, boxes)
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for k in range(len(order)):
        if not alive[k]:
            continue
        keep.append(dets[order[k]])
        if max_det is not None and len(keep) >= max_det:
            break
        hit = ious[k] > iou_thr
        if class_aware:
            hit &= cls == cls[k]
        hit[:k + 1] = False
        alive &= ~hit
    return keep


def postprocess(maps: Sequence, cfg: DecodeConfig = DecodeConfig(), strides: Sequence[int] = STRIDES,
                image_ids: Optional[Sequence[str]] = None, image_hw: Optional[tuple] = None) -> list:
    """decode + per-image NMS."""
    per_image = decode(maps, strides, cfg, image_ids, image_hw)
    return [nms(d, cfg.iou, cfg.class_aware, cfg.max_det) for d in per_image]


def predict(model: Model, images: Sequence[np.ndarray], image_ids: Sequence[str], size: int = 640,
            cfg: Optional[DecodeConfig] = None) -> list:
    """Letterbox, forward, decode and map detections back to original pixels."""
    cfg = cfg or DecodeConfig(reg_max=model.config.reg_max)
    model.eval()
    out = []
    for img, iid in zip(images, image_ids):
        boxed, t = letterbox(img, size)
        with no_grad():
            maps = model(Tensor(image_to_array(boxed)[None]))
        w, h = t.src_size
        kept = []
        for d in postprocess(maps, cfg, image_ids=[iid])[0]:
            x1, y1, x2, y2 = t.to_original(d.box)
            x1, x2 = min(max(x1, 0.0), w), min(max(x2, 0.0), w)
            y1, y2 = min(max(y1, 0.0), h), min(max(y2, 0.0), h)
            if x2 > x1 and y2 > y1:
                kept.append(Detection(iid, d.class_id, (x1, y1, x2, y2), d.score))
        out.append(kept)
    return out


_PALETTE = [(56, 56, 255), (151, 157, 255), (31, 112, 255), (29, 178, 255), (49, 210, 207),
            (10, 249, 72), (23, 204, 146), (134, 219, 61), (52, 147, 26)]


def annotate(image: np.ndarray, dets: Sequence[Detection], names: Optional[Sequence[str]] = None) -> np.ndarray:
    """Copy of ``image`` (BGR) with boxes and labels drawn in."""
    img = image.copy() if image.ndim == 3 else cv2.cvtColor(image, cv2.COLOR_GRAY2BGR)
    for d in dets:
        color = _PALETTE[d.class_id % len(_PALETTE)]
        x1, y1, x2, y2 = (int(round(v)) for v in d.box)
        cv2.rectangle(img, (x1, y1), (x2, y2), color, 1)
        name = names[d.class_id] if names and d.class_id < len(names) else str(d.class_id)
        cv2.putText(img, f"{name} {d.score:.2f}", (x1, max(y1 - 2, 8)), cv2.FONT_HERSHEY_SIMPLEX, 0.3, color, 1)
    return img


def save_annotated(path: Union[str, Path], image: np.ndarray, dets: Sequence[Detection],
                   names: Optional[Sequence[str]] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), annotate(image, dets, names))
