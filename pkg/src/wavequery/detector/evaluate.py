"""Average-precision evaluation at IoU 0.5.

Detections are matched to ground truths greedily in score order (a
detection claims the unmatched same-class ground truth of highest IoU at
or above 0.5); AP is the 11-point interpolated area under the
precision-recall curve, computed per class and averaged over classes that
have at least one ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numcore import RngStream
from .model import ModelConfig, model_forward
from .scenes import CLASS_NAMES, DomainSpec, generate_scene

IOU_THRESHOLD = 0.5
RECALL_LEVELS = np.linspace(0.0, 1.0, 11)

# Counter block for evaluation scene streams; keeps eval geometry disjoint
# from training draws and identical across domains for a given seed.
EVAL_SCENE_BASE = 1 << 48


@dataclass(frozen=True)
class Detection:
    image_id: int
    label: int
    score: float
    box: tuple[float, float, float, float]  # (cx, cy, w, h)


def box_iou(a, b) -> float:
    """IoU of two (cx, cy, w, h) boxes."""
    ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2
    ax2, ay2 = a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2
    bx2, by2 = b[0] + b[2] / 2, b[1] + b[3] / 2
    ix = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    iy = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = ix * iy
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def average_precision(detections: list[Detection],
                      gt_boxes_by_image: dict[int, np.ndarray],
                      gt_labels_by_image: dict[int, np.ndarray],
                      num_classes: int = len(CLASS_NAMES)):
    """Per-class 11-point interpolated AP at IoU 0.5 plus the mean over
    classes with ground truths. Classes without any ground truth are
    reported as NaN and excluded from the mean."""
    per_class = []
    for cls in range(num_classes):
        n_gt = sum(int((labels == cls).sum()) for labels in gt_labels_by_image.values())
        if n_gt == 0:
            per_class.append(float("nan"))
            continue
        dets = [d for d in detections if d.label == cls]
        dets.sort(key=lambda d: -d.score)  # stable: ties keep insertion order
        claimed: dict[int, set[int]] = {}
        tp = np.zeros(len(dets))
        for rank, det in enumerate(dets):
            boxes = gt_boxes_by_image.get(det.image_id)
            labels = gt_labels_by_image.get(det.image_id)
            if boxes is None or len(boxes) == 0:
                continue
            used = claimed.setdefault(det.image_id, set())
            best_iou, best_j = 0.0, -1
            for j in range(len(boxes)):
                if labels[j] != cls or j in used:
                    continue
                iou = box_iou(det.box, boxes[j])
                if iou > best_iou:
                    best_iou, best_j = iou, j
            if best_j >= 0 and best_iou >= IOU_THRESHOLD:
                tp[rank] = 1.0
                used.add(best_j)
        if len(dets) == 0:
            per_class.append(0.0)
            continue
        cum_tp = np.cumsum(tp)
        precision = cum_tp / (np.arange(len(dets)) + 1.0)
        recall = cum_tp / n_gt
        ap = 0.0
        for level in RECALL_LEVELS:
            mask = recall >= level - 1e-12
            ap += float(precision[mask].max()) if mask.any() else 0.0
        per_class.append(ap / len(RECALL_LEVELS))
    valid = [ap for ap in per_class if not np.isnan(ap)]
    mean = float(np.mean(valid)) if valid else 0.0
    return per_class, mean


def detections_from_outputs(outputs, image_ids) -> list[Detection]:
    """One detection per query: predicted class is the argmax over the real
    classes, scored by that class's probability (background competes in the
    softmax but is never emitted)."""
    dets = []
    n_real = outputs.class_probs.shape[-1] - 1
    for i, image_id in enumerate(image_ids):
        fg = outputs.class_probs[i, :, :n_real]
        labels = fg.argmax(axis=-1)
        scores = fg[np.arange(fg.shape[0]), labels]
        for j in range(fg.shape[0]):
            dets.append(Detection(image_id=int(image_id), label=int(labels[j]),
                                  score=float(scores[j]),
                                  box=tuple(float(v) for v in outputs.boxes[i, j])))
    return dets


def evaluation_scenes(seed: int, domain: DomainSpec, n_scenes: int, dtype=np.float64):
    """Fixed evaluation set: scene i is drawn from counter EVAL_SCENE_BASE+i,
    so every domain sees the same geometry with its own style."""
    return [generate_scene(RngStream(seed, EVAL_SCENE_BASE + i), domain, dtype=dtype)
            for i in range(n_scenes)]


def evaluate_ap(params: dict, cfg: ModelConfig, domain: DomainSpec, n_scenes: int,
                seed: int, batch_size: int = 16, dtype=np.float64,
                scenes: list | None = None) -> dict:
    """AP@0.5 per class and mean over ``n_scenes`` freshly rendered scenes.
    Pass ``scenes`` to reuse a pre-generated evaluation set."""
    if scenes is None:
        scenes = evaluation_scenes(seed, domain, n_scenes, dtype=dtype)
    detections: list[Detection] = []
    gt_boxes = {i: s.boxes for i, s in enumerate(scenes)}
    gt_labels = {i: s.labels for i, s in enumerate(scenes)}
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        images = np.concatenate([s.image for s in chunk], axis=0)
        outputs, _ = model_forward(params, cfg, images, mode="infer")
        detections.extend(detections_from_outputs(
            outputs, range(start, start + len(chunk))))
    per_class, mean = average_precision(detections, gt_boxes, gt_labels)
    return {
        "domain": domain.name,
        "per_class": {CLASS_NAMES[i]: per_class[i] for i in range(len(CLASS_NAMES))},
        "mean": mean,
    }
