"""Set-prediction loss for the toy detector.

Matched predictions pay cross-entropy on their object class plus an L1
box penalty; unmatched predictions pay cross-entropy against background.
An optional auxiliary term trains the selection confidences: a selected
token's score should be high exactly when its prediction ends up matched
to an object (binary cross-entropy on the matched indicator). The
auxiliary term is what routes gradient into the selection head; without
it the confidence weights would never learn.

The matcher output is treated as a constant: gradients flow through the
matched quantities, never through the assignment itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numcore import ContractViolationError
from .matching import MatchResult, build_cost_matrix, hungarian_match

CLASS_WEIGHT = 2.0
BOX_WEIGHT = 5.0
SCORE_WEIGHT = 0.5
OBJECTNESS_WEIGHT = 1.0
# Relative CE weight of background predictions; most of the k slots are
# background, so an even weighting would drown the object-class signal.
BACKGROUND_WEIGHT = 0.15


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    class_term: float
    box_term: float
    score_term: float
    objectness_term: float = 0.0


@dataclass
class OutputGrads:
    """Cotangents on the model outputs feeding ``model_backward``."""

    d_class_logits: np.ndarray
    d_box_logits: np.ndarray
    d_sel_scores: np.ndarray
    d_all_scores: np.ndarray | None = None


def objectness_targets(targets: list[tuple[np.ndarray, np.ndarray]],
                       grid_hw: tuple[int, int], dtype=np.float64) -> np.ndarray:
    """(n, t) indicator per token: 1 where the token's grid cell contains a
    ground-truth box center. Dense supervision for the selection scores."""
    gh, gw = grid_hw
    out = np.zeros((len(targets), gh * gw), dtype=dtype)
    for i, (gt_boxes, _labels) in enumerate(targets):
        for cx, cy, _w, _h in gt_boxes:
            ix = min(int(cx * gw), gw - 1)
            iy = min(int(cy * gh), gh - 1)
            out[i, iy * gw + ix] = 1.0
    return out


def _bce_with_grad(scores: np.ndarray, target: np.ndarray, weight: float, norm: float):
    s = np.clip(scores, 1e-7, 1.0 - 1e-7)
    term = weight * float(-(target * np.log(s)
                            + (1.0 - target) * np.log1p(-s)).sum()) / norm
    d_scores = weight * (s - target) / (s * (1.0 - s)) / norm
    return term, d_scores


def match_batch(class_probs: np.ndarray, boxes: np.ndarray,
                targets: list[tuple[np.ndarray, np.ndarray]]) -> list[MatchResult]:
    """Minimum-cost assignment per image between the k predictions and the
    ground-truth objects. ``targets`` holds (gt_boxes, gt_labels) pairs."""
    matches = []
    for i, (gt_boxes, gt_labels) in enumerate(targets):
        if len(gt_labels) == 0:
            matches.append(MatchResult(pairs=()))
            continue
        cost = build_cost_matrix(class_probs[i], boxes[i], gt_boxes, gt_labels)
        matches.append(hungarian_match(cost))
    return matches


def detection_loss(class_probs: np.ndarray, boxes: np.ndarray,
                   targets: list[tuple[np.ndarray, np.ndarray]],
                   matches: list[MatchResult],
                   sel_scores: np.ndarray | None = None,
                   all_scores: np.ndarray | None = None,
                   obj_targets: np.ndarray | None = None,
                   class_weight: float = CLASS_WEIGHT,
                   box_weight: float = BOX_WEIGHT,
                   score_weight: float = SCORE_WEIGHT,
                   objectness_weight: float = OBJECTNESS_WEIGHT,
                   background_weight: float = BACKGROUND_WEIGHT):
    """Scalar loss plus cotangents on the head logits (and selection scores
    when provided).

    * class: mean over all n*k predictions of -log p[target], target being
      the matched object class or background; weighted by ``class_weight``,
      with background rows additionally scaled by ``background_weight``.
    * box: sum of |box - gt|_1 over matched pairs / total ground truths,
      weighted by ``box_weight``.
    * score: mean BCE(selection score, matched indicator), weighted by
      ``score_weight``; skipped when ``sel_scores`` is None.
    * objectness: mean BCE(token confidence, cell-contains-a-center),
      weighted by ``objectness_weight``; skipped without ``all_scores`` +
      ``obj_targets``. This dense term is what routes gradient into the
      confidence head from every token.

    Returns ``(LossBreakdown, OutputGrads)``.
    """
    n, k, n_classes_bg = class_probs.shape
    background = n_classes_bg - 1
    if len(matches) != n or len(targets) != n:
        raise ContractViolationError("matches/targets length does not match batch")

    target_cls = np.full((n, k), background, dtype=np.int64)
    matched = np.zeros((n, k), dtype=bool)
    total_gt = 0
    for i, ((gt_boxes, gt_labels), match) in enumerate(zip(targets, matches)):
        if len(match.pairs) != len(gt_labels):
            raise ContractViolationError("match does not cover every ground truth")
        total_gt += len(gt_labels)
        for pred_idx, gt_idx in match.pairs:
            target_cls[i, pred_idx] = gt_labels[gt_idx]
            matched[i, pred_idx] = True

    rows = np.arange(n)[:, None]
    cols = np.arange(k)[None, :]
    # Matched rows are normalized by the object count, background rows by the
    # slot count with an extra down-weight: most slots are background, and an
    # even normalization would leave the object-class signal ~k times weaker.
    row_weight = np.where(matched, 1.0 / max(1, total_gt),
                          background_weight / (n * k))
    p_target = np.clip(class_probs[rows, cols, target_cls], 1e-12, None)
    class_term = class_weight * float((row_weight * -np.log(p_target)).sum())
    onehot = np.zeros_like(class_probs)
    onehot[rows, cols, target_cls] = 1.0
    d_class_logits = class_weight * row_weight[:, :, None] * (class_probs - onehot)

    box_norm = max(1, total_gt)
    box_term = 0.0
    d_boxes = np.zeros_like(boxes)
    for i, ((gt_boxes, gt_labels), match) in enumerate(zip(targets, matches)):
        for pred_idx, gt_idx in match.pairs:
            resid = boxes[i, pred_idx] - gt_boxes[gt_idx]
            box_term += float(np.abs(resid).sum())
            d_boxes[i, pred_idx] = np.sign(resid)
    box_term = box_weight * box_term / box_norm
    # chain through the box sigmoid: d logits = d boxes * b * (1 - b)
    d_box_logits = (box_weight / box_norm) * d_boxes * boxes * (1.0 - boxes)

    if sel_scores is not None and score_weight > 0.0:
        score_term, d_sel_scores = _bce_with_grad(
            sel_scores, matched.astype(class_probs.dtype), score_weight, n * k)
    else:
        score_term = 0.0
        d_sel_scores = np.zeros((n, k), dtype=class_probs.dtype)

    objectness_term = 0.0
    d_all_scores = None
    if all_scores is not None and obj_targets is not None and objectness_weight > 0.0:
        objectness_term, d_all_scores = _bce_with_grad(
            all_scores, obj_targets, objectness_weight, all_scores.size)

    breakdown = LossBreakdown(
        total=class_term + box_term + score_term + objectness_term,
        class_term=class_term, box_term=box_term, score_term=score_term,
        objectness_term=objectness_term)
    return breakdown, OutputGrads(d_class_logits=d_class_logits,
                                  d_box_logits=d_box_logits,
                                  d_sel_scores=d_sel_scores,
                                  d_all_scores=d_all_scores)
