"""Set-prediction assignment between predictions and ground-truth objects.

The production matcher delegates to scipy's exact minimum-cost solver; the
exhaustive permutation oracle lives here too so the self-test command and
the test suite can check one against the other on small instances.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..numcore import ContractViolationError

# Matching-cost weights: cost = CLASS_COST * (1 - p_gt_class) + L1_COST * |box - gt|_1
CLASS_COST = 2.0
L1_COST = 5.0


@dataclass(frozen=True)
class MatchResult:
    """One-to-one pairs ``(prediction index, ground-truth index)``, one pair
    per ground-truth object, sorted by ground-truth index. Predictions not
    listed are assigned to background by the loss."""

    pairs: tuple[tuple[int, int], ...]

    @property
    def prediction_indices(self) -> tuple[int, ...]:
        return tuple(p for p, _ in self.pairs)


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Exact minimum total cost assignment of every ground truth (column) to
    a distinct prediction (row). Requires ``m <= k`` and finite costs."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractViolationError(f"cost must be 2-D, got shape {cost.shape}")
    k, m = cost.shape
    if m > k:
        raise ContractViolationError(f"more ground truths ({m}) than predictions ({k})")
    if not np.isfinite(cost).all():
        raise ContractViolationError("cost matrix contains non-finite values")
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: rc[1])
    return MatchResult(pairs=tuple(pairs))


def exhaustive_min_cost_match(cost: np.ndarray) -> MatchResult:
    """Brute-force oracle: evaluates every injection of ground truths into
    predictions. Exponential; only for verification on small instances."""
    cost = np.asarray(cost, dtype=np.float64)
    k, m = cost.shape
    if m > k:
        raise ContractViolationError(f"more ground truths ({m}) than predictions ({k})")
    best_total = np.inf
    best_perm = None
    for perm in itertools.permutations(range(k), m):
        total = sum(cost[perm[j], j] for j in range(m))
        if total < best_total:
            best_total = total
            best_perm = perm
    pairs = tuple((best_perm[j], j) for j in range(m))
    return MatchResult(pairs=pairs)


def match_total_cost(cost: np.ndarray, match: MatchResult) -> float:
    return float(sum(cost[p, g] for p, g in match.pairs))


def build_cost_matrix(class_probs: np.ndarray, boxes: np.ndarray,
                      gt_boxes: np.ndarray, gt_labels: np.ndarray) -> np.ndarray:
    """Matching cost between k predictions and m ground truths:
    ``CLASS_COST * (1 - p[gt class]) + L1_COST * |box - gt|_1``."""
    p_cls = class_probs[:, gt_labels]                    # (k, m)
    l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=-1)
    return CLASS_COST * (1.0 - p_cls) + L1_COST * l1
