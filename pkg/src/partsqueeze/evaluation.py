"""Proxy evaluation: part centers as landmarks with a fitted linear
regressor, and part-aggregated foreground IOU against ground-truth masks.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as TF

from .bottleneck import part_centers
from .errors import InvalidInputError

MIN_NORMALIZER = 1e-8


@dataclass
class LandmarkSet:
    """Point set in normalized image coordinates with a per-point validity mask."""

    points: np.ndarray  # [M, 2] (x, y) in [0, 1]
    valid: np.ndarray  # [M] bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise InvalidInputError(f"points must be [M,2], got {self.points.shape}")
        if self.valid.shape != (self.points.shape[0],):
            raise InvalidInputError("validity mask length must equal the point count")
        if not np.isfinite(self.points[self.valid]).all():
            raise InvalidInputError("landmark coordinates must be finite")


def centers_to_landmarks(S: torch.Tensor) -> LandmarkSet:
    """Foreground part centroids normalized to [0, 1] image coordinates.

    Uses the plain sum-normalized centroid (not the capped training
    normalizer) so points always lie inside the grid; zero-mass parts are
    masked invalid.
    """
    if S.dim() != 3:
        raise InvalidInputError(f"expected [K',H,W] map, got {tuple(S.shape)}")
    pc = part_centers(S.detach(), mode="sum")
    h, w = S.shape[-2:]
    pts = pc.centers.numpy() / np.array([w - 1, h - 1], dtype=np.float64)
    return LandmarkSet(points=pts, valid=pc.valid.numpy())


@dataclass
class LinearRegressor:
    """Least-squares linear map from flattened centers to gt landmarks."""

    weight: np.ndarray  # [D, T]
    bias: np.ndarray  # [T]
    rank_deficient: bool = False

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weight + self.bias


def stack_landmark_sets(sets: list[LandmarkSet]) -> tuple[np.ndarray, np.ndarray]:
    pts = np.stack([s.points for s in sets])
    valid = np.stack([s.valid for s in sets])
    return pts, valid


def impute_invalid(pts: np.ndarray, valid: np.ndarray, means: np.ndarray | None = None):
    """Replace invalid points by the (training) per-part mean position."""
    pts = pts.copy()
    if means is None:
        with np.errstate(invalid="ignore"):
            counts = np.maximum(valid.sum(axis=0), 1)[:, None]
            means = np.where(valid[:, :, None], pts, 0.0).sum(axis=0) / counts
    for i in range(pts.shape[0]):
        bad = ~valid[i]
        pts[i, bad] = means[bad]
    return pts, means


def fit_regressor(pred: np.ndarray, gt: np.ndarray) -> LinearRegressor:
    """Ordinary least squares with a bias column, no regularization.

    ``pred`` is [N, K, 2] predicted centers, ``gt`` [N, M, 2] targets; both
    in normalized coordinates. Rank-deficient designs fall back to the
    minimum-norm solution with a warning.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    n = pred.shape[0]
    d = pred.shape[1] * 2
    if n < d + 1:
        raise InvalidInputError(f"need at least {d + 1} samples to fit, got {n}")
    X = np.concatenate([pred.reshape(n, -1), np.ones((n, 1))], axis=1)
    Y = gt.reshape(n, -1)
    sol, _, rank, _ = np.linalg.lstsq(X, Y, rcond=None)
    deficient = rank < X.shape[1]
    if deficient:
        warnings.warn("rank-deficient landmark design; using minimum-norm solution")
    return LinearRegressor(weight=sol[:-1], bias=sol[-1], rank_deficient=deficient)


@dataclass
class EvalReport:
    """Per-image scores and their mean for one evaluation mode."""

    kind: str
    per_image: np.ndarray
    mean: float
    excluded: int = 0
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {"kind": self.kind, "mean": self.mean, "images": int(len(self.per_image)),
               "excluded": self.excluded}
        out.update(self.extra)
        return out


def landmark_error(
    pred: np.ndarray, gt: np.ndarray, normalizer: np.ndarray | None = None
) -> EvalReport:
    """Mean normalized L2 landmark distance, reported x100.

    ``normalizer`` is per image: a scalar (e.g. inter-ocular distance), a
    pair (per-axis box width/height), or None for already-normalized
    coordinates. Images with a degenerate normalizer are excluded and
    counted.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"prediction {pred.shape} and gt {gt.shape} disagree")
    n = pred.shape[0]
    diff = pred - gt
    excluded = np.zeros(n, dtype=bool)
    if normalizer is None:
        dist = np.linalg.norm(diff, axis=2)
    else:
        norm = np.asarray(normalizer, dtype=np.float64)
        if norm.ndim == 1:  # scalar normalizer per image
            excluded = norm <= MIN_NORMALIZER
            safe = np.where(excluded, 1.0, norm)
            dist = np.linalg.norm(diff, axis=2) / safe[:, None]
        elif norm.ndim == 2 and norm.shape == (n, 2):  # per-axis normalizer
            excluded = (norm <= MIN_NORMALIZER).any(axis=1)
            safe = np.where(excluded[:, None], 1.0, norm)
            dist = np.linalg.norm(diff / safe[:, None, :], axis=2)
        else:
            raise InvalidInputError(f"normalizer shape {norm.shape} not understood")
    per_image = 100.0 * dist.mean(axis=1)
    kept = per_image[~excluded]
    mean = float(kept.mean()) if kept.size else float("nan")
    return EvalReport(kind="landmark_error", per_image=kept, mean=mean,
                      excluded=int(excluded.sum()))


def argmax_labels(probs: torch.Tensor, out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Bilinearly upsample channel probabilities and take the per-pixel argmax.

    Ties resolve to the lowest channel index (numpy argmax semantics).
    """
    if probs.dim() != 3:
        raise InvalidInputError(f"expected [K',h,w], got {tuple(probs.shape)}")
    p = probs.detach().float().unsqueeze(0)
    if out_hw is not None and tuple(p.shape[-2:]) != tuple(out_hw):
        p = TF.interpolate(p, size=out_hw, mode="bilinear", align_corners=False)
    return p[0].numpy().argmax(axis=0)


def binary_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks; empty union counts as 0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def aggregate_iou(probs: torch.Tensor, gt_mask: np.ndarray) -> float:
    """IOU between the union of predicted foreground parts and a gt mask."""
    gt = np.asarray(gt_mask, dtype=bool)
    labels = argmax_labels(probs, out_hw=gt.shape)
    return binary_iou(labels != 0, gt)


def uniform_grid_centers(k: int) -> np.ndarray:
    """K fixed points on a centered sub-grid of the unit square.

    Used as the no-information baseline for the landmark regression proxy.
    """
    side = int(np.ceil(np.sqrt(k)))
    axis = (np.arange(side) + 1) / (side + 1)
    xx, yy = np.meshgrid(axis, axis, indexing="xy")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)[:k]


def regression_report(
    train_pred: list[LandmarkSet],
    train_gt: list[LandmarkSet],
    test_pred: list[LandmarkSet],
    test_gt: list[LandmarkSet],
    normalizer: np.ndarray | None = None,
) -> EvalReport:
    """Fit on the training split, report the error on the test split."""
    tr_p, tr_pv = stack_landmark_sets(train_pred)
    te_p, te_pv = stack_landmark_sets(test_pred)
    tr_g, _ = stack_landmark_sets(train_gt)
    te_g, _ = stack_landmark_sets(test_gt)
    tr_p, means = impute_invalid(tr_p, tr_pv)
    te_p, _ = impute_invalid(te_p, te_pv, means)
    reg = fit_regressor(tr_p, tr_g)
    n_te = te_p.shape[0]
    pred = reg.predict(
        np.concatenate([te_p.reshape(n_te, -1)], axis=1)
    ).reshape(n_te, -1, 2)
    report = landmark_error(pred, te_g, normalizer)
    train_pred_fit = reg.predict(tr_p.reshape(tr_p.shape[0], -1)).reshape(tr_g.shape)
    report.extra["train_error"] = landmark_error(train_pred_fit, tr_g, None).mean
    return report
