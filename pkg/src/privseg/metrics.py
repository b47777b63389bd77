"""Voxel-level and lesion-level segmentation metrics plus dataset aggregation.

Conventions, fixed and documented here:

* DSC of two empty masks is 1.0.
* HD95 pools the two directed boundary-distance multisets and takes a single
  95th percentile with linear interpolation; distances are Euclidean in mm
  (spacing-scaled). Both masks empty gives 0.0; exactly one empty is
  undefined (``None``) and such cases are excluded from means but counted.
* A boundary pixel is a mask pixel with a 4-neighbour outside the mask; the
  image border counts as outside.
* Lesion-level matching: a ground-truth component is detected when some
  prediction covers at least ``overlap_threshold`` of that component's own
  area; predicted components symmetrically. Recall/precision are pooled over
  the whole dataset, not averaged per case.
* Component labels are deterministic: ordered by the raster position of each
  component's first pixel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from .errors import DataError


@dataclass(frozen=True)
class MetricsConfig:
    overlap_threshold: float = 0.1
    connectivity: int = 8

    def __post_init__(self):
        if not 0.0 < self.overlap_threshold <= 1.0:
            raise ValueError("overlap_threshold must be in (0, 1]")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


def _as_bool(mask: np.ndarray, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"{name} must be 2D")
    return mask.astype(bool)


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """Dice similarity coefficient; two empty masks agree perfectly (1.0)."""
    a = _as_bool(a, "a")
    b = _as_bool(b, "b")
    if a.shape != b.shape:
        raise DataError(f"shape mismatch: {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.count_nonzero(a & b))
    return 2.0 * inter / (na + nb)


_CROSS = ndimage.generate_binary_structure(2, 1)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask (image border = outside)."""
    mask = _as_bool(mask, "mask")
    if not mask.any():
        return np.zeros_like(mask)
    eroded = ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)
    return mask & ~eroded


def hd95(
    a: np.ndarray, b: np.ndarray, spacing: tuple[float, float] = (1.0, 1.0)
) -> float | None:
    """95th percentile of pooled two-way boundary distances, in mm."""
    a = _as_bool(a, "a")
    b = _as_bool(b, "b")
    if a.shape != b.shape:
        raise DataError(f"shape mismatch: {a.shape} vs {b.shape}")
    a_empty, b_empty = not a.any(), not b.any()
    if a_empty and b_empty:
        return 0.0
    if a_empty or b_empty:
        return None
    bound_a = boundary_pixels(a)
    bound_b = boundary_pixels(b)
    # distance from every pixel to the nearest boundary pixel of the other mask
    dist_to_b = ndimage.distance_transform_edt(~bound_b, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~bound_a, sampling=spacing)
    pooled = np.concatenate([dist_to_b[bound_a], dist_to_a[bound_b]])
    return float(np.percentile(pooled, 95))


def connected_components(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Label connected components; label k+1 starts earlier in raster order than k+2."""
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    mask = _as_bool(mask, "mask")
    structure = np.ones((3, 3), dtype=bool) if connectivity == 8 else _CROSS
    labels, n = ndimage.label(mask, structure=structure)
    if n <= 1:
        return labels.astype(np.int32), int(n)
    flat = labels.ravel()
    first = np.full(n + 1, flat.size, dtype=np.int64)
    np.minimum.at(first, flat, np.arange(flat.size))
    order = np.argsort(first[1:], kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1)
    return remap[labels], int(n)


def _overlap_matrix(
    gt_labels: np.ndarray, n_gt: int, pred_labels: np.ndarray, n_pred: int
) -> np.ndarray:
    """Intersection pixel counts, shape (n_gt, n_pred)."""
    matrix = np.zeros((n_gt, n_pred), dtype=np.int64)
    both = (gt_labels > 0) & (pred_labels > 0)
    if both.any():
        np.add.at(matrix, (gt_labels[both] - 1, pred_labels[both] - 1), 1)
    return matrix


def lesion_recall(
    gt: np.ndarray, pred: np.ndarray, overlap_threshold: float = 0.1, connectivity: int = 8
) -> tuple[int, int]:
    """(detected ground-truth lesions, total ground-truth lesions)."""
    gt_labels, n_gt = connected_components(gt, connectivity)
    pred_labels, n_pred = connected_components(pred, connectivity)
    if n_gt == 0:
        return 0, 0
    matrix = _overlap_matrix(gt_labels, n_gt, pred_labels, n_pred)
    areas = np.bincount(gt_labels.ravel(), minlength=n_gt + 1)[1:]
    if n_pred == 0:
        return 0, n_gt
    detected = (matrix.max(axis=1) / areas) >= overlap_threshold
    return int(detected.sum()), n_gt


def lesion_precision(
    gt: np.ndarray, pred: np.ndarray, overlap_threshold: float = 0.1, connectivity: int = 8
) -> tuple[int, int]:
    """(true-positive predicted lesions, total predicted lesions)."""
    gt_labels, n_gt = connected_components(gt, connectivity)
    pred_labels, n_pred = connected_components(pred, connectivity)
    if n_pred == 0:
        return 0, 0
    matrix = _overlap_matrix(gt_labels, n_gt, pred_labels, n_pred)
    areas = np.bincount(pred_labels.ravel(), minlength=n_pred + 1)[1:]
    if n_gt == 0:
        return 0, n_pred
    tp = (matrix.max(axis=0) / areas) >= overlap_threshold
    return int(tp.sum()), n_pred


@dataclass
class CaseMetrics:
    id: str
    dsc: float
    hd95: float | None
    n_gt_lesions: int
    n_detected_gt: int
    n_pred_lesions: int
    n_tp_pred: int


@dataclass
class AggregateReport:
    per_case: list[CaseMetrics]
    dsc_mean: float
    dsc_std: float
    hd95_mean: float | None
    hd95_std: float | None
    hd95_undefined_count: int
    lesion_recall: float | None
    lesion_precision: float | None

    def to_json(self) -> str:
        doc = asdict(self)
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def case_metrics(
    sample_id: str,
    gt: np.ndarray,
    pred: np.ndarray,
    spacing: tuple[float, float],
    cfg: MetricsConfig,
) -> CaseMetrics:
    n_detected, n_gt = lesion_recall(gt, pred, cfg.overlap_threshold, cfg.connectivity)
    n_tp, n_pred = lesion_precision(gt, pred, cfg.overlap_threshold, cfg.connectivity)
    return CaseMetrics(
        id=sample_id,
        dsc=dsc(gt, pred),
        hd95=hd95(gt, pred, spacing),
        n_gt_lesions=n_gt,
        n_detected_gt=n_detected,
        n_pred_lesions=n_pred,
        n_tp_pred=n_tp,
    )


def evaluate_dataset(
    predictions: list[np.ndarray], dataset, cfg: MetricsConfig | None = None
) -> AggregateReport:
    """Per-case metrics plus dataset aggregates; one prediction per sample."""
    cfg = cfg or MetricsConfig()
    if len(predictions) != len(dataset):
        raise DataError(
            f"{len(predictions)} predictions for {len(dataset)} samples"
        )
    cases = []
    for pred, sample in zip(predictions, dataset):
        if np.asarray(pred).shape != sample.mask.shape:
            raise DataError(
                f"sample {sample.id!r}: prediction shape {np.asarray(pred).shape} "
                f"!= mask shape {sample.mask.shape}"
            )
        cases.append(case_metrics(sample.id, sample.mask, pred, sample.spacing, cfg))

    dscs = np.array([c.dsc for c in cases], dtype=np.float64)
    hd_defined = np.array(
        [c.hd95 for c in cases if c.hd95 is not None], dtype=np.float64
    )
    total_gt = sum(c.n_gt_lesions for c in cases)
    total_detected = sum(c.n_detected_gt for c in cases)
    total_pred = sum(c.n_pred_lesions for c in cases)
    total_tp = sum(c.n_tp_pred for c in cases)
    return AggregateReport(
        per_case=cases,
        dsc_mean=float(dscs.mean()) if cases else 0.0,
        dsc_std=float(dscs.std()) if cases else 0.0,
        hd95_mean=float(hd_defined.mean()) if hd_defined.size else None,
        hd95_std=float(hd_defined.std()) if hd_defined.size else None,
        hd95_undefined_count=sum(1 for c in cases if c.hd95 is None),
        lesion_recall=(total_detected / total_gt) if total_gt else None,
        lesion_precision=(total_tp / total_pred) if total_pred else None,
    )
