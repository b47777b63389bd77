"""Slow, independent re-implementations used to cross-check the library.

Everything here avoids scipy and vectorised shortcuts on purpose: components
come from an explicit flood fill, distances from all-pairs loops, percentiles
from the textbook interpolation formula. Tests compare these against the
fast implementations in privseg.
"""

from __future__ import annotations

import math

import numpy as np
import torch


def mask_from_int(value: int, shape: tuple[int, int] = (4, 4)) -> np.ndarray:
    """Decode an integer into a binary mask, bit 0 = raster position (0, 0)."""
    h, w = shape
    out = np.zeros((h, w), dtype=bool)
    for pos in range(h * w):
        if value >> pos & 1:
            out[pos // w, pos % w] = True
    return out


def dice_by_counting(a: np.ndarray, b: np.ndarray) -> float:
    na = nb = inter = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            av, bv = bool(a[i, j]), bool(b[i, j])
            na += av
            nb += bv
            inter += av and bv
    if na + nb == 0:
        return 1.0
    return 2.0 * inter / (na + nb)


def flood_fill_components(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Label components by scanning in raster order and flooding from each seed."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    if connectivity == 8:
        steps = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    else:
        steps = [(-1, 0), (0, -1), (0, 1), (1, 0)]
    n = 0
    for i in range(h):
        for j in range(w):
            if not mask[i, j] or labels[i, j]:
                continue
            n += 1
            stack = [(i, j)]
            labels[i, j] = n
            while stack:
                y, x = stack.pop()
                for dy, dx in steps:
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not labels[ny, nx]:
                        labels[ny, nx] = n
                        stack.append((ny, nx))
    return labels, n


def boundary_by_loops(mask: np.ndarray) -> list[tuple[int, int]]:
    """Mask pixels with an up/down/left/right neighbour outside (border = outside)."""
    h, w = mask.shape
    out = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for ny, nx in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                if not (0 <= ny < h and 0 <= nx < w) or not mask[ny, nx]:
                    out.append((i, j))
                    break
    return out


def percentile_linear(values: list[float], q: float) -> float:
    """The linear-interpolation percentile: rank q/100 * (n - 1) into sorted data."""
    v = sorted(values)
    if len(v) == 1:
        return v[0]
    pos = q / 100.0 * (len(v) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    frac = pos - lo
    return v[lo] + frac * (v[hi] - v[lo])


def hd95_all_pairs(
    a: np.ndarray, b: np.ndarray, spacing: tuple[float, float] = (1.0, 1.0)
) -> float | None:
    """Pooled two-way boundary distance percentile via explicit nearest search."""
    a = a.astype(bool)
    b = b.astype(bool)
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return None
    bound_a = boundary_by_loops(a)
    bound_b = boundary_by_loops(b)
    sy, sx = spacing

    def nearest(p, points):
        return min(
            math.sqrt(((p[0] - q[0]) * sy) ** 2 + ((p[1] - q[1]) * sx) ** 2)
            for q in points
        )

    pooled = [nearest(p, bound_b) for p in bound_a]
    pooled += [nearest(p, bound_a) for p in bound_b]
    return percentile_linear(pooled, 95.0)


def lesion_counts_by_enumeration(
    gt: np.ndarray, pred: np.ndarray, overlap_threshold: float, connectivity: int = 8
) -> tuple[int, int, int, int]:
    """(detected gt, total gt, true-positive pred, total pred) by set arithmetic."""
    gt_labels, n_gt = flood_fill_components(gt, connectivity)
    pred_labels, n_pred = flood_fill_components(pred, connectivity)
    gt_sets = [set(zip(*np.where(gt_labels == k + 1))) for k in range(n_gt)]
    pred_sets = [set(zip(*np.where(pred_labels == k + 1))) for k in range(n_pred)]
    detected = 0
    for comp in gt_sets:
        best = max((len(comp & other) for other in pred_sets), default=0)
        if n_pred and best / len(comp) >= overlap_threshold:
            detected += 1
    tp = 0
    for comp in pred_sets:
        best = max((len(comp & other) for other in gt_sets), default=0)
        if n_gt and best / len(comp) >= overlap_threshold:
            tp += 1
    return detected, n_gt, tp, n_pred


def central_difference_grads(
    params: list[torch.Tensor], loss_fn, rel_step: float = 1e-5
) -> list[torch.Tensor]:
    """Central finite differences of a scalar loss over float64 tensors.

    ``loss_fn`` takes no arguments and reads the (mutated) params; the step is
    scaled per coordinate so large and small weights get comparable accuracy.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                h = rel_step * max(1.0, abs(orig))
                flat[k] = orig + h
                plus = loss_fn()
                flat[k] = orig - h
                minus = loss_fn()
                flat[k] = orig
                gflat[k] = (plus - minus) / (2.0 * h)
            grads.append(g)
    return grads


def max_relative_error(
    analytic: list[torch.Tensor], numeric: list[torch.Tensor], floor: float = 1e-6
) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=floor)
        worst = max(worst, float(((a - n).abs() / denom).max()))
    return worst
