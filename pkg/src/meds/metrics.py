"""Ranking and segmentation metrics.

All sweeps break score ties by original index (earlier index ranks first),
which matters for average precision and inspection depth.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import ContractError, UndefinedMetricError


def _ranked(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ContractError("scores and labels must have equal length")
    if not np.all(np.isfinite(scores)):
        raise ContractError("scores must be finite")
    return scores, labels


def _descending_order(scores):
    return np.lexsort((np.arange(scores.size), -scores))


def auroc(scores, labels):
    """Probability that a positive outscores a negative, ties counting one half."""
    scores, labels = _ranked(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positives and negatives")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(scores, labels):
    """Sum of precision times recall increment over a descending-score sweep."""
    scores, labels = _ranked(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    hits = labels[_descending_order(scores)]
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, n_pos + 1) / ranks
    return float(precision.sum() / n_pos)


def alc_auprc(etas, contaminated):
    """Ranking quality for label correction: contaminated images are positives."""
    return average_precision(etas, contaminated)


def inspection_depth(etas, contaminated):
    """Fraction of the ranked set to review before every contaminated image is seen."""
    etas, contaminated = _ranked(etas, contaminated)
    if not contaminated.any():
        raise UndefinedMetricError("inspection depth needs at least one contaminated sample")
    hits = contaminated[_descending_order(etas)]
    return float((np.flatnonzero(hits)[-1] + 1) / hits.size)


def label_regions(masks):
    """4-connected components of each mask; returns global region ids (0 = none)."""
    masks = np.asarray(masks).astype(bool)
    ids = np.zeros(masks.shape, np.int64)
    offset = 0
    for i, m in enumerate(masks):
        lab, count = ndimage.label(m)
        ids[i] = np.where(lab > 0, lab + offset, 0)
        offset += count
    return ids, offset


def pro_curve(score_maps, masks):
    """(fpr, pro) at every distinct threshold, starting from (0, 0)."""
    scores = np.asarray(score_maps, dtype=np.float64)
    masks = np.asarray(masks).astype(bool)
    if scores.shape != masks.shape:
        raise ContractError("score maps and masks must share a shape")
    region_ids, n_regions = label_regions(masks)
    if n_regions == 0:
        raise UndefinedMetricError("AUPRO needs at least one ground-truth region")
    normal = ~masks.ravel()
    n_normal = int(normal.sum())
    if n_normal == 0:
        raise UndefinedMetricError("AUPRO needs normal pixels to measure false positives")
    region_ids = region_ids.ravel()
    sizes = np.bincount(region_ids, minlength=n_regions + 1).astype(np.float64)
    weight = np.where(region_ids > 0, 1.0 / (n_regions * sizes[region_ids]), 0.0)

    flat = scores.ravel()
    order = np.argsort(-flat, kind="stable")
    sorted_scores = flat[order]
    fp = np.cumsum(normal[order]) / n_normal
    pro = np.cumsum(weight[order])
    # predictions are score >= threshold, so only the last pixel of each tie group is a curve point
    ends = np.append(np.flatnonzero(np.diff(sorted_scores) != 0), flat.size - 1)
    return np.concatenate([[0.0], fp[ends]]), np.concatenate([[0.0], pro[ends]])


def aupro(score_maps, masks, fpr_limit=0.3):
    """Area under the per-region-overlap curve up to ``fpr_limit``, divided by it."""
    if not 0 < fpr_limit <= 1:
        raise ContractError("fpr_limit must lie in (0, 1]")
    fpr, pro = pro_curve(score_maps, masks)
    return _truncated_area(fpr, pro, fpr_limit) / fpr_limit


def _truncated_area(x, y, limit):
    inside = np.flatnonzero(x <= limit)
    last = inside[-1]
    xs, ys = list(x[:last + 1]), list(y[:last + 1])
    if xs[-1] < limit and last + 1 < x.size:
        x0, x1, y0, y1 = x[last], x[last + 1], y[last], y[last + 1]
        xs.append(limit)
        ys.append(y0 + (y1 - y0) * (limit - x0) / (x1 - x0))
    return float(np.trapezoid(ys, xs))


def evaluate(image_scores, image_labels, score_maps=None, masks=None, fpr_limit=0.3):
    """Standard report: image AUROC/AP and, when masks are given, pixel AP and AUPRO."""
    out = {
        "i_auroc": auroc(image_scores, image_labels),
        "i_ap": average_precision(image_scores, image_labels),
    }
    if score_maps is not None and masks is not None:
        out["p_ap"] = average_precision(score_maps, masks)
        out["p_aupro"] = aupro(score_maps, masks, fpr_limit)
    return out
