"""Progressive self-selection of training images during fine-tuning."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .reconstructor import (
    AdamState,
    EpochSampler,
    finetune_loss_and_grad,
    init_reconstructor,
    optimizer_step,
    plain_batch_rng,
    reconstruction_scores,
)


def top_count(n_patches, n_percent):
    if not 0 < n_percent <= 100:
        raise ContractError(f"n_percent must lie in (0, 100], got {n_percent}")
    # the epsilon keeps exact products such as 1 * 400 / 100 from rounding up
    return max(1, min(n_patches, math.ceil(n_percent * n_patches / 100 - 1e-9)))


def robust_max(score_map, n_percent=1.0):
    """Mean of the top ``n_percent`` % of patch scores.

    Accepts a single ``(H, W)`` map or a stack ``(n, H, W)``; a stack returns
    one value per map.
    """
    s = np.asarray(score_map, dtype=np.float64)
    if s.size == 0:
        raise ContractError("empty score map")
    single = s.ndim <= 2
    flat = s.reshape(1, -1) if single else s.reshape(s.shape[0], -1)
    k = top_count(flat.shape[1], n_percent)
    top = -np.sort(-flat, axis=1)[:, :k]
    out = top.mean(axis=1)
    return float(out[0]) if single else out


def schedule(t, total, k):
    """Interpolation weight ``min(1, 2t/T)`` and critical value ``k t / T``."""
    if not 1 <= t <= total:
        raise ContractError(f"iteration {t} outside [1, {total}]")
    return min(1.0, 2 * t / total), k * t / total


def selection_score(frozen, current, alpha):
    """Blend of the frozen distilled image score and the current one."""
    return (1 - alpha) * np.asarray(frozen) + alpha * np.asarray(current)


def median_mad(values):
    values = np.asarray(values, dtype=np.float64)
    med = np.median(values)
    return float(med), float(np.median(np.abs(values - med)))


def class_threshold(etas, critical):
    """``median + critical * MAD`` over one class's selection scores."""
    etas = np.asarray(etas, dtype=np.float64)
    if etas.size == 0:
        raise ContractError("empty class")
    med, mad = median_mad(etas)
    return med + critical * mad


def class_thresholds(class_ids, etas, critical):
    class_ids = np.asarray(class_ids)
    return {int(c): class_threshold(etas[class_ids == c], critical) for c in np.unique(class_ids)}


def select_subset(class_ids, etas, thresholds):
    """Indices with ``eta < tau(class)``.

    A class whose filter comes back empty (all scores tied, or a threshold at
    -inf) falls back to its lower half: the ``ceil(n/2)`` lowest scores, ties
    taken in index order, so every class keeps training data and never more
    than half of it.
    """
    class_ids = np.asarray(class_ids)
    etas = np.asarray(etas, dtype=np.float64)
    keep = np.zeros(etas.size, bool)
    for c in np.unique(class_ids):
        in_class = class_ids == c
        chosen = in_class & (etas < thresholds[int(c)])
        if not chosen.any():
            members = np.flatnonzero(in_class)
            lowest = members[np.lexsort((members, etas[members]))]
            chosen[lowest[:math.ceil(members.size / 2)]] = True
        keep |= chosen
    return np.flatnonzero(keep)


@dataclass
class FinetuneResult:
    params: object
    final_etas: np.ndarray
    final_selected: np.ndarray
    audit: list = field(default_factory=list)
    losses: list = field(default_factory=list)


def finetune_with_selection(theta0, dataset, config, k=1.0, n_percent=1.0, init="distilled",
                            frozen_scores=None, select=True):
    """Fine-tune on a subset re-selected at every epoch boundary.

    Parameters
    ----------
    theta0 : ReconstructorParams
        Distilled snapshot; its robust image scores are computed once and
        frozen.
    dataset : FeatureDataset
        Labels, if present, are only read for the audit log.
    config : TrainConfig
        ``config.iterations`` is the total ``T``.
    init : {"distilled", "random"}
        Start from ``theta0`` or from fresh random weights.
    frozen_scores : ndarray, optional
        Per-image scores replacing the distilled ones in the criterion (the
        memory-criterion ablation).
    select : bool
        ``False`` keeps every image selected (threshold +inf).
    """
    config.validate()
    if init == "distilled":
        params = theta0.copy()
    elif init == "random":
        params = init_reconstructor(dataset.grid[2], config.seed, theta0.hidden, theta0.activation)
    else:
        raise ContractError(f"unknown init {init!r}")
    if frozen_scores is None:
        frozen_scores = robust_max(reconstruction_scores(theta0, dataset.features), n_percent)
    frozen_scores = np.asarray(frozen_scores, dtype=np.float64)
    total = config.iterations
    cls = dataset.class_ids
    everything = np.arange(len(dataset))

    state = AdamState.zeros_like(params)
    sampler = EpochSampler(everything, config.batch_size, plain_batch_rng(config))
    result = FinetuneResult(params, frozen_scores, everything)
    epoch = 0

    def refresh(t):
        alpha, crit = schedule(t, total, k)
        if not select:
            return alpha, crit, None, everything
        current = robust_max(reconstruction_scores(params, dataset.features), n_percent)
        etas = selection_score(frozen_scores, current, alpha)
        taus = class_thresholds(cls, etas, crit)
        return alpha, crit, taus, select_subset(cls, etas, taus)

    for t in range(1, total + 1):
        if t == 1 or sampler.exhausted:
            epoch += 1
            alpha, crit, taus, chosen = refresh(t)
            sampler.reset(chosen)
            result.audit.extend(_audit_rows(epoch, t, alpha, crit, taus, chosen, dataset))
        loss, grad = finetune_loss_and_grad(params, dataset.features[sampler.next_batch()])
        params, state = optimizer_step(params, grad, state, config)
        result.losses.append(loss)

    result.params = params
    current = robust_max(reconstruction_scores(params, dataset.features), n_percent)
    result.final_etas = selection_score(frozen_scores, current, 1.0)
    result.final_selected = (
        select_subset(cls, result.final_etas, class_thresholds(cls, result.final_etas, k))
        if select else everything
    )
    return result


def _audit_rows(epoch, t, alpha, crit, taus, chosen, dataset):
    rows = []
    picked = np.zeros(len(dataset), bool)
    picked[chosen] = True
    for c in dataset.classes:
        in_class = dataset.class_ids == c
        sel = picked & in_class
        contamination = None
        if dataset.labels is not None and sel.any():
            contamination = float(dataset.labels[sel].mean())
        rows.append({
            "epoch": epoch, "t": t, "class": c, "alpha": alpha, "critical": crit,
            "tau": math.inf if taus is None else taus[c],
            "selected": int(sel.sum()), "class_size": int(in_class.sum()),
            "contamination": contamination,
        })
    return rows


def format_audit(rows):
    """Tab-separated audit log, one line per (epoch, class)."""
    lines = ["epoch\tt\tclass\talpha\tcritical\ttau\tselected\tclass_size\tcontamination"]
    for r in rows:
        cont = "na" if r["contamination"] is None else f"{r['contamination']:.6f}"
        lines.append(f"{r['epoch']}\t{r['t']}\t{r['class']}\t{r['alpha']:.6f}\t{r['critical']:.6f}\t"
                     f"{r['tau']:.6f}\t{r['selected']}\t{r['class_size']}\t{cont}")
    return "\n".join(lines) + "\n"
