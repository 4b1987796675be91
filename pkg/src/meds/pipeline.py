"""Three-phase training run, ablations, inference, sweeps and label-correction ranking.

Output directory layout::

    <out>/cache/        memory_scores.medc
    <out>/checkpoints/  theta0.medp, theta.medp
    <out>/reports/      metrics.txt, metrics_table.txt, selection_audit.tsv,
                        ensemble.txt, alc_ranking.tsv
    <out>/sweeps/       <axis>.tsv
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import metrics
from .dataio import (
    SynthSpec,
    concat_datasets,
    generate_synthetic_dataset,
    inject_contamination,
    read_feature_file,
)
from .errors import ConfigurationError, ContractError, MedsError, PhaseError, UndefinedMetricError
from .memory import build_ensemble, cache_ensemble_scores, write_score_cache
from .reconstructor import (
    TrainConfig,
    init_reconstructor,
    reconstruction_score,
    reconstruction_scores,
    train_distill,
    train_plain,
    write_checkpoint,
)
from .selection import finetune_with_selection, format_audit, robust_max

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "MEDS_OUTPUT_ROOT"
SWEEP_AXES = ("noise_ratio", "subsample_ratio", "ensemble_size", "distill_iters", "critical_value")


def default_output_root():
    return os.environ.get(OUTPUT_ROOT_ENV, "meds_runs")


@dataclass
class PipelineConfig:
    # data: either a synthetic recipe or feature files
    synth: SynthSpec | None = field(default_factory=SynthSpec)
    train_normal_per_class: int = 60
    noise_ratio: float = 0.4
    input_path: str | None = None
    test_path: str | None = None
    # phase 1
    ensemble_size: int = 100
    subsample_ratio: float = 0.1
    # phases 2 and 3 share one optimiser configuration
    distill_iters: int = 500
    finetune_iters: int = 10000
    learning_rate: float = 1e-3
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    critical_value: float = 1.0
    top_percent: float = 1.0
    # ablations
    distill_init: bool = True
    memory_criteria: bool = False
    selection: bool = True
    fpr_limit: float = 0.3
    data_seed: int = 0
    ensemble_seed: int = 0
    training_seed: int = 0
    output_dir: str | None = None

    def validate(self):
        if self.synth is None and self.input_path is None:
            raise ConfigurationError("need either a synthetic recipe or an input feature file")
        if self.synth is not None:
            self.synth.validate()
            if not 1 <= self.train_normal_per_class <= self.synth.images_per_class:
                raise ConfigurationError("train_normal_per_class must fit inside images_per_class")
        if not 0 <= self.noise_ratio < 1:
            raise ConfigurationError("noise_ratio must lie in [0, 1)")
        if self.ensemble_size < 1:
            raise ConfigurationError("ensemble_size must be >= 1")
        if not 0 < self.subsample_ratio <= 1:
            raise ConfigurationError("subsample_ratio must lie in (0, 1]")
        if self.distill_iters < 1 or self.finetune_iters < 1:
            raise ConfigurationError("iteration counts must be >= 1")
        if not 0 < self.top_percent <= 100:
            raise ConfigurationError("top_percent must lie in (0, 100]")
        if self.critical_value < 0:
            raise ConfigurationError("critical_value must be >= 0")
        self.train_config(self.distill_iters).validate()

    def train_config(self, iterations):
        return TrainConfig(iterations, self.batch_size, self.learning_rate, self.beta1, self.beta2,
                           seed=self.training_seed)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["synth"] = None if self.synth is None else self.synth.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if d.get("synth") is not None:
            d["synth"] = SynthSpec.from_dict(d["synth"])
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def prepare_data(config):
    """``(train, test)`` datasets; test may be ``None`` for file input without a test file.

    Synthetic data: per class, the first ``train_normal_per_class`` clean images
    are contaminated to ``noise_ratio`` with pool anomalies and form the training
    set; the remaining clean images plus the whole anomaly pool form the test set,
    so injected anomalies also appear at test time.
    """
    if config.synth is None:
        train = read_feature_file(config.input_path)
        test = read_feature_file(config.test_path) if config.test_path else None
        return train, test
    spec = replace(config.synth, seed=config.data_seed)
    clean, pool = generate_synthetic_dataset(spec)
    train_idx, test_idx = [], []
    for c in clean.classes:
        idx = clean.indices_of(c)
        train_idx.append(idx[:config.train_normal_per_class])
        test_idx.append(idx[config.train_normal_per_class:])
    train_clean = clean.subset(np.concatenate(train_idx))
    train = inject_contamination(train_clean, pool, config.noise_ratio, config.data_seed + 1)
    test = concat_datasets(clean.subset(np.concatenate(test_idx)), pool)
    return train, test


@dataclass
class PipelineResult:
    theta: object
    theta0: object
    ensemble_summary: dict
    metrics: dict
    audit: list
    train_etas: np.ndarray
    final_selected: np.ndarray
    memory_scores: np.ndarray | None = None
    output_dir: Path | None = None


def _phase(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except MedsError as exc:
        raise PhaseError(name, exc) from exc


def image_scores(params, dataset, n_percent):
    maps = reconstruction_scores(params, dataset.features)
    return robust_max(maps, n_percent), maps


def _test_metrics(params, test, config, prefix="test"):
    out = {}
    if test is None or test.labels is None:
        return out
    scores, maps = image_scores(params, test, config.top_percent)
    try:
        rep = metrics.evaluate(scores, test.labels, maps, test.masks, config.fpr_limit)
    except UndefinedMetricError:
        return out
    return {f"{prefix}.{k}": v for k, v in rep.items()}


def _train_truth_metrics(train, etas, selected, prefix="train"):
    out = {}
    if train.labels is None:
        return out
    out[f"{prefix}.selection_precision"] = float(1.0 - train.labels[selected].mean())
    out[f"{prefix}.selected"] = int(selected.size)
    if 0 < train.labels.sum() < len(train):
        out[f"{prefix}.alc_auprc"] = metrics.alc_auprc(etas, train.labels)
        out[f"{prefix}.inspection_depth"] = metrics.inspection_depth(etas, train.labels)
    return out


def run_pipeline(config, write=True, data=None):
    """Memory ensemble, score distillation, then fine-tuning with progressive selection.

    ``data`` may pass a pre-built ``(train, test)`` pair to skip
    :func:`prepare_data`. Artifacts are written under ``config.output_dir``
    when ``write`` is true.
    """
    config.validate()
    train, test = _phase("data", prepare_data, config) if data is None else data
    # selection must not see truth; labels stay on `train` only for the audit
    blind = train.without_truth()

    ensemble = _phase("memory", build_ensemble, blind, config.ensemble_size,
                      config.subsample_ratio, config.ensemble_seed)
    cache = _phase("memory", cache_ensemble_scores, blind, ensemble)

    channels = train.grid[2]
    if config.memory_criteria and not config.distill_init:
        # memory-criterion ablation: no distillation, random start
        theta0 = init_reconstructor(channels, config.training_seed)
    else:
        theta0 = _phase("distill", train_distill, blind, cache, config.train_config(config.distill_iters))

    frozen = robust_max(cache, config.top_percent) if config.memory_criteria else None
    ft = _phase("finetune", finetune_with_selection, theta0, train,
                config.train_config(config.finetune_iters), k=config.critical_value,
                n_percent=config.top_percent, init="distilled" if config.distill_init else "random",
                frozen_scores=frozen, select=config.selection)

    report = {}
    if train.labels is not None and train.masks is not None and 0 < train.masks.sum() < train.masks.size:
        report["memory.train_patch_auroc"] = metrics.auroc(cache, train.masks)
    report.update(_test_metrics(ft.params, test, config))
    report.update(_train_truth_metrics(train, ft.final_etas, ft.final_selected))

    result = PipelineResult(ft.params, theta0, ensemble.summary(), report, ft.audit,
                            ft.final_etas, ft.final_selected, cache)
    if write:
        result.output_dir = write_artifacts(result, config, train)
    return result


def run_plain(config, data=None):
    """No-selection ablation: random init, plain fine-tuning on every image for
    ``distill_iters + finetune_iters`` iterations."""
    config.validate()
    train, test = prepare_data(config) if data is None else data
    params = train_plain(train.without_truth(),
                         config.train_config(config.distill_iters + config.finetune_iters))
    etas, _ = image_scores(params, train, config.top_percent)
    report = _test_metrics(params, test, config)
    report.update(_train_truth_metrics(train, etas, np.arange(len(train))))
    return params, etas, report


# --------------------------------------------------------------------------
# Artifacts


def format_kv(report, prefix="metric"):
    lines = []
    for key in sorted(report):
        v = report[key]
        lines.append(f"{prefix}.{key} = {float(v)!r}" if isinstance(v, float) else f"{prefix}.{key} = {v}")
    return "\n".join(lines) + "\n"


def parse_kv(text):
    out = {}
    for line in text.splitlines():
        if " = " in line:
            key, _, value = line.partition(" = ")
            try:
                out[key.strip()] = int(value) if value.strip().lstrip("-").isdigit() else float(value)
            except ValueError:
                out[key.strip()] = value.strip()
    return out


def format_table(report):
    width = max((len(k) for k in report), default=10)
    return "\n".join(f"{k:<{width}}  {v:.6f}" if isinstance(v, float) else f"{k:<{width}}  {v}"
                     for k, v in sorted(report.items())) + "\n"


def write_artifacts(result, config, train):
    out = Path(config.output_dir or default_output_root())
    for sub in ("cache", "checkpoints", "reports", "sweeps"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    write_score_cache(result.memory_scores, out / "cache" / "memory_scores.medc")
    write_checkpoint(result.theta0, out / "checkpoints" / "theta0.medp")
    write_checkpoint(result.theta, out / "checkpoints" / "theta.medp")
    (out / "reports" / "metrics.txt").write_text(format_kv(result.metrics))
    (out / "reports" / "metrics_table.txt").write_text(format_table(result.metrics))
    (out / "reports" / "selection_audit.tsv").write_text(format_audit(result.audit))
    (out / "reports" / "ensemble.txt").write_text(
        format_kv({k: str(v) for k, v in result.ensemble_summary.items()}, prefix="ensemble"))
    if train.labels is not None and 0 < train.labels.sum():
        write_alc_listing(alc_rank(result.train_etas, train), out / "reports" / "alc_ranking.tsv")
    config.dump(out / "reports" / "config.json")
    return out


# --------------------------------------------------------------------------
# Inference


def upsample_nearest(score_map, size):
    """Nearest-neighbour resize of an (H, W) map to ``size = (TH, TW)``."""
    score_map = np.asarray(score_map)
    H, W = score_map.shape
    th, tw = size
    if th < H or tw < W:
        raise ContractError(f"target size {size} smaller than the score grid {(H, W)}")
    rows = (np.arange(th) * H) // th
    cols = (np.arange(tw) * W) // tw
    return score_map[np.ix_(rows, cols)]


def infer(params, image, size=None, n_percent=1.0):
    """Score map resized to ``size`` and the image score from the unresized map."""
    smap = reconstruction_score(params, image)
    score = robust_max(smap, n_percent)
    return (smap if size is None else upsample_nearest(smap, size)), score


# --------------------------------------------------------------------------
# Sweeps

_AXIS_FIELDS = {
    "noise_ratio": ("noise_ratio", float),
    "subsample_ratio": ("subsample_ratio", float),
    "ensemble_size": ("ensemble_size", int),
    "distill_iters": ("distill_iters", int),
    "critical_value": ("critical_value", float),
}
SWEEP_COLUMNS = ("value", "test.i_auroc", "test.i_ap", "test.p_ap", "test.p_aupro",
                 "train.selection_precision", "memory.train_patch_auroc")


def sweep(config, axis, values, runner=None):
    """One pipeline run per value with every seed shared; failed rows are marked, not raised."""
    if axis not in _AXIS_FIELDS:
        raise ConfigurationError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    name, cast = _AXIS_FIELDS[axis]
    runner = runner or (lambda cfg: run_pipeline(cfg, write=False).metrics)
    rows = []
    for v in values:
        row = {"value": cast(v), "status": "ok"}
        try:
            row.update(runner(replace(config, **{name: cast(v)})))
        except Exception as exc:  # a failing row must not abort the sweep
            log.warning("sweep %s=%s failed: %s", axis, v, exc)
            row["status"] = f"failed: {type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def format_sweep(rows):
    lines = ["\t".join(SWEEP_COLUMNS + ("status",))]
    for r in rows:
        cells = [repr(float(r[c])) if isinstance(r.get(c), float) else str(r.get(c, "na")) for c in SWEEP_COLUMNS]
        lines.append("\t".join(cells + [r["status"].replace("\t", " ")]))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Active label correction


@dataclass
class AlcRanking:
    order: np.ndarray  # dataset indices, most suspicious first
    etas: np.ndarray  # scores in ranked order
    labels: np.ndarray  # truth bits in ranked order
    auprc: float
    depth: float


def alc_rank(etas, dataset):
    """Rank training images by descending selection score, ties by index."""
    if dataset.labels is None:
        raise UndefinedMetricError("label-correction ranking needs truth labels")
    etas = np.asarray(etas, dtype=np.float64)
    order = np.lexsort((np.arange(etas.size), -etas))
    return AlcRanking(order, etas[order], dataset.labels[order],
                      metrics.alc_auprc(etas, dataset.labels),
                      metrics.inspection_depth(etas, dataset.labels))


def write_alc_listing(ranking, path):
    lines = [f"# auprc = {float(ranking.auprc)!r}", f"# inspection_depth = {float(ranking.depth)!r}",
             "rank\tindex\teta\tcontaminated"]
    for r, (i, e, l) in enumerate(zip(ranking.order, ranking.etas, ranking.labels), start=1):
        lines.append(f"{r}\t{i}\t{float(e)!r}\t{l}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_alc_listing(path):
    header, rows = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition(" = ")
            header[key.strip()] = float(value)
        elif line and not line.startswith("rank"):
            _, i, e, l = line.split("\t")
            rows.append((int(i), float(e), int(l)))
    order, etas, labels = (np.array(c) for c in zip(*rows)) if rows else (np.array([]),) * 3
    return AlcRanking(order.astype(np.int64), etas.astype(np.float64), labels.astype(np.uint8),
                      header["auprc"], header["inspection_depth"])
