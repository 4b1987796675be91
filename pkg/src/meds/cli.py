"""Command-line entry point: ``meds <subcommand> ...``.

Failures exit with status 1 and print one line to stderr of the form
``meds-error: type=<ExceptionName> message=<text>``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics, theory
from .dataio import (
    SynthSpec,
    concat_datasets,
    generate_synthetic_dataset,
    inject_contamination,
    read_feature_file,
    write_feature_file,
)
from .errors import ContractError
from .memory import build_ensemble, cache_ensemble_scores, read_score_cache, write_score_cache
from .pipeline import (
    SWEEP_AXES,
    PipelineConfig,
    alc_rank,
    default_output_root,
    format_kv,
    format_sweep,
    format_table,
    infer,
    run_pipeline,
    sweep,
    write_alc_listing,
)
from .reconstructor import TrainConfig, read_checkpoint, reconstruction_scores, train_distill, write_checkpoint
from .selection import finetune_with_selection, format_audit, robust_max


def _train_args(p, iters_flag, iters_default):
    p.add_argument(iters_flag, type=int, default=iters_default, dest="iterations")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)


def _train_config(args):
    return TrainConfig(args.iterations, args.batch_size, args.lr, seed=args.seed)


def _size(text):
    h, _, w = text.lower().partition("x")
    return int(h), int(w)


def cmd_gen_synth(args):
    spec = SynthSpec(args.classes, args.images_per_class, args.height, args.width, args.channels,
                     args.clusters, args.spread, args.shift, (args.region_min, args.region_max), args.seed,
                     anomaly_direction_jitter=args.direction_jitter, style_spread=args.style_spread,
                     style_dims=args.style_dims)
    clean, pool = generate_synthetic_dataset(spec)
    train_idx = np.concatenate([clean.indices_of(c)[:args.train_normal] for c in clean.classes])
    test_idx = np.setdiff1d(np.arange(len(clean)), train_idx)
    train = inject_contamination(clean.subset(train_idx), pool, args.noise_ratio, args.seed + 1)
    write_feature_file(train, args.out)
    if args.test_out:
        write_feature_file(concat_datasets(clean.subset(test_idx), pool), args.test_out)
    print(f"wrote {len(train)} training images (noise ratio {train.noise_ratio:.4f}) to {args.out}")


def cmd_memory_score(args):
    data = read_feature_file(args.input).without_truth()
    ens = build_ensemble(data, args.ensemble_size, args.subsample_ratio, args.seed)
    write_score_cache(cache_ensemble_scores(data, ens), args.out)
    print(f"cached memory scores for {len(data)} images to {args.out}")


def cmd_distill(args):
    data = read_feature_file(args.input).without_truth()
    cache = read_score_cache(args.cache)
    history = []
    theta0 = train_distill(data, cache, _train_config(args), history=history)
    write_checkpoint(theta0, args.out)
    print(f"distillation loss {history[0]:.6f} -> {history[-1]:.6f}; wrote {args.out}")


def cmd_finetune(args):
    data = read_feature_file(args.input)
    theta0 = read_checkpoint(args.theta0)
    res = finetune_with_selection(theta0, data, _train_config(args), k=args.critical_value,
                                  n_percent=args.top_percent,
                                  init="random" if args.random_init else "distilled",
                                  select=not args.no_selection)
    write_checkpoint(res.params, args.out)
    if args.audit:
        Path(args.audit).write_text(format_audit(res.audit))
    print(f"fine-tuned for {args.iterations} iterations; final subset {res.final_selected.size}/{len(data)}")


_RUN_FLAGS = {
    "noise_ratio": float, "ensemble_size": int, "subsample_ratio": float, "distill_iters": int,
    "finetune_iters": int, "learning_rate": float, "batch_size": int, "critical_value": float,
    "top_percent": float, "fpr_limit": float, "data_seed": int, "ensemble_seed": int,
    "training_seed": int,
}


def _pipeline_args(p):
    p.add_argument("--config", help="JSON file with PipelineConfig fields")
    p.add_argument("--input", dest="input_path", help="training feature file instead of synthetic data")
    p.add_argument("--test-input", dest="test_path")
    for name, typ in _RUN_FLAGS.items():
        flag = "--lr" if name == "learning_rate" else "--" + name.replace("_", "-")
        p.add_argument(flag, dest=name, type=typ)
    p.add_argument("--no-distill-init", action="store_true")
    p.add_argument("--memory-criteria", action="store_true")
    p.add_argument("--no-selection", action="store_true")
    p.add_argument("--out-dir", dest="output_dir")


def _pipeline_config(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    # flags win over the file
    updates = {k: getattr(args, k) for k in _RUN_FLAGS if getattr(args, k) is not None}
    if args.input_path:
        updates.update(input_path=args.input_path, synth=None)
    if args.test_path:
        updates["test_path"] = args.test_path
    if args.no_distill_init:
        updates["distill_init"] = False
    if args.memory_criteria:
        updates["memory_criteria"] = True
    if args.no_selection:
        updates["selection"] = False
    updates["output_dir"] = args.output_dir or cfg.output_dir or default_output_root()
    return replace(cfg, **updates)


def cmd_run(args):
    cfg = _pipeline_config(args)
    res = run_pipeline(cfg)
    sys.stdout.write(format_table(res.metrics))
    print(f"artifacts in {res.output_dir}")


def cmd_sweep(args):
    cfg = _pipeline_config(args)
    rows = sweep(cfg, args.axis, args.values.split(","))
    text = format_sweep(rows)
    out = Path(cfg.output_dir) / "sweeps"
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.axis}.tsv").write_text(text)
    sys.stdout.write(text)


def cmd_theory_verify(args):
    rng = np.random.default_rng(args.seed)
    if args.input:
        data = read_feature_file(args.input)
        vectors = data.features.reshape(-1, data.grid[2])
        pool = vectors[rng.choice(len(vectors), size=min(args.pool_size, len(vectors)), replace=False)]
        if data.masks is None or not data.masks.any():
            raise ContractError("theory-verify on a feature file needs anomaly masks to pick queries")
        flat_mask = data.masks.reshape(-1).astype(bool)
        anom, norm = vectors[flat_mask], vectors[~flat_mask]
        pairs = [(anom[rng.integers(len(anom))], norm[rng.integers(len(norm))]) for _ in range(args.pairs)]
    else:
        pool = theory.random_pool(rng, args.pool_size, args.dim)
        pairs = [theory.random_separable_pair(rng, pool) for _ in range(args.pairs)]
    report = theory.verify_theorem(pool, pairs, range(1, args.m_max + 1))
    sys.stdout.write(report.to_table())
    if args.out:
        Path(args.out).write_text(report.to_kv())
    if not report.passed:
        failed = [p.index for p in report.pairs if not p.passed]
        print(f"meds-error: type=TheoremCheckFailed message=pairs {failed} failed", file=sys.stderr)
        return 2
    return 0


def _load_scores(args, data):
    params = read_checkpoint(args.theta)
    maps = reconstruction_scores(params, data.features)
    return robust_max(maps, args.top_percent), maps


def cmd_alc_rank(args):
    data = read_feature_file(args.input)
    scores, _ = _load_scores(args, data)
    ranking = alc_rank(scores, data)
    write_alc_listing(ranking, args.out)
    print(f"auprc {ranking.auprc:.6f} inspection_depth {ranking.depth:.6f}; listing in {args.out}")


def cmd_eval(args):
    data = read_feature_file(args.input)
    scores, maps = _load_scores(args, data)
    report = metrics.evaluate(scores, data.labels, maps if data.masks is not None else None,
                              data.masks, args.fpr_limit)
    sys.stdout.write(format_table(report))
    if args.out:
        Path(args.out).write_text(format_kv(report))


def cmd_infer(args):
    data = read_feature_file(args.input)
    params = read_checkpoint(args.theta)
    smap, score = infer(params, data.image(args.index), _size(args.size) if args.size else None,
                        args.top_percent)
    print(f"image_score = {float(score)!r}")
    if args.out:
        np.savetxt(args.out, smap)


def build_parser():
    parser = argparse.ArgumentParser(prog="meds", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a contaminated synthetic feature file")
    p.add_argument("--out", required=True)
    p.add_argument("--test-out")
    p.add_argument("--classes", type=int, default=1)
    p.add_argument("--images-per-class", type=int, default=100)
    p.add_argument("--height", type=int, default=8)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--clusters", type=int, default=2)
    p.add_argument("--spread", type=float, default=0.1)
    p.add_argument("--shift", type=float, default=1.0)
    p.add_argument("--region-min", type=int, default=2)
    p.add_argument("--region-max", type=int, default=4)
    p.add_argument("--direction-jitter", type=float, default=0.0)
    p.add_argument("--style-spread", type=float, default=0.0)
    p.add_argument("--style-dims", type=int, default=2)
    p.add_argument("--train-normal", type=int, default=60)
    p.add_argument("--noise-ratio", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("memory-score", help="cache bootstrapped memory-ensemble scores")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ensemble-size", type=int, default=100)
    p.add_argument("--subsample-ratio", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_memory_score)

    p = sub.add_parser("distill", help="distil cached memory scores into the student")
    p.add_argument("--input", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True)
    _train_args(p, "--distill-iters", 500)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("finetune", help="fine-tune with progressive selection")
    p.add_argument("--input", required=True)
    p.add_argument("--theta0", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--audit")
    _train_args(p, "--finetune-iters", 10000)
    p.add_argument("--critical-value", type=float, default=1.0)
    p.add_argument("--top-percent", type=float, default=1.0)
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--no-selection", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("run", help="all three phases end to end")
    _pipeline_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="one pipeline run per value of a hyperparameter")
    _pipeline_args(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("theory-verify", help="check the expected-gap decomposition numerically")
    p.add_argument("--input", help="draw pool and query pairs from a feature file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pool-size", type=int, default=100)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--pairs", type=int, default=5)
    p.add_argument("--m-max", type=int, default=50)
    p.add_argument("--out", help="key-value report file")
    p.set_defaults(func=cmd_theory_verify)

    p = sub.add_parser("alc-rank", help="rank training images for label correction")
    p.add_argument("--input", required=True)
    p.add_argument("--theta", required=True)
    p.add_argument("--top-percent", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_alc_rank)

    p = sub.add_parser("eval", help="image and pixel metrics of a checkpoint on a labelled file")
    p.add_argument("--input", required=True)
    p.add_argument("--theta", required=True)
    p.add_argument("--top-percent", type=float, default=1.0)
    p.add_argument("--fpr-limit", type=float, default=0.3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="score one image, optionally upsampled")
    p.add_argument("--input", required=True)
    p.add_argument("--theta", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--size", help="target HxW, e.g. 32x32")
    p.add_argument("--top-percent", type=float, default=1.0)
    p.add_argument("--out", help="write the map as text")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args) or 0
    except Exception as exc:
        msg = str(exc).replace("\n", " ")
        print(f"meds-error: type={type(exc).__name__} message={msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
