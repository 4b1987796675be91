"""Distil the memory ensemble into a small student, then fine-tune it on a
self-selected clean subset.

Plain training of a reconstruction student on contaminated data learns to
reproduce the anomalies too. Starting from the distilled student and only
training on images whose score falls under a robust per-class threshold
keeps the anomalies out.
"""
from meds.pipeline import PipelineConfig, prepare_data, run_pipeline, run_plain

cfg = PipelineConfig(noise_ratio=0.4)
data = prepare_data(cfg)
train, test = data
print(f"training set: {len(train)} images, noise ratio {train.noise_ratio:.2f}")

result = run_pipeline(cfg, write=False, data=data)
_, _, plain = run_plain(cfg, data=data)

print("\nselection audit, ten evenly spaced epochs")
for row in result.audit[::max(1, len(result.audit) // 10)]:
    print(f"  t={row['t']:5d}  alpha={row['alpha']:.2f}  k={row['critical']:.2f}  "
          f"selected {row['selected']:3d}/{row['class_size']}  contamination {row['contamination']:.2f}")

m = result.metrics
print("\n                     self-selected   plain")
for key in ("test.i_auroc", "test.i_ap", "test.p_ap", "test.p_aupro"):
    print(f"  {key:18s} {m[key]:13.4f}   {plain[key]:.4f}")
print(f"  final selection precision {m['train.selection_precision']:.4f}")
