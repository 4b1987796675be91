"""Rank training images for manual review.

Sorting the training images by the final selection score puts likely
anomalies first. The area under the precision-recall curve of that ranking,
and the fraction of the list a reviewer must read to find every
contaminated image, show how much review effort the ranking saves.
"""
import numpy as np

from meds.pipeline import PipelineConfig, alc_rank, infer, prepare_data, run_pipeline, run_plain

cfg = PipelineConfig(noise_ratio=0.2)
data = prepare_data(cfg)
train, test = data
result = run_pipeline(cfg, write=False, data=data)
ranking = alc_rank(result.train_etas, train)
_, _, plain = run_plain(cfg, data=data)

print(f"{train.labels.sum()} contaminated images among {len(train)}")
print("top of the review list (index, score, truly anomalous):")
for i, eta, bad in list(zip(ranking.order, ranking.etas, ranking.labels))[:8]:
    print(f"  {i:4d}  {eta:.4f}  {bool(bad)}")
print(f"\nranking AUPRC      {ranking.auprc:.4f}   (plain training {plain['train.alc_auprc']:.4f})")
print(f"inspection depth   {ranking.depth:.4f}   (plain training {plain['train.inspection_depth']:.4f})")

# localisation on one anomalous test image, upsampled to a 32x32 "input"
idx = int(np.flatnonzero(test.labels)[0])
smap, score = infer(result.theta, test.features[idx], (32, 32))
print(f"\ntest image {idx}: image score {score:.4f}, map {smap.shape}")
print("defect mask vs thresholded map (8x8):")
grid = smap[::4, ::4] > np.quantile(smap, 0.9)
for truth_row, pred_row in zip(test.masks[idx], grid):
    print("  " + "".join("#" if v else "." for v in truth_row) + "   " + "".join("#" if v else "." for v in pred_row))
