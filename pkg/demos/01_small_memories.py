"""Why small memories help when the training set is contaminated.

A nearest-neighbour memory built from the whole training set contains every
training image, so each patch finds itself at distance zero and the scores
carry no information. Memories built from a small random subset rarely
contain a given anomalous image, and averaging many of them smooths out the
luck of the draw.
"""
from meds.dataio import SynthSpec
from meds.memory import build_ensemble, cache_ensemble_scores, images_per_bank
from meds.metrics import auroc
from meds.pipeline import PipelineConfig, prepare_data

# per-image style makes tiny memories miss some normal variation too
cfg = PipelineConfig(noise_ratio=0.4, synth=SynthSpec(style_spread=1.0, style_dims=1))
train, _ = prepare_data(cfg)
blind = train.without_truth()  # the memory never sees labels
print(f"{len(train)} training images, {train.labels.sum()} of them anomalous")

print("\nratio  images/bank  patch AUROC")
for ratio in (0.02, 0.05, 0.1, 0.2, 0.5, 1.0):
    ens = build_ensemble(blind, 50, ratio, seed=0)
    scores = cache_ensemble_scores(blind, ens)
    print(f"{ratio:5.2f}  {images_per_bank(len(blind), ratio):11d}  {auroc(scores, train.masks):.4f}")

# one bank versus the ensemble mean at the same ratio
single = cache_ensemble_scores(blind, build_ensemble(blind, 1, 0.1, seed=0))
many = cache_ensemble_scores(blind, build_ensemble(blind, 100, 0.1, seed=0))
print(f"\none bank:   {auroc(single, train.masks):.4f}")
print(f"100 banks:  {auroc(many, train.masks):.4f}")
print(f"score std across patches shrinks from {single.std():.3f} to {many.std():.3f}")
