"""Noise-robust anomaly detection on patch features.

Bootstrapped memory ensembles score every training patch, a small student
network is distilled on those scores, and the student is then fine-tuned on a
progressively self-selected subset of the (contaminated) training set.
"""
from .dataio import FeatureDataset, SynthSpec, generate_synthetic_dataset, inject_contamination
from .memory import build_ensemble, cache_ensemble_scores, ensemble_score
from .pipeline import PipelineConfig, run_pipeline, run_plain
from .reconstructor import TrainConfig, init_reconstructor, reconstruction_score
from .selection import finetune_with_selection, robust_max

__version__ = "0.1.0"
