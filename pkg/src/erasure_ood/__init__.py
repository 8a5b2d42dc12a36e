"""Out-of-distribution detection from the likelihood of erased image patches."""

from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import ImageDataset, load_dataset, synth
from .detector import DetectionConfig, fit_kde, kl_group, run_detection
from .entropy import EntropyConfig, conditional_entropy, entropy_scores
from .erasing import EraseStrategy, build_mask, parse_strategy
from .metrics import aupr, auroc, fpr_at_tpr
from .uen import UenConfig, score_dataset, train

__version__ = "0.1.0"
