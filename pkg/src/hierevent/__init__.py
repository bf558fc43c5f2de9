"""Hierarchical attention over adaptively segmented, irregularly timed event sequences."""

from .baseline import make_bow_baseline
from .checkpoint import load_checkpoint, save_checkpoint
from .data import GeneratorSpec, build_cohort, generate, ingest, read_labels
from .estimator import HierarchicalEventClassifier
from .events import ClinicalEvent, EventSequence, EventVocabulary, build_vocab
from .metrics import pr_auc, roc_auc
from .report import attention_report
from .segmentation import AdaptiveSegmenter, FixedSegmenter, segment_adaptive, segment_fixed
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AdaptiveSegmenter",
    "ClinicalEvent",
    "EventSequence",
    "EventVocabulary",
    "FixedSegmenter",
    "GeneratorSpec",
    "HierarchicalEventClassifier",
    "TrainConfig",
    "attention_report",
    "build_cohort",
    "build_vocab",
    "generate",
    "ingest",
    "load_checkpoint",
    "make_bow_baseline",
    "pr_auc",
    "read_labels",
    "roc_auc",
    "save_checkpoint",
    "segment_adaptive",
    "segment_fixed",
    "train",
]
