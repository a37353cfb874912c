"""Cross-domain WiFi CSI indoor crowd counting.

Pipeline stages: synthetic CSI generation (:mod:`dasecount.synth`),
preprocessing into amplitude/phase-difference samples
(:mod:`dasecount.preprocess`), dual-CNN feature extractor training
(:mod:`dasecount.convnet`), iterative knowledge distillation
(:mod:`dasecount.distill`), few-shot target-domain classification
(:mod:`dasecount.fewshot`), and evaluation/reporting
(:mod:`dasecount.evaluation`).
"""

from .csidata import CsiRecording, DatasetManifest, MotionType, RecordingMeta
from .preprocess import Sample, SampleStore, SegmentationConfig
from .synth import CrowdMotionConfig, GenerationSpec, ImpairmentConfig, SceneConfig

__all__ = [
    "CsiRecording",
    "DatasetManifest",
    "MotionType",
    "RecordingMeta",
    "Sample",
    "SampleStore",
    "SegmentationConfig",
    "CrowdMotionConfig",
    "GenerationSpec",
    "ImpairmentConfig",
    "SceneConfig",
]

__version__ = "0.1.0"
