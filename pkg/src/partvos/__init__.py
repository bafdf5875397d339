"""Online video object segmentation by tracking, segmenting and re-weighting object parts."""

__version__ = "0.1.0"

from .config import RunConfig, load_config
from .dataset_io import FrameSequence, ObjectSpec, SynthSpec, load_sequence, save_masks, synth_sequence
from .geometry import BoundingBox
from .pipeline import Pipeline, PipelineResult, run_pipeline

__all__ = [
    "BoundingBox",
    "FrameSequence",
    "ObjectSpec",
    "Pipeline",
    "PipelineResult",
    "RunConfig",
    "SynthSpec",
    "load_config",
    "load_sequence",
    "run_pipeline",
    "save_masks",
    "synth_sequence",
]
