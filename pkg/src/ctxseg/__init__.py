"""Memory-conditioned segmentation with continual domain adaptation."""

from .data import DatasetHandle, ImageSample, ShiftSpec, load_dataset, preprocess, synth_domain
from .memory import DomainMemory, MemoryRecord, load_memory, retrieve_context, save_memory
from .metrics import dice
from .pipeline import ModelBundle, TrainConfig, Variant

__version__ = "0.1.0"

__all__ = ["DatasetHandle", "ImageSample", "ShiftSpec", "load_dataset", "preprocess", "synth_domain",
           "DomainMemory", "MemoryRecord", "load_memory", "retrieve_context", "save_memory", "dice",
           "ModelBundle", "TrainConfig", "Variant"]
