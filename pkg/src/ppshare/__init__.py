"""Prototype sharing for interpretable classification on patch-feature datasets."""
from .errors import CorruptionError, FormatError, InvariantViolation, ValidationError
from .features import FeatureDataset, SynthSpec, load_dataset, save_dataset, synthesize
from .kernels import BACKEND as KERNEL_BACKEND
from .model import (
    AddOn,
    Model,
    load_model,
    logits,
    nearest_patch,
    patch_similarity,
    predict,
    save_model,
    similarity_vector,
    softmax,
    top_activations,
)

__version__ = "0.1.0"
