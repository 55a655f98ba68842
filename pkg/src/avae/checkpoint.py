"""Model checkpoints: architecture descriptor + named weights in one file."""

from __future__ import annotations

from pathlib import Path

from . import tensorfile
from .models import Architecture, ModelParameters


def save_checkpoint(path, params: ModelParameters) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensorfile.save(path, params.arch.to_text(), params.arrays)
    return path


def load_checkpoint(path) -> ModelParameters:
    descriptor, tensors = tensorfile.load(path)
    return ModelParameters(Architecture.from_text(descriptor), tensors)
