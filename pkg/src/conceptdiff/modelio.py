"""Save/load trained models through the shared checkpoint container."""

from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import DenoiserModel
from .embedder import JointEmbedder
from .errors import CorruptionError
from .guidance import GuidanceClassifier

_ARCHS = {
    DenoiserModel.ARCH: DenoiserModel,
    JointEmbedder.ARCH: JointEmbedder,
    GuidanceClassifier.ARCH: GuidanceClassifier,
}


def save_model(path, model):
    save_checkpoint(path, model.ARCH, model.meta(), model.tensors())


def load_model(path):
    arch, meta, tensors = load_checkpoint(path)
    cls = _ARCHS.get(arch)
    if cls is None:
        raise CorruptionError(f"unknown model architecture {arch!r} in {path}")
    return cls.from_checkpoint_payload(meta, tensors)
