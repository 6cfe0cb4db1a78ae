"""PointGPT+NN: autoregressive point-patch transformer with a fused
non-parametric global feature, for point-cloud grade classification."""
from .kernels import BACKEND
from .pc_core import PointCloud, PatchSet, ChamferLoss
from .npe import NpeConfig, GlobalFeature, PointMemoryBank
from .gpt import GptConfig, GptModel, DualMask, classify
from .checkpoint import save_checkpoint, load_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "PointCloud", "PatchSet", "ChamferLoss", "NpeConfig", "GlobalFeature",
    "PointMemoryBank", "GptConfig", "GptModel", "DualMask", "classify",
    "save_checkpoint", "load_checkpoint",
]
