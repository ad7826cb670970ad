"""Cross-modal selective-SSM classifier over video and hand-skeleton streams."""

__version__ = "0.1.0"

from .encoders import ModelConfig, preset
from .fusion import CrossModalModel, Strategy, UnimodalModel, build_model, count_parameters
from .ssm import MambaBlock, SsmBlockConfig, selective_scan
from .tensor import Tensor, finite_diff_check

__all__ = [
    "CrossModalModel",
    "MambaBlock",
    "ModelConfig",
    "SsmBlockConfig",
    "Strategy",
    "Tensor",
    "UnimodalModel",
    "build_model",
    "count_parameters",
    "finite_diff_check",
    "preset",
    "selective_scan",
]
