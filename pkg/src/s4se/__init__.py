"""S4 and S4ND state-space layers for speech enhancement, in plain numpy."""
from .config import ModelConfig, TrainConfig, s4nd_default, tf_default, time_default, tiny
from .nn import build_model, count_params

__version__ = "0.1.0"
__all__ = ["ModelConfig", "TrainConfig", "build_model", "count_params", "s4nd_default",
           "tf_default", "time_default", "tiny"]
