"""Few-shot segmentation with context and affinity transformers, on a numpy autodiff core."""
from .config import ConfigError, ModelConfig, tiny_config
from .episodes import DatasetSplit, Episode, generate_episode, miou
from .model import CATrans, episode_loss

__all__ = ["CATrans", "ConfigError", "DatasetSplit", "Episode", "ModelConfig", "episode_loss",
           "generate_episode", "miou", "tiny_config"]
__version__ = "0.1.0"
