"""Preference-conditioned diffusion planning on a numpy autodiff core."""
from .config import RunConfig, load_config, parse_config, serialize_config
from .envgen import build_dataset, make_tasks
from .io import load_checkpoint, load_dataset, save_checkpoint, save_dataset

__version__ = "0.1.0"

__all__ = ["RunConfig", "load_config", "parse_config", "serialize_config", "build_dataset", "make_tasks",
           "load_checkpoint", "load_dataset", "save_checkpoint", "save_dataset", "__version__"]
