import logging
import os
import random
from pathlib import Path

import numpy as np
import torch

__all__ = [
    "get_env_bool",
    "get_env_path",
    "seed_everything",
    "resolve_device",
]

logger = logging.getLogger(__name__)


def get_env_bool(var_name: str, default: bool = False) -> bool:
    """
    Gets a boolean environment variable.
    True values (case-insensitive): 'true', '1', 'yes', 'y', 'on'.
    False values (case-insensitive): 'false', '0', 'no', 'n', 'off'.

    Args:
        var_name: The name of the environment variable.
        default: The default value if the variable is not set or is not a recognized boolean.

    Returns:
        The boolean value of the environment variable.
    """
    value = os.environ.get(var_name, "").strip().lower()
    if not value:
        return default

    if value in ("true", "1", "yes", "y", "on"):
        return True
    if value in ("false", "0", "no", "n", "off"):
        return False
    return default


def get_env_path(var_name: str, default: Path | None = None) -> Path | None:
    """
    Gets a directory path from an environment variable.

    Args:
        var_name: The name of the environment variable.
        default: Returned when the variable is unset or blank.

    Returns:
        The expanded path, or the default.
    """
    value = os.environ.get(var_name, "").strip()
    if not value:
        return default
    return Path(value).expanduser()


def seed_everything(seed: int, deterministic: bool = True) -> torch.Generator:
    """
    Seeds python, numpy and torch and optionally forces deterministic kernels.

    Args:
        seed: The seed shared by every RNG.
        deterministic: Whether to request deterministic torch algorithms.

    Returns:
        A torch generator seeded with `seed`, for data shuffling.
    """
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        torch.backends.cudnn.deterministic = True
        torch.backends.cudnn.benchmark = False
        torch.use_deterministic_algorithms(True, warn_only=True)
    generator = torch.Generator()
    generator.manual_seed(seed)
    logger.debug(f"Seeded RNGs with seed={seed}, deterministic={deterministic}")
    return generator


def resolve_device(device: str | None) -> torch.device:
    """Returns `device`, or cuda when available, else cpu."""
    if device:
        return torch.device(device)
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")
