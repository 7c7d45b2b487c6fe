import logging
from pathlib import Path
from typing import List, Union

import numpy as np
import torch

logger = logging.getLogger(__name__)

# Independent RNG streams derived from one run seed
STREAM_INIT = 0
STREAM_SAMPLING = 1
STREAM_PROBES = 2


def stream_seed(seed: int, stream: int) -> int:
    """
    Derive a per-purpose seed from the run seed.

    Args:
        seed: The run seed.
        stream: One of the STREAM_* constants.

    Returns:
        int: A 63-bit seed for that stream.
    """
    state = np.random.SeedSequence([seed, stream]).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def torch_generator(seed: int, stream: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(stream_seed(seed, stream))
    return generator


def numpy_generator(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def deterministic_torch() -> None:
    """Pin torch to deterministic kernels on a single thread."""
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def parse_int_list(text: str) -> List[int]:
    """
    Parse a comma-separated list such as "1,5,10,20".

    Raises:
        ValueError: If an item is not a positive integer.
    """
    values = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        value = int(item)
        if value <= 0:
            raise ValueError(f"expected positive integers, got {value}")
        values.append(value)
    if not values:
        raise ValueError(f"empty integer list {text!r}")
    return values


def ensure_dir(path: Union[str, Path]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path
