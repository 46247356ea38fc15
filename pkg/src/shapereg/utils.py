import logging
import math
import sys

import numpy as np

from shapereg import config


def setup_logging():
    """
    Default to WARNING log level for third party libraries. Use SHAPEREG_LOG_LEVEL (DEBUG
    unless set) for our own code.
    """
    logging.basicConfig(
        level=logging.WARNING,
        format='%(asctime)s %(levelname)s [%(name)s] %(message)s',
        stream=sys.stdout,
    )
    logging.getLogger('shapereg').setLevel(config.LOG_LEVEL)


def round_half_up(x: float) -> int:
    """Round to the nearest integer, halves away from zero (all counts are non-negative)."""
    return int(math.floor(x + 0.5))


def child_seeds(seed: int, n: int) -> list[int]:
    """
    Derive ``n`` independent 64-bit seeds from a master seed.

    Child ``i`` depends only on (seed, i), so results do not change with the order in which
    parallel workers pick up their jobs.
    """
    return [
        int(np.random.SeedSequence([seed, i]).generate_state(1, np.uint64)[0]) for i in range(n)
    ]


def check_fraction(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f'{name} must be in [0, 1], got {value}')
