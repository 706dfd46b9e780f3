"""Deterministic seed derivation for independent RNG streams."""

from __future__ import annotations

import numpy as np


def derive_seed(*parts: int) -> int:
    """Collapse an integer tuple into one well-mixed 32-bit seed.

    Built on numpy's SeedSequence so nearby inputs (consecutive cell or
    fold indices) yield statistically independent streams.
    """
    return int(np.random.SeedSequence(parts).generate_state(1)[0])
