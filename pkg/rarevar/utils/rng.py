"""Counter-based random streams.

Every draw is addressed by (seed, stream, index). Indices are grouped into
fixed-size blocks and each block owns a Philox generator whose counter
encodes the stream and block number, so a value never depends on which
worker produced it or in what order blocks were visited.
"""
from typing import Iterator, Tuple

import numpy as np

from rarevar.utils.error_handling import validation_error

BLOCK_SIZE = 4096

# Stream identifiers
PVALUE_STREAM = 0
DEPTH_STREAM = 1
RATE_STREAM = 2
LATENT_P_STREAM = 3
COUNT_X_STREAM = 4
LATENT_Q_STREAM = 5
COUNT_Y_STREAM = 6
AUXILIARY_STREAM = 7


def block_generator(seed: int, stream: int, block: int) -> np.random.Generator:
    """Generator for one (seed, stream, block) cell."""
    if seed < 0:
        raise validation_error(f"seed must be nonnegative, got {seed}", "parameter_out_of_range",
                               {"seed": "Must be >= 0"})
    bit_generator = np.random.Philox(key=int(seed), counter=[0, 0, int(stream), int(block)])
    return np.random.Generator(bit_generator)


def iter_blocks(count: int, block_size: int = BLOCK_SIZE) -> Iterator[Tuple[int, int, int]]:
    """Yield (block, start, stop) covering range(count)."""
    for block, start in enumerate(range(0, count, block_size)):
        yield block, start, min(start + block_size, count)


def counter_uniforms(seed: int, ids, stream: int = PVALUE_STREAM) -> np.ndarray:
    """
    Uniform draws on [0, 1), one per id.

    The value for an id depends only on (seed, stream, id).
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and ids.min() < 0:
        raise validation_error("stream ids must be nonnegative", "parameter_out_of_range")
    out = np.empty(ids.shape, dtype=float)
    if ids.size == 0:
        return out
    blocks = ids // BLOCK_SIZE
    offsets = ids % BLOCK_SIZE
    for block in np.unique(blocks):
        mask = blocks == block
        draws = block_generator(seed, stream, int(block)).random(BLOCK_SIZE)
        out[mask] = draws[offsets[mask]]
    return out
