"""Deterministic random-stream management.

Every run owns a single integer seed. Each randomized stage draws from its own
named sub-stream derived from that seed, so changing e.g. the number of
training epochs never perturbs the data split, and two runs with the same seed
consume identical random sequences stage by stage.

Stream identifiers are part of the on-disk reproducibility contract and must
never be renumbered.
"""

from __future__ import annotations

import numpy as np

# Fixed stream ids. Appending new stages is fine; renumbering is not.
STREAM_SPLIT = 1
STREAM_INIT = 2
STREAM_SHUFFLE = 3
STREAM_NEGATIVES = 4


def stream(seed: int, stream_id: int, index: int | None = None) -> np.random.Generator:
    """Return the generator for one named sub-stream of ``seed``.

    ``index`` selects a per-epoch (or per-stage) child stream so that epoch k
    always sees the same shuffle regardless of how earlier epochs consumed
    their generators.
    """
    if index is None:
        entropy = (int(seed), int(stream_id))
    else:
        entropy = (int(seed), int(stream_id), int(index))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def generator_state(gen: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's position."""
    return gen.bit_generator.state


def restore_generator(state: dict) -> np.random.Generator:
    """Rebuild a generator from a ``generator_state`` snapshot."""
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state
    return gen
