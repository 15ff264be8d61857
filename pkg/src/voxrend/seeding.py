"""Named random streams derived from one root seed.

Every source of randomness in a run pulls from its own stream so that
toggling one feature (say, masking) never shifts the draws of another
(say, ray sampling).  A stream is identified by a fixed name; per-step
streams additionally mix in the step index, which makes each training
iteration's draws independent of how many values earlier iterations
consumed.
"""

from __future__ import annotations

import numpy as np

# Stable ids; appending is fine, renumbering is not (it would silently
# change every seeded artifact).
_STREAMS = {
    "init": 0,
    "augment": 1,
    "mask": 2,
    "frames": 3,
    "pixels": 4,
    "tsamples": 5,
    "semantic": 6,
    "chamfer": 7,
    "dataset": 8,
    "gradcheck": 9,
    "downsample": 10,
    "image-mask": 11,
}


def stream(seed: int, name: str, step: int | None = None) -> np.random.Generator:
    """Generator for the named stream, optionally bound to one step."""
    if name not in _STREAMS:
        raise KeyError(f"unknown rng stream {name!r}")
    key = (_STREAMS[name],) if step is None else (_STREAMS[name], step)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))
