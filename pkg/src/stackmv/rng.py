"""Counter-based random streams for reproducible parallel path simulation.

Every Monte Carlo path owns disjoint substreams derived from
(master seed, path index, channel) via the Philox counter-based generator,
so paths can be simulated in any order or chunking with identical results.
Channels separate the observable-noise, exploration-noise and action-noise
draws; a regime that does not consume a channel leaves it untouched, which
is what lets sampled and exploratory runs share observable noise.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

__all__ = ["CHANNEL_WHAT", "CHANNEL_WBAR", "CHANNEL_XI", "stream", "standard_normals"]

CHANNEL_WHAT = 0  # observable Brownian driver (filter + wealth)
CHANNEL_WBAR = 1  # independent exploration driver (exploratory regime only)
CHANNEL_XI = 2    # action-sampling noise at grid nodes (sampled regime only)

_MASK64 = (1 << 64) - 1
_MAX_PATH_INDEX = 1 << 61


def stream(master_seed: int, path_index: int = 0, channel: int = CHANNEL_WHAT):
    """Generator for one (path, channel) substream."""
    if not 0 <= path_index < _MAX_PATH_INDEX:
        raise ValueError(f"path_index out of range: {path_index}")
    if channel not in (CHANNEL_WHAT, CHANNEL_WBAR, CHANNEL_XI):
        raise ValueError(f"unknown channel: {channel}")
    key = ((int(master_seed) & _MASK64) << 64) | ((path_index << 2) | channel)
    return np.random.Generator(np.random.Philox(key=key))


def standard_normals(gen: np.random.Generator, n: int) -> np.ndarray:
    """n standard normals via inverse CDF of the generator's uniform stream."""
    u = gen.random(n)
    # guard the measure-zero event u == 0 (ndtri would return -inf)
    np.clip(u, 1e-300, None, out=u)
    return ndtri(u)
