"""Named, reproducible random substreams derived from one master seed.

Every random decision in a run draws from a substream addressed by a
stable string id such as ``"gen/7/0"`` (purpose/iteration/slot). Substreams
are derived, not consumed in sequence, so concurrent work and resumed runs
see exactly the same draws as a straight-through run.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_id(*parts: object) -> str:
    """Join address components into a substream id string."""
    return "/".join(str(p) for p in parts)


def substream(master_seed: int, sid: str) -> np.random.Generator:
    """Return the generator for substream `sid` under `master_seed`.

    The same (seed, id) pair always yields an identical stream, on any
    platform: the id is folded in through SHA-256, never through hash().
    """
    digest = hashlib.sha256(sid.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "big") for i in range(0, 16, 4)]
    seq = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, *words])
    return np.random.Generator(np.random.PCG64(seq))
