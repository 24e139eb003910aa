"""Seed-stream derivation.

All randomness in the pipeline flows from one root seed through named
sub-streams (e.g. ``substream(seed, "ae-train")``,
``substream(seed, "runs", task_index, run_index)``), so any component can be
re-run in isolation and still reproduce exactly what a full run would do.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def _key_to_int(key: object) -> int:
    """Map an arbitrary stream label to a stable 64-bit integer."""
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, *keys: object) -> np.random.Generator:
    """Derive an independent numpy generator for (seed, *keys)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def torch_generator(seed: int, *keys: object) -> torch.Generator:
    """Derive a CPU torch generator from the same named-stream scheme."""
    rng = substream(seed, *keys)
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(rng.integers(0, 2**63 - 1)))
    return gen
