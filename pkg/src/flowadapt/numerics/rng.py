import hashlib

import numpy as np


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical seeds give identical draws on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(seed: int, *keys) -> int:
    """Stable child seed for ``(seed, *keys)``; keys may be ints or strings."""
    entropy = [int(seed)]
    for k in keys:
        if isinstance(k, (int, np.integer)):
            entropy.append(int(k))
        else:
            entropy.append(int.from_bytes(hashlib.sha256(str(k).encode()).digest()[:8], "little"))
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0] >> 1)
