"""Counter-based random streams.

Every stochastic component draws from a Philox generator keyed by the run
seed plus a purpose-specific spawn key, so runs are reproducible and
streams never collide across purposes or workers.
"""

import numpy as np

# fixed purpose tags; extend rather than reuse
INIT, DATA, GUMBEL, CORPUS = 0, 1, 2, 3


def philox(seed, *key):
    """Generator on a Philox stream keyed by (seed, *key)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(
        int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
