"""Seeded random streams.

Every randomized routine in the package draws from numpy's PCG64 bit
generator (PCG-XSL-RR 128/64) seeded explicitly. Normal deviates come from
a Box-Muller transform over that stream instead of numpy's ziggurat, so the
mapping from seed to samples is documented end to end.
"""

import numpy as np


def make_rng(seed):
    """Return a ``numpy.random.Generator`` on PCG64 for ``seed``.

    ``seed`` may be an int or a tuple of ints (combined by SeedSequence),
    which is how independent sub-streams are derived.
    """
    if seed is None:
        raise ValueError("an explicit seed is required")
    if isinstance(seed, (tuple, list)):
        seed = [int(s) for s in seed]
    else:
        seed = int(seed)
    return np.random.Generator(np.random.PCG64(seed))


def box_muller(rng, size):
    """Standard normal samples of shape ``size`` via Box-Muller."""
    size = tuple(np.atleast_1d(size).astype(int)) if not isinstance(size, int) else (size,)
    count = int(np.prod(size))
    half = (count + 1) // 2
    u1 = rng.random(half)
    u2 = rng.random(half)
    # random() is in [0, 1); flip so the log argument is in (0, 1]
    r = np.sqrt(-2.0 * np.log1p(-u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * half)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:count].reshape(size)
