"""Deterministic RNG streams keyed by integer tuples.

Every stochastic component (init, patch sampling, blind-spot, dropout,
ensemble passes) derives its own stream from (seed, purpose, indices...) so
runs are reproducible and streams never interfere.
"""

import numpy as np

INIT = 1
PATCHES = 2
BLINDSPOT = 3
DROPOUT = 4
SHUFFLE = 5
VAL_BLINDSPOT = 6
ENSEMBLE = 7
SYNTH = 8
SCRIBBLES = 9


def stream(*key):
    """A fresh Generator for an integer key tuple."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key])))
