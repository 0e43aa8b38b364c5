"""Seeded random streams.

All randomness comes from numpy's PCG64 bit generator wrapped in a
``numpy.random.Generator``. Its state is a plain dict of integers, which is
what checkpoints persist to make resumed runs bit-identical.
"""

import numpy as np


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(int(seed) & (2**64 - 1)))


def derive_rng(seed, *keys):
    """Independent stream for ``(seed, *keys)``; used for per-record rendering."""
    return np.random.Generator(np.random.PCG64([int(seed) & (2**64 - 1), *[int(k) for k in keys]]))


def get_state(rng):
    st = rng.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": {"state": int(st["state"]["state"]), "inc": int(st["state"]["inc"])},
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def set_state(rng, state):
    rng.bit_generator.state = {
        "bit_generator": state["bit_generator"],
        "state": {"state": int(state["state"]["state"]), "inc": int(state["state"]["inc"])},
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }
    return rng
