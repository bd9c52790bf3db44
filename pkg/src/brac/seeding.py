"""Deterministic seed derivation.

Python's builtin hash() is salted per process, so derived seeds go through a
fixed splitmix64-style mix instead. Identical inputs give identical streams
on any machine, which is what makes grid cells reproducible and
order-independent.
"""

_MASK = (1 << 64) - 1


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def mix_seed(*parts):
    """Collapse any tuple of integers into one well-mixed 63-bit seed."""
    x = 0x243F6A8885A308D3
    for p in parts:
        x = _splitmix64(x ^ (int(p) & _MASK))
    return x & ((1 << 63) - 1)
