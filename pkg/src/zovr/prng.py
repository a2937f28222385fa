"""Counter-based deterministic random streams.

Everything random in this library flows through one pinned generator so
that a 64-bit seed is enough to regenerate any perturbation vector,
minibatch, or problem instance, bit-for-bit on a given platform and
numpy build. The generator is deliberately *not* numpy's default PRNG:
seed-replay of optimizer trajectories needs a stateless, random-access
stream whose output is a pure function of (seed, counter).

Construction: the k-th 64-bit word of stream `seed` is
``mix64(seed + (k + 1) * GOLDEN)`` where ``mix64`` is the SplitMix64
finalizer. Standard normals are produced from consecutive word pairs by
the basic Box-Muller transform; uniforms take the top 53 bits of one
word. Any (seed, index range) can therefore be regenerated without
storing state.
"""

from __future__ import annotations

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_TWO53 = float(2**53)


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a python int, mod 2**64."""
    x &= _MASK
    x = ((x ^ (x >> 30)) * _MIX1) & _MASK
    x = ((x ^ (x >> 27)) * _MIX2) & _MASK
    return x ^ (x >> 31)


def fold(seed: int, value: int) -> int:
    """Derive a child seed from (seed, value).

    Used to split one master seed into per-purpose, per-step streams:
    ``fold(fold(master, tag), step)``. Both arguments are fully
    avalanched, so nearby values give unrelated streams.
    """
    return mix64((seed ^ mix64(((value + 1) * GOLDEN) & _MASK)) + GOLDEN)


def raw_words(seed: int, start: int, count: int) -> np.ndarray:
    """64-bit words at stream positions [start, start+count) as uint64."""
    ctr = np.arange(start + 1, start + 1 + count, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = np.uint64(seed & _MASK) + ctr * np.uint64(GOLDEN)
        state = (state ^ (state >> np.uint64(30))) * np.uint64(_MIX1)
        state = (state ^ (state >> np.uint64(27))) * np.uint64(_MIX2)
        return state ^ (state >> np.uint64(31))


def raw_word(seed: int, index: int) -> int:
    """Single stream word as a python int (scalar path, no numpy)."""
    return mix64((seed + ((index + 1) * GOLDEN)) & _MASK)


def uniforms(seed: int, start: int, count: int) -> np.ndarray:
    """Uniform [0, 1) doubles at stream positions [start, start+count)."""
    return (raw_words(seed, start, count) >> np.uint64(11)) / _TWO53


def normals(seed: int, start: int, count: int) -> np.ndarray:
    """Standard normal doubles at normal-stream positions [start, start+count).

    Normal j consumes raw words 2j and 2j+1, so disjoint index windows
    of the same seed never share entropy.
    """
    w = raw_words(seed, 2 * start, 2 * count)
    u1 = ((w[0::2] >> np.uint64(11)) + np.uint64(1)) / _TWO53  # (0, 1]
    u2 = (w[1::2] >> np.uint64(11)) / _TWO53  # [0, 1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos((2.0 * np.pi) * u2)


def randint_below(seed: int, index: int, bound: int) -> int:
    """Deterministic integer in [0, bound) from one stream word.

    Plain modulo mapping; the bias is O(bound / 2**64) and irrelevant at
    the bounds used here (sample counts, not crypto).
    """
    if bound <= 0:
        raise ValueError(f"bound must be positive, got {bound}")
    return raw_word(seed, index) % bound
