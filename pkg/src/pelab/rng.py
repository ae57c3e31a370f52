"""Counter-based random streams.

Every random draw is a pure function of ``(stream key, step, global sample
index, coordinate)``. Samples are grouped in fixed blocks of ``BLOCK`` rows;
block ``b`` of step ``s`` is generated by a Philox generator with key
``(stream_key, s)`` and counter ``(0, b, 0, 0)``. A worker that owns rows
``a..a+n`` regenerates the blocks overlapping its range and slices them, so
any partition of a batch reproduces the single-process draws exactly.

Stream keys come from :func:`derive_key`, which folds its parts with the
SplitMix64 finalizer::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

String parts enter through the first 8 bytes of their SHA-256 digest.
"""

from __future__ import annotations

import hashlib

import numpy as np

BLOCK = 4096
_MASK = (1 << 64) - 1


def mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _label_int(label) -> int:
    if isinstance(label, (bool, np.bool_)):
        label = int(label)
    if isinstance(label, (int, np.integer)):
        return int(label) & _MASK
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_key(*parts) -> int:
    """Fold ints and strings into one 64-bit key.

    ``derive_key(master_seed, scenario, task)`` gives the root key of a task;
    modules derive per-purpose streams from it with a label
    (``"data"``, ``"add_noise"``, ``"solver"``, ``"codec"``).
    """
    acc = 0x6A09E667F3BCC908
    for p in parts:
        acc = mix64(acc ^ mix64(_label_int(p) + 0x9E3779B97F4A7C15))
    return acc


def as_key(seed) -> int:
    """Normalise a user seed (int or None) to a 64-bit key."""
    return derive_key(0 if seed is None else int(seed))


class Stream:
    """Keyed draws for rows ``offset .. offset + n`` of a (possibly larger) batch."""

    def __init__(self, key: int, n: int, offset: int = 0):
        if n < 0 or offset < 0:
            raise ValueError("n and offset must be nonnegative")
        self.key = int(key) & _MASK
        self.n = int(n)
        self.offset = int(offset)

    def _draw(self, step: int, d: int, kind: str) -> np.ndarray:
        out = np.empty((self.n, d))
        if self.n == 0:
            return out
        first, last = self.offset // BLOCK, (self.offset + self.n - 1) // BLOCK
        step_key = int(step) & _MASK
        pos = 0
        for b in range(first, last + 1):
            gen = np.random.Generator(np.random.Philox(key=[self.key, step_key], counter=[0, b, 0, 0]))
            if kind == "normal":
                blk = gen.standard_normal((BLOCK, d))
            else:
                blk = 1.0 - gen.random((BLOCK, d))  # (0, 1]
            lo = max(self.offset - b * BLOCK, 0)
            hi = min(self.offset + self.n - b * BLOCK, BLOCK)
            out[pos : pos + hi - lo] = blk[lo:hi]
            pos += hi - lo
        return out

    def normal(self, step: int, d: int) -> np.ndarray:
        return self._draw(step, d, "normal")

    def uniform(self, step: int, d: int) -> np.ndarray:
        """Uniform draws in (0, 1]."""
        return self._draw(step, d, "uniform")


def stream(seed, label, n: int, offset: int = 0) -> Stream:
    """Stream for purpose ``label`` under root ``seed``."""
    return Stream(derive_key(as_key(seed), label), n, offset)
