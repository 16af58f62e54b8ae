"""Named, counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, label, step)``.  Two draws with different labels never share state,
so adding or removing a consumer (say, the memory module's dropout) leaves
every other stream untouched.
"""
import hashlib

import numpy as np


def _label_key(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, label: str, step: int = 0) -> np.random.Generator:
    """Return a fresh generator for one (seed, label, step) triple."""
    if seed < 0 or step < 0:
        raise ValueError("seed and step must be non-negative")
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, _label_key(label)], dtype=np.uint64)
    bitgen = np.random.Philox(key=key, counter=np.array([step, 0, 0, 0], dtype=np.uint64))
    return np.random.Generator(bitgen)


def fisher_yates(items, rng: np.random.Generator) -> list:
    """In-order Fisher-Yates shuffle; returns a new list."""
    out = list(items)
    for i in range(len(out) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        out[i], out[j] = out[j], out[i]
    return out


_MASK64 = 0xFFFFFFFFFFFFFFFF


def splitmix64(x: int) -> int:
    """One splitmix64 step: golden-ratio increment followed by the avalanche."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def hash64(*fields) -> int:
    """Deterministic 64-bit hash of a tuple of ints/strings.

    Fields are rendered as UTF-8 text joined by the unit separator (0x1F),
    padded with zeros to a multiple of 8 bytes, and folded 8 bytes at a time
    through :func:`splitmix64`.  The byte length is folded in last.
    """
    raw = "\x1f".join(str(f) for f in fields).encode("utf-8")
    n = len(raw)
    raw += b"\x00" * (-n % 8)
    h = 0
    for i in range(0, len(raw), 8):
        h = splitmix64(h ^ int.from_bytes(raw[i:i + 8], "little"))
    return splitmix64(h ^ n)
