"""Fixed illumination schemes: wide-field, pseudo-random and Hadamard."""

from __future__ import annotations

import numpy as np

SCHEMES = ("uniform", "random", "hadamard")


def uniform_patterns(T: int, P: int, dtype=np.float32) -> np.ndarray:
    if T < 1 or P < 1:
        raise ValueError("T and P must be >= 1")
    return np.ones((T, P, P), dtype=dtype)


def random_patterns(T: int, P: int, seed: int = 0, density: float = 0.5, dtype=np.float32) -> np.ndarray:
    """I.i.d. Bernoulli(``density``) binary patterns."""
    if T < 1 or P < 1:
        raise ValueError("T and P must be >= 1")
    rng = np.random.default_rng(seed)
    return (rng.random((T, P, P)) < density).astype(dtype)


def sylvester_rows(rows, order: int) -> np.ndarray:
    """Selected rows of the Sylvester-ordered Hadamard matrix, entries +-1.

    Entry ``(r, c)`` of the order-``2**k`` Sylvester matrix is
    ``(-1) ** popcount(r & c)``, so rows can be built without the full matrix.
    """
    if order < 1 or order & (order - 1):
        raise ValueError(f"Hadamard order {order} is not a power of two")
    r = np.asarray(rows, dtype=np.int64)[:, None]
    c = np.arange(order, dtype=np.int64)[None, :]
    bits = r & c
    parity = np.zeros(bits.shape, dtype=np.int64)
    while np.any(bits):
        parity ^= bits & 1
        bits = bits >> 1
    return (1 - 2 * parity).astype(np.int8)


def hadamard_patterns(T: int, P: int, dtype=np.float32, signed: bool = False) -> np.ndarray:
    """Rows ``1..T`` of the order-``P**2`` Sylvester matrix as ``P x P`` masks.

    Row 0 (all ones) is skipped. Rows are reshaped row-major and mapped from
    {-1, +1} to {0, 1}; ``signed=True`` returns the raw +-1 rows instead.
    """
    if P < 1 or P & (P - 1):
        raise ValueError(f"pattern side {P} is not a power of two")
    if not 1 <= T <= P * P - 1:
        raise ValueError(f"T={T} outside 1..{P * P - 1} for P={P}")
    h = sylvester_rows(np.arange(1, T + 1), P * P).reshape(T, P, P)
    if signed:
        return h.astype(dtype)
    return ((h + 1) // 2).astype(dtype)


def baseline_patterns(kind: str, T: int, P: int, seed: int = 0, dtype=np.float32) -> np.ndarray:
    if kind == "uniform":
        return uniform_patterns(T, P, dtype)
    if kind in ("random", "pseudo_random"):
        return random_patterns(T, P, seed, dtype=dtype)
    if kind == "hadamard":
        return hadamard_patterns(T, P, dtype)
    raise ValueError(f"unknown baseline scheme {kind!r}")
