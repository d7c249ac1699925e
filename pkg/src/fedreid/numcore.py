"""Numeric primitives shared across the simulator.

Parameter vectors are plain float64 numpy arrays with the write flag cleared,
so they can be shared between clients and the server without defensive copies.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

ParamVector = np.ndarray


class DimensionError(ValueError):
    pass


class EmptyAggregationError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    """A zero-norm vector was passed where a direction is required."""


class SelectionError(ValueError):
    pass


def param_vector(values) -> ParamVector:
    """Copy ``values`` into a read-only, finite, 1-D float64 array."""
    vec = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(vec)):
        raise ValueError("parameter vector contains non-finite values")
    vec.flags.writeable = False
    return vec


def weighted_sum(vectors: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    if len(vectors) == 0:
        raise EmptyAggregationError("cannot aggregate an empty set of vectors")
    if len(weights) != len(vectors):
        raise DimensionError(f"{len(vectors)} vectors but {len(weights)} weights")
    length = len(vectors[0])
    for i, vec in enumerate(vectors):
        if len(vec) != length:
            raise DimensionError(f"vector {i} has length {len(vec)}, expected {length}")
    for w in weights:
        if w < 0:
            raise ValueError(f"negative aggregation weight {w}")
    # single accumulation pass, in input order
    out = np.zeros(length, dtype=np.float64)
    for vec, w in zip(vectors, weights):
        out += float(w) * np.asarray(vec, dtype=np.float64)
    return param_vector(out)


def cosine_distance(a: ParamVector, b: ParamVector) -> float:
    """One minus cosine similarity, clipped to [0, 2]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine distance undefined for a zero-norm vector")
    if np.array_equal(a, b):
        return 0.0
    # dot of the normalized vectors is symmetric in (a, b) bit-for-bit
    sim = float(np.dot(a / na, b / nb))
    return min(2.0, max(0.0, 1.0 - sim))


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; its stream is fixed per seed across platforms."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_seeds(seed: int, count: int) -> list[int]:
    """Derive ``count`` independent 64-bit child seeds from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def rng_choice_k(rng: np.random.Generator, n: int, k: int) -> list[int]:
    """Draw ``k`` distinct indices from ``range(n)``, uniform over k-subsets."""
    if k > n or k < 0:
        raise SelectionError(f"cannot select {k} of {n} items")
    return [int(i) for i in rng.choice(n, size=k, replace=False)]
