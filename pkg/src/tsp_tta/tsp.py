"""Problem representation: instances, distance matrices, tours, and the two
instance transformations used for augmentation (index permutation, rotation).

All types are immutable after construction and safe to share across workers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ROTATION_CENTER = (0.5, 0.5)


@dataclass(frozen=True)
class TspInstance:
    """N city coordinates on the plane (generated ones lie in the unit square)."""

    coords: np.ndarray  # (n, 2) float64

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 2 or c.shape[0] < 2:
            raise ValueError(f"instance needs (n>=2, 2) coordinates, got {c.shape}")
        c.flags.writeable = False
        object.__setattr__(self, "coords", c)

    @property
    def n(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class DistanceMatrix:
    """Pairwise Euclidean distances; consumed as a sequence of its n column vectors."""

    d: np.ndarray  # (n, n) float64

    def __post_init__(self):
        m = np.asarray(self.d, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"distance matrix must be square, got {m.shape}")
        m.flags.writeable = False
        object.__setattr__(self, "d", m)

    @property
    def n(self) -> int:
        return self.d.shape[0]


@dataclass(frozen=True)
class Tour:
    """A permutation of {0..n-1} read as a closed circuit."""

    order: np.ndarray  # (n,) int64

    def __post_init__(self):
        o = np.asarray(self.order, dtype=np.int64)
        if o.ndim != 1 or not _is_permutation(o):
            raise ValueError("tour must be a permutation of 0..n-1")
        o.flags.writeable = False
        object.__setattr__(self, "order", o)

    @property
    def n(self) -> int:
        return self.order.shape[0]


@dataclass(frozen=True)
class IndexPermutation:
    """A bijection sigma on {0..n-1}; sigma[i] is the new index of old city i."""

    sigma: np.ndarray  # (n,) int64

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=np.int64)
        if s.ndim != 1 or not _is_permutation(s):
            raise ValueError("sigma must be a permutation of 0..n-1")
        s.flags.writeable = False
        object.__setattr__(self, "sigma", s)

    @property
    def n(self) -> int:
        return self.sigma.shape[0]

    def inverse(self) -> "IndexPermutation":
        return IndexPermutation(np.argsort(self.sigma))

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.sigma, np.arange(self.n)))


def _is_permutation(a: np.ndarray) -> bool:
    n = a.shape[0]
    if n == 0:
        return False
    seen = np.zeros(n, dtype=bool)
    for v in a:
        if v < 0 or v >= n or seen[v]:
            return False
        seen[v] = True
    return True


def identity_permutation(n: int) -> IndexPermutation:
    return IndexPermutation(np.arange(n, dtype=np.int64))


def random_permutation(n: int, rng: np.random.Generator) -> IndexPermutation:
    """Uniform random permutation via Fisher-Yates."""
    sigma = np.arange(n, dtype=np.int64)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        sigma[i], sigma[j] = sigma[j], sigma[i]
    return IndexPermutation(sigma)


def generate_instance(n: int, rng: np.random.Generator) -> TspInstance:
    """n i.i.d. uniform points in the unit square."""
    if n < 2:
        raise ValueError(f"instance size must be >= 2, got {n}")
    return TspInstance(rng.random((n, 2)))


def generate_instances(n: int, count: int, rng: np.random.Generator) -> list[TspInstance]:
    return [generate_instance(n, rng) for _ in range(count)]


def distance_matrix(inst: TspInstance) -> DistanceMatrix:
    delta = inst.coords[:, None, :] - inst.coords[None, :, :]
    d = np.sqrt((delta**2).sum(axis=2))
    np.fill_diagonal(d, 0.0)
    return DistanceMatrix(d)


def tour_length(inst: TspInstance, tour: Tour) -> float:
    """Closed-circuit length. Summed with fsum so the result is identical for
    any cyclic shift or reversal of the same circuit (correctly rounded sum)."""
    if tour.n != inst.n:
        raise ValueError(f"tour size {tour.n} != instance size {inst.n}")
    c = inst.coords
    o = tour.order
    edges = []
    for i in range(len(o)):
        a = c[o[i]]
        b = c[o[(i + 1) % len(o)]]
        edges.append(math.hypot(a[0] - b[0], a[1] - b[1]))
    return math.fsum(edges)


def permute_instance(inst: TspInstance, perm: IndexPermutation) -> TspInstance:
    """Relabel cities: output city sigma[i] carries input city i's coordinates."""
    if perm.n != inst.n:
        raise ValueError(f"permutation size {perm.n} != instance size {inst.n}")
    out = np.empty_like(inst.coords)
    out[perm.sigma] = inst.coords
    return TspInstance(out)


def permute_matrix(dm: DistanceMatrix, perm: IndexPermutation) -> DistanceMatrix:
    """Simultaneous row-and-column relabeling: out[sigma[i], sigma[j]] = d[i, j]."""
    if perm.n != dm.n:
        raise ValueError(f"permutation size {perm.n} != matrix size {dm.n}")
    inv = perm.inverse().sigma
    return DistanceMatrix(dm.d[np.ix_(inv, inv)])


def map_tour_to_original(tour: Tour, perm: IndexPermutation) -> Tour:
    """Translate a tour over permuted indices back to original city labels."""
    inv = perm.inverse().sigma
    return Tour(inv[tour.order])


def rotate_instance(inst: TspInstance, k: int, m: int) -> TspInstance:
    """Rotate every point by k*2*pi/m about the square's center (0.5, 0.5).

    k=0 returns the coordinates bitwise unchanged so the identity variant is
    exact. Rotated points may leave the unit square; they are not clipped.
    """
    if m < 1 or not (0 <= k < m):
        raise ValueError(f"variant index k={k} out of range for m={m}")
    if k == 0:
        return TspInstance(inst.coords.copy())
    cx, cy = ROTATION_CENTER
    theta = 2.0 * math.pi * k / m
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    px = inst.coords[:, 0] - cx
    py = inst.coords[:, 1] - cy
    out = np.empty_like(inst.coords)
    out[:, 0] = cx + cos_t * px - sin_t * py
    out[:, 1] = cy + sin_t * px + cos_t * py
    return TspInstance(out)
