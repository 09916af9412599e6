"""Ground-truth and reference solvers at desk scale: exhaustive enumeration,
Bellman-Held-Karp subset DP, nearest-neighbor construction, and 2-opt.

Ties are always broken toward the lowest index / lexicographically smallest
tour so results are deterministic.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .tsp import DistanceMatrix, Tour, TspInstance, distance_matrix, tour_length

BRUTE_FORCE_MAX = 10
HELD_KARP_MAX = 16
TWO_OPT_MAX_PASSES = 10_000


class SizeLimitError(ValueError):
    """Instance too large for an exact solver."""


@dataclass(frozen=True)
class SolveResult:
    tour: Tour
    length: float
    method: str


def _result(inst: TspInstance, order: np.ndarray, method: str) -> SolveResult:
    tour = Tour(order)
    return SolveResult(tour=tour, length=tour_length(inst, tour), method=method)


def solve_brute_force(inst: TspInstance) -> SolveResult:
    """Enumerate all (n-1)!/2 distinct circuits: fix city 0, halve by reversal."""
    n = inst.n
    if n > BRUTE_FORCE_MAX:
        raise SizeLimitError(f"brute force capped at n <= {BRUTE_FORCE_MAX}, got {n}")
    d = distance_matrix(inst).d
    if n == 2:
        return _result(inst, np.array([0, 1]), "brute")
    rest = list(range(1, n))
    perms = np.array(
        [p for p in itertools.permutations(rest) if p[0] < p[-1]], dtype=np.int64
    )
    tours = np.concatenate(
        [np.zeros((perms.shape[0], 1), dtype=np.int64), perms], axis=1
    )
    lengths = d[tours, np.roll(tours, -1, axis=1)].sum(axis=1)
    best = int(np.argmin(lengths))
    return _result(inst, tours[best], "brute")


def solve_held_karp(inst: TspInstance) -> SolveResult:
    """Exact subset DP over cities 1..n-1 with city 0 fixed as the anchor.

    C[S][j] = cost of the cheapest path 0 -> ... -> j visiting exactly the
    cities in S; closed with the j -> 0 edge at the end. Parent pointers
    reconstruct the optimal circuit.
    """
    n = inst.n
    if n > HELD_KARP_MAX:
        raise SizeLimitError(f"held-karp capped at n <= {HELD_KARP_MAX}, got {n}")
    d = distance_matrix(inst).d
    if n == 2:
        return _result(inst, np.array([0, 1]), "held-karp")

    m = n - 1  # cities 1..n-1 encoded as bits 0..m-1
    full = (1 << m) - 1
    cost = np.full((full + 1, m), np.inf)
    parent = np.full((full + 1, m), -1, dtype=np.int8)
    for j in range(m):
        cost[1 << j, j] = d[0, j + 1]

    members: list[np.ndarray] = [np.array([], dtype=np.intp)] * (full + 1)
    for mask in range(1, full + 1):
        members[mask] = np.flatnonzero(
            np.fromiter(((mask >> b) & 1 for b in range(m)), dtype=bool, count=m)
        )

    for mask in range(1, full + 1):
        idx = members[mask]
        if idx.size < 2:
            continue
        for j in idx:
            prev = mask ^ (1 << j)
            prev_idx = members[prev]
            cand = cost[prev, prev_idx] + d[prev_idx + 1, j + 1]
            k = int(np.argmin(cand))
            cost[mask, j] = cand[k]
            parent[mask, j] = prev_idx[k]

    closing = cost[full] + d[1:, 0]
    j = int(np.argmin(closing))
    order = [j + 1]
    mask = full
    while parent[mask, j] >= 0:
        pj = int(parent[mask, j])
        mask ^= 1 << j
        j = pj
        order.append(j + 1)
    order.append(0)
    order.reverse()
    return _result(inst, np.array(order, dtype=np.int64), "held-karp")


def solve_nearest_neighbor(inst: TspInstance, start: int = 0) -> SolveResult:
    """Greedy nearest-unvisited construction; ties go to the lowest index."""
    n = inst.n
    if not (0 <= start < n):
        raise ValueError(f"start {start} out of range for n={n}")
    d = distance_matrix(inst).d
    visited = np.zeros(n, dtype=bool)
    order = [start]
    visited[start] = True
    cur = start
    for _ in range(n - 1):
        dist = np.where(visited, np.inf, d[cur])
        cur = int(np.argmin(dist))
        order.append(cur)
        visited[cur] = True
    return _result(inst, np.array(order, dtype=np.int64), "nn")


def improve_2opt(inst: TspInstance, tour: Tour) -> SolveResult:
    """First-improvement 2-opt with pass restart until no exchange helps.

    Strictly decreasing lengths guarantee termination; the pass cap only
    guards against an implementation bug.
    """
    if tour.n != inst.n:
        raise ValueError(f"tour size {tour.n} != instance size {inst.n}")
    n = inst.n
    d = distance_matrix(inst).d
    order = tour.order.copy()
    for _ in range(TWO_OPT_MAX_PASSES):
        improved = False
        for i in range(n - 1):
            a, b = order[i], order[i + 1]
            for j in range(i + 2, n):
                if i == 0 and j == n - 1:
                    continue  # same pair of edges
                c, e = order[j], order[(j + 1) % n]
                delta = d[a, c] + d[b, e] - d[a, b] - d[c, e]
                if delta < -1e-12:
                    order[i + 1 : j + 1] = order[i + 1 : j + 1][::-1]
                    improved = True
                    break
            if improved:
                break
        if not improved:
            return _result(inst, order, "2opt")
    raise RuntimeError("2-opt exceeded the pass cap; improvement loop is broken")


def solve_2opt_from_nn(inst: TspInstance, start: int = 0) -> SolveResult:
    """Reference heuristic for n beyond exact range: NN construction + 2-opt."""
    return improve_2opt(inst, solve_nearest_neighbor(inst, start).tour)


def oracle_lengths(
    instances: list[TspInstance], method: str = "held-karp"
) -> np.ndarray:
    """Reference tour length per instance ("held-karp" exact or "2opt" heuristic)."""
    if method == "held-karp":
        return np.array([solve_held_karp(i).length for i in instances])
    if method == "2opt":
        return np.array([solve_2opt_from_nn(i).length for i in instances])
    raise ValueError(f"unknown oracle method: {method}")
