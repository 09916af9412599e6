"""Turn the step-wise policy into complete tours: greedy, sampling, beam.

Decoders are pure given (instance, params, seed) and safe to run in parallel
across instances or augmentation variants.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .model import (
    BatchDecoder,
    ModelConfig,
    PolicyParams,
    decode_step,
    encoder_memory,
    encoder_memory_batch,
)
from .tsp import Tour, TspInstance, tour_length


@dataclass(frozen=True)
class BeamConfig:
    width: int = 1

    def __post_init__(self):
        if self.width < 1:
            raise ValueError(f"beam width must be >= 1, got {self.width}")


@dataclass(frozen=True)
class DecodedTour:
    tour: Tour
    log_prob: float
    length: float


def _select_greedy(probs: np.ndarray) -> int:
    return int(np.argmax(probs))


def sample_from_probs(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Draw an index from a probability vector; zero-mass entries are never hit."""
    valid = np.flatnonzero(probs > 0.0)
    cdf = np.cumsum(probs[valid])
    r = rng.random() * cdf[-1]
    return int(valid[min(np.searchsorted(cdf, r, side="right"), valid.size - 1)])


def rollout(
    inst: TspInstance,
    params: PolicyParams,
    config: ModelConfig,
    select: Callable[[int, np.ndarray], int],
) -> tuple[Tour, Node]:
    """Run the policy for n steps; returns the tour and its scalar log-prob node.

    Builds a differentiable graph when grads are enabled, so REINFORCE can
    backpropagate through the same path inference uses.
    """
    n = config.n_cities
    memory = encoder_memory(inst, params, config)
    visited = np.zeros(n, dtype=bool)
    partial: list[int] = []
    logp: Node | None = None
    for step in range(n):
        dist = decode_step(memory, visited, partial, params, config)
        city = select(step, dist.probs)
        term = ad.log(ad.gather_rows(dist.node, np.array([city], dtype=np.intp)))
        logp = term if logp is None else ad.add(logp, term)
        partial.append(city)
        visited[city] = True
    return Tour(np.array(partial, dtype=np.int64)), ad.sum_all(logp)


def tour_log_prob(
    inst: TspInstance, tour: Tour, params: PolicyParams, config: ModelConfig
) -> Node:
    """Log-probability of producing a fixed tour (teacher-forced rollout)."""
    forced, logp = rollout(inst, params, config, lambda step, _: int(tour.order[step]))
    assert np.array_equal(forced.order, tour.order)
    return logp


def rollout_batch(
    instances: list[TspInstance],
    params: PolicyParams,
    config: ModelConfig,
    select: Callable[[int, np.ndarray], np.ndarray],
) -> tuple[np.ndarray, Node]:
    """Lock-step rollout of several same-size instances.

    ``select`` maps (step, (B, n) probability matrix) to a (B,) city vector.
    Returns the (B, n) tour matrix and the (B,) log-prob node. Builds one
    differentiable graph for the whole batch when grads are enabled.
    """
    n = config.n_cities
    b = len(instances)
    memory = encoder_memory_batch(instances, params, config)
    decoder = BatchDecoder(memory, params, config)
    visited = np.zeros((b, n), dtype=bool)
    orders = np.empty((b, n), dtype=np.int64)
    logp: Node | None = None
    rows = np.arange(b)
    for step in range(n):
        probs_node = decoder.step_probs(visited)
        cities = np.asarray(select(step, probs_node.value), dtype=np.int64)
        term = ad.log(ad.pick_batch(probs_node, cities))
        logp = term if logp is None else ad.add(logp, term)
        orders[:, step] = cities
        visited[rows, cities] = True
        if step < n - 1:
            decoder.advance(cities)
    return orders, logp


def decode_greedy_batch(
    instances: list[TspInstance], params: PolicyParams, config: ModelConfig
) -> list[DecodedTour]:
    """Batched argmax decoding; one DecodedTour per instance."""
    with ad.no_grad():
        orders, logp = rollout_batch(
            instances, params, config, lambda _, p: p.argmax(axis=1)
        )
    return [
        DecodedTour(Tour(orders[i]), float(logp.value[i]), tour_length(inst, Tour(orders[i])))
        for i, inst in enumerate(instances)
    ]


def decode_sample_batch(
    instances: list[TspInstance],
    params: PolicyParams,
    config: ModelConfig,
    rng: np.random.Generator,
) -> list[DecodedTour]:
    """Batched stochastic decoding; rng is consumed step-major, then by
    instance order within each step."""
    with ad.no_grad():
        orders, logp = rollout_batch(
            instances,
            params,
            config,
            lambda _, p: np.array([sample_from_probs(p[i], rng) for i in range(p.shape[0])]),
        )
    return [
        DecodedTour(Tour(orders[i]), float(logp.value[i]), tour_length(inst, Tour(orders[i])))
        for i, inst in enumerate(instances)
    ]


def decode_greedy(
    inst: TspInstance, params: PolicyParams, config: ModelConfig
) -> DecodedTour:
    """Argmax decoding; deterministic, ties to the lowest city index."""
    with ad.no_grad():
        tour, logp = rollout(inst, params, config, lambda _, p: _select_greedy(p))
    return DecodedTour(tour, float(logp.value), tour_length(inst, tour))


def decode_sample(
    inst: TspInstance, params: PolicyParams, config: ModelConfig, rng: np.random.Generator
) -> DecodedTour:
    """Stochastic decoding from the masked step distributions."""
    with ad.no_grad():
        tour, logp = rollout(
            inst, params, config, lambda _, p: sample_from_probs(p, rng)
        )
    return DecodedTour(tour, float(logp.value), tour_length(inst, tour))


def decode_beam(
    inst: TspInstance, params: PolicyParams, config: ModelConfig, beam: BeamConfig
) -> DecodedTour:
    """Beam search on summed step log-probs; the final pick among completed
    candidates is the minimum tour length."""
    n = config.n_cities
    width = beam.width
    with ad.no_grad():
        memory = encoder_memory(inst, params, config)
        beams: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
        for _ in range(n):
            candidates: list[tuple[float, tuple[int, ...]]] = []
            for logp, partial in beams:
                visited = np.zeros(n, dtype=bool)
                visited[list(partial)] = True
                dist = decode_step(memory, visited, list(partial), params, config)
                probs = dist.probs
                for city in np.flatnonzero(probs > 0.0):
                    candidates.append(
                        (logp + float(np.log(probs[city])), partial + (int(city),))
                    )
            candidates.sort(key=lambda c: (-c[0], c[1]))
            beams = candidates[:width]
    best = min(
        beams,
        key=lambda c: (tour_length(inst, Tour(np.array(c[1], dtype=np.int64))), -c[0], c[1]),
    )
    tour = Tour(np.array(best[1], dtype=np.int64))
    return DecodedTour(tour, best[0], tour_length(inst, tour))
