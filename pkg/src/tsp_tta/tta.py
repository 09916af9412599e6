"""Test-time augmentation: decode M transformed copies of an instance and
keep the shortest tour, mapped back to the original city labels.

Variant 0 is always the untouched instance, so M=1 reduces exactly to plain
greedy decoding and the aggregate can never be worse than it.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .decoding import (
    BeamConfig,
    DecodedTour,
    decode_beam,
    decode_greedy,
    decode_greedy_batch,
)
from .model import ModelConfig, PolicyParams

# Variants are decoded lock-step in groups of this size; bounds graph memory.
DECODE_CHUNK = 64
from .tsp import (
    IndexPermutation,
    TspInstance,
    identity_permutation,
    map_tour_to_original,
    permute_instance,
    random_permutation,
    rotate_instance,
    tour_length,
)

POLICY_PERMUTATION = "permutation"
POLICY_ROTATION = "rotation"
POLICY_ROTATION_PERMUTATION = "rotation+permutation"
POLICIES = (POLICY_PERMUTATION, POLICY_ROTATION, POLICY_ROTATION_PERMUTATION)


@dataclass(frozen=True)
class TtaConfig:
    augment_size: int = 1
    policy: str = POLICY_PERMUTATION
    seed: int = 0

    def __post_init__(self):
        if self.augment_size < 1:
            raise ValueError(f"augment size must be >= 1, got {self.augment_size}")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown augmentation policy: {self.policy}")


@dataclass(frozen=True)
class TtaOutcome:
    best: DecodedTour  # tour in original city indexing
    all_lengths: np.ndarray  # length per variant, measured on the original instance
    variant_of_best: int


@dataclass(frozen=True)
class _Variant:
    instance: TspInstance
    perm: IndexPermutation  # identity when the variant did not relabel cities


def make_variants(inst: TspInstance, m: int, policy: str, seed: int) -> list[_Variant]:
    """Variant 0 is the identity; the rest follow the augmentation policy.

    Permutations are sampled i.i.d. uniform (with replacement, no dedup);
    rotations use the equally spaced angles k*2*pi/m.
    """
    rng = np.random.default_rng(seed)
    ident = identity_permutation(inst.n)
    variants = [_Variant(inst, ident)]
    for k in range(1, m):
        if policy == POLICY_PERMUTATION:
            sigma = random_permutation(inst.n, rng)
            variants.append(_Variant(permute_instance(inst, sigma), sigma))
        elif policy == POLICY_ROTATION:
            variants.append(_Variant(rotate_instance(inst, k, m), ident))
        else:
            rotated = rotate_instance(inst, k, m)
            sigma = random_permutation(inst.n, rng)
            variants.append(_Variant(permute_instance(rotated, sigma), sigma))
    return variants


def parallel_map(fn, items, jobs: int = 1) -> list:
    """Apply fn preserving order; jobs > 1 uses a thread pool."""
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _remap(decoded: DecodedTour, variant: _Variant, original: TspInstance) -> DecodedTour:
    if variant.instance is original:
        return decoded  # identity variant: bitwise the plain decode
    if variant.perm.is_identity():
        tour = decoded.tour  # rotation only; city labels unchanged
    else:
        tour = map_tour_to_original(decoded.tour, variant.perm)
    return DecodedTour(tour, decoded.log_prob, tour_length(original, tour))


def _decode_variant(
    variant: _Variant,
    original: TspInstance,
    params: PolicyParams,
    config: ModelConfig,
    beam: BeamConfig | None,
) -> DecodedTour:
    if beam is None:
        decoded = decode_greedy(variant.instance, params, config)
    else:
        decoded = decode_beam(variant.instance, params, config, beam)
    return _remap(decoded, variant, original)


def _decode_variants(
    variants: list[_Variant],
    original: TspInstance,
    params: PolicyParams,
    config: ModelConfig,
    beam: BeamConfig | None,
    jobs: int,
) -> list[DecodedTour]:
    """Variant 0 goes through the plain single-instance decode (exactness
    contract for the identity); the rest decode lock-step in chunks."""
    if beam is not None:
        return parallel_map(
            lambda v: _decode_variant(v, original, params, config, beam), variants, jobs
        )
    head = [_decode_variant(variants[0], original, params, config, None)]
    rest = variants[1:]
    chunks = [rest[i : i + DECODE_CHUNK] for i in range(0, len(rest), DECODE_CHUNK)]

    def decode_chunk(chunk: list[_Variant]) -> list[DecodedTour]:
        decoded = decode_greedy_batch([v.instance for v in chunk], params, config)
        return [_remap(d, v, original) for d, v in zip(decoded, chunk)]

    out = head
    for chunk_result in parallel_map(decode_chunk, chunks, jobs):
        out.extend(chunk_result)
    return out


def tta_solve(
    inst: TspInstance,
    params: PolicyParams,
    config: ModelConfig,
    tta: TtaConfig,
    jobs: int = 1,
    beam: BeamConfig | None = None,
) -> TtaOutcome:
    """Decode every variant and keep the minimum-length tour (original labels).

    Greedy decoding is the default inside the loop; pass ``beam`` to decode
    each variant with beam search instead.
    """
    if inst.n != config.n_cities:
        raise ValueError(f"instance size {inst.n} != model n_cities {config.n_cities}")
    variants = make_variants(inst, tta.augment_size, tta.policy, tta.seed)
    decoded = _decode_variants(variants, inst, params, config, beam, jobs)
    lengths = np.array([d.length for d in decoded])
    best_idx = int(np.argmin(lengths))
    return TtaOutcome(best=decoded[best_idx], all_lengths=lengths, variant_of_best=best_idx)


@dataclass(frozen=True)
class SweepRow:
    m: int
    mean_gap: float
    std_gap: float
    mean_len: float
    wall_time_ms: float


def gap_vs_m_sweep(
    instances: list[TspInstance],
    params: PolicyParams,
    config: ModelConfig,
    m_values: list[int],
    seed: int,
    opt_lens: np.ndarray,
    policy: str = POLICY_PERMUTATION,
    jobs: int = 1,
) -> tuple[list[SweepRow], np.ndarray]:
    """Mean/std optimality gap for each M, using nested variant sets.

    Every instance decodes the variant list for max(m_values) once; the set
    for a smaller M is a prefix of that list, so each instance's best length
    is non-increasing in M by construction. Returns the rows and the
    (len(m_values), len(instances)) matrix of per-instance best lengths.
    """
    if list(m_values) != sorted(m_values) or len(m_values) == 0 or m_values[0] < 1:
        raise ValueError("m_values must be ascending positive integers")
    opt_lens = np.asarray(opt_lens, dtype=np.float64)
    if opt_lens.shape != (len(instances),):
        raise ValueError("opt_lens must align with instances")
    m_max = m_values[-1]
    k = len(instances)
    lengths = np.empty((k, m_max))
    decode_ms = np.empty((k, m_max))
    for i, inst in enumerate(instances):
        variants = make_variants(inst, m_max, policy, seed + i)
        t0 = time.perf_counter()
        head = _decode_variant(variants[0], inst, params, config, None)
        decode_ms[i, 0] = (time.perf_counter() - t0) * 1000.0
        lengths[i, 0] = head.length
        rest = variants[1:]
        chunks = [rest[c : c + DECODE_CHUNK] for c in range(0, len(rest), DECODE_CHUNK)]

        def decode_chunk(chunk):
            t0 = time.perf_counter()
            decoded = decode_greedy_batch([v.instance for v in chunk], params, config)
            ms = (time.perf_counter() - t0) * 1000.0
            return [_remap(d, v, inst) for d, v in zip(decoded, chunk)], ms

        pos = 1
        for chunk_result, ms in parallel_map(decode_chunk, chunks, jobs):
            span = len(chunk_result)
            lengths[i, pos : pos + span] = [d.length for d in chunk_result]
            # wall time attributed evenly across the chunk's variants
            decode_ms[i, pos : pos + span] = ms / span
            pos += span

    rows: list[SweepRow] = []
    best_matrix = np.empty((len(m_values), k))
    prefix_best = np.minimum.accumulate(lengths, axis=1)
    for row_idx, m in enumerate(m_values):
        best = prefix_best[:, m - 1]
        best_matrix[row_idx] = best
        gaps = best / opt_lens - 1.0
        rows.append(
            SweepRow(
                m=m,
                mean_gap=float(gaps.mean()),
                std_gap=float(gaps.std()),
                mean_len=float(best.mean()),
                wall_time_ms=float(decode_ms[:, :m].sum()),
            )
        )
    return rows, best_matrix


def write_sweep_csv(path, rows: list[SweepRow], m_values: list[int]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("# m_values=" + ",".join(str(m) for m in m_values) + "\n")
        fh.write("M,mean_gap,std_gap,mean_len,wall_time_ms\n")
        for r in rows:
            fh.write(
                f"{r.m},{r.mean_gap:.9f},{r.std_gap:.9f},{r.mean_len:.9f},{r.wall_time_ms:.3f}\n"
            )
