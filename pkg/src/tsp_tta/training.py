"""REINFORCE policy-gradient training with a frozen best-parameters baseline.

Per instance the advantage is sampled-tour length minus the baseline policy's
greedy length; the surrogate loss weights the sampled tour's negative
log-probability by that (detached) advantage. The baseline is replaced by a
copy of the current parameters whenever they improve on a held-out set.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .decoding import (
    decode_greedy,
    decode_greedy_batch,
    rollout_batch,
    sample_from_probs,
)
from .model import ModelConfig, PolicyParams, copy_params, init_params
from .tsp import Tour, TspInstance, generate_instances, tour_length


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    n_cities: int = 10
    epochs: int = 30
    batch_size: int = 64
    instances_per_epoch: int = 2000
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # Minimum held-out improvement before the baseline is replaced (0 = any).
    baseline_margin: float = 0.0
    grad_clip: float = 1.0
    val_size: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.instances_per_epoch < 1:
            raise ValueError("epochs/batch_size/instances_per_epoch must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: PolicyParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.value) for k, p in params.items()},
            v={k: np.zeros_like(p.value) for k, p in params.items()},
        )


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    train_len: float
    val_len: float
    baseline_len: float


def reinforce_batch(
    params: PolicyParams,
    baseline: PolicyParams,
    batch: list[TspInstance],
    config: ModelConfig,
    rng: np.random.Generator,
) -> tuple[float, dict[str, np.ndarray], list[float]]:
    """One surrogate-loss evaluation over a batch (lock-step batched rollout).

    Per instance the surrogate term is advantage * log-prob of the sampled
    tour, advantage = sampled length - baseline greedy length. Advantages
    enter as plain floats so no gradient flows through the reward or the
    baseline. Returns (loss, gradient map, sampled tour lengths).
    """
    for p in params.values():
        p.grad = None
    orders, logp = rollout_batch(
        params=params,
        instances=batch,
        config=config,
        select=lambda _, p: np.array(
            [sample_from_probs(p[i], rng) for i in range(p.shape[0])]
        ),
    )
    sampled_lengths = [
        tour_length(inst, Tour(orders[i])) for i, inst in enumerate(batch)
    ]
    baseline_lengths = [d.length for d in decode_greedy_batch(batch, baseline, config)]
    advantages = np.array(sampled_lengths) - np.array(baseline_lengths)
    loss_node = ad.weighted_sum(logp, advantages / len(batch))
    loss = float(loss_node.value)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite surrogate loss: {loss}")
    ad.backward(loss_node)
    grads = {
        k: (p.grad if p.grad is not None else np.zeros_like(p.value))
        for k, p in params.items()
    }
    return loss, grads, sampled_lengths


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float((g**2).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= factor
    return total


def adam_step(
    params: PolicyParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
) -> AdamState:
    """Standard bias-corrected Adam update, applied in place."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value = p.value - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def mean_greedy_length(
    params: PolicyParams, val_set: list[TspInstance], config: ModelConfig
) -> float:
    return float(np.mean([d.length for d in decode_greedy_batch(val_set, params, config)]))


def maybe_update_baseline(
    params: PolicyParams,
    baseline: PolicyParams,
    val_set: list[TspInstance],
    config: ModelConfig,
    margin: float = 0.0,
    baseline_val: float | None = None,
) -> tuple[PolicyParams, float, float]:
    """Replace the baseline with a copy of the current parameters when they
    improve the held-out greedy mean by more than ``margin``.

    Returns (baseline, current val mean, baseline val mean). ``baseline_val``
    may carry the cached mean of the incoming baseline to skip re-decoding.
    """
    cur = mean_greedy_length(params, val_set, config)
    base = (
        baseline_val
        if baseline_val is not None
        else mean_greedy_length(baseline, val_set, config)
    )
    if cur < base - margin:
        return copy_params(params), cur, cur
    return baseline, cur, base


def train(
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    train_pool: list[TspInstance] | None = None,
    val_set: list[TspInstance] | None = None,
) -> tuple[PolicyParams, list[EpochRow]]:
    """Full training run on fresh instances each epoch.

    Epoch streams are generated from the seed, or drawn as disjoint slices of
    ``train_pool`` when one is supplied (it must cover epochs * instances_per_
    epoch). Deterministic given the seed in single-worker mode. epochs=0
    returns the initialized parameters untouched.
    """
    if model_config is None:
        model_config = ModelConfig(n_cities=config.n_cities)
    if model_config.n_cities != config.n_cities:
        raise ValueError("model n_cities differs from training n_cities")
    if train_pool is not None:
        need = config.epochs * config.instances_per_epoch
        if len(train_pool) < need:
            raise ValueError(
                f"training pool has {len(train_pool)} instances; "
                f"{need} needed for fresh instances every epoch"
            )
    rng = np.random.default_rng(config.seed)
    if val_set is None:
        val_set = generate_instances(config.n_cities, config.val_size, rng)
    params = init_params(model_config, config.seed)
    baseline = copy_params(params)
    baseline_val = mean_greedy_length(baseline, val_set, model_config)
    state = AdamState.for_params(params)
    rows: list[EpochRow] = []
    for epoch in range(config.epochs):
        if train_pool is not None:
            lo = epoch * config.instances_per_epoch
            pool = train_pool[lo : lo + config.instances_per_epoch]
        else:
            pool = generate_instances(config.n_cities, config.instances_per_epoch, rng)
        epoch_lengths: list[float] = []
        for lo in range(0, len(pool), config.batch_size):
            batch = pool[lo : lo + config.batch_size]
            _, grads, lens = reinforce_batch(params, baseline, batch, model_config, rng)
            epoch_lengths.extend(lens)
            clip_global_norm(grads, config.grad_clip)
            adam_step(
                params,
                grads,
                state,
                config.learning_rate,
                config.adam_beta1,
                config.adam_beta2,
                config.adam_eps,
            )
        baseline, val_len, baseline_val = maybe_update_baseline(
            params, baseline, val_set, model_config, config.baseline_margin, baseline_val
        )
        rows.append(
            EpochRow(
                epoch=epoch,
                train_len=float(np.mean(epoch_lengths)),
                val_len=val_len,
                baseline_len=baseline_val,
            )
        )
    return params, rows


def write_log_csv(path, rows: list[EpochRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("epoch,train_len,val_len,baseline_len\n")
        for r in rows:
            fh.write(f"{r.epoch},{r.train_len:.9f},{r.val_len:.9f},{r.baseline_len:.9f}\n")
