"""Order-sensitive transformer policy over distance-matrix column sequences.

The encoder embeds the n distance-matrix columns (or raw coordinates in the
ablation mode) plus a learned start token, adds sinusoidal position signals,
and runs post-norm self-attention layers. The decoder autoregressively emits
a masked distribution over the next city, attending over its chosen-city
history and cross-attending to the encoder memory.

Position signals are what make the policy sensitive to city ordering, which
is exactly what permutation-based test-time augmentation exploits.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .tsp import TspInstance, distance_matrix

INPUT_DISTANCE_MATRIX = "distance_matrix"
INPUT_COORDINATES = "coordinates"

ATTENTION_MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; the city count is fixed per model."""

    n_cities: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 1
    d_ff: int = 256
    input_mode: str = INPUT_DISTANCE_MATRIX
    use_pe: bool = True

    def __post_init__(self):
        if self.n_cities < 2:
            raise ValueError(f"n_cities must be >= 2, got {self.n_cities}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.input_mode not in (INPUT_DISTANCE_MATRIX, INPUT_COORDINATES):
            raise ValueError(f"unknown input_mode: {self.input_mode}")

    @property
    def input_width(self) -> int:
        return self.n_cities if self.input_mode == INPUT_DISTANCE_MATRIX else 2


# Parameters are a named map; insertion order doubles as the checkpoint
# manifest order.
PolicyParams = dict[str, Node]


@functools.lru_cache(maxsize=32)
def pe_table(n_positions: int, d_model: int) -> np.ndarray:
    """Rows t=0..n_positions-1 of the sinusoidal encoding, cached read-only.

    pe[t, 2j] = sin(t / 10000^(2j/d)), pe[t, 2j+1] = cos(t / 10000^(2j/d)).
    """
    t = np.arange(n_positions, dtype=np.float64)[:, None]
    j = np.arange(0, d_model, 2, dtype=np.float64)
    freq = np.power(10000.0, j / d_model)
    table = np.empty((n_positions, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(t / freq)
    table[:, 1::2] = np.cos(t / freq[: d_model // 2])
    table.flags.writeable = False
    return table


def positional_encoding(t: int, d_model: int) -> np.ndarray:
    """Single sinusoidal position vector for position t."""
    if t < 0:
        raise ValueError(f"position must be >= 0, got {t}")
    return pe_table(t + 1, d_model)[t]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Full parameter schema; one entry per learnable tensor."""
    d, w, n = config.d_model, config.input_width, config.n_cities
    shapes: dict[str, tuple[int, ...]] = {
        "embed.w": (w, d),
        "start": (1, w),
    }
    for i in range(config.n_enc_layers):
        p = f"enc.{i}"
        for name in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{name}"] = (d, d)
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, config.d_ff)
        shapes[f"{p}.ffn.b1"] = (config.d_ff,)
        shapes[f"{p}.ffn.w2"] = (config.d_ff, d)
        shapes[f"{p}.ffn.b2"] = (d,)
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
    for i in range(config.n_dec_layers):
        p = f"dec.{i}"
        for blk in ("self", "cross"):
            for name in ("wq", "wk", "wv", "wo"):
                shapes[f"{p}.{blk}.{name}"] = (d, d)
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, config.d_ff)
        shapes[f"{p}.ffn.b1"] = (config.d_ff,)
        shapes[f"{p}.ffn.w2"] = (config.d_ff, d)
        shapes[f"{p}.ffn.b2"] = (d,)
        shapes[f"{p}.ln3.g"] = (d,)
        shapes[f"{p}.ln3.b"] = (d,)
    shapes["out.w"] = (d, n)
    shapes["out.b"] = (n,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> PolicyParams:
    """Deterministic initialization: uniform(+-1/sqrt(fan_in)) weights,
    unit layer-norm gains, zero biases, small-normal start token."""
    rng = np.random.default_rng(seed)
    params: PolicyParams = {}
    for name, shape in param_shapes(config).items():
        if name == "start":
            arr = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith((".b", ".b1", ".b2")) or name == "out.b":
            arr = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Node(np.asarray(arr, dtype=np.float64))
    return params


def copy_params(params: PolicyParams) -> PolicyParams:
    return {name: Node(node.value.copy()) for name, node in params.items()}


def model_input(inst: TspInstance, config: ModelConfig) -> np.ndarray:
    """Raw (n, width) input rows: distance-matrix columns or coordinates."""
    if inst.n != config.n_cities:
        raise ValueError(f"instance size {inst.n} != model n_cities {config.n_cities}")
    if config.input_mode == INPUT_DISTANCE_MATRIX:
        return distance_matrix(inst).d
    return inst.coords


def embed_inputs(raw: np.ndarray, params: PolicyParams, config: ModelConfig) -> Node:
    """Linear map of the start token plus the n input rows, with the position
    signal added at t=0 (start) and t=i (city i) when enabled."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (config.n_cities, config.input_width):
        raise ValueError(
            f"input shape {raw.shape} != ({config.n_cities}, {config.input_width})"
        )
    seq = ad.concat([params["start"], Node(raw)], axis=0)
    emb = ad.matmul(seq, params["embed.w"])
    if config.use_pe:
        emb = ad.add(emb, Node(pe_table(config.n_cities + 1, config.d_model)))
    return emb


def _attention(
    x: Node,
    kv: Node,
    params: PolicyParams,
    prefix: str,
    config: ModelConfig,
    mask: np.ndarray | None = None,
) -> Node:
    """Multi-head attention with queries from x and keys/values from kv."""
    q = ad.matmul(x, params[f"{prefix}.wq"])
    k = ad.matmul(kv, params[f"{prefix}.wk"])
    v = ad.matmul(kv, params[f"{prefix}.wv"])
    heads = ad.multi_head_attention(q, k, v, config.n_heads, mask)
    return ad.matmul(heads, params[f"{prefix}.wo"])


def _ffn(x: Node, params: PolicyParams, prefix: str) -> Node:
    hidden = ad.relu(ad.add_bias(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return ad.add_bias(ad.matmul(hidden, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _ln(x: Node, params: PolicyParams, prefix: str) -> Node:
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


@functools.lru_cache(maxsize=64)
def _causal_mask(size: int) -> np.ndarray:
    mask = np.triu(np.full((size, size), ATTENTION_MASK_VALUE), k=1)
    mask.flags.writeable = False
    return mask


def encode(embedded: Node, params: PolicyParams, config: ModelConfig) -> Node:
    """Post-norm encoder stack; returns the (n+1, d_model) memory."""
    x = embedded
    for i in range(config.n_enc_layers):
        p = f"enc.{i}"
        x = _ln(ad.add(x, _attention(x, x, params, f"{p}.attn", config)), params, f"{p}.ln1")
        x = _ln(ad.add(x, _ffn(x, params, f"{p}.ffn")), params, f"{p}.ln2")
    return x


def encoder_memory(inst: TspInstance, params: PolicyParams, config: ModelConfig) -> Node:
    return encode(embed_inputs(model_input(inst, config), params, config), params, config)


@dataclass
class StepDistribution:
    """Masked next-city distribution; visited cities carry exactly zero mass."""

    node: Node

    @property
    def probs(self) -> np.ndarray:
        return self.node.value


def embed_inputs_batch(raws: np.ndarray, params: PolicyParams, config: ModelConfig) -> Node:
    """Batched embedding: raws is (B, n, width) -> (B, n+1, d_model)."""
    raws = np.asarray(raws, dtype=np.float64)
    b = raws.shape[0]
    if raws.shape[1:] != (config.n_cities, config.input_width):
        raise ValueError(
            f"input shape {raws.shape} != (B, {config.n_cities}, {config.input_width})"
        )
    ones = Node(np.ones((b, 1, 1)))
    start_rows = ad.matmul_batch(ones, params["start"])
    seq = ad.concat([start_rows, Node(raws)], axis=1)
    emb = ad.matmul_batch(seq, params["embed.w"])
    if config.use_pe:
        emb = ad.add_const(emb, pe_table(config.n_cities + 1, config.d_model))
    return emb


def _attention_batch(
    x: Node,
    kv: Node,
    params: PolicyParams,
    prefix: str,
    config: ModelConfig,
    mask: np.ndarray | None = None,
) -> Node:
    q = ad.matmul_batch(x, params[f"{prefix}.wq"])
    k = ad.matmul_batch(kv, params[f"{prefix}.wk"])
    v = ad.matmul_batch(kv, params[f"{prefix}.wv"])
    heads = ad.multi_head_attention(q, k, v, config.n_heads, mask)
    return ad.matmul_batch(heads, params[f"{prefix}.wo"])


def _ffn_batch(x: Node, params: PolicyParams, prefix: str) -> Node:
    hidden = ad.relu(
        ad.add_bias(ad.matmul_batch(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"])
    )
    return ad.add_bias(ad.matmul_batch(hidden, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def encode_batch(embedded: Node, params: PolicyParams, config: ModelConfig) -> Node:
    """Batched post-norm encoder stack over (B, n+1, d_model) embeddings."""
    x = embedded
    for i in range(config.n_enc_layers):
        p = f"enc.{i}"
        x = _ln(
            ad.add(x, _attention_batch(x, x, params, f"{p}.attn", config)),
            params,
            f"{p}.ln1",
        )
        x = _ln(ad.add(x, _ffn_batch(x, params, f"{p}.ffn")), params, f"{p}.ln2")
    return x


def encoder_memory_batch(instances, params: PolicyParams, config: ModelConfig) -> Node:
    raws = np.stack([model_input(inst, config) for inst in instances])
    return encode_batch(embed_inputs_batch(raws, params, config), params, config)


class BatchDecoder:
    """Lock-step auto-regressive decoding of a batch of same-size instances.

    Mirrors ``decode_step`` exactly, but runs one step for B instances at a
    time over a shared growing history. Usage: alternate ``step_probs`` and
    ``advance`` for n steps.
    """

    def __init__(self, memory: Node, params: PolicyParams, config: ModelConfig):
        self.memory = memory
        self.params = params
        self.config = config
        self.batch = memory.value.shape[0]
        ones = Node(np.ones((self.batch, 1, 1)))
        start_emb = ad.matmul_batch(
            ad.matmul_batch(ones, params["start"]), params["embed.w"]
        )
        pe = pe_table(config.n_cities, config.d_model)
        self.rows: list[Node] = [ad.add_const(start_emb, pe[0])]
        self._pe = pe

    def step_probs(self, visited: np.ndarray) -> Node:
        """Masked next-city distribution for every instance: (B, n)."""
        cfg = self.config
        steps = len(self.rows)
        x = self.rows[0] if steps == 1 else ad.concat(self.rows, axis=1)
        for i in range(cfg.n_dec_layers):
            p = f"dec.{i}"
            self_attn = _attention_batch(
                x, x, self.params, f"{p}.self", cfg, mask=_causal_mask(steps)
            )
            x = _ln(ad.add(x, self_attn), self.params, f"{p}.ln1")
            cross = _attention_batch(x, self.memory, self.params, f"{p}.cross", cfg)
            x = _ln(ad.add(x, cross), self.params, f"{p}.ln2")
            x = _ln(ad.add(x, _ffn_batch(x, self.params, f"{p}.ffn")), self.params, f"{p}.ln3")
        last = ad.gather_rows_batch(x, np.full(self.batch, steps - 1))
        logits = ad.reshape(
            ad.add_bias(ad.matmul_batch(last, self.params["out.w"]), self.params["out.b"]),
            (self.batch, cfg.n_cities),
        )
        return ad.softmax_batch(logits, np.array(visited, dtype=bool))

    def advance(self, chosen: np.ndarray) -> None:
        """Append the chosen cities' memory rows (with the next step's
        position signal) to the decoder history."""
        t = len(self.rows)
        row = ad.gather_rows_batch(self.memory, np.asarray(chosen, dtype=np.intp) + 1)
        self.rows.append(ad.add_const(row, self._pe[t]))


def decode_step(
    memory: Node,
    visited: np.ndarray,
    partial: list[int],
    params: PolicyParams,
    config: ModelConfig,
) -> StepDistribution:
    """One autoregressive step: history self-attention (causal), cross-attention
    to the encoder memory, feed-forward, then masked softmax over cities.

    The decoder sequence is the embedded start token followed by the encoder-
    memory rows of the already-chosen cities, each offset by the position
    signal of its step index.
    """
    n = config.n_cities
    visited = np.asarray(visited, dtype=bool)
    if visited.shape != (n,):
        raise ValueError(f"visited must have shape ({n},)")
    if len(partial) >= n:
        raise ValueError("all cities already visited")
    if int(visited.sum()) != len(partial) or not all(visited[c] for c in partial):
        raise ValueError("visited mask inconsistent with partial tour")

    start_emb = ad.matmul(params["start"], params["embed.w"])
    if partial:
        chosen = ad.gather_rows(memory, np.asarray(partial, dtype=np.intp) + 1)
        x = ad.concat([start_emb, chosen], axis=0)
    else:
        x = start_emb
    steps = len(partial) + 1
    x = ad.add(x, Node(pe_table(steps, config.d_model)[:steps]))

    for i in range(config.n_dec_layers):
        p = f"dec.{i}"
        self_attn = _attention(x, x, params, f"{p}.self", config, mask=_causal_mask(steps))
        x = _ln(ad.add(x, self_attn), params, f"{p}.ln1")
        cross = _attention(x, memory, params, f"{p}.cross", config)
        x = _ln(ad.add(x, cross), params, f"{p}.ln2")
        x = _ln(ad.add(x, _ffn(x, params, f"{p}.ffn")), params, f"{p}.ln3")

    last = ad.gather_rows(x, np.array([steps - 1], dtype=np.intp))
    logits = ad.reshape(ad.add_bias(ad.matmul(last, params["out.w"]), params["out.b"]), (n,))
    return StepDistribution(ad.softmax(logits, visited))
