"""Batch experiment driver: dataset generation, training, evaluation,
augmentation-size sweeps, and ad-hoc solving from inline coordinates.

Every command with a --seed is reproducible byte-for-byte with --jobs 1.
Errors print a single diagnostic line to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import metrics, oracles, persistence, training, tta
from .decoding import BeamConfig, decode_beam, decode_greedy, decode_greedy_batch
from .model import (
    INPUT_COORDINATES,
    INPUT_DISTANCE_MATRIX,
    ModelConfig,
    PolicyParams,
    init_params,
)
from .tsp import TspInstance, Tour, generate_instances

_MODEL_KEYS = {
    "n_cities",
    "d_model",
    "n_heads",
    "n_enc_layers",
    "n_dec_layers",
    "d_ff",
    "input_mode",
    "use_pe",
}
_TRAIN_KEYS = {
    "epochs",
    "batch_size",
    "instances_per_epoch",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "baseline_margin",
    "grad_clip",
    "val_size",
    "seed",
}


def _default_jobs() -> int:
    return os.cpu_count() or 1


def _parse_inline_instance(text: str) -> TspInstance:
    try:
        points = []
        for chunk in text.strip().split(";"):
            x, y = chunk.split(",")
            points.append((float(x), float(y)))
        return TspInstance(np.array(points, dtype=np.float64))
    except (ValueError, TypeError) as exc:
        raise ValueError(f"cannot parse inline instance {text!r}: {exc}") from exc


def _parse_decoder(spec: str) -> tuple[str, int]:
    """greedy | beam:B | tta:M -> (kind, size)."""
    if spec == "greedy":
        return "greedy", 1
    kind, sep, size = spec.partition(":")
    if sep and kind in ("beam", "tta"):
        try:
            value = int(size)
        except ValueError:
            value = 0
        if value >= 1:
            return kind, value
    raise ValueError(f"bad --decoder {spec!r}; expected greedy, beam:B, or tta:M")


def _format_tour(tour: Tour, length: float) -> str:
    return "tour=" + ",".join(str(int(c)) for c in tour.order) + f" len={length:.6f}"


def _load_model(path) -> tuple[PolicyParams, ModelConfig]:
    return persistence.load_checkpoint(path)


def _predict_lengths(
    instances: list[TspInstance],
    params: PolicyParams,
    config: ModelConfig,
    decoder: tuple[str, int],
    seed: int,
    jobs: int,
) -> list[float]:
    kind, size = decoder
    if kind == "greedy":
        chunks = [
            instances[i : i + tta.DECODE_CHUNK]
            for i in range(0, len(instances), tta.DECODE_CHUNK)
        ]
        out: list[float] = []
        for decoded in tta.parallel_map(
            lambda c: decode_greedy_batch(c, params, config), chunks, jobs
        ):
            out.extend(d.length for d in decoded)
        return out
    if kind == "beam":
        return tta.parallel_map(
            lambda inst: decode_beam(inst, params, config, BeamConfig(size)).length,
            instances,
            jobs,
        )
    return [
        tta.tta_solve(
            inst, params, config, tta.TtaConfig(augment_size=size, seed=seed + i), jobs=jobs
        ).best.length
        for i, inst in enumerate(instances)
    ]


def cmd_gen_data(args) -> int:
    rng = np.random.default_rng(args.seed)
    instances = generate_instances(args.n, args.count, rng)
    persistence.save_dataset(args.out, instances, args.seed)
    print(f"wrote {args.count} instances n={args.n} seed={args.seed} -> {args.out}")
    return 0


def _build_train_configs(args) -> tuple[training.TrainConfig, ModelConfig]:
    values: dict[str, str] = {}
    if args.config:
        values = persistence.load_config_file(args.config)
        unknown = set(values) - _MODEL_KEYS - _TRAIN_KEYS
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
    # flags override config-file values
    overrides = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "instances_per_epoch": args.instances_per_epoch,
        "learning_rate": args.lr,
        "seed": args.seed,
        "n_cities": args.n,
        "val_size": args.val_size,
    }
    for key, val in overrides.items():
        if val is not None:
            values[key] = str(val)

    def get(key, cast, default):
        return cast(values[key]) if key in values else default

    n_cities = get("n_cities", int, 10)
    model_config = ModelConfig(
        n_cities=n_cities,
        d_model=get("d_model", int, 64),
        n_heads=get("n_heads", int, 4),
        n_enc_layers=get("n_enc_layers", int, 2),
        n_dec_layers=get("n_dec_layers", int, 1),
        d_ff=get("d_ff", int, 256),
        input_mode=get("input_mode", str, INPUT_DISTANCE_MATRIX),
        use_pe=get("use_pe", lambda s: s == "true", True),
    )
    train_config = training.TrainConfig(
        n_cities=n_cities,
        epochs=get("epochs", int, 30),
        batch_size=get("batch_size", int, 64),
        instances_per_epoch=get("instances_per_epoch", int, 2000),
        learning_rate=get("learning_rate", float, 1e-4),
        adam_beta1=get("adam_beta1", float, 0.9),
        adam_beta2=get("adam_beta2", float, 0.999),
        adam_eps=get("adam_eps", float, 1e-8),
        baseline_margin=get("baseline_margin", float, 0.0),
        grad_clip=get("grad_clip", float, 1.0),
        val_size=get("val_size", int, 100),
        seed=get("seed", int, 0),
    )
    return train_config, model_config


def cmd_train(args) -> int:
    train_config, model_config = _build_train_configs(args)
    train_pool = None
    val_set = None
    if args.data:
        train_pool, _ = persistence.load_dataset(args.data)
        if train_pool[0].n != model_config.n_cities:
            raise ValueError(
                f"training data n={train_pool[0].n} != configured n_cities="
                f"{model_config.n_cities}"
            )
    if args.val:
        val_set, _ = persistence.load_dataset(args.val)
        if val_set[0].n != model_config.n_cities:
            raise ValueError("validation data size mismatch")
    params, rows = training.train(train_config, model_config, train_pool, val_set)
    persistence.save_checkpoint(args.out_ckpt, params, model_config)
    if args.log:
        training.write_log_csv(args.log, rows)
    final = rows[-1].val_len if rows else float("nan")
    print(
        f"trained {train_config.epochs} epochs n={model_config.n_cities} "
        f"seed={train_config.seed} final_val_len={final:.6f} -> {args.out_ckpt}"
    )
    return 0


def _oracle_lengths_checked(instances, method: str) -> np.ndarray:
    if method == "held-karp" and instances[0].n > oracles.HELD_KARP_MAX:
        raise ValueError(
            f"held-karp oracle capped at n <= {oracles.HELD_KARP_MAX}; use --oracle 2opt"
        )
    return oracles.oracle_lengths(instances, method)


def cmd_eval(args) -> int:
    instances, _ = persistence.load_dataset(args.data)
    params, config = _load_model(args.ckpt)
    if instances[0].n != config.n_cities:
        raise ValueError(
            f"dataset n={instances[0].n} incompatible with checkpoint "
            f"n_cities={config.n_cities} (models are fixed-size)"
        )
    decoder = _parse_decoder(args.decoder)
    preds = _predict_lengths(instances, params, config, decoder, args.seed, args.jobs)
    opt = _oracle_lengths_checked(instances, args.oracle)
    report = metrics.build_report(np.array(preds), opt)
    metrics.write_report_csv(args.out, report)
    print(
        f"evaluated k={report.k} decoder={args.decoder} oracle={args.oracle} "
        f"mean_gap_pct={report.mean_gap * 100.0:.2f} avg_len={report.avg_len:.6f} "
        f"-> {args.out}"
    )
    return 0


def cmd_tta_sweep(args) -> int:
    instances, _ = persistence.load_dataset(args.data)
    params, config = _load_model(args.ckpt)
    if instances[0].n != config.n_cities:
        raise ValueError(
            f"dataset n={instances[0].n} incompatible with checkpoint "
            f"n_cities={config.n_cities} (models are fixed-size)"
        )
    try:
        m_values = [int(s) for s in args.m.split(",")]
    except ValueError as exc:
        raise ValueError(f"bad --m list {args.m!r}") from exc
    opt = _oracle_lengths_checked(instances, args.oracle)
    rows, _ = tta.gap_vs_m_sweep(
        instances, params, config, m_values, args.seed, opt, jobs=args.jobs
    )
    tta.write_sweep_csv(args.out, rows, m_values)
    print(f"swept M={args.m} over k={len(instances)} instances -> {args.out}")
    return 0


def cmd_solve(args) -> int:
    inst = _parse_inline_instance(args.instance_inline)
    params, config = _load_model(args.ckpt)
    if inst.n != config.n_cities:
        raise ValueError(
            f"instance n={inst.n} incompatible with checkpoint n_cities={config.n_cities}"
        )
    decoder = _parse_decoder(args.decoder)
    kind, size = decoder
    if kind == "greedy":
        decoded = decode_greedy(inst, params, config)
        tour, length = decoded.tour, decoded.length
    elif kind == "beam":
        decoded = decode_beam(inst, params, config, BeamConfig(size))
        tour, length = decoded.tour, decoded.length
    else:
        outcome = tta.tta_solve(
            inst, params, config, tta.TtaConfig(augment_size=size, seed=args.seed)
        )
        tour, length = outcome.best.tour, outcome.best.length
    print(_format_tour(tour, length))
    return 0


def cmd_oracle(args) -> int:
    inst = _parse_inline_instance(args.instance_inline)
    if args.method == "held-karp":
        result = oracles.solve_held_karp(inst)
    elif args.method == "brute":
        result = oracles.solve_brute_force(inst)
    elif args.method == "nn":
        result = oracles.solve_nearest_neighbor(inst, args.start)
    else:
        result = oracles.solve_2opt_from_nn(inst, args.start)
    print(_format_tour(result.tour, result.length))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsp-tta",
        description="Distance-matrix transformer TSP solver with test-time augmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset of random instances")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the policy with REINFORCE")
    p.add_argument("--data", help="optional pregenerated training pool")
    p.add_argument("--val", help="optional held-out validation dataset")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--log", help="CSV training log path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--instances-per-epoch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--val-size", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against an oracle")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--decoder", default="greedy", help="greedy | beam:B | tta:M")
    p.add_argument("--oracle", default="held-karp", choices=["held-karp", "2opt"])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=_default_jobs())
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("tta-sweep", help="gap vs augmentation size with nested variants")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--m", required=True, help="comma-separated ascending sizes")
    p.add_argument("--oracle", default="held-karp", choices=["held-karp", "2opt"])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=_default_jobs())
    p.set_defaults(fn=cmd_tta_sweep)

    p = sub.add_parser("solve", help="solve one inline instance with a checkpoint")
    p.add_argument("--instance-inline", required=True, help='"x1,y1;x2,y2;..."')
    p.add_argument("--ckpt", required=True)
    p.add_argument("--decoder", default="greedy", help="greedy | beam:B | tta:M")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("oracle", help="solve one inline instance with a reference solver")
    p.add_argument("--instance-inline", required=True, help='"x1,y1;x2,y2;..."')
    p.add_argument(
        "--method", default="held-karp", choices=["held-karp", "brute", "nn", "2opt"]
    )
    p.add_argument("--start", type=int, default=0, help="start city for nn/2opt")
    p.set_defaults(fn=cmd_oracle)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # single diagnostic line, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
