"""Command line: ``nsggan {make-synthetic,train,translate,evaluate,ablate}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Outputs default to ``$NSGGAN_OUTPUT_ROOT/<subcommand>`` (``runs``
when the variable is unset).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import tomli_w

from .config import TrainConfig, load_config, save_config
from .datapipe import (BISENET_MAPPING, N_GROUPS, DataError, generate_synthetic_dataset, load_image_folder,
                       split_by_identity, to_uint8, write_synthetic_dataset)
from .generator import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "NSGGAN_OUTPUT_ROOT"

log = logging.getLogger("nsggan")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _out(args) -> Path:
    out = Path(args.out) if args.out else output_root() / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolved(args) -> TrainConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _dataset(args):
    if args.data:
        return load_image_folder(args.data, BISENET_MAPPING if args.raw_parsing else None)
    return generate_synthetic_dataset(args.identities, tuple(range(N_GROUPS)), args.size, args.data_seed)


def _snapshot(out: Path, values: dict) -> None:
    (out / "resolved_config.toml").write_text(tomli_w.dumps(values))


def _load_models(checkpoint: str, samples):
    from .trainer import load_checkpoint

    state = load_checkpoint(checkpoint, restore_rng=False)
    size = samples[0].image.shape[1:]
    if size != (state.config.image_size, state.config.image_size):
        raise ConfigError(f"checkpoint {checkpoint} expects {state.config.image_size}px images, data has {size}")
    return state


# ---------------------------------------------------------------- commands

def cmd_make_synthetic(args) -> int:
    out = _out(args)
    seed = args.seed if args.seed is not None else 0
    samples = generate_synthetic_dataset(args.identities, tuple(range(N_GROUPS)), args.size, seed)
    write_synthetic_dataset(samples, out, seed)
    _snapshot(out, dict(identities=args.identities, size=args.size, seed=seed))
    print(f"wrote {len(samples)} faces to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import train

    config = _resolved(args)
    out = _out(args)
    samples = _dataset(args)
    state = train(samples, config, out_dir=out, resume=args.resume, progress_every=args.progress)
    print(f"trained {state.step} steps; checkpoint {out / 'last.safetensors'}")
    return EXIT_OK


def cmd_translate(args) -> int:
    from .evaluator import emit_grids, translate
    from PIL import Image

    samples = load_image_folder(args.data, BISENET_MAPPING if args.raw_parsing else None)
    state = _load_models(args.checkpoint, samples)
    out = _out(args)
    save_config(state.config, out / "resolved_config.toml")
    seed = args.seed if args.seed is not None else 0
    targets = args.targets if args.targets else list(range(N_GROUPS))
    per_target = {t: translate(state.models, samples, t, seed) for t in targets}
    names = [Path(s.meta.path).with_suffix("").as_posix().replace("/", "_") for s in samples]
    for t, outs in per_target.items():
        folder = out / f"target_{t}"
        folder.mkdir(exist_ok=True)
        for name, img in zip(names, outs):
            Image.fromarray(to_uint8(img)).save(folder / f"{name}.png")
    rows = [[per_target[t][i] for t in targets] for i in range(len(samples))]
    emit_grids([s.image for s in samples], rows, out / "grids", names)
    print(f"translated {len(samples)} faces to groups {targets}; outputs in {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluator import evaluate, write_records

    samples = load_image_folder(args.data, BISENET_MAPPING if args.raw_parsing else None)
    state = _load_models(args.checkpoint, samples)
    out = _out(args)
    save_config(state.config, out / "resolved_config.toml")
    report, records = evaluate(state.models, samples, noise_seed=args.seed if args.seed is not None else 0)
    write_records(records, out / "records.jsonl")
    report.save(out / "report.json")
    print(report.table())
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import run_ablate

    config = _resolved(args)
    out = _out(args)
    save_config(config, out / "resolved_config.toml")
    train_set, test_set = split_by_identity(_dataset(args), args.test_fraction, config.seed)
    report = run_ablate(config, args.axis, train_set, test_set, out, parallel=args.parallel)
    print(report.table())
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _data_args(p, synthetic: bool):
    p.add_argument("--data", help="dataset root laid out as <group>/<identity>_<index>.png + _seg.png"
                   + (" (default: generate a synthetic set)" if synthetic else ""), required=not synthetic)
    p.add_argument("--raw-parsing", action="store_true",
                   help="layouts hold raw 19-class parser ids to be merged into the 12 classes")
    if synthetic:
        p.add_argument("--identities", type=int, default=125, help="synthetic identities (4 faces each)")
        p.add_argument("--size", type=int, default=64, help="synthetic image size")
        p.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic set")


def _config_args(p):
    p.add_argument("--config", help="flat TOML config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nsggan", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
        p.add_argument("--seed", type=int, help="seed for the run")

    p = sub.add_parser("make-synthetic", help="render a synthetic face dataset to disk")
    common(p)
    p.add_argument("--identities", type=int, default=125, help="number of identities (one face per group each)")
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train", help="train both generators and critics")
    common(p)
    _config_args(p)
    _data_args(p, synthetic=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--progress", type=int, default=0, help="log losses every N steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="age every face to the requested groups and write grids")
    common(p)
    _data_args(p, synthetic=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--targets", type=int, nargs="+", choices=range(N_GROUPS), help="target groups (default all)")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="age translation accuracy and identity preservation")
    common(p)
    _data_args(p, synthetic=False)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate each row of one ablation table")
    common(p)
    _config_args(p)
    _data_args(p, synthetic=True)
    p.add_argument("--axis", required=True,
                   choices=("modules", "injection_type", "noise_position", "constraint_type", "strategy"))
    p.add_argument("--test-fraction", type=float, default=0.2, help="held-out identity fraction")
    p.add_argument("--parallel", type=int, default=0, help="worker processes (0 = sequential)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    from .trainer import NonFiniteLossError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "progress", 0) and not args.verbose:
        logging.getLogger("nsggan").setLevel(logging.INFO)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
