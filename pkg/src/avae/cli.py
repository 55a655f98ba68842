"""Command-line pipeline: train, attack, evaluate, plot and sweep.

    avae train --config exp.cfg --out runs/vae
    avae attack --config exp.cfg --out runs/vae --jobs 4
    avae evaluate --raw runs/vae/raw_attacks.csv --out runs/vae
    avae plot --raw runs/vae/raw_attacks.csv --pair 0 --out runs/vae
    avae sweep --config grid.cfg --out runs/design

Exit codes: 0 success, 2 usage error, 3 data or parse error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .attack import attack_pair, read_raw_csv, sweep_C, write_raw_csv
from .checkpoint import load_checkpoint
from .config import (FULL_DESIGN, ConfigError, ExperimentConfig, build, expand_grid, load_config,
                     parse_lines)
from .data import DataError, Dataset, bundled_mnist_path, load_mnist, load_raw_tensor, sample_evaluation_pairs
from .evaluation import aggregate, curves_from_rows, score_rows, scores_csv, summary_csv
from .experiments import pair_seed
from .lbfgsb import LbfgsbConfig
from .models import DATASET_IMAGES, Architecture, preset
from .plot import write_svg
from .tensorfile import FormatError
from .training import NumericalError, TrainConfig, train

logger = logging.getLogger("avae")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def resolve_config(args) -> ExperimentConfig:
    overrides = dict(profile=args.profile, seed_split=args.seed_split, seed_pairs=args.seed_pairs,
                     seed_noise=args.seed_noise, out=str(args.out) if args.out else None)
    if args.config:
        return load_config(args.config, **overrides)
    return build({}, **overrides)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    path = Path(cfg.dataset_path) if cfg.dataset_path else bundled_mnist_path()
    if path.is_dir():
        if cfg.dataset != "mnist":
            raise DataError(f"{path} is a directory; only MNIST is read from IDX files")
        return load_mnist(path, seed=cfg.seed_split)
    return load_raw_tensor(path, seed=cfg.seed_split, name=cfg.dataset)


def architecture(cfg: ExperimentConfig, dataset: Dataset) -> Architecture:
    image = tuple(dataset.dims)
    return preset(cfg.model, cfg.dataset, cfg.latent_size, timesteps=cfg.timesteps,
                  attention=cfg.attention, lstm=cfg.lstm or None,
                  image=None if image == DATASET_IMAGES[cfg.dataset] else image)


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, outputs: list[str]) -> None:
    lines = [f"command = {command}", f"config_sha256 = {cfg.digest()}", f"version = {__version__}",
             f"created = {time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime())}"]
    lines += [f"output = {name}" for name in outputs]
    lines += ["", "# configuration", cfg.to_text()]
    (out / f"manifest_{command}.txt").write_text("\n".join(lines), encoding="utf-8")


# ------------------------------------------------------------------ commands

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(cfg)
    arch = architecture(cfg, dataset)
    tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.train_batch, lr=cfg.lr, seed=cfg.seed_train)
    _, report = train(arch, dataset, tcfg, out)
    report.write(out)
    write_manifest(out, "train", cfg, ["checkpoint.avae", "train_report.txt", "val_elbo.csv"])
    print(f"best validation ELBO {report.best_elbo:.4f} at epoch {report.best_epoch}; "
          f"checkpoint {report.checkpoint}")
    return 0


def cmd_attack(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.avae"
    params = load_checkpoint(ckpt)
    expected = architecture(cfg, dataset)
    if params.arch != expected:
        raise UsageError(f"checkpoint architecture does not match the configuration\n"
                         f"checkpoint {ckpt}:\n{params.arch.to_text()}\nconfiguration:\n{expected.to_text()}")
    if cfg.pairs < 1:
        raise UsageError("no evaluation pairs requested")
    pairs = sample_evaluation_pairs(dataset, cfg.seed_pairs, cfg.pairs)
    Cs = sweep_C(cfg.c_sweep)
    lcfg = LbfgsbConfig(max_iter=cfg.max_iter)
    results = []
    for layer in cfg.layers:
        for pid, (i, j) in enumerate(pairs.pairs):
            logger.info("attacking pair %d (%d -> %d) on the %s layer", pid, i, j, layer)
            results.append(attack_pair(params, dataset.images[i], dataset.images[j], layer, Cs=Cs,
                                       batch=cfg.batch, seed=pair_seed(cfg.seed_noise, pid), cfg=lcfg,
                                       pair_id=pid, jobs=args.jobs))
    write_raw_csv(out / "raw_attacks.csv", results, cfg.treatment())
    write_manifest(out, "attack", cfg, ["raw_attacks.csv"])
    n = sum(len(r.points) for r in results)
    print(f"wrote {n} attack rows and {len(results)} boundary rows to {out / 'raw_attacks.csv'}")
    return 0


def _raw_path(args) -> Path:
    if args.raw:
        return Path(args.raw)
    if args.out:
        return Path(args.out) / "raw_attacks.csv"
    if args.config:
        return Path(load_config(args.config).out) / "raw_attacks.csv"
    raise UsageError("pass --raw PATH, --out DIR or --config FILE locating raw_attacks.csv")


def _read_rows(path: Path):
    try:
        return read_raw_csv(path)
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: {e}") from None


def cmd_evaluate(args) -> int:
    raw = _raw_path(args)
    out = Path(args.out) if args.out else raw.parent
    out.mkdir(parents=True, exist_ok=True)
    try:
        run = score_rows(_read_rows(raw))
    except (KeyError, ValueError) as e:
        raise DataError(f"{raw}: malformed row ({e})") from None
    for err in run.errors:
        print(f"error: {err}", file=sys.stderr)
    (out / "scores.csv").write_text(scores_csv(run.scores), encoding="utf-8")
    (out / "summary.csv").write_text(summary_csv(aggregate(run.scores)), encoding="utf-8")
    print(f"scored {len(run.scores)} curves; {len(run.errors)} errors")
    return 0 if run.scores or not run.errors else EXIT_DATA


def cmd_plot(args) -> int:
    raw = _raw_path(args)
    out = Path(args.out) if args.out else raw.parent
    out.mkdir(parents=True, exist_ok=True)
    curves, _ = curves_from_rows(_read_rows(raw))
    chosen = [(k, c) for k, c in curves.items()
              if k[1] == args.pair and (args.layer is None or k[0][-1] == args.layer)]
    if not chosen:
        known = sorted({k[1] for k in curves})
        raise UsageError(f"pair {args.pair} not found in {raw}; available pairs: {known}")
    written = []
    for (treatment, pid), curve in chosen:
        name = f"ddplot_{treatment[1]}_pair{pid}_{treatment[-1]}.svg"
        write_svg(out / name, curve, title=f"{' '.join(map(str, treatment))} pair {pid}")
        written.append(out / name)
    for p in written:
        print(p)
    return 0


def cmd_sweep(args) -> int:
    if not args.out:
        raise UsageError("sweep needs --out DIR")
    out = Path(args.out)
    plain, grid = ({}, {}) if not args.config else parse_lines(Path(args.config).read_text(encoding="utf-8"))
    if not grid:
        grid = {k: list(v) for k, v in FULL_DESIGN.items()}
        plain.setdefault("profile", args.profile or "full")
        plain.setdefault("layers", "latent,output")
    configs = expand_grid(plain, grid)
    (out / "configs").mkdir(parents=True, exist_ok=True)
    batch = []
    for k, cfg in enumerate(configs):
        tag = f"{k:03d}_{cfg.dataset}_{cfg.model_name}_z{cfg.latent_size}_t{cfg.timesteps}"
        cfg = cfg.replace(out=str(out / "runs" / tag))
        path = out / "configs" / f"{tag}.cfg"
        path.write_text(cfg.to_text(), encoding="utf-8")
        for step in ("train", "attack", "evaluate"):
            batch.append(f"avae {step} --config {path}")
    (out / "batch.txt").write_text("\n".join(batch) + "\n", encoding="utf-8")
    treatments = sum(len(c.layers) for c in configs)
    print(f"wrote {len(configs)} configurations ({treatments} treatments) and {out / 'batch.txt'}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value experiment file")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--profile", choices=("full", "fast"))
    common.add_argument("--seed-split", type=int)
    common.add_argument("--seed-pairs", type=int)
    common.add_argument("--seed-noise", type=int)
    common.add_argument("--jobs", type=int, default=1, help="parallel attack workers")
    common.add_argument("-v", "--verbose", action="count", default=0)

    ap = argparse.ArgumentParser(prog="avae", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model").set_defaults(func=cmd_train)
    p = sub.add_parser("attack", parents=[common], help="attack evaluation pairs")
    p.add_argument("--checkpoint", type=Path)
    p.set_defaults(func=cmd_attack)
    p = sub.add_parser("evaluate", parents=[common], help="score raw attack results")
    p.add_argument("--raw", type=Path)
    p.set_defaults(func=cmd_evaluate)
    p = sub.add_parser("plot", parents=[common], help="draw a Distortion-Distortion plot")
    p.add_argument("--raw", type=Path)
    p.add_argument("--pair", type=int, required=True)
    p.add_argument("--layer", choices=("latent", "output"))
    p.set_defaults(func=cmd_plot)
    sub.add_parser("sweep", parents=[common], help="expand a factor grid into configs"
                   ).set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        ap.error("--jobs must be at least 1")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"avae {args.command}: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, FileNotFoundError, IsADirectoryError) as e:
        print(f"avae {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as e:
        print(f"avae {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
