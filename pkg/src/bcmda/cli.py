"""Command-line entry points: gen-data, train, eval, inspect.

Exit status is 0 on success, 2 for usage and configuration errors and 1 for
failures while running.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import synthdata, trainer
from .evaluation import evaluate
from .pgm import write_pgm
from .rng import Rng
from .trainer import ConfigError, TrainConfig


class UsageError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bcmda", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic multi-domain dataset")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--domains", type=int, default=3, help="how many of the built-in domains to use")
    g.add_argument("--n-train", type=int, default=200)
    g.add_argument("--n-test", type=int, default=50)
    g.add_argument("--n-labeled", type=int, default=10)
    g.add_argument("--labeled-domain", type=int, default=0)
    g.add_argument("--size", type=int, default=64, help="image height and width")
    g.add_argument("--classes", type=int, default=2)

    t = sub.add_parser("train", help="train a student/teacher pair")
    t.add_argument("--data", type=Path, required=True, help="dataset manifest")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--config", type=Path, help="key = value config file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--resume", type=Path, help="checkpoint stem to continue from")
    t.add_argument("--stop-at", type=int, help="stop after this step (checkpoint is still written)")
    t.add_argument("--progress", type=int, default=0, help="log every N steps")

    e = sub.add_parser("eval", help="per-domain metrics of a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True, help="checkpoint stem (without .bin/.idx)")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--out", type=Path, help="report CSV path")
    e.add_argument("--split", choices=synthdata.SPLITS, default="test")
    e.add_argument("--domain", help="restrict to one domain, e.g. 'id==2'")
    e.add_argument("--pooled-hd95", action="store_true", help="95th percentile over both directions pooled")

    i = sub.add_parser("inspect", help="dump correlation maps and synthesised images as PGM")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--data", type=Path, required=True)
    i.add_argument("--out", type=Path, required=True)
    i.add_argument("--labeled-index", type=int, default=0)
    i.add_argument("--unlabeled-index", type=int, default=0)
    i.add_argument("--t", type=int, help="schedule step for the mixing ratios (default: checkpoint step)")
    return ap


def _config_from_args(args) -> TrainConfig:
    if args.config is not None and not args.config.exists():
        raise UsageError(f"config file {args.config} not found")
    cfg = trainer.load_config(args.config) if args.config else TrainConfig()
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    overrides = {}
    for item in args.set:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or key not in types:
            raise ConfigError(f"bad override {item!r}")
        try:
            overrides[key] = trainer._parse_value(raw, types[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
    return dataclasses.replace(cfg, **overrides)


def cmd_gen_data(args) -> int:
    specs = synthdata.default_domains()[: args.domains]
    manifest = synthdata.gen_dataset(
        specs,
        (args.n_train, args.n_test),
        args.out,
        seed=args.seed,
        labeled_domain=args.labeled_domain,
        n_labeled=args.n_labeled,
        h=args.size,
        w=args.size,
        classes=args.classes,
    )
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.cfg").write_text(trainer.dump_config(cfg), encoding="utf-8")
    state = trainer.run_training(cfg, args.data, args.out, resume=args.resume, stop_at=args.stop_at,
                                 progress_every=args.progress)
    last = state.history[-1]["total"] if state.history else float("nan")
    print(f"step {state.t}/{cfg.t_max} loss {last:.4f} -> {args.out / 'final'}")
    return 0


def cmd_eval(args) -> int:
    domains = None
    if args.domain:
        try:
            domains = [synthdata.parse_domain_filter(args.domain)]
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    report = evaluate(args.checkpoint, args.data, domains, args.split, pooled_hd95=args.pooled_hd95)
    if args.out:
        report.write_csv(args.out)
    print(report.table())
    return 0


def cmd_inspect(args) -> int:
    state, cfg = trainer.load_checkpoint(args.checkpoint)
    labeled, unlabeled = trainer.training_splits(synthdata.load_dataset(args.data))
    if len(unlabeled) == 0:
        unlabeled = labeled
    xs, us = labeled[args.labeled_index], unlabeled[args.unlabeled_index]
    t = min(state.t if args.t is None else args.t, cfg.t_max)
    views = trainer.build_views(
        state.teacher,
        xs.image[None],
        xs.mask[None],
        us.image[None],
        [us.domain],
        cfg,
        t,
        Rng(cfg.seed).split(trainer._STEP, t),
    )
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    images = {
        "corr_xu": views.corr.c_xu[0],
        "corr_ux": views.corr.c_ux[0],
        "x_w": views.x_w[0],
        "u_w": views.u_w[0],
        "u_s": views.u_s[0],
        "x_wu": views.x_wu[0],
        "u_wx": views.u_wx[0],
        "x_wv": views.x_wv[0],
        "u_wv": views.u_wv[0],
        "x_wdv": views.x_wdv[0],
    }
    for name, img in zip(("in1", "out1", "in2", "out2"), views.mixed):
        images[f"mixed_{name}"] = img[0]
    for name, img in images.items():
        write_pgm(out / f"{name}.pgm", img)
        print(out / f"{name}.pgm")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"bcmda {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # report, do not dump a traceback
        print(f"bcmda {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
