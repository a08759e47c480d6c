"""Command-line entry point: ``hcdlab <subcommand> ...``.

Exit codes: 0 success, 1 validation error (bad flags, config, file format),
2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..errors import ConfigError, FormatError, NonFiniteLossError, ShapeError
from ..teacher import synth_teacher
from .ablate import AXES, DEFAULT_VALUES, ablate
from .config import METHODS, ExperimentConfig
from .data import gen_dataset, read_dataset
from .gradsuite import run_suite
from .train import evaluate, train

log = logging.getLogger("hcdlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--train-data")
    p.add_argument("--test-data")
    p.add_argument("--teacher")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--n", type=int, help="number of sub-logits")
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--omega", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--stages", help="e.g. 1,2,3,4")
    p.add_argument("--no-timing", action="store_true", help="write sec=0 so metrics.csv is byte-reproducible")
    p.add_argument("--out", required=True)


def _build_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    h = cfg.hcd
    hcd_over = {k: getattr(args, k) for k in ("n", "tau", "lam", "beta", "omega", "theta", "alpha")
                if getattr(args, k) is not None}
    if args.stages:
        hcd_over["stages"] = tuple(_int_list(args.stages))
    if hcd_over:
        h = replace(h, **hcd_over)
    sgd_over = {k: v for k, v in (("epochs", args.epochs), ("batch_size", args.batch_size), ("lr", args.lr))
                if v is not None}
    sgd = replace(cfg.sgd, **sgd_over) if sgd_over else cfg.sgd
    top = {}
    for key in ("method", "train_data", "test_data", "teacher"):
        if getattr(args, key) is not None:
            top[key] = getattr(args, key)
    if args.no_timing:
        top["timing"] = False
    return replace(cfg, hcd=h, sgd=sgd, out_dir=args.out, **top)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hcdlab", description="Heterogeneous complementary distillation lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic HCDX dataset")
    p.add_argument("--kind", choices=("blobs", "bars"), default="bars")
    p.add_argument("--n", type=int, default=2500)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--c", type=int, default=1)
    p.add_argument("--h", type=int, default=16)
    p.add_argument("--w", type=int, default=16)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-teacher", help="write a synthetic HCDT teacher dump for a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--quality", type=float, default=0.95)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--margin", type=float, default=6.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one student")
    _add_overrides(p)
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("ablate", help="sweep one axis over values and seeds")
    _add_overrides(p)
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--values", help="comma-separated; defaults depend on the axis")
    p.add_argument("--seed", type=_int_list, required=True, help="seed or comma-separated seeds")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full HCD loss")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--coords", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def _run(args) -> int:
    if args.command == "gen-data":
        ds = gen_dataset(args.kind, args.n, args.k, args.c, args.h, args.w, args.seed, args.out, noise=args.noise)
        print(f"wrote {args.out}: N={len(ds)} K={ds.num_classes} image={ds.image_shape}")
    elif args.command == "gen-teacher":
        ds = read_dataset(args.data)
        dump = synth_teacher(ds, args.quality, args.d, args.seed, margin=args.margin, path=args.out)
        print(f"wrote {args.out}: N={dump.n} d={dump.d} K={dump.k} teacher_acc={dump.accuracy(ds.labels):.2f}")
    elif args.command == "train":
        cfg = replace(_build_config(args), seed=args.seed)
        res = train(cfg, Path(args.out))
        last = res.rows[-1]
        print(f"final train_acc={last.train_acc:.2f} test_acc={last.test_acc:.2f}")
        print(f"wrote {res.metrics_path} and {res.checkpoint_path}")
    elif args.command == "eval":
        print(f"top1={evaluate(args.checkpoint, args.data):.2f}")
    elif args.command == "ablate":
        cfg = _build_config(args)
        values = [v for v in args.values.split(",") if v] if args.values else list(DEFAULT_VALUES[args.axis])
        path = ablate(cfg, args.axis, values, seeds=args.seed, out_dir=args.out, workers=args.workers)
        print(f"wrote {path}")
    elif args.command == "gradcheck":
        res = run_suite(batch=args.batch, coords=args.coords, seed=args.seed, tol=args.tol)
        rep = res.report
        print(f"checked={rep.checked} skipped_kinks={rep.skipped_kinks} max_rel_err={rep.max_rel_err:.3e} "
              f"worst={res.worst_name()} time={res.seconds:.1f}s")
        return 0 if rep.passed else 2
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _run(args)
    except (ConfigError, FormatError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteLossError, OSError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
