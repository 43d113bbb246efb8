"""Command line entry point: ``t2ic <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .numerics import apply_precision


def _cmd_make_data(args):
    from .synthdata import build_dataset

    build_dataset(args.n, args.seed, args.out)
    print(f"wrote {args.n} examples to {args.out}")


def _cmd_pretrain_encoders(args):
    from .encoders import pretrain_encoders, retrieval_sanity
    from .harness.config import load_pretrain_config
    from .synthdata import load_dataset

    cfg = load_pretrain_config(args.config) if args.config else None
    if cfg is None:
        from .encoders import PretrainConfig

        cfg = PretrainConfig()
    ds = load_dataset(args.data)
    out = Path(args.out)
    enc = pretrain_encoders(ds, cfg, out, csv_path=out.with_suffix(".csv"))
    print(f"retrieval sanity (matched > mismatched): {retrieval_sanity(enc, ds, cfg.seed):.3f}")


def _cmd_pretrain_captioner(args):
    from .encoders import pretrain_captioner
    from .synthdata import load_dataset

    out = Path(args.out)
    pretrain_captioner(load_dataset(args.data), out, epochs=args.epochs, seed=args.seed,
                       csv_path=out.with_suffix(".csv"))


def _cmd_train_classifier(args):
    from .metrics import train_is_classifier
    from .synthdata import load_dataset

    _, acc = train_is_classifier(load_dataset(args.data), args.out, epochs=args.epochs, seed=args.seed)
    print(f"eval accuracy {acc:.4f}")


def _cmd_train(args):
    from .harness.config import load_run_config
    from .harness.training import train

    result = train(load_run_config(args.config))
    step, report = result.reports[-1]
    print(json.dumps({"checkpoint": str(result.checkpoint), "step": step, **report.as_dict()}))


def _cmd_ablate(args):
    from .harness.ablation import CONTRASTIVE_ROWS, ablate
    from .harness.config import load_run_config, parse_rows

    base = load_run_config(args.config)
    if args.rows == "contrastive":
        rows = CONTRASTIVE_ROWS
    else:
        rows = parse_rows(Path(args.rows).read_text(encoding="utf-8"), args.rows)
    table = ablate(base, rows)
    failed = [r["row"] for r in table if r["status"] != "ok"]
    print(f"ablation table: {Path(base.out) / 'ablation.csv'} ({len(table)} rows, {len(failed)} failed)")
    return 1 if failed else 0


def _cmd_eval(args):
    from .harness.evaluation import evaluate

    report = evaluate(args.ckpt, args.data, n=args.n, seed=args.seed, dump_path=args.dump)
    print(json.dumps(report.as_dict()))


def _cmd_grid(args):
    from .harness.grid import generate_grid

    generate_grid(args.ckpt, args.captions, args.out, seed=args.seed)
    print(f"wrote {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="t2ic", description="Contrastive text-to-image GAN lab on ShapesCap")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", help="build a ShapesCap dataset file")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_make_data)

    s = sub.add_parser("pretrain-encoders", help="fit text/image encoders on DAMSM + NT-Xent")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="key = value file (epochs, lr, batch_size, seed, tau, gamma1..3)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_pretrain_encoders)

    s = sub.add_parser("pretrain-captioner", help="fit the re-captioning model")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_pretrain_captioner)

    s = sub.add_parser("train-classifier", help="fit and certify the Inception Score classifier")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=15)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_train_classifier)

    s = sub.add_parser("train", help="train the GAN from a run config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("ablate", help="train one run per loss-weight row")
    s.add_argument("--config", required=True)
    s.add_argument("--rows", required=True, help="rows file ('name: key=value, ...') or 'contrastive' for the built-in rows")
    s.set_defaults(func=_cmd_ablate)

    s = sub.add_parser("eval", help="toy-FID / IS / R-precision of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dump", help="also write real/fake features and class probabilities here")
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("grid", help="PPM grid, one row of 8 samples per caption")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--captions", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_grid)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    apply_precision()
    try:
        return args.func(args) or 0
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"t2ic {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
