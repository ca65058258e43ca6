"""Command line entry point: ``sssl <verb> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, StateSpaceSSLError

log = logging.getLogger("statespace_ssl")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")

    def exit(self, status=0, message=None):
        if message:
            sys.stderr.write(message)
        raise SystemExit(status)


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty length list")
    return values


def _target(text: str) -> str:
    if text == "norm" or (text.startswith("proto:") and text[6:].isdigit()):
        return text
    raise argparse.ArgumentTypeError(f"target must be 'norm' or 'proto:I', got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sssl", description="State-space self-supervised pretraining toolkit.",
                     allow_abbrev=False)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", metavar="{synth,pretrain,probe,bench,saliency,gradcheck}",
                                parser_class=_Parser)

    def verb(name, usage, help_):
        return sub.add_parser(name, usage=f"sssl {name} {usage}", help=help_, description=help_,
                              allow_abbrev=False)

    p = verb("synth", "--out DIR --classes C --per-class N --size PX --seed S",
             "write a synthetic labelled PPM dataset")
    p.add_argument("--out", metavar="DIR", required=True)
    p.add_argument("--classes", metavar="C", type=int, required=True)
    p.add_argument("--per-class", metavar="N", type=int, required=True)
    p.add_argument("--size", metavar="PX", type=int, default=64)
    p.add_argument("--seed", metavar="S", type=int, default=0)

    p = verb("pretrain", "--config FILE [--seed S] [--out DIR] [--deterministic]",
             "self-supervised pretraining from a config file")
    p.add_argument("--config", metavar="FILE", required=True)
    p.add_argument("--seed", metavar="S", type=int)
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--deterministic", action="store_true")

    p = verb("probe", "--checkpoint FILE --data DIR [--epochs E] [--lr V] [--seed S]",
             "linear-probe accuracy of a checkpoint on a labelled dataset")
    p.add_argument("--checkpoint", metavar="FILE", required=True)
    p.add_argument("--data", metavar="DIR", required=True)
    p.add_argument("--epochs", metavar="E", type=int, default=1000)
    p.add_argument("--lr", metavar="V", type=float, default=0.5)
    p.add_argument("--seed", metavar="S", type=int, default=0)

    p = verb("bench", "--lengths CSV-INTS --repeats R --dim D --state-dim DS --out FILE",
             "time the scan and attention mixers over sequence lengths")
    p.add_argument("--lengths", metavar="CSV-INTS", type=_int_list, required=True)
    p.add_argument("--repeats", metavar="R", type=int, default=10)
    p.add_argument("--dim", metavar="D", type=int, default=64)
    p.add_argument("--state-dim", metavar="DS", type=int, default=64)
    p.add_argument("--out", metavar="FILE", required=True)

    p = verb("saliency", "--checkpoint FILE --image FILE --out FILE [--target {norm|proto:I}]",
             "gradient x activation saliency map as a PGM")
    p.add_argument("--checkpoint", metavar="FILE", required=True)
    p.add_argument("--image", metavar="FILE", required=True)
    p.add_argument("--out", metavar="FILE", required=True)
    p.add_argument("--target", metavar="{norm|proto:I}", type=_target, default="norm")

    p = verb("gradcheck", "[--tolerance T]", "finite-difference check of every primitive and the pipeline")
    p.add_argument("--tolerance", metavar="T", type=float)
    return parser


def _synth(args) -> int:
    from .augment import synth_dataset

    if args.classes < 2 or args.per_class < 1 or args.size < 8:
        raise UsageError("synth: need --classes >= 2, --per-class >= 1, --size >= 8")
    ds = synth_dataset(args.out, args.classes, args.per_class, args.size, seed=args.seed)
    print(f"wrote {len(ds.items)} images to {args.out}")
    return EXIT_OK


def _pretrain(args) -> int:
    from .training import load_config, train

    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"pretrain: config file not found: {path}")
    cfg = load_config(path)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.deterministic:
        overrides["deterministic"] = True
    cfg = dataclasses.replace(cfg, **overrides)
    result = train(cfg)
    print(result.final_checkpoint)
    return EXIT_OK


def _probe(args) -> int:
    from .augment import load_dataset
    from .evaluation import linear_probe
    from .training import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    acc = linear_probe(model, load_dataset(args.data), epochs=args.epochs, lr=args.lr, seed=args.seed)
    print(f"{acc:.6f}")
    return EXIT_OK


def _bench(args) -> int:
    from .evaluation import scaling_benchmark

    report = scaling_benchmark(args.lengths, d=args.dim, d_s=args.state_dim, repeats=args.repeats)
    report.to_csv(args.out)
    for w in report.warnings:
        log.warning(w)
    for mixer in ("ssm", "attention"):
        print(f"{mixer}: exponent={report.exponent[mixer]:.3f} r2={report.r2[mixer]:.4f}")
    return EXIT_OK


def _saliency(args) -> int:
    from .augment import load_ppm
    from .evaluation import saliency_map, write_pgm, write_relevance_csv
    from .training import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    smap = saliency_map(model, load_ppm(args.image), args.target)
    write_pgm(args.out, smap.values)
    write_relevance_csv(Path(args.out).with_suffix(".csv"), smap.token_relevance)
    r, c = smap.argmax_token()
    print(f"argmax token row={r} col={c}")
    return EXIT_OK


def _gradcheck(args) -> int:
    from .verification import run_suite

    if args.tolerance is not None and not args.tolerance > 0:
        raise UsageError("gradcheck: --tolerance must be positive")

    def show(res):
        status = "ok" if res.passed else "FAIL"
        print(f"{res.name:<18} {res.error:.3e} < {res.tolerance:.0e}  {status}")

    results = run_suite(args.tolerance, progress=show)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"all {len(results)} checks passed")
    return EXIT_OK


HANDLERS = {"synth": _synth, "pretrain": _pretrain, "probe": _probe, "bench": _bench,
            "saliency": _saliency, "gradcheck": _gradcheck}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb is None:
            raise UsageError("sssl: a verb is required (synth, pretrain, probe, bench, saliency, gradcheck)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return HANDLERS[args.verb](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StateSpaceSSLError, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    np.seterr(over="ignore", under="ignore")
    sys.exit(run())


if __name__ == "__main__":
    main()
