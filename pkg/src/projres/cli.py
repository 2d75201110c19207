"""Command-line entry point.

Exit status: 0 on success, 2 for invalid configs or arguments, 1 for any
other failure. ``PROJRES_THREADS`` sets the worker thread count.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import config as config_mod
from .exceptions import ValidationError
from .experiment import attack_trace, build_data, run_experiment
from .federation import _thread_count, run_training
from .io import atomic_write, export_trace, import_trace
from .theory import empirical_boundary_scan, p_max, scan_to_csv, sharp_p_max

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


def parse_p_range(text: str) -> List[int]:
    """``"1-64"``, ``"1,2,4,8"`` or a mix such as ``"1-4,8,16"``; empty ranges are errors."""
    out: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        try:
            a = int(lo)
            b = int(hi) if sep else a
        except ValueError:
            raise ValidationError(f"bad p range element {part!r}") from None
        if b < a:
            raise ValidationError(f"empty p range {part!r}")
        out.extend(range(a, b + 1))
    if not out:
        raise ValidationError("p range is empty")
    if min(out) < 1:
        raise ValidationError("p values must be >= 1")
    return sorted(set(out))


def _load(args):
    return config_mod.load(args.config, args.set or ())


def cmd_run(args) -> int:
    cfg = _load(args)
    out = run_experiment(cfg, args.output_dir)
    print(f"wrote {out / 'results.csv'}")
    return EXIT_OK


def cmd_scan(args) -> int:
    ps = parse_p_range(args.p)
    if args.n < 2 or args.m < 1 or args.trials < 1:
        raise ValidationError("need --n >= 2, --m >= 1, --trials >= 1")
    rows = empirical_boundary_scan(args.n, args.m, ps, args.trials, args.seed, _thread_count())
    text = scan_to_csv(rows)
    if args.out:
        atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    print(f"p_max = {sharp_p_max(rows)} (theory: min(n-1, m) = {p_max(args.n, args.m)})",
          file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_export(args) -> int:
    cfg = _load(args)
    if not 0 <= args.defense_index < len(cfg.defenses):
        raise ValidationError(f"--defense-index must be in [0, {len(cfg.defenses)})")
    split = build_data(cfg)
    trace = run_training(cfg.federation_for(cfg.defenses[args.defense_index]), split.dataset,
                         cfg.build_model(), split.train_ids)
    out = Path(args.out or Path(cfg.output_dir) / "trace")
    export_trace(trace, out, {"config_hash": cfg.config_hash})
    print(f"wrote trace to {out}")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _load(args)
    trace = import_trace(args.trace_dir)
    out = attack_trace(cfg, trace, args.output_dir)
    print(f"wrote {out / 'results.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="projres", description="Federated fine-tuning simulator and membership-inference audit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("config", help="JSON experiment config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. federation.rounds=20 (repeatable)")

    r = sub.add_parser("run", help="train and evaluate every configured attack and defense")
    with_config(r)
    r.add_argument("--output-dir", help="overrides output_dir from the config")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("scan-boundary", help="empirical recoverability scan on Gaussian batches")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--m", type=int, default=32)
    s.add_argument("--p", default="1-64", help="p values: '1-64', '1,2,4' or a mix")
    s.add_argument("--trials", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.set_defaults(func=cmd_scan)

    e = sub.add_parser("export-trace", help="train once and dump the trace")
    with_config(e)
    e.add_argument("--out", help="trace directory (default: <output_dir>/trace)")
    e.add_argument("--defense-index", type=int, default=0)
    e.set_defaults(func=cmd_export)

    a = sub.add_parser("attack", help="evaluate attacks on a dumped trace")
    a.add_argument("trace_dir")
    with_config(a)
    a.add_argument("--output-dir", help="overrides output_dir from the config")
    a.set_defaults(func=cmd_attack)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
