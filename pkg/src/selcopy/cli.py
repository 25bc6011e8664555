"""Command-line front end.

Two subcommands:

* ``run``  — execute one scenario in baseline, selective, or both modes and
  emit the per-socket counter rows (csv or jsonl).  In ``both`` mode the
  endpoint byte streams of the two runs are also compared.
* ``fuzz`` — generate randomized workloads and check, for each, that both
  modes produce identical endpoint bytes and clean audits; some iterations
  suppress token issuance to force the fallback path.

A flat ``key = value`` config file can pre-set any flag; explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import random
import sys
from typing import Optional

from .config import (DEFAULT_ANCHOR_THRESHOLD, DEFAULT_LOOKAHEAD,
                     KernelConfig, KernelMode)
from .bufcore import DEFAULT_MAX_FRAGS
from .harness import (compare_transcripts, gen_workload, run_scenario,
                      verify_expected)
from .metrics import REPORT_COLUMNS


def parse_sizes(text: str) -> tuple[int, int]:
    """Accept "N" (fixed) or "LO:HI" (inclusive range) body sizes."""
    if ":" in text:
        lo, hi = text.split(":", 1)
        lo_i, hi_i = int(lo), int(hi)
    else:
        lo_i = hi_i = int(text)
    if lo_i < 0 or hi_i < lo_i:
        raise argparse.ArgumentTypeError(f"bad size range {text!r}")
    return lo_i, hi_i


def load_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


_BOOLISH = {"1": True, "true": True, "yes": True, "on": True,
            "0": False, "false": False, "no": False, "off": False}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selcopy",
        description="deterministic selective-copy socket simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", metavar="FILE",
                       help="flat key = value file; explicit flags win")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--sizes", type=parse_sizes, default=None,
                       metavar="N|LO:HI", help="body size or range in bytes")
        p.add_argument("--connections", type=int, default=None)
        p.add_argument("--exchanges", type=int, default=None,
                       help="request/response pairs per connection")
        p.add_argument("--chunked", type=float, default=None, metavar="PROB",
                       help="probability a body uses chunked framing")
        p.add_argument("--max-frags", type=int, default=None)
        p.add_argument("--threshold", type=int, default=None,
                       help="per-message anchoring budget in bytes")
        p.add_argument("--lookahead", type=int, default=None,
                       help="parse window bound in bytes")

    run_p = sub.add_parser("run", help="run one scenario and report counters")
    common(run_p)
    run_p.add_argument("--mode", choices=["baseline", "selective", "both"],
                       default="both")
    run_p.add_argument("--stress", action="store_true",
                       help="drive handlers from threads instead of the "
                            "deterministic scheduler")
    run_p.add_argument("--out", metavar="FILE", default=None,
                       help="write rows here instead of stdout")
    run_p.add_argument("--format", choices=["csv", "jsonl"], default="csv")

    fuzz_p = sub.add_parser("fuzz", help="randomized cross-mode equivalence")
    common(fuzz_p)
    fuzz_p.add_argument("--iterations", type=int, default=None)
    fuzz_p.add_argument("--fault-every", type=int, default=None, metavar="N",
                        help="suppress token issuance on every Nth iteration "
                             "(0 disables)")
    return parser


_DEFAULTS = {
    "seed": 1,
    "sizes": (30_000, 300_000),
    "connections": 2,
    "exchanges": 4,
    "chunked": 0.3,
    "max_frags": DEFAULT_MAX_FRAGS,
    "threshold": DEFAULT_ANCHOR_THRESHOLD,
    "lookahead": DEFAULT_LOOKAHEAD,
    "iterations": 25,
    "fault_every": 5,
}

_CONVERT = {
    "seed": int, "connections": int, "exchanges": int, "max_frags": int,
    "threshold": int, "lookahead": int, "iterations": int, "fault_every": int,
    "chunked": float, "sizes": parse_sizes,
    "stress": lambda s: _BOOLISH[s.lower()],
    "mode": str, "out": str, "format": str,
}


def resolve_options(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from the config file, then from built-in defaults."""
    file_values: dict[str, str] = {}
    if getattr(args, "config", None):
        file_values = load_config_file(args.config)
    for key, raw in file_values.items():
        if key not in _CONVERT:
            raise ValueError(f"unknown config key {key!r}")
        if getattr(args, key, None) in (None, False):
            setattr(args, key, _CONVERT[key](raw))
    for key, default in _DEFAULTS.items():
        if getattr(args, key, None) is None and hasattr(args, key):
            setattr(args, key, default)
    return args


def make_kernel_config(args: argparse.Namespace) -> KernelConfig:
    return KernelConfig(max_frags=args.max_frags,
                        anchor_threshold=args.threshold,
                        lookahead=args.lookahead,
                        seed=args.seed)


def emit_rows(rows: list[dict], fmt: str, out: Optional[str]) -> None:
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
        text = buf.getvalue()
    else:
        text = "".join(json.dumps(row, sort_keys=False) + "\n" for row in rows)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_run(args: argparse.Namespace) -> int:
    workload = gen_workload(seed=args.seed, connections=args.connections,
                            exchanges=args.exchanges, size_range=args.sizes,
                            chunked_prob=args.chunked)
    modes = {"baseline": [KernelMode.BASELINE],
             "selective": [KernelMode.SELECTIVE],
             "both": [KernelMode.BASELINE, KernelMode.SELECTIVE]}[args.mode]
    rows: list[dict] = []
    results = {}
    failures = []
    for mode in modes:
        res = run_scenario(workload, mode, stress=args.stress,
                           cfg=make_kernel_config(args))
        results[mode] = res
        if res.audit_problems:
            failures.append(f"{mode.value}: {'; '.join(res.audit_problems)}")
        div = verify_expected(workload, res)
        if div is not None:
            failures.append(f"{mode.value}: endpoint bytes wrong: {div}")
        for sid, metrics in sorted(res.per_sock_metrics.items()):
            if not res.kernel.sockets[sid].measured:
                continue
            rows.append({"mode": mode.value, "sock": sid,
                         **metrics.report_row()})
        rows.append({"mode": mode.value, "sock": "total",
                     **res.metrics.report_row()})
    if len(modes) == 2:
        div = compare_transcripts(results[KernelMode.BASELINE].transcript,
                                  results[KernelMode.SELECTIVE].transcript)
        if div is not None:
            failures.append(f"modes diverge: {div}")
    emit_rows(rows, args.format, args.out)
    for failure in failures:
        print(f"FAIL {failure}", file=sys.stderr)
    return 1 if failures else 0


def cmd_fuzz(args: argparse.Namespace) -> int:
    master = random.Random(args.seed)
    failures = []
    for i in range(args.iterations):
        wl_seed = master.randrange(1, 2 ** 31)
        workload = gen_workload(
            seed=wl_seed,
            connections=master.randint(1, 3),
            exchanges=master.randint(1, 4),
            size_range=(master.randint(0, 2000),
                        master.randint(20_000, 120_000)),
            chunked_prob=master.random() * 0.6)
        fault = args.fault_every > 0 and (i + 1) % args.fault_every == 0
        transcripts = {}
        problems = []
        for mode in (KernelMode.BASELINE, KernelMode.SELECTIVE):
            cfg = make_kernel_config(args)
            cfg.fault_suppress_vpi = fault
            res = run_scenario(workload, mode, cfg=cfg)
            problems += [f"{mode.value}: {p}" for p in res.audit_problems]
            div = verify_expected(workload, res)
            if div is not None:
                problems.append(f"{mode.value}: {div}")
            transcripts[mode] = res.transcript
        div = compare_transcripts(transcripts[KernelMode.BASELINE],
                                  transcripts[KernelMode.SELECTIVE])
        if div is not None:
            problems.append(f"diverge: {div}")
        if problems:
            failures.append((i, wl_seed, problems))
            print(f"iteration {i} (workload seed {wl_seed}, fault={fault}): "
                  + "; ".join(problems), file=sys.stderr)
    tag = "with token-suppression faults mixed in" if args.fault_every else ""
    print(f"fuzz: {args.iterations - len(failures)}/{args.iterations} "
          f"iterations equivalent {tag}".rstrip())
    return 1 if failures else 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = resolve_options(args)
    except (ValueError, OSError) as exc:
        parser.error(str(exc))
    if args.command == "run":
        return cmd_run(args)
    return cmd_fuzz(args)


if __name__ == "__main__":
    sys.exit(main())
