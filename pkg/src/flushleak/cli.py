"""Command-line front end.

Exit codes: 0 success, 1 analysis-level failure (e.g. a sequence that does
not reset), 2 usage or configuration error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .attack import analyze_detection
from .cpuconfig import ConfigError, leakage_table, load_config_dir, table_csv
from .distinguish import (
    SearchLimitExceeded,
    best_adaptive_tree,
    best_preset_sequence,
    default_alphabet,
    find_reset_sequence,
    reset_targets,
)
from .dsl import ScriptError, run_script
from .flush import FlushBehavior, FlushKind, canonical_content, flush_refill_map, refill_order
from .leakage import mutual_information
from .policy import (
    InvariantViolation,
    PolicyConfig,
    PolicyError,
    PolicyKind,
    block_name,
    count_valid_states_closed_form,
    encode_control,
    enumerate_control_states,
    parse_blocks,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _policy(args) -> PolicyConfig:
    return PolicyConfig.of(args.policy, args.assoc)


def _seq(blocks) -> str:
    return " ".join(block_name(b) for b in blocks)


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _channel(args):
    policy = _policy(args)
    kind = FlushKind(args.flush_kind)
    if kind is FlushKind.FLUSH_CMD and policy.kind is not PolicyKind.PLRU:
        raise UsageError("flushcmd is only available for L1 (PLRU) caches")
    behavior = FlushBehavior.PRESERVES_CONTROL if args.preserve else FlushBehavior.RESETS_CONTROL
    spec = args.refill
    if spec not in (None, "asc", "desc"):
        spec = parse_blocks(spec)
    return flush_refill_map(policy, kind, behavior, refill_order(policy, spec))


def cmd_run(args) -> int:
    text = Path(args.script).read_bytes()
    overrides = {"policy": args.policy, "assoc": args.assoc, "flush": args.flush}
    result = run_script(text, overrides)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(result.observation_string())
    if args.verbose:
        print(f"final state: {result.state}")
    return EXIT_OK


def cmd_leakage(args) -> int:
    report = mutual_information(_channel(args))
    print(json.dumps(report.to_json(), indent=2))
    return EXIT_OK


def cmd_map(args) -> int:
    _write(_channel(args).to_csv(), args.out)
    return EXIT_OK


def cmd_distinguish(args) -> int:
    policy = _policy(args)
    content = canonical_content(policy)
    alphabet = default_alphabet(content, args.fresh)
    if args.mode == "preset":
        seq, part = best_preset_sequence(policy, content, alphabet=alphabet, max_len=args.max_len)
        if args.json:
            print(json.dumps({"sequence": [block_name(b) for b in seq], "cells": part.to_json(policy)}, indent=2))
        else:
            print(f"sequence: {_seq(seq)}")
            print(f"cells: {len(part)}")
            for cell in part.to_json(policy):
                print(f"  {cell['trace'] or '-'}: {{{', '.join(cell['states'])}}}")
    else:
        tree = best_adaptive_tree(policy, content, alphabet=alphabet, max_depth=args.max_len)
        if args.json:
            print(json.dumps({"leaves": len(tree.leaves()), "tree": tree.to_json()}, indent=2))
        else:
            print(tree.render())
            print(f"leaves: {len(tree.leaves())}")
    return EXIT_OK


def cmd_reset(args) -> int:
    policy = _policy(args)
    content = canonical_content(policy)
    if args.verify is not None:
        seq = parse_blocks(args.verify)
        targets = reset_targets(policy, content, seq)
        ok = len(targets) == 1
        print(f"reset: {str(ok).lower()}")
        if ok:
            print(f"target: {encode_control(policy, next(iter(targets)))}")
        else:
            print(f"end states: {len(targets)}")
        return EXIT_OK if ok else EXIT_FAIL
    seq = find_reset_sequence(policy, content, args.max_len)
    if seq is None:
        print(f"no reset sequence of length <= {args.max_len}")
        return EXIT_FAIL
    print(f"sequence: {_seq(seq)}")
    print(f"length: {len(seq)}")
    return EXIT_OK


def cmd_attack(args) -> int:
    report = analyze_detection(_policy(args), args.victim_blocks, args.max_accesses, args.invalidate_before)
    _write(report.to_csv(), args.out)
    return EXIT_OK


def cmd_table(args) -> int:
    rows = leakage_table(load_config_dir(args.configs))
    _write(table_csv(rows), args.out)
    return EXIT_OK


def cmd_enumerate(args) -> int:
    policy = _policy(args)
    states = enumerate_control_states(policy)
    print(f"states: {len(states)}")
    print(f"closed form: {count_valid_states_closed_form(policy)}")
    if args.list:
        for s in states:
            print(encode_control(policy, s))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flushleak", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    def policy_args(p, policy="plru", assoc=8):
        p.add_argument("--policy", default=policy, help="plru, qlru_h00_m1_r2_u1 or opaque")
        p.add_argument("--assoc", type=int, default=assoc)

    p = sub.add_parser("run", help="evaluate an access script (.fg)")
    p.add_argument("script")
    p.add_argument("--policy")
    p.add_argument("--assoc", type=int)
    p.add_argument("--flush", choices=["preserve", "reset"])
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_run)

    for name, func, helptext in (
        ("leakage", cmd_leakage, "mutual information of the flush-refill channel"),
        ("map", cmd_map, "export the flush-refill channel as CSV"),
    ):
        p = sub.add_parser(name, help=helptext)
        policy_args(p)
        p.add_argument("--flush-kind", choices=[k.value for k in FlushKind], default="wbinvd")
        p.add_argument("--preserve", type=_bool, default=True)
        p.add_argument("--refill", help="asc, desc or an explicit block list such as 'I8 I9 ...'")
        if name == "map":
            p.add_argument("--out")
        p.set_defaults(func=func)

    p = sub.add_parser("distinguish", help="optimal preset sequence or adaptive tree")
    policy_args(p, assoc=4)
    p.add_argument("--mode", choices=["preset", "adaptive"], default="preset")
    p.add_argument("--max-len", type=int, default=4)
    p.add_argument("--fresh", type=int, default=1, help="number of non-resident blocks to probe with")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_distinguish)

    p = sub.add_parser("reset", help="find or verify a hit-only reset sequence")
    policy_args(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--find", action="store_true")
    g.add_argument("--verify", metavar="BLOCKS")
    p.add_argument("--max-len", type=int, default=8)
    p.set_defaults(func=cmd_reset)

    p = sub.add_parser("attack", help="exhaustive flush-resistant Prime+Probe analysis")
    policy_args(p)
    p.add_argument("--victim-blocks", type=int, default=2)
    p.add_argument("--max-accesses", type=int, default=3)
    p.add_argument("--invalidate-before", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("table", help="leakage for every bundled CPU and cache level")
    p.add_argument("--configs", default="bundled", help="directory of CPU JSON configs (default: bundled)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("enumerate", help="count (and list) control states")
    policy_args(p)
    p.add_argument("--list", action="store_true")
    p.set_defaults(func=cmd_enumerate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvariantViolation as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except SearchLimitExceeded as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    except (UsageError, ConfigError, ScriptError, PolicyError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
