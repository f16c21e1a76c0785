"""Command-line front end: ``verify``, ``bounds`` and ``oracle``.

Reports go to stdout as JSON; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from typing import Optional, Sequence

import jsonschema
import numpy as np

from .engine import EngineConfig, Verdict, verify
from .interval import DimensionError, InputBox
from .network import NetworkFormatError, load_network
from .oracle import DEFAULT_ORACLE_LIMIT, OracleLimitError, exact_output_range
from .properties import PropertyError, check_dimensions, parse_property
from .propagation import nia_forward, sia_forward, slr_forward

EXIT_CODES = {
    Verdict.SAFE: 0,
    Verdict.VIOLATED: 1,
    Verdict.TIMEOUT: 2,
    Verdict.SOLVER_FAILURE: 3,
}
EX_USAGE = 64
EX_DATAERR = 65
EX_NOINPUT = 66
EX_SOFTWARE = 70

LOG_ENV = "NEURIFY_STYLE_LOG"
ROUNDING_WIDTH = 1e-12


class UsageError(Exception):
    def __init__(self, message: str, code: int = EX_USAGE):
        super().__init__(message)
        self.code = code


def _load_schema() -> dict:
    text = resources.files("reluverify").joinpath("data/report.schema.json").read_text()
    return json.loads(text)


REPORT_SCHEMA = _load_schema()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunReport:
    command: str
    config: dict
    started_at: str = field(default_factory=_now)
    finished_at: str = ""
    result: Optional[dict] = None
    bounds: Optional[dict] = None
    widths: Optional[dict] = None
    improvement_pct: Optional[list] = None
    exact: Optional[list] = None

    def to_dict(self) -> dict:
        doc = {"command": self.command, "started_at": self.started_at,
               "finished_at": self.finished_at or _now(), "config": self.config}
        for key in ("result", "bounds", "widths", "improvement_pct", "exact"):
            value = getattr(self, key)
            if value is not None:
                doc[key] = value
        jsonschema.validate(doc, REPORT_SCHEMA)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "RunReport":
        jsonschema.validate(doc, REPORT_SCHEMA)
        return cls(**doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


class _Parser(argparse.ArgumentParser):
    # argparse's own exit status 2 would collide with the timeout verdict
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EX_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def _non_negative_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="reluverify", description="Formal safety checks for feed-forward ReLU networks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, needs_property: bool):
        sp.add_argument("--network", required=True, help="NNet or JSON network file")
        sp.add_argument("--property", required=needs_property, help="property JSON file")
        sp.add_argument("--assume-normalized", action="store_true",
                        help="treat property numbers as already normalized network inputs")

    v = sub.add_parser("verify", help="prove a property or find a counterexample")
    common(v, True)
    v.add_argument("--timeout", type=_positive_float, default=3600.0, help="seconds (default 3600)")
    v.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1)
    v.add_argument("--max-depth", type=_non_negative_int, default=None,
                   help="split limit (default: number of ReLUs)")
    v.add_argument("--seed", type=int, default=None, help="recorded in the report; verification is deterministic")

    b = sub.add_parser("bounds", help="compare output bounds of the propagators")
    common(b, True)
    b.add_argument("--mode", choices=("all", "nia", "sia", "slr"), default="all")

    o = sub.add_parser("oracle", help="exact output range by enumerating activation patterns")
    common(o, False)
    o.add_argument("--limit", type=_non_negative_int, default=DEFAULT_ORACLE_LIMIT, help="maximum ReLU count")
    return p


def _read_inputs(args, need_property: bool = True):
    try:
        net = load_network(args.network)
    except FileNotFoundError:
        raise UsageError(f"network file not found: {args.network}", EX_NOINPUT) from None
    except OSError as exc:
        raise UsageError(f"cannot read network file {args.network}: {exc}", EX_NOINPUT) from None
    except (NetworkFormatError, ValueError) as exc:
        raise UsageError(f"{args.network}: {exc}", EX_DATAERR) from None
    if not need_property:
        return net, None, None, False
    try:
        with open(args.property, "rb") as fh:
            doc = parse_property(fh.read())
    except FileNotFoundError:
        raise UsageError(f"property file not found: {args.property}", EX_NOINPUT) from None
    except OSError as exc:
        raise UsageError(f"cannot read property file {args.property}: {exc}", EX_NOINPUT) from None
    except PropertyError as exc:
        raise UsageError(f"{args.property}: {exc}", EX_DATAERR) from None
    norm = None if args.assume_normalized else net.normalization
    mapped = not doc.normalized and norm is not None
    try:
        region = doc.region_for(norm)
        check_dimensions(region, doc.prop, net.input_dim, net.output_dim)
    except (DimensionError, ValueError) as exc:
        raise UsageError(f"{args.property}: {exc}", EX_DATAERR) from None
    return net, region, doc.prop, mapped


def cmd_verify(args) -> int:
    report = RunReport("verify", {})
    net, region, prop, mapped = _read_inputs(args)
    cfg = EngineConfig(timeout=args.timeout, max_depth=args.max_depth, workers=args.threads)
    report.config = {
        "network": args.network, "property": args.property, "timeout": cfg.timeout,
        "threads": cfg.workers, "max_depth": cfg.depth_limit(net), "seed": args.seed,
        "normalized_inputs": mapped,
    }
    result = verify(net, region, prop, cfg)
    report.result = result.to_dict()
    report.finished_at = _now()
    print(report.to_json())
    if result.verdict is Verdict.VIOLATED:
        print(f"counterexample: {result.witness.tolist()} -> {result.outputs.tolist()}", file=sys.stderr)
    return EXIT_CODES[result.verdict]


def _pairs(intervals) -> list:
    return [[float(iv.lo), float(iv.hi)] for iv in intervals]


def cmd_bounds(args) -> int:
    net, region, _, mapped = _read_inputs(args)
    box = region.encode().box
    modes = ("nia", "sia", "slr") if args.mode == "all" else (args.mode,)
    compute = {
        "nia": lambda: nia_forward(net, box),
        "sia": lambda: sia_forward(net, box).output_intervals(),
        "slr": lambda: slr_forward(net, box).output_intervals(),
    }
    report = RunReport("bounds", {"network": args.network, "property": args.property,
                                  "mode": args.mode, "normalized_inputs": mapped})
    report.bounds = {m: _pairs(compute[m]()) for m in modes}
    report.widths = {m: [hi - lo for lo, hi in report.bounds[m]] for m in modes}
    if "nia" in modes and "slr" in modes:
        pct = []
        for (lo, hi), wn, ws in zip(report.bounds["slr"], report.widths["nia"], report.widths["slr"]):
            # a width that is only rounding slack has no meaningful ratio
            flat = ws <= ROUNDING_WIDTH * max(1.0, abs(lo), abs(hi))
            pct.append(None if flat else 100.0 * (wn / ws - 1.0))
        report.improvement_pct = pct
    report.finished_at = _now()
    print(report.to_json())
    for m in modes:
        print(f"{m}: widths {np.round(report.widths[m], 6).tolist()}", file=sys.stderr)
    return 0


def cmd_oracle(args) -> int:
    net, region, _, mapped = _read_inputs(args, need_property=args.property is not None)
    if net.relu_count > args.limit:
        raise UsageError(f"network has {net.relu_count} ReLUs; the oracle limit is {args.limit}", EX_DATAERR)
    if region is not None:
        box = region.encode().box
    elif net.normalization is not None:
        # no property: use the input domain the network itself declares
        norm = net.normalization
        box = InputBox(norm.normalize(norm.mins), norm.normalize(norm.maxes))
    else:
        raise UsageError("--property is required when the network declares no input domain")
    report = RunReport("oracle", {"network": args.network, "property": args.property,
                                  "oracle_limit": args.limit, "normalized_inputs": mapped})
    try:
        report.exact = _pairs(exact_output_range(net, box, limit=args.limit))
    except OracleLimitError as exc:
        raise UsageError(str(exc), EX_DATAERR) from None
    report.finished_at = _now()
    print(report.to_json())
    return 0


COMMANDS = {"verify": cmd_verify, "bounds": cmd_bounds, "oracle": cmd_oracle}


def _configure_logging() -> None:
    level = logging.DEBUG if os.environ.get(LOG_ENV, "").lower() == "debug" else logging.WARNING
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"reluverify: {exc}", file=sys.stderr)
        return exc.code
    except jsonschema.ValidationError as exc:
        print(f"reluverify: report failed schema validation: {exc.message}", file=sys.stderr)
        return EX_SOFTWARE


if __name__ == "__main__":
    sys.exit(main())
