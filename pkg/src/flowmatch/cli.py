"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 experiment-cell failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .flows import (DatasetError, EmpiricalIpdv, FlowSet, NormalIpdv, TraceParseError,
                    load_dataset, load_ipdv_file, generate_synthetic_corpus,
                    save_dataset, scan_dataset_dir, serialize_trace)
from .hashing import (BasisSet, FlowDiscarded, HashConfig, compute_hash,
                      load_hash_library, save_hash_library)
from .impair import (ApConfig, CalibrationError, ImpairmentConfig, build_histograms,
                     calibrate_padding_rate, impair_trace, load_histograms,
                     pad_flowset, padding_rate, save_histograms)
from .matching import HashLibrary, MatchKind, nearest_match_batch, _classify
from .seeds import derive_seed

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CELL = 3

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that exits with code 1 on usage errors, per our contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"error: usage: {message}\n")


def _parse_ipdv(spec: str):
    """`<file>` or `normal:mean,sd[,min,max]` (seconds)."""
    if spec.startswith("normal:"):
        parts = spec[len("normal:"):].split(",")
        if len(parts) not in (2, 4):
            raise UsageError("--ipdv normal form is normal:mean,sd[,min,max]")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise UsageError(f"bad --ipdv numbers in {spec!r}") from None
        if len(vals) == 2:
            mean, sd = vals
            return NormalIpdv(mean, sd)
        return NormalIpdv(*vals)
    return load_ipdv_file(spec)


def cmd_ingest(args) -> int:
    entries, skipped = scan_dataset_dir(Path(args.dataset))
    flows = load_dataset(args.dataset)
    packets = sum(t.n_packets for t in flows)
    print(f"flows: {flows.l}")
    print(f"sites: {len(flows.sites())}")
    print(f"packets: {packets}")
    print(f"skipped_files: {skipped}")
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    flows = generate_synthetic_corpus(args.sites, args.instances, seed=args.seed)
    save_dataset(flows, args.out)
    print(f"wrote {flows.l} traces to {args.out}")
    return EXIT_OK


def cmd_hash(args) -> int:
    flows = load_dataset(args.dataset)
    cfg = HashConfig(args.n_windows, args.bits, args.basis_seed)
    basis = BasisSet.from_seed(args.basis_seed, args.bits)
    hashes = []
    discarded = 0
    for t in flows:
        try:
            hashes.append(compute_hash(t, cfg, basis))
        except FlowDiscarded:
            discarded += 1
    if not hashes:
        raise DatasetError("every flow was discarded (fewer packets than windows)")
    comment = f"n_windows={cfg.n_windows} bits={cfg.hash_bits} basis_seed={cfg.basis_seed}"
    save_hash_library(args.out, hashes, header_comment=comment)
    print(f"hashed {len(hashes)} flows ({discarded} discarded) -> {args.out}")
    return EXIT_OK


def cmd_impair(args) -> int:
    flows = load_dataset(args.dataset)
    cfg = ImpairmentConfig(args.drop, _parse_ipdv(args.ipdv), seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emptied = 0
    written = 0
    for t in flows:
        modified = impair_trace(t, cfg)
        if modified.n_packets == 0:
            emptied += 1
            continue
        (out / str(t.id)).write_text(serialize_trace(modified))
        written += 1
    print(f"impaired {written} traces ({emptied} emptied by drop) -> {out}")
    return EXIT_OK


def cmd_pad(args) -> int:
    flows = load_dataset(args.dataset)
    if args.histograms:
        hists = load_histograms(args.histograms)
    else:
        hists = build_histograms(flows, split_threshold=args.split)
    cfg = ApConfig(hists, target_padding_rate=args.rate, seed=args.seed)
    if args.rate_scale is not None:
        scale = args.rate_scale
    else:
        scale = calibrate_padding_rate(flows, cfg)
    from dataclasses import replace
    cfg = replace(cfg, rate_scale=scale)
    padded = pad_flowset(flows, cfg)
    save_dataset(padded, args.out)
    if not args.histograms:
        save_histograms(Path(args.out) / "histograms.csv", hists)
    measured = float(np.mean([padding_rate(t) for t in padded]))
    print(f"padded {padded.l} traces at rate_scale={scale:.5g}, "
          f"measured padding rate {measured:.3f} -> {args.out}")
    return EXIT_OK


def cmd_match(args) -> int:
    queries = load_hash_library(args.queries)
    library = load_hash_library(args.library)
    if args.nearest == (args.tau is not None):
        raise UsageError("pass exactly one of --nearest or --tau")
    rows = []
    if args.nearest:
        for q, o in zip(queries, nearest_match_batch(queries, library)):
            rows.append((q.id, o.kind.value, o.matched_ids, o.score))
    else:
        lib = HashLibrary(library)
        for q in queries:
            d = lib.distances(q)
            hit = np.flatnonzero(d < args.tau)
            matched = tuple(lib.ids[i] for i in hit)
            kind = _classify(q.id, matched) if matched else MatchKind.MISS
            rows.append((q.id, kind.value, matched, float(d.min())))
    lines = ["query_site,query_instance,outcome,matched_ids,score"]
    for qid, kind, matched, score in rows:
        ids = ";".join(str(i) for i in matched)
        lines.append(f"{qid.site},{qid.instance},{kind},{ids},{score:g}")
    Path(args.out).write_text("\n".join(lines) + "\n")
    perfect = sum(1 for r in rows if r[1] == "perfect") / len(rows) if rows else 0.0
    print(f"matched {len(rows)} queries (perfect rate {perfect:.3f}) -> {args.out}")
    return EXIT_OK


def _run_config_command(args, kind: str) -> int:
    cfg = harness.ExperimentConfig.from_file(args.config)
    if args.out:
        import dataclasses
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    if kind == "eval-roc":
        report = harness.run_unpadded_experiment(cfg, with_nn=False)
    elif kind == "run-unpadded":
        report = harness.run_unpadded_experiment(cfg)
    elif kind == "eval-scc":
        if cfg.ap_rate_scale is None:
            raise UsageError("eval-scc needs ap_rate_scale in the config "
                             "(use run-padded to calibrate)")
        report = harness.run_padded_experiment(cfg)
    else:
        report = harness.run_padded_experiment(cfg)
    report.save(cfg.out_dir)
    for c in report.cells:
        status = f"error: {c.error}" if c.error else "ok"
        print(f"cell {c.name}: {status} ({c.seconds:.2f}s)")
    print(f"report -> {cfg.out_dir}/summary.json")
    if report.failed_cells:
        print(f"error: cells failed: {','.join(report.failed_cells)}", file=sys.stderr)
        return EXIT_CELL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowmatch",
                     description="Robust flow hashing and flow-matching toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[], help="validate a dataset directory")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("gen-synth", help="generate a synthetic corpus")
    p.add_argument("--sites", type=int, required=True)
    p.add_argument("--instances", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("hash", help="hash every flow of a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--n-windows", type=int, default=256)
    p.add_argument("--bits", type=int, default=256)
    p.add_argument("--basis-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hash)

    p = sub.add_parser("impair", help="apply drop + jitter to a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--drop", type=float, required=True)
    p.add_argument("--ipdv", required=True,
                   help="empirical sample file, or normal:mean,sd[,min,max]")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_impair)

    p = sub.add_parser("pad", help="adaptively pad a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--histograms", help="histogram file (default: build from dataset)")
    p.add_argument("--rate", type=float, default=0.54)
    p.add_argument("--rate-scale", type=float, default=None,
                   help="skip calibration and use this scale")
    p.add_argument("--split", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pad)

    p = sub.add_parser("match", help="match query hashes against a library")
    p.add_argument("--queries", required=True)
    p.add_argument("--library", required=True)
    p.add_argument("--tau", type=int, default=None)
    p.add_argument("--nearest", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_match)

    for name in ("eval-roc", "eval-scc", "run-unpadded", "run-padded"):
        p = sub.add_parser(name, help=f"{name} from a JSON config file")
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None, help="override config out_dir")
        p.add_argument("--print-config", action="store_true")
        p.set_defaults(func=lambda a, _n=name: _run_config_command(a, _n))

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, TraceParseError, FlowDiscarded, CalibrationError,
            OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
