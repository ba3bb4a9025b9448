"""Command-line entry point.

Exit codes: 0 success, 1 config error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import bench
from .config import load_config
from .errors import ConfigError, DataFormatError
from .experiment import run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

COMMANDS = {
    "train": "train a dense network and save a checkpoint",
    "prune-admm": "prune with ADMM, then retrain under the mask",
    "prune-baseline": "prune with IMP, static regularization or PGD",
    "compare": "run ADMM and every baseline over seeds and sparsities",
    "bench-gemm": "time dense, compacted and CSR GEMMs of pruned layers",
    "bisect": "find the largest sparsity within an accuracy tolerance",
}


def build_parser():
    p = argparse.ArgumentParser(prog="admmprune", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, summary in COMMANDS.items():
        s = sub.add_parser(name, help=summary)
        s.add_argument("-c", "--config", help="JSON config file")
        s.add_argument("-o", "--out", help="run directory (overrides output_dir)")
        s.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key, e.g. admm.rho0=0.05")
        if name in ("prune-admm", "prune-baseline", "bisect"):
            s.add_argument("--baseline", help="checkpoint of a trained dense network")
        if name == "bench-gemm":
            s.add_argument("--table", action="store_true", help="print the speedup table")
    r = sub.add_parser("report", help="print the tables stored in a run directory")
    r.add_argument("run_dir")
    return p


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _print_rows(title, rows, out):
    if not rows:
        return
    cols = list(rows[0])
    widths = [max(len(c), *(len(r[c]) for r in rows)) for c in cols]
    print(f"\n{title}", file=out)
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)), file=out)
    for r in rows:
        print("  ".join(r[c].ljust(w) for c, w in zip(cols, widths)), file=out)


def report(run_dir, out=None):
    out = out or sys.stdout
    run_dir = Path(run_dir)
    if not (run_dir / "manifest.json").exists():
        raise ConfigError(f"{run_dir} is not a run directory")
    manifest = json.loads((run_dir / "manifest.json").read_text())
    print(f"run {run_dir} ({manifest.get('command')}, status {manifest.get('status')})", file=out)
    for name in ("metrics.csv", "compare_summary.csv", "bisect.csv"):
        if (run_dir / name).exists():
            _print_rows(name, _read_csv(run_dir / name), out)
    if (run_dir / "bench.json").exists():
        print("\nGEMM speedup over dense", file=out)
        print(bench.format_table(json.loads((run_dir / "bench.json").read_text())), file=out)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            report(args.run_dir)
            return EXIT_OK
        cfg = load_config(args.config, args.overrides)
        run_dir = run_experiment(cfg, args.command, baseline_ckpt=getattr(args, "baseline", None),
                                 out_dir=args.out)
        print(run_dir)
        if args.command == "bench-gemm" and args.table:
            print(bench.format_table(json.loads((run_dir / "bench.json").read_text())))
        if args.command == "bisect":
            res = json.loads((run_dir / "bisect.json").read_text())
            if res["feasible"]:
                print(f"max sparsity within tolerance: {res['max_sparsity']}")
            else:
                print("no feasible pruning within tolerance")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
