"""Command-line benchmark harness.

Exit status: 0 when every oracle passed, 1 on an oracle failure, 2 on a
usage error.
"""

import argparse
import csv
import logging
import os
import sys

from folkmap import bench


def build_parser():
    p = argparse.ArgumentParser(prog="folkmap-bench", description=__doc__.splitlines()[0])
    p.add_argument("--scenario", required=True, choices=bench.SCENARIOS)
    p.add_argument("--variant", default="uaGrow", choices=bench.TABLE_VARIANTS)
    p.add_argument("--threads", type=int, default=min(4, os.cpu_count() or 1))
    p.add_argument("--ops", type=int, default=1_000_000)
    p.add_argument("--prefill", type=int, default=None,
                   help="prefill size for the mixed scenario (default 8192 * threads)")
    p.add_argument("--capacity", type=int, default=None,
                   help="expected element count passed to the table constructor")
    p.add_argument("--zipf-s", type=float, default=1.0)
    p.add_argument("--zipf-n", type=int, default=1_000_000)
    p.add_argument("--wp", type=float, default=0.1, help="write fraction for mixed")
    p.add_argument("--window", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--out", default=None, help="CSV file to append to (default stdout)")
    p.add_argument("--verify", choices=("on", "off"), default="on")
    p.add_argument("--pin", choices=("auto", "off"), default="auto")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        sc = bench.Scenario(
            kind=args.scenario, variant=args.variant, threads=args.threads, ops=args.ops,
            prefill=args.prefill, capacity=args.capacity, zipf_s=args.zipf_s,
            zipf_n=args.zipf_n, wp=args.wp, window=args.window, seed=args.seed,
            reps=args.reps, verify=args.verify == "on", pin=args.pin)
    except ValueError as exc:
        parser.error(str(exc))

    result = bench.run(sc)
    if args.out:
        bench.emit_csv([result], args.out)
        bench.write_metadata([result], args.out + ".meta.json")
    else:
        writer = csv.DictWriter(sys.stdout, fieldnames=bench.CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(bench.csv_rows(result))
    status = "pass" if result.passed else "FAIL " + ",".join(result.failures())
    print(f"{sc.kind} {sc.variant} p={sc.threads}: {result.mops:.3f} Mops/s, "
          f"capacity {result.capacity_final}, oracles {status}", file=sys.stderr)
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
