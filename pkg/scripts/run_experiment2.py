#!/usr/bin/env python3
"""Generate the default synthetic task and compare conventional vs guided
training curves over 20 iterations (shared seed and data order).

Writes conventional.csv and guided.csv under --out (default:
runs/experiment2), aligned by iteration index.
"""

import argparse
import os
import sys

from relguide.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/experiment2")
    ap.add_argument("--seed", type=int, default=12)
    ap.add_argument("--power", type=float, default=1.0)
    ap.add_argument("--config", help="extra config JSON forwarded to both commands")
    args = ap.parse_args()

    data_dir = os.path.join(args.out, "data")
    extra = ["--config", args.config] if args.config else []
    code = cli_main(["generate", "--out", data_dir, "--seed", str(args.seed)])
    if code != 0:
        return code
    return cli_main(
        ["experiment2",
         "--data", os.path.join(data_dir, "train.rgtd"),
         "--val", os.path.join(data_dir, "val.rgtd"),
         "--out", args.out, "--seed", str(args.seed),
         "--power", str(args.power), *extra]
    )


if __name__ == "__main__":
    sys.exit(main())
