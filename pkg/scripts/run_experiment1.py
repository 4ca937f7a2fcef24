#!/usr/bin/env python3
"""Generate the default synthetic task and run the four-loss comparison.

Writes the dataset, the per-run metrics, and the comparison table under
--out (default: runs/experiment1). Pass --seed to change everything at
once; all other knobs via --config (see README for keys).
"""

import argparse
import os
import sys

from relguide.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/experiment1")
    ap.add_argument("--seed", type=int, default=12)
    ap.add_argument("--config", help="extra config JSON forwarded to both commands")
    args = ap.parse_args()

    data_dir = os.path.join(args.out, "data")
    extra = ["--config", args.config] if args.config else []
    code = cli_main(["generate", "--out", data_dir, "--seed", str(args.seed)])
    if code != 0:
        return code
    return cli_main(
        ["experiment1",
         "--data", os.path.join(data_dir, "train.rgtd"),
         "--val", os.path.join(data_dir, "val.rgtd"),
         "--out", args.out, "--seed", str(args.seed), *extra]
    )


if __name__ == "__main__":
    sys.exit(main())
