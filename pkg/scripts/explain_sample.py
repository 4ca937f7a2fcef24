#!/usr/bin/env python3
"""Heatmaps plus similar-case retrieval for one sample of a dataset,
given trained weights.

Example:
    python scripts/explain_sample.py --weights runs/experiment1/weights_penalization1.rgtw \
        --data runs/experiment1/data/val.rgtd --sample-id 1000003 --layer 7 --out runs/explain
"""

import argparse
import os
import sys

from relguide.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--weights", required=True)
    ap.add_argument("--data", required=True)
    ap.add_argument("--sample-id", type=int, required=True)
    ap.add_argument("--layer", type=int, default=7)
    ap.add_argument("--k", type=int, default=3)
    ap.add_argument("--out", default="runs/explain")
    args = ap.parse_args()

    code = cli_main(
        ["explain", "--weights", args.weights, "--data", args.data,
         "--sample-id", str(args.sample_id), "--out", os.path.join(args.out, "heatmaps")]
    )
    if code != 0:
        return code
    return cli_main(
        ["retrieve", "--weights", args.weights, "--atlas", args.data,
         "--query-id", str(args.sample_id), "--layer", str(args.layer),
         "--k", str(args.k), "--out", os.path.join(args.out, "neighbors")]
    )


if __name__ == "__main__":
    sys.exit(main())
