"""Run the four-arm ablation on phantom data.

Generates the dataset if it does not exist, then trains and evaluates
zero_fill / decoupled / decoupled_crf / full_gem for each seed and
writes the cross-arm comparison table to <out>/ablation.csv.
"""

import argparse
import sys
from pathlib import Path

from gemloc import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", default="runs/phantom200", help="dataset root")
    ap.add_argument("--out", default="runs/ablation", help="experiment root")
    ap.add_argument("--config", default=None, help="JSON config file")
    ap.add_argument("--n", type=int, default=200, help="phantom case count")
    ap.add_argument("--seed", type=int, default=1, help="phantom dataset seed")
    ap.add_argument("--seeds", default="1,2,3", help="training seeds, comma-separated")
    ap.add_argument("--paper-scale", action="store_true")
    args = ap.parse_args()

    common = []
    if args.config is not None:
        common += ["--config", args.config]
    if args.paper_scale:
        common += ["--paper-scale"]

    if not (Path(args.data) / "manifest.json").exists():
        rc = cli.main(["phantom-gen", "--out", args.data, "--n", str(args.n),
                       "--seed", str(args.seed)] + common)
        if rc != 0:
            return rc
    return cli.main(["ablate", "--data", args.data, "--out", args.out,
                     "--seeds", args.seeds] + common)


if __name__ == "__main__":
    sys.exit(main())
