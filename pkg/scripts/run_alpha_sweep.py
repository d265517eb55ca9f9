"""Sweep the generator-loss weight alpha for full joint training.

Each (seed, alpha) cell retrains the joint stage from the shared
pretrained checkpoints and evaluates on the test split; results land in
<out>/alpha_sweep.csv. Point --pretrained at an ablation root to reuse
its per-seed autoencoder / flow / localizer checkpoints.
"""

import argparse
import sys
from pathlib import Path

from gemloc import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", default="runs/phantom200", help="dataset root")
    ap.add_argument("--out", default="runs/alpha_sweep", help="experiment root")
    ap.add_argument("--config", default=None, help="JSON config file")
    ap.add_argument("--n", type=int, default=200, help="phantom case count")
    ap.add_argument("--seed", type=int, default=1, help="phantom dataset seed")
    ap.add_argument("--seeds", default="1,2,3", help="training seeds, comma-separated")
    ap.add_argument("--alphas", default="0.05,0.1,0.2,0.5")
    ap.add_argument("--pretrained", default=None,
                    help="ablation root with per-seed pretrained checkpoints")
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
    argv = ["alpha-sweep", "--data", args.data, "--out", args.out,
            "--seeds", args.seeds, "--alphas", args.alphas] + common
    if args.pretrained is not None:
        argv += ["--pretrained", args.pretrained]
    return cli.main(argv)


if __name__ == "__main__":
    sys.exit(main())
