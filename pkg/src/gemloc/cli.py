"""Command-line entry point.

One binary, nine subcommands covering the full workflow: phantom-gen,
train-ae, train-fm, train-localizer, gem-train, infer, evaluate, ablate,
alpha-sweep. Every command resolves one configuration document (defaults,
then --config file, then --paper-scale, then individual flags) and
snapshots it into its run directory.

Exit codes: 0 success, 2 config error, 3 missing prerequisite,
4 numerical failure.
"""

import os
import sys

# pin BLAS threading before numpy loads: reruns must be bit-reproducible
for _k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_k, "1")

import argparse
import json

from gemloc import diffcore as dc
from gemloc import pipeline, runconfig
from gemloc.errors import (ConfigError, DataError, GemlocError, GeometryError,
                           MissingPrerequisiteError, NumericalError)

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--paper-scale", action="store_true",
                   help="full-scale profile: 128^3 grids, published schedules")


def _add_stage_common(p: argparse.ArgumentParser):
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gemloc")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=1)

    p = sub.add_parser("train-ae", help="pretrain the shared autoencoder")
    _add_stage_common(p)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("train-fm", help="pretrain the latent flow generator")
    _add_stage_common(p)
    p.add_argument("--ae", required=True, help="autoencoder checkpoint")
    p.add_argument("--steps", type=int, default=None,
                   help="total optimizer steps (default: epochs * batches)")
    p.add_argument("--sigma-min", type=float, default=None)
    p.add_argument("--sigma-aug", type=float, default=None,
                   help="condition noise; 0 means measure 0.1*std of latents")
    p.add_argument("--ema-decay", type=float, default=None)
    p.add_argument("--ode-steps", type=int, default=None, help="sampler steps")

    p = sub.add_parser("train-localizer", help="pretrain the zone localizer")
    _add_stage_common(p)
    p.add_argument("--ae", required=True)
    p.add_argument("--flow", default=None, help="flow checkpoint (for generated input)")
    p.add_argument("--mode", default=None, choices=pipeline.gem.MODES)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("gem-train", help="joint training from pretrained weights")
    _add_stage_common(p)
    p.add_argument("--ae", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--loc", required=True)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--mode", default=None, choices=pipeline.gem.MODES)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("infer", help="zone predictions from a pipeline checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--t2-only", action="store_true", default=None,
                   help="forbid functional reads (default for non-oracle modes)")
    p.add_argument("--split", default=None, choices=("train", "val", "test"))

    p = sub.add_parser("evaluate", help="report CSV from prediction CSVs")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pred", action="append", required=True,
                   help="predictions CSV; repeat once per seed")

    p = sub.add_parser("ablate", help="arm matrix across seeds")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--arms", default=",".join(pipeline.ARMS))
    p.add_argument("--jobs", type=int, default=None)

    p = sub.add_parser("alpha-sweep", help="feedback-weight sweep across seeds")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default=None)
    p.add_argument("--alphas", default=",".join(format(a, "g") for a in pipeline.ALPHA_GRID))
    p.add_argument("--pretrained", default=None,
                   help="ablate output root to reuse pretrained checkpoints from")
    p.add_argument("--jobs", type=int, default=None)

    return ap


def _overrides(args) -> dict:
    """Dotted-path overrides from the flags the user actually passed."""
    table = {
        "steps": None,  # handled by the stage runner, not the config
        "sigma_min": "flow.sigma_min",
        "sigma_aug": "flow.sigma_aug",
        "ema_decay": "flow.ema_decay",
        "ode_steps": "flow.ode_steps",
        "alpha": "gem.alpha",
        "mode": "gem.mode",
    }
    epochs_target = {"train-ae": "ae.epochs", "train-fm": "flow.epochs",
                     "train-localizer": "localizer.epochs", "gem-train": "gem.epochs"}
    out = {}
    for name, path in table.items():
        val = getattr(args, name, None)
        if val is not None and path is not None:
            out[path] = val
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        out[epochs_target[args.command]] = epochs
    if getattr(args, "seeds", None):
        try:
            out["seeds"] = [int(s) for s in str(args.seeds).split(",") if s]
        except ValueError:
            raise ConfigError(f"--seeds must be comma-separated ints, got {args.seeds!r}")
    return out


def _seed(args, cfg) -> int:
    return cfg.seeds[0] if getattr(args, "seed", None) is None else args.seed


def run(args) -> int:
    if args.command == "infer":
        out = pipeline.run_infer(args.data, args.out, args.checkpoint,
                                 split=args.split, t2_only=args.t2_only)
        print(f"wrote {out['predictions']} ({out['n_cases']} cases, "
              f"functional reads: {out['func_reads']})")
        return 0

    cfg, doc = runconfig.resolve(args.config, paper_scale=args.paper_scale,
                                 overrides=_overrides(args))
    if args.command == "phantom-gen":
        manifest = pipeline.run_phantom_gen(args.out, args.n, args.seed, cfg, doc)
        sizes = {k: len(v) for k, v in manifest["splits"].items()}
        print(f"wrote {args.n} cases under {args.out} "
              f"(train/val/test = {sizes['train']}/{sizes['val']}/{sizes['test']})")
    elif args.command == "train-ae":
        out = pipeline.run_train_ae(args.data, args.out, cfg, doc, _seed(args, cfg))
        print(f"wrote {out['ckpt']}")
    elif args.command == "train-fm":
        out = pipeline.run_train_fm(args.data, args.out, cfg, doc, _seed(args, cfg),
                                    args.ae, steps=args.steps)
        print(f"wrote {out['ckpt']} (sigma_aug = {out['sigma_aug']:.6g})")
    elif args.command == "train-localizer":
        mode = args.mode or cfg.gem.mode
        out = pipeline.run_train_localizer(args.data, args.out, cfg, doc,
                                           _seed(args, cfg), mode, args.ae,
                                           flow_ckpt=args.flow)
        print(f"wrote {out['ckpt']} and {out['pipeline']}")
    elif args.command == "gem-train":
        out = pipeline.run_gem_train(args.data, args.out, cfg, doc, _seed(args, cfg),
                                     args.ae, args.flow, args.loc)
        print(f"wrote {out['pipeline']}")
    elif args.command == "evaluate":
        pipeline.run_evaluate(args.data, args.out, args.pred, doc)
        print(f"wrote {os.path.join(args.out, 'report.csv')} "
              f"({len(args.pred)} seed runs)")
    elif args.command == "ablate":
        arms = tuple(a for a in args.arms.split(",") if a)
        out = pipeline.run_ablate(args.data, args.out, cfg, doc, arms=arms,
                                  jobs=args.jobs)
        print(f"wrote {out['table']}")
        for arm, v in out["zone_qwk"].items():
            print(f"  {arm:>16s}  zone QWK (seed mean) = {v:.4f}")
    elif args.command == "alpha-sweep":
        alphas = tuple(float(a) for a in args.alphas.split(",") if a)
        out = pipeline.run_alpha_sweep(args.data, args.out, cfg, doc, alphas=alphas,
                                       pretrained=args.pretrained, jobs=args.jobs)
        print(f"wrote {out['table']}")
        for a, v in out["zone_qwk"].items():
            print(f"  alpha {a:>5s}  zone QWK (seed mean) = {v:.4f}")
    else:
        raise ConfigError(f"unknown command {args.command!r}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except (MissingPrerequisiteError, FileNotFoundError) as e:
        print(f"error: missing prerequisite: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, dc.NonFiniteError, dc.NonFiniteGradError) as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, DataError, GeometryError, dc.ShapeError, GemlocError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
