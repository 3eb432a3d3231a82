"""Command line entry point: ``cisformer {train,eval,ablate,plot}``.

Exit codes: 0 success, 1 user error (bad config, missing file, checkpoint
mismatch), 2 internal error.  Run directories default to ``$CISFORMER_RUNS``
(or ``./runs``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from .config import ConfigError, load_config
from .model import FingerprintMismatch

log = logging.getLogger("cisformer")


def _overrides(args) -> dict:
    return {"seed": args.seed} if getattr(args, "seed", None) is not None else {}


def cmd_train(args) -> int:
    from .train import runs_root, train

    cfg = load_config(args.config, _overrides(args))
    out = Path(args.out) if args.out else runs_root() / Path(args.config).stem

    def progress(it, losses):
        if it % max(1, cfg.optimizer.iterations // 20) == 0:
            log.info("iter %d total %.4f", it, float(losses.total.detach()))

    run_dir = train(cfg, out, progress)
    print(run_dir)
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate, latest_checkpoint

    cfg = load_config(args.config, _overrides(args))
    ckpt = args.checkpoint
    if ckpt is None:
        if args.out is None:
            raise FileNotFoundError("pass --checkpoint or --out <run dir>")
        ckpt = latest_checkpoint(args.out)
        if ckpt is None:
            raise FileNotFoundError(f"no checkpoint in {args.out}")
    if not Path(ckpt).exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    report = evaluate(cfg, ckpt, args.split, args.out)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_ablate(args) -> int:
    from .ablation import ablate, load_sweep_config
    from .train import runs_root

    sweep = load_sweep_config(args.config)
    if args.seed is not None:
        sweep.setdefault("base", {})["seed"] = args.seed
    out = Path(args.out) if args.out else runs_root() / "ablation"
    for name, table in ablate(sweep, out).items():
        print(table)
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot

    run_dir = args.out or args.run
    if run_dir is None:
        raise FileNotFoundError("pass the run directory via --out")
    for p in plot(run_dir):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cisformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (defaults to the checkpoint's run directory)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run ablation sweeps and print the tables")
    p.add_argument("--config", required=True, help="sweep config (YAML)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="draw loss curves, AP bars and overlays for a run")
    p.add_argument("run", nargs="?")
    p.add_argument("--out", help="run directory")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FingerprintMismatch, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
