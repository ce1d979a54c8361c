"""``reverse-rl`` command line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .errors import ReverseRLError
from .harness import ExperimentConfig, load_config, run

log = logging.getLogger("reverse_rl")

SUBCOMMANDS = ("oracle", "learn", "lambda-sweep", "dist-train", "detect")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config or manifest; flags override it")
    common.add_argument("--preset", help="named MDP preset (microdrone)")
    common.add_argument("--mdp", type=Path, help="MDP JSON document instead of a preset")
    common.add_argument("--seeds", type=int, help="run seeds 0..N-1")
    common.add_argument("--master-seed", type=int)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--ideal-rewards", action="store_true", default=None,
                        help="deterministic 2/1 rewards on the microdrone")
    common.add_argument("--mve-normalized", action="store_true", default=None,
                        help="divide the MVE by the number of states")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="reverse-rl", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("oracle", parents=[common], help="analytic forward/reverse GVFs and d_pi")
    p.add_argument("--dist", action="store_true", default=None,
                   help="also write the reverse-return distributions")
    p.add_argument("--method", choices=("matrix_solve", "monte_carlo"))

    p = sub.add_parser("learn", parents=[common], help="Reverse TD learning curves")
    p.add_argument("--lam", type=float)
    p.add_argument("--schedule", choices=("constant", "robbins_monro"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--off-policy", action="store_true", default=None)
    p.add_argument("--target-a1", type=float, help="target probability of action a1")
    p.add_argument("--behavior-a1", type=float, help="behavior probability of action a1")
    p.add_argument("--features", help="tabular or random:<K>:<seed>")

    p = sub.add_parser("lambda-sweep", parents=[common], help="lambda x alpha grid with tuning")
    p.add_argument("--steps", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--lambdas", type=float, nargs="+")
    p.add_argument("--alphas", type=float, nargs="+")

    for name, text in (("dist-train", "phase-1 quantile training"),
                       ("detect", "phase-2 streaming detection")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--phase1-steps", type=int)
        p.add_argument("--n-quantiles", type=int)
        p.add_argument("--kappa", type=float)
        p.add_argument("--alpha", type=float)
    p.add_argument("--spec", action="append", help="none, reward:D:P or policy:P (repeatable)")
    p.add_argument("--steps", type=int, help="phase-2 stream length")
    p.add_argument("--onset", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--model", type=Path, help="quantile CSV; skips phase 1")
    return parser


def _override(block, **values):
    return replace(block, **{k: v for k, v in values.items() if v is not None})


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    experiment = args.command.replace("-", "_")
    if args.config is not None:
        config = load_config(args.config)
        if config.experiment != experiment:
            raise ValueError(f"config is for {config.experiment!r}, not {experiment!r}")
    else:
        config = ExperimentConfig(experiment=experiment)
    top = {
        "preset": args.preset,
        "mdp_path": str(args.mdp) if args.mdp else None,
        "seeds": list(range(args.seeds)) if args.seeds is not None else None,
        "master_seed": args.master_seed,
        "ideal_rewards": args.ideal_rewards,
        "mve_normalized": args.mve_normalized,
    }
    get = lambda name: getattr(args, name, None)  # noqa: E731
    if experiment == "oracle":
        top.update(dist=get("dist"), oracle_method=get("method"))
    elif experiment == "learn":
        top["learn"] = _override(config.learn, lam=get("lam"), schedule=get("schedule"),
                                 alpha=get("alpha"), total_steps=get("steps"),
                                 eval_every=get("eval_every"), off_policy=get("off_policy"),
                                 target_a1=get("target_a1"), behavior_a1=get("behavior_a1"),
                                 features=get("features"))
    elif experiment == "lambda_sweep":
        top["sweep"] = _override(config.sweep, total_steps=get("steps"),
                                 eval_every=get("eval_every"), lambdas=get("lambdas"),
                                 alphas=get("alphas"))
    else:
        top["phase1"] = _override(config.phase1, steps=get("phase1_steps"),
                                  n_quantiles=get("n_quantiles"), kappa=get("kappa"),
                                  alpha=get("alpha"))
        if experiment == "detect":
            top["detect"] = _override(config.detect, specs=get("spec"), steps=get("steps"),
                                      onset=get("onset"), delta=get("delta"),
                                      sigma=get("sigma"),
                                      model_path=str(args.model) if get("model") else None)
    if args.mdp is not None:
        top["preset"] = None
    # rebuild so the config-level checks run on the final values
    return ExperimentConfig.from_dict(
        {**config.to_dict(), **{k: v for k, v in _plain(top).items() if v is not None}})


def _plain(values: dict) -> dict:
    from dataclasses import asdict, is_dataclass
    return {k: asdict(v) if is_dataclass(v) else v for k, v in values.items()}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = build_config(args)
        output = run(config, args.out)
    except (ReverseRLError, ValueError, OSError, KeyError) as exc:
        print(f"reverse-rl: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if config.experiment == "oracle":
        print(json.dumps(output.extras["report.json"], indent=2))
    elif args.out is not None:
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
