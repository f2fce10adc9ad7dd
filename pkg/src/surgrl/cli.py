"""Command-line entry points: train, eval, heatmap, gradcheck."""

import argparse
import sys
from dataclasses import replace

from .harness import (RunConfig, evaluate, gradcheck, heatmap,
                      load_run_config, train)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="surgrl",
        description="Token-conditioned PPO on grid surrogates of "
                    "laparoscopic training tasks")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a policy")
    p_train.add_argument("--env", choices=["deflect", "reach", "cut", "thread",
                                           "place"])
    p_train.add_argument("--tokens", choices=["oracle", "noisy", "null"])
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--config", help="JSON file mirroring RunConfig")
    p_train.add_argument("--out", help="output directory")
    p_train.add_argument("--total-timesteps", type=int, dest="total_timesteps")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", type=int, default=100)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--report", help="CSV path for the evaluation report")
    p_eval.add_argument("--env", help="override the checkpoint's environment")
    p_eval.add_argument("--tokens", help="override the checkpoint's provider")

    p_heat = sub.add_parser("heatmap", help="reward-weighted visitation heatmap")
    p_heat.add_argument("--checkpoint", required=True)
    p_heat.add_argument("--out", required=True, help="output path prefix")
    p_heat.add_argument("--episodes", type=int, default=100)
    p_heat.add_argument("--seed", type=int, default=0)

    p_grad = sub.add_parser("gradcheck",
                            help="finite-difference check of the policy loss")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--samples", type=int, default=120)
    return parser


def _train_command(args) -> int:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    overrides = {}
    for name in ("env", "tokens", "seed", "total_timesteps"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if args.out is not None:
        overrides["out_dir"] = args.out
    if overrides:
        cfg = replace(cfg, **overrides)
    result = train(cfg, log=print)
    print(f"done: {result.total_steps} steps, {result.updates} updates, "
          f"{result.episodes_started} episodes")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    return 0


def _eval_command(args) -> int:
    report = evaluate(args.checkpoint, episodes=args.episodes,
                      eval_seed=args.seed, env_name=args.env,
                      tokens_name=args.tokens, report_path=args.report)
    print(f"env={report.env} provider={report.provider} "
          f"episodes={report.episodes} successes={report.successes} "
          f"success_rate={report.success_rate:.3f} "
          f"mean_return={report.mean_return:.3f} "
          f"mean_episode_length={report.mean_episode_length:.1f}")
    return 0


def _heatmap_command(args) -> int:
    result = heatmap(args.checkpoint, episodes=args.episodes,
                     eval_seed=args.seed, out_prefix=args.out)
    print(f"heatmap written to {args.out}.csv and {args.out}.pgm "
          f"(normalization {result.normalization:.6g}, "
          f"max cell {result.argmax_cell()})")
    return 0


def _gradcheck_command(args) -> int:
    report = gradcheck(seed=args.seed, samples=args.samples)
    print(report.summary())
    return 0 if report.passed else 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"train": _train_command, "eval": _eval_command,
                "heatmap": _heatmap_command, "gradcheck": _gradcheck_command}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
