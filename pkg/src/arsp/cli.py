"""Command-line entry point: train, eval, ablate, adapt, theory, plots."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .envs import EnvConfig
from .harness import (
    ABLATION_SUITES,
    ExperimentConfig,
    ablation_configs,
    default_config,
    emit_plot_data,
    run_adaptation_study,
    run_experiment,
)
from .network import load_params
from .opponents import OPPONENT_KINDS, AdaptationConfig, ScriptedOpponent, evaluate_vs_opponent
from .theory import PGDynamicsConfig, StagHuntPayoff, basin_closed_form, flow_basin, monte_carlo_basin


def parse_seeds(text: str) -> list[int]:
    """'0..4' -> [0, 1, 2, 3, 4]; '1,3,5' -> [1, 3, 5]; '7' -> [7]."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc


def parse_payoff(text: str) -> StagHuntPayoff:
    try:
        a, b, c, d = (float(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("payoff must be four numbers a,b,c,d") from exc
    return StagHuntPayoff(a, b, c, d)


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = default_config(args.game, args.variant)
    if args.seeds is not None:
        cfg.seeds = args.seeds
    if args.episodes is not None:
        cfg.total_episodes = args.episodes
    if args.out is not None:
        cfg.output_dir = args.out
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    results = run_experiment(cfg, reuse=args.reuse)
    failed = [r for r in results if r.error]
    for r in results:
        last = r.rows[-1]
        print(f"{r.run_dir}: episode {last.episode} global {last.global_return:.3f} "
              f"cooperation {last.cooperation:.3f}" + (f" ERROR {r.error}" if r.error else ""))
    return 1 if failed else 0


def cmd_eval(args) -> int:
    run_dir = Path(args.checkpoint)
    cfg = ExperimentConfig.load(run_dir / "config.json")
    params, _ = load_params(run_dir / "agent0.npz")
    if args.opponent == "partner":
        opponent = ScriptedOpponent("FrozenCheckpoint", load_params(run_dir / "agent1.npz")[0])
    elif args.opponent in OPPONENT_KINDS and args.opponent != "FrozenCheckpoint":
        opponent = ScriptedOpponent(args.opponent)
    else:
        path = Path(args.opponent)
        if path.is_dir():
            path = path / "agent1.npz"
        opponent = ScriptedOpponent("FrozenCheckpoint", load_params(path)[0])
    env_cfg = EnvConfig(cfg.env.game, cfg.env.horizon, args.seed, cfg.env.payoff)
    res = evaluate_vs_opponent(params, opponent, env_cfg, args.episodes, adapt=args.adapt == "on",
                               adapt_config=AdaptationConfig(lr=args.adapt_lr))
    print(json.dumps({"mean_return": res.mean_return, "std_return": res.std_return,
                      "opponent_mean_return": res.opponent_mean_return,
                      "cooperation": res.cooperation, "episodes": res.episodes,
                      "prediction_accuracy": res.prediction_accuracy}, indent=2))
    return 0


def cmd_ablate(args) -> int:
    overrides = {}
    if args.seeds is not None:
        overrides["seeds"] = args.seeds
    if args.episodes is not None:
        overrides["total_episodes"] = args.episodes
    if args.out is not None:
        overrides["output_dir"] = args.out
    code = 0
    for cfg in ablation_configs(args.suite, **overrides):
        results = run_experiment(cfg, reuse=args.reuse)
        finals = [r.rows[-1].global_return for r in results]
        print(f"{cfg.run_name}: final global returns {finals}")
        code |= any(r.error for r in results)
    return int(code)


def cmd_adapt(args) -> int:
    rows = run_adaptation_study(args.arsp, args.no_aom, args.game, args.out, args.episodes,
                                defector_runs=args.defector,
                                adapt_config=AdaptationConfig(lr=args.adapt_lr))
    for r in rows:
        print(r)
    return 0


def cmd_theory(args) -> int:
    payoff = args.payoff
    cfg = PGDynamicsConfig(lr=args.lr, trials=args.trials, seed=args.seed, max_iters=args.max_iters)
    est = monte_carlo_basin(payoff, cfg)
    row = {"a": payoff.a, "b": payoff.b, "c": payoff.c, "d": payoff.d, "epsilon": payoff.epsilon,
           "closed_form": basin_closed_form(payoff), "flow_basin": flow_basin(payoff),
           "mc_estimate": est.estimate, "stderr": est.stderr, "trials": est.trials,
           "unconverged": est.unconverged}
    writer = csv.DictWriter(sys.stdout, fieldnames=list(row))
    writer.writeheader()
    writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    if est.failed:
        print(f"warning: {est.unconverged_fraction:.2%} of trials did not converge", file=sys.stderr)
        return 1
    return 0


def cmd_plots(args) -> int:
    rows = emit_plot_data(args.runs, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="arsp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def training_args(sp):
        sp.add_argument("--seeds", type=parse_seeds, default=None, help="e.g. 0..4 or 0,2,5")
        sp.add_argument("--episodes", type=int, default=None, help="override training episodes")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--reuse", action="store_true",
                        help="skip seeds whose completed run with the same config already exists")

    t = sub.add_parser("train", help="self-play training over seeds")
    t.add_argument("--config", help="JSON experiment config")
    t.add_argument("--game", default="ISH", choices=["ISH", "IPD", "MonsterHunt", "Escalation"])
    t.add_argument("--variant", default="arsp")
    training_args(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint against a fixed opponent")
    e.add_argument("--checkpoint", required=True, help="run directory with agent0.npz")
    e.add_argument("--opponent", required=True,
                   help=f"one of {OPPONENT_KINDS[:-1]}, 'partner', or a checkpoint path")
    e.add_argument("--adapt", choices=["on", "off"], default="off")
    e.add_argument("--adapt-lr", type=float, default=1e-3)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=12345, help="evaluation environment seed")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation suite")
    a.add_argument("--suite", required=True, choices=sorted(ABLATION_SUITES))
    training_args(a)
    a.set_defaults(func=cmd_ablate)

    ad = sub.add_parser("adapt", help="adaptation study table (CSV)")
    ad.add_argument("--game", required=True)
    ad.add_argument("--arsp", nargs="+", required=True, help="ARSP run directories")
    ad.add_argument("--no-aom", nargs="+", required=True, help="ARSP-No-Aom run directories")
    ad.add_argument("--defector", nargs="*", default=None, help="selfish runs (grid worlds)")
    ad.add_argument("--episodes", type=int, default=100)
    ad.add_argument("--adapt-lr", type=float, default=1e-3)
    ad.add_argument("--out", default="adaptation.csv")
    ad.set_defaults(func=cmd_adapt)

    th = sub.add_parser("theory", help="Monte Carlo stag-hunt basin estimate")
    th.add_argument("--payoff", type=parse_payoff, required=True, help="a,b,c,d")
    th.add_argument("--trials", type=int, default=100_000)
    th.add_argument("--lr", type=float, default=0.01)
    th.add_argument("--max-iters", type=int, default=20_000)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--out", default=None, help="also write the CSV row here")
    th.set_defaults(func=cmd_theory)

    pl = sub.add_parser("plots", help="aggregate run metrics into plot CSVs")
    pl.add_argument("--runs", required=True, help="glob of run directories")
    pl.add_argument("--out", default="plot_data.csv")
    pl.set_defaults(func=cmd_plots)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
