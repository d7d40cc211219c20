"""Command-line entry points for batch workflows and serving.

Subcommands: collect, train, eval, campaign, ablate, serve, replay.
Exit code 0 on success, 1 on a reported failure, 2 on usage errors
(argparse default).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .config import StackConfig
from .dataset import TransitionDataset, collect_dataset
from .episode_log import EpisodeLog
from .metrics import outcome_from_log, run_ablation, run_campaign
from .model import LatentDynamicsModel
from .training import evaluate_skill, train


def _load_config(args) -> StackConfig:
    if getattr(args, "config", None):
        return StackConfig.load(args.config)
    return StackConfig()


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="master seed")
    p.add_argument("--scenario", choices=["standard", "constrained", "mixed"], default=None)
    p.add_argument("--config", help="JSON config file overriding defaults")
    p.add_argument("--out", help="output path")


def cmd_collect(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.collect.seed = args.seed
    if args.scenario is not None:
        cfg.collect.scenario = args.scenario
    episodes = args.episodes
    if args.small:
        episodes = cfg.collect.small_episodes
    ds = collect_dataset(cfg, episodes=episodes, seed=cfg.collect.seed)
    out = args.out or "dataset.jsonl"
    ds.save_jsonl(out)
    print(
        json.dumps(
            {
                "episodes": len(ds.episodes),
                "transitions": ds.sample_count(),
                "train": ds.sample_count("train"),
                "heldout": ds.sample_count("heldout"),
                "hash": ds.content_hash(),
                "path": out,
            }
        )
    )
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.beta is not None:
        cfg.train.beta = args.beta
    ds = TransitionDataset.load_jsonl(args.dataset)
    model, history = train(ds, cfg.model, cfg.train, verbose=not args.quiet)
    out = args.out or "model.bin"
    model.save(out, extra_manifest={"config_digest": cfg.digest(), "epochs_run": len(history)})
    hist_path = out + ".history.json"
    with open(hist_path, "w", encoding="utf-8") as fh:
        json.dump(history, fh, indent=1)
    skill = evaluate_skill(model, ds)
    print(json.dumps({"params": out, "history": hist_path, "skill": skill}))
    return 0


def cmd_eval(args) -> int:
    ds = TransitionDataset.load_jsonl(args.dataset)
    model = LatentDynamicsModel.load(args.params)
    skill = evaluate_skill(model, ds, split=args.split)
    print(json.dumps(skill, indent=1))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(skill, fh, indent=1)
    return 0


def cmd_campaign(args) -> int:
    cfg = _load_config(args)
    model = LatentDynamicsModel.load(args.params)
    seed = args.seed if args.seed is not None else 0
    report = run_campaign(cfg, model, trials=args.trials, seed=seed, mode=args.mode)
    out = args.out or "campaign_report.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)
    brief = {
        k: report[k]
        for k in (
            "trials",
            "success_rate",
            "placement_mae_mm",
            "within_20mm_fraction",
            "endobronchial_count",
            "mean_wall_contacts",
        )
    }
    print(json.dumps(brief))
    return 0 if report["success_rate"] == 1.0 else 1


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    model = LatentDynamicsModel.load(args.params)
    seed = args.seed if args.seed is not None else 0
    report = run_ablation(cfg, model, pairs=args.pairs, seed=seed)
    out = args.out or "ablation_report.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)
    print(
        json.dumps(
            {
                "pairs": report["pairs"],
                "guided_contacts": report["guided"]["mean_wall_contacts"],
                "baseline_contacts": report["baseline"]["mean_wall_contacts"],
                "guided_corrective": report["guided"]["mean_corrective_withdrawals"],
                "baseline_corrective": report["baseline"]["mean_corrective_withdrawals"],
            }
        )
    )
    return 0


def cmd_serve(args) -> int:
    from .gateway import serve

    cfg = _load_config(args)
    if args.port is not None:
        cfg.gateway.port = args.port
    model = LatentDynamicsModel.load(args.params) if args.params else None
    serve(cfg, model)
    return 0


def cmd_replay(args) -> int:
    cfg = _load_config(args)
    log = EpisodeLog.read(args.log)
    outcome = outcome_from_log(log, cfg)
    print(json.dumps(outcome.to_dict(), indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bronchosim",
        description="Simulated robotic fiberoptic intubation stack: data collection, "
        "dynamics learning, MPC evaluation, guided-intubation campaigns, and a "
        "teleoperation gateway.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="generate a transition dataset from scripted excitation")
    _add_common(p)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--small", action="store_true", help="CI-sized dataset (~5e3 transitions)")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="train the latent dynamics model")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="heldout one-step skill vs constant-velocity baseline")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--split", default="heldout", choices=["train", "heldout"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("campaign", help="full guided intubation trial campaign")
    _add_common(p)
    p.add_argument("--params", required=True)
    p.add_argument("--trials", type=int, default=48)
    p.add_argument("--mode", default="guided-auto", choices=["guided-auto", "ablation"])
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("ablate", help="paired guided vs guidance-off runs")
    _add_common(p)
    p.add_argument("--params", required=True)
    p.add_argument("--pairs", type=int, default=16)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("serve", help="run the WebSocket gateway")
    _add_common(p)
    p.add_argument("--params", default=None)
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("replay", help="recompute a trial outcome from a recorded log")
    _add_common(p)
    p.add_argument("log")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
