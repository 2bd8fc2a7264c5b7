"""Unified command line: train, eval, robustness, ablate, baseline, replay,
serve, config.

Exit codes: 0 success, 2 configuration error (also argparse usage errors),
3 runtime fault, 4 failed threshold/acceptance check.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import config as cfgmod
from .config import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_CHECK = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cyclerl",
        description="Bicycle balance lab: simulator, PPO trainer, baselines, "
                    "evaluation harness, and live teleoperation service.",
    )
    parser.add_argument("--config", metavar="FILE", help="YAML config file")
    parser.add_argument("--preset", choices=("desk", "paper"),
                        help="load a named configuration preset")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run PPO training")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--num-envs", type=int)
    p_train.add_argument("--out", default="runs/train")
    p_train.add_argument("--quiet", action="store_true")

    def eval_args(p, controllers=("policy", "pid", "lqr")):
        p.add_argument("--controller", choices=controllers, required=True)
        p.add_argument("--checkpoint")
        p.add_argument("--episodes", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default=None)

    p_eval = sub.add_parser("eval", help="evaluate one controller on one scenario")
    eval_args(p_eval)
    p_eval.add_argument("--scenario", default=None)
    p_eval.add_argument("--with-searches", action="store_true",
                        help="also run CAT/MNT/MSS bisection searches")
    p_eval.add_argument("--min-bsr", type=float, default=None,
                        help="exit 4 if BSR falls below this bound")
    p_eval.add_argument("--save-traces", type=int, default=0, metavar="N",
                        help="also write the first N episode traces as CSV")

    p_rob = sub.add_parser("robustness", help="run the full robustness matrix")
    eval_args(p_rob)

    p_abl = sub.add_parser("ablate", help="reward / randomization ablation table")
    p_abl.add_argument("--kind", choices=("reward", "randomization"), required=True)
    p_abl.add_argument("--epochs", type=int)
    p_abl.add_argument("--num-envs", type=int)
    p_abl.add_argument("--eval-episodes", type=int, default=64)
    p_abl.add_argument("--seed", type=int)
    p_abl.add_argument("--out", default="runs/ablation")

    p_base = sub.add_parser("baseline", help="evaluate a classical baseline")
    eval_args(p_base, controllers=("pid", "lqr"))
    p_base.add_argument("--scenario", default=None)

    p_replay = sub.add_parser("replay", help="re-broadcast a recorded trace")
    p_replay.add_argument("trace", help="episode trace CSV")
    p_replay.add_argument("--speed", type=float, default=1.0)
    p_replay.add_argument("--host")
    p_replay.add_argument("--port", type=int)
    p_replay.add_argument("--loop", action="store_true")

    p_serve = sub.add_parser("serve", help="live simulation websocket service")
    p_serve.add_argument("--controller", choices=("policy", "pid", "lqr"))
    p_serve.add_argument("--checkpoint")
    p_serve.add_argument("--scenario")
    p_serve.add_argument("--host")
    p_serve.add_argument("--port", type=int)

    sub.add_parser("config", help="print the resolved configuration as JSON")

    return parser


def resolve_config(args) -> dict:
    cfg = cfgmod.load_config(path=args.config, preset=args.preset,
                             cli_overrides=args.overrides)
    # dedicated flags (part of the CLI layer, before env vars)
    flag_map = []
    if getattr(args, "seed", None) is not None:
        flag_map += [f"ppo.seed={args.seed}", f"eval.seed={args.seed}"]
    if getattr(args, "epochs", None) is not None:
        flag_map += [f"ppo.total_epochs={args.epochs}"]
    if getattr(args, "num_envs", None) is not None:
        flag_map += [f"ppo.num_envs={args.num_envs}"]
    if getattr(args, "episodes", None) is not None:
        flag_map += [f"eval.episodes={args.episodes}"]
    if getattr(args, "scenario", None) is not None:
        flag_map += [f"eval.scenario={args.scenario}"]
    if getattr(args, "host", None) is not None:
        flag_map += [f"serve.host={args.host}"]
    if getattr(args, "port", None) is not None:
        flag_map += [f"serve.port={args.port}"]
    if getattr(args, "checkpoint", None) is not None:
        flag_map += [f"serve.checkpoint={args.checkpoint}"]
    if getattr(args, "controller", None) is not None and args.command == "serve":
        flag_map += [f"serve.controller={args.controller}"]
    if flag_map:
        cfg = cfgmod.load_config(path=args.config, preset=args.preset,
                                 cli_overrides=list(args.overrides) + flag_map)
    return cfg


def _controller_from_args(args, cfg):
    from .harness import make_controller

    return make_controller(args.controller, getattr(args, "checkpoint", None))


def cmd_train(args, cfg) -> int:
    from .ppo import train
    from .config import config_hash, env_config, randomization_spec, train_config

    tc = train_config(cfg)
    spec = randomization_spec(cfg)
    ec = env_config(cfg)

    def progress(row):
        if not args.quiet:
            print(f"epoch {row['epoch']:4d}  len {row['mean_ep_len']:7.1f}  "
                  f"return {row['mean_ep_return']:8.2f}  kl {row['approx_kl']:.4f}",
                  flush=True)

    result = train(tc, spec, ec, out_dir=args.out, config_hash=config_hash(cfg),
                   resolved_config=cfg, progress=progress)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"train log:  {result.log_csv}")
    return EXIT_RUNTIME if result.faulted else EXIT_OK


def cmd_eval(args, cfg) -> int:
    from dataclasses import replace

    from .harness import SCENARIOS, evaluate
    from .metrics import reports_to_csv

    scenario_name = cfg["eval"]["scenario"]
    if scenario_name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario_name!r}")
    episodes = cfg["eval"]["episodes"]
    scn = replace(SCENARIOS[scenario_name], episodes=episodes,
                  duration_steps=cfg["env"]["episode_steps"])
    controller = _controller_from_args(args, cfg)
    save_traces = getattr(args, "save_traces", 0)
    result = evaluate(controller, scn, episodes, cfg["eval"]["seed"],
                      with_searches=getattr(args, "with_searches", False),
                      search_episodes=cfg["eval"]["search_episodes"], config=cfg,
                      return_traces=bool(save_traces))
    report, traces = result if save_traces else (result, None)
    print(report.to_json())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report.to_json(os.path.join(args.out, "report.json"))
        reports_to_csv([report], os.path.join(args.out, "report.csv"))
        for i in range(min(save_traces, episodes)):
            traces.episode_csv(os.path.join(args.out, f"episode{i}.csv"), i)
    min_bsr = getattr(args, "min_bsr", None)
    if min_bsr is not None and report.bsr < min_bsr:
        print(f"BSR {report.bsr:.2f}% below the required {min_bsr}%",
              file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_robustness(args, cfg) -> int:
    from .harness import robustness_matrix
    from .metrics import reports_to_csv

    controller = _controller_from_args(args, cfg)
    reports = robustness_matrix(controller, cfg["eval"]["episodes"],
                                cfg["eval"]["seed"], config=cfg,
                                duration_steps=cfg["env"]["episode_steps"])
    for rep in reports:
        print(f"{rep.flags['category']:20s} {rep.scenario:14s} "
              f"BSR {rep.bsr:6.2f}%  STE {rep.ste_deg:.2f} deg  "
              f"VTE {rep.vte_mps:.3f} m/s")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "robustness.json"), "w") as f:
            json.dump([r.to_dict() for r in reports], f, indent=2, sort_keys=True)
        reports_to_csv(reports, os.path.join(args.out, "robustness.csv"))
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    from .config import train_config
    from .harness import ablation_csv, run_ablation

    tc = train_config(cfg)
    rows = run_ablation(args.kind, tc, args.out,
                        eval_episodes=args.eval_episodes,
                        progress=lambda r: print(
                            f"{r['name']:24s} BSR {r['bsr']:6.2f}% "
                            f"STE {r['ste_deg']:.2f} VTE {r['vte_mps']:.3f}"))
    ablation_csv(rows, os.path.join(args.out, f"{args.kind}_ablation.csv"))
    return EXIT_OK


def cmd_replay(args, cfg) -> int:
    import uvicorn

    from .serve import ReplayService, create_app, default_frontend_dir, load_trace_csv

    rows = load_trace_csv(args.trace)
    service = ReplayService(rows, speed=args.speed, loop_forever=args.loop)
    app = create_app(service, frontend_dir=default_frontend_dir())
    uvicorn.run(app, host=cfg["serve"]["host"], port=cfg["serve"]["port"],
                log_level="warning")
    return EXIT_OK


def cmd_serve(args, cfg) -> int:
    import uvicorn

    from .serve import SimService, create_app, default_frontend_dir

    service = SimService(cfg)
    app = create_app(service, frontend_dir=default_frontend_dir())
    print(f"serving on ws://{cfg['serve']['host']}:{cfg['serve']['port']}/ws "
          f"(controller: {cfg['serve']['controller']}, "
          f"scenario: {cfg['serve']['scenario']})")
    uvicorn.run(app, host=cfg["serve"]["host"], port=cfg["serve"]["port"],
                log_level="warning")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        cfgmod.apply_dynamics_constants(cfg)
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "config":
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return EXIT_OK

    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "baseline": cmd_eval,
        "robustness": cmd_robustness,
        "ablate": cmd_ablate,
        "replay": cmd_replay,
        "serve": cmd_serve,
    }
    try:
        return handlers[args.command](args, cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except SystemExit as exc:  # uvicorn signals bind failures this way
        return EXIT_RUNTIME if exc.code else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
