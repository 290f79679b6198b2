"""Command-line front end for sweeps, calibration, tuning, and serving."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import (
    config_hash,
    episode_from,
    feedback_from,
    load_config,
    network_from,
)
from .experiments import (
    CalibrationError,
    SweepSpec,
    ablation_run,
    calibrate_network,
    capacity_sweep,
    evaluate_controller,
    tune_feedback,
    write_manifest,
    write_rows,
)
from .game import analysis_table


def _sweep_spec(cfg: dict, args, mode: str = "none",
                penetrations=None) -> SweepSpec:
    sw = cfg["sweep"]
    inflows = tuple(float(x) for x in range(int(sw["inflow_start"]),
                                            int(sw["inflow_stop"]) + 1,
                                            int(sw["inflow_step"])))
    if getattr(args, "inflow", None):
        inflows = tuple(float(x) for x in args.inflow)
    runs = args.runs if getattr(args, "runs", None) else sw["runs"]
    if penetrations is None:
        penetrations = (0.0,)
    return SweepSpec(inflows=inflows, runs=runs, window=sw["window"],
                     horizon=sw["horizon"], mode=mode,
                     penetrations=tuple(penetrations), seed_base=args.seed)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_capacity(cfg, args) -> int:
    spec = _sweep_spec(cfg, args)
    result = capacity_sweep(spec, network_from(cfg), parallel=args.parallel)
    out = _out_dir(args)
    write_rows(out / "capacity.csv", result.rows)
    write_manifest(out, "capacity", config_hash(cfg), args.seed,
                   {"runs": spec.runs, "inflows": list(spec.inflows)})
    for inflow in spec.inflows:
        print(f"inflow {inflow:6.0f}  outflow {result.mean_outflow(inflow):7.1f} "
              f"± {result.std_outflow(inflow):6.1f}")
    return 0


def cmd_calibrate(cfg, args) -> int:
    try:
        network, report = calibrate_network(cfg, parallel=args.parallel)
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return 1
    out = _out_dir(args)
    (out / "calibration.json").write_text(json.dumps(report, indent=2) + "\n")
    write_manifest(out, "calibrate", config_hash(cfg), args.seed)
    print(json.dumps(report["selected"]) if report.get("selected") is not None
          else "default spec confirmed")
    for entry in report["candidates"]:
        print(f"  onset {entry['onset']} for overrides {entry['overrides']}")
    return 0


def cmd_tune_feedback(cfg, args) -> int:
    network = network_from(cfg)
    mode = "alinea" if args.mode == "alinea" else "av-feedback"
    best, table = tune_feedback(mode, network, inflow=args.inflow_value,
                                penetration=args.penetration, runs=args.runs or 2,
                                seed_base=args.seed, parallel=args.parallel)
    out = _out_dir(args)
    with (out / f"tune-{mode}.csv").open("w") as fh:
        fh.write("n_crit,gain,q_init,mean_outflow_vph\n")
        for fp, score in table:
            fh.write(f"{fp.n_crit},{fp.gain},{fp.q_init},{score}\n")
    write_manifest(out, f"tune-feedback {mode}", config_hash(cfg), args.seed)
    print(f"best: n_crit={best.n_crit} gain={best.gain} q_init={best.q_init}")
    return 0


def cmd_evaluate(cfg, args) -> int:
    network = network_from(cfg)
    pens = args.penetration_list or cfg["sweep"]["penetrations"]
    if args.mode in ("none",):
        pens = [0.0]
    spec = _sweep_spec(cfg, args, mode=args.mode, penetrations=pens)
    fp = feedback_from(cfg, args.mode) if args.mode in ("alinea", "av-feedback") else None
    result = evaluate_controller(spec, network, fp,
                                 policy_endpoint=args.policy_endpoint,
                                 parallel=args.parallel)
    out = _out_dir(args)
    write_rows(out / f"evaluate-{args.mode}.csv", result.rows)
    write_manifest(out, f"evaluate {args.mode}", config_hash(cfg), args.seed)
    for pen in spec.penetrations:
        for inflow in spec.inflows:
            print(f"p={pen:4.2f} inflow {inflow:6.0f}  "
                  f"outflow {result.mean_outflow(inflow, pen):7.1f}")
    return 0


def cmd_ablate(cfg, args) -> int:
    network = network_from(cfg)
    pens = args.penetration_list or [0.05]
    mode = args.mode or "av-feedback"
    spec = _sweep_spec(cfg, args, mode=mode, penetrations=pens)
    fp = feedback_from(cfg, mode) if mode in ("alinea", "av-feedback") else None
    result = ablation_run(args.kind, spec, network, fp,
                          policy_endpoint=args.policy_endpoint,
                          parallel=args.parallel)
    out = _out_dir(args)
    write_rows(out / f"ablate-{args.kind}.csv", result.rows)
    write_manifest(out, f"ablate {args.kind}", config_hash(cfg), args.seed)
    for pen in spec.penetrations:
        for inflow in spec.inflows:
            print(f"{args.kind} p={pen:4.2f} inflow {inflow:6.0f}  "
                  f"outflow {result.mean_outflow(inflow, pen):7.1f}")
    return 0


def cmd_game(cfg, args) -> int:
    print(analysis_table())
    return 0


def cmd_serve(cfg, args) -> int:
    from .protocol import serve

    episode = episode_from(cfg)
    serve(episode, host=args.host, port=args.port, log_dir=args.log_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=0, help="base seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--parallel", type=int, default=1,
                        help="worker processes for sweeps")
    parser = argparse.ArgumentParser(
        prog="lanedrop",
        description="lane-drop bottleneck simulator and experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("capacity", parents=[common],
                       help="uncontrolled inflow/outflow sweep")
    p.add_argument("--runs", type=int)
    p.add_argument("--inflow", type=float, nargs="*")
    p.set_defaults(fn=cmd_capacity)

    p = sub.add_parser("calibrate", parents=[common],
                       help="pick a network spec hitting the onset window")
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("tune-feedback", parents=[common],
                       help="feedback hyperparameter grid search")
    p.add_argument("--mode", choices=["alinea", "av-feedback"], default="alinea")
    p.add_argument("--inflow-value", type=float, default=3500.0)
    p.add_argument("--penetration", type=float, default=0.4)
    p.add_argument("--runs", type=int)
    p.set_defaults(fn=cmd_tune_feedback)

    p = sub.add_parser("evaluate", parents=[common],
                       help="controller inflow/outflow curves")
    p.add_argument("--mode", choices=["none", "alinea", "av-feedback",
                                      "scripted", "policy"], required=True)
    p.add_argument("--policy-endpoint", help="host:port for mode=policy")
    p.add_argument("--penetration-list", type=float, nargs="*")
    p.add_argument("--runs", type=int)
    p.add_argument("--inflow", type=float, nargs="*")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common],
                       help="evaluation-time robustness toggles")
    p.add_argument("--kind", choices=["lane_change_on", "radar_cap_20",
                                      "radar_cap_140"], required=True)
    p.add_argument("--mode", choices=["av-feedback", "scripted", "policy"])
    p.add_argument("--policy-endpoint")
    p.add_argument("--penetration-list", type=float, nargs="*")
    p.add_argument("--runs", type=int)
    p.add_argument("--inflow", type=float, nargs="*")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("game", parents=[common],
                       help="go/no-go game analysis")
    p.set_defaults(fn=cmd_game)

    p = sub.add_parser("serve", parents=[common],
                       help="run the environment server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--log-dir")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = load_config(args.config)
    return args.fn(cfg, args)


if __name__ == "__main__":
    sys.exit(main())
