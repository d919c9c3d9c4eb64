"""Command-line entry point.

Subcommands:
  simulate    run one scenario from a JSON config, write trace CSV / SVG
  montecarlo  detection-rate experiment, write per-step histogram CSV
  probe       print guess-success probabilities and bounds per expansion factor
  net         run one networked role (plant, controller, or attacker proxy)

Exit codes: 0 ok, 1 config error, 2 runtime error, 3 verification tripped.
"""

from __future__ import annotations

import argparse
import sys

from . import verify
from .scenario import ConfigError, ScenarioConfig, run_scenario, write_trace_svg

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_VERIFICATION = 3


def _parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host, int(port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="encloop",
                                     description="Encrypted control loop simulator: "
                                                 "covert attacks and verified evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a closed-loop scenario")
    sim.add_argument("--config", required=True)
    sim.add_argument("--out-trace", default=None)
    sim.add_argument("--out-plot", default=None)

    mc = sub.add_parser("montecarlo", help="detection-rate experiment")
    mc.add_argument("--lambda", dest="expansion", type=int, required=True)
    mc.add_argument("--attack-len", type=int, default=10)
    mc.add_argument("--trials", type=int, default=100_000)
    mc.add_argument("--mode", choices=("fast", "full"), default="fast")
    mc.add_argument("--seed", type=int, default=0)
    mc.add_argument("--out", default=None)

    pr = sub.add_parser("probe", help="success probabilities per expansion factor")
    pr.add_argument("--lambda-max", type=int, default=16)

    net = sub.add_parser("net", help="run a networked role")
    net.add_argument("--role", choices=("plant", "controller", "attacker"),
                     required=True)
    net.add_argument("--listen", type=_parse_addr, default=None)
    net.add_argument("--connect", type=_parse_addr, default=None)
    net.add_argument("--upstream", type=_parse_addr, default=None)
    net.add_argument("--config", default=None)
    net.add_argument("--out-trace", default=None)
    return parser


def cmd_simulate(args) -> int:
    cfg = ScenarioConfig.from_json(args.config)
    trace, code = run_scenario(cfg)
    if args.out_trace:
        trace.to_csv(args.out_trace)
    if args.out_plot:
        write_trace_svg(trace, args.out_plot)
    last = trace.k[-1] if len(trace) else None
    if code == EXIT_VERIFICATION:
        print(f"verification tripped at step {last}")
    else:
        print(f"completed {len(trace)} steps (k = {trace.k[0]}..{last})")
    return code


def cmd_montecarlo(args) -> int:
    result = verify.run_detection_experiment(args.expansion, args.attack_len,
                                             args.trials, mode=args.mode,
                                             seed=args.seed)
    print(f"lambda={args.expansion}  L={args.attack_len}  trials={args.trials}  "
          f"mode={args.mode}")
    print("k*    detected")
    for k in range(1, args.attack_len + 1):
        print(f"{k:<5d} {100 * result['fractions'][k]:6.2f}%")
    print(f"/     {100 * result['undetected_fraction']:6.2f}%")
    if args.out:
        lines = ["lambda,k_star,count,fraction"]
        for k in range(1, args.attack_len + 1):
            lines.append(f"{args.expansion},{k},{result['counts'][k]},"
                         f"{result['fractions'][k]:.12g}")
        lines.append(f"{args.expansion},-1,{result['undetected']},"
                     f"{result['undetected_fraction']:.12g}")
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_probe(args) -> int:
    if args.lambda_max < 2 or args.lambda_max % 2:
        raise ConfigError("lambda-max", "must be an even integer >= 2")
    print(f"{'lambda':>6}  {'p_succ(1)':>12}  {'bound 2^-l/2':>12}  {'p_succ(10)':>12}")
    for lam in range(2, args.lambda_max + 1, 2):
        p1 = verify.p_succ_instant(lam)
        bound = 2.0 ** (-lam / 2)
        p10 = verify.p_succ_cumulative(lam, 10)
        print(f"{lam:>6}  {p1:>12.6g}  {bound:>12.6g}  {p10:>12.6g}")
    return EXIT_OK


def cmd_net(args) -> int:
    from . import netloop

    if args.role == "controller":
        if args.listen is None:
            raise ConfigError("net", "controller needs --listen")
        netloop.run_controller(args.listen)
        return EXIT_OK
    if args.role == "attacker":
        if args.listen is None or args.upstream is None:
            raise ConfigError("net", "attacker needs --listen and --upstream")
        netloop.run_attacker(args.listen, args.upstream)
        return EXIT_OK
    # plant
    if args.connect is None or args.config is None:
        raise ConfigError("net", "plant needs --connect and --config")
    cfg = ScenarioConfig.from_json(args.config)
    trace = netloop.run_plant(args.connect, cfg)
    if args.out_trace:
        trace.to_csv(args.out_trace)
    if trace.verdict and trace.verdict[-1] == "bottom":
        print(f"verification tripped at step {trace.k[-1]}")
        return EXIT_VERIFICATION
    print(f"completed {len(trace)} steps")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"simulate": cmd_simulate, "montecarlo": cmd_montecarlo,
                "probe": cmd_probe, "net": cmd_net}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
