"""
Command-line entry point.

    microshed run case1 --deficit 160 --tau-rule 2 --out runs/c1
    microshed gid-bench case2 --protocol round_robin --loss-rate 0.05
    microshed slots case1
    microshed compare case1 --seeds 20 --jobs 4

Exit status is 0 on success, 2 for invalid configuration or arguments and
3 when a simulation fails or the frequency collapses.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .bench import COMPARE_LOSS, COMPARE_PROTOCOLS, compare_protocols, format_table, gid_bench, sweep_configs
from .config import PROTOCOLS, ConfigError, ScenarioConfig, bundled_scenario, dump_config, parse_config
from .engine import run_scenario
from .io import OutputError, summary_text, write_run
from .mmst import allocate_slots, baseline_schedule

log = logging.getLogger("microshed")

EXIT_CONFIG = 2
EXIT_SIM = 3


def load_scenario(ref: str) -> ScenarioConfig:
    """Bundled scenario name or path to a YAML file."""
    path = Path(ref)
    if path.suffix in (".yaml", ".yml") or path.exists():
        return parse_config(path)
    try:
        return bundled_scenario(ref)
    except FileNotFoundError:
        raise ConfigError([f"{ref}: no such scenario file or bundled scenario"]) from None


def _parse_value(text: str):
    return yaml.safe_load(text)


def apply_overrides(cfg: ScenarioConfig, args) -> ScenarioConfig:
    changes = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError([f"--set {item!r}: expected key=value"])
        changes[key.strip()] = _parse_value(value)
    flags = {
        "seed": "seed",
        "protocol": "protocol.name",
        "loss_rate": "protocol.loss_rate",
        "tau_rule": "dlss.tau_rule",
        "t_ad": "dlss.t_ad",
        "deficit": "fault.deficit",
        "horizon": "horizon",
    }
    for attr, key in flags.items():
        value = getattr(args, attr, None)
        if value is not None:
            changes[key] = value
    if not changes:
        return cfg
    try:
        return cfg.replace(**changes)
    except KeyError as exc:
        raise ConfigError([f"unknown configuration key {exc.args[0]!r}"]) from None


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("scenario", help="bundled scenario (case1, case2) or YAML file")
    p.add_argument("--seed", type=int)
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--loss-rate", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a configuration entry, e.g. dlss.period=0.1")


def cmd_run(args) -> int:
    cfg = apply_overrides(load_scenario(args.scenario), args)
    result = run_scenario(cfg)
    if args.out:
        out = Path(args.out)
        paths = write_run(result, out)
        cfg_path = out / "config.yaml"
        try:
            cfg_path.write_text(dump_config(cfg))
        except OSError as exc:
            raise OutputError(f"{cfg_path}: {exc.strerror or exc}") from exc
        for kind, path in paths.items():
            log.info("wrote %s %s", kind, path)
    sys.stdout.write(summary_text(result.summary))
    if result.summary["collapsed"]:
        log.error("frequency collapsed")
        return EXIT_SIM
    return 0


def cmd_gid_bench(args) -> int:
    cfg = apply_overrides(load_scenario(args.scenario), args)
    res = gid_bench(cfg, tol=args.tol)
    print(f"protocol    {res.protocol}")
    print(f"loss rate   {res.loss_rate:g}")
    print(f"seed        {res.seed}")
    print(f"slots       {res.slots}")
    print(f"t_one       {res.t_one:.4f} s")
    print(f"iterations  {res.iterations}")
    print(f"converged   {res.converged}")
    print(f"T_gi        {res.T_gi:.4f} s")
    print(f"e           {res.e * 100:.4f} %")
    print(f"e_max       {res.e_max * 100:.4f} %")
    return 0 if res.converged else EXIT_SIM


def cmd_slots(args) -> int:
    cfg = load_scenario(args.scenario)
    graph = cfg.build_topology().comm_graph()
    sched = allocate_slots(graph)
    print(f"MMST: {sched.n_slots} slots")
    for row in sched.table():
        print(f"  slot {row['slot']}: agents {', '.join(map(str, row['transmissions']))}")
    for kind in ("round_robin", "deterministic"):
        print(f"{kind}: {baseline_schedule(graph, kind).n_slots} slots")
    return 0


def cmd_compare(args) -> int:
    cfg = apply_overrides(load_scenario(args.scenario), args)
    configs = sweep_configs(cfg, args.protocols or COMPARE_PROTOCOLS, args.rates or COMPARE_LOSS)
    rows = compare_protocols(configs, range(args.seeds), tol=args.tol, jobs=args.jobs)
    sys.stdout.write(format_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="microshed", description=__doc__.splitlines()[1])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate a scenario and write trace files")
    _add_common(p)
    p.add_argument("--tau-rule", type=int, choices=range(1, 6))
    p.add_argument("--t-ad", type=float, help="additional DLSS start delay [s]")
    p.add_argument("--deficit", type=float, help="fault deficit [kW]")
    p.add_argument("--horizon", type=float)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gid-bench", help="time one global information discovery")
    _add_common(p)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_gid_bench)

    p = sub.add_parser("slots", help="show the MMST slot assignment")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_slots)

    p = sub.add_parser("compare", help="protocol x loss-rate comparison table")
    _add_common(p)
    p.add_argument("--protocols", nargs="+", choices=PROTOCOLS)
    p.add_argument("--rates", nargs="+", type=float)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for line in exc.errors:
            print(f"error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    except OutputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIM
    except (RuntimeError, ValueError, ArithmeticError) as exc:
        print(f"error: simulation failed: {exc}", file=sys.stderr)
        return EXIT_SIM


if __name__ == "__main__":
    sys.exit(main())
