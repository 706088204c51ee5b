"""Command line front end.

Subcommands:
  run         train one experiment and write metrics/summary/chain/manifest
  sweep       run both systems across an attack or fault axis, merge results
  infer-eval  score trained models with and without query-time failures
  audit       recheck a chain dump; exit 0 when clean, 1 when tampered
"""

from __future__ import annotations

import argparse
import sys

from . import chain, harness
from .config import ConfigError, load_config


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", default=None,
                   help="YAML config file (defaults used when omitted)")
    p.add_argument("--out", metavar="DIR", default=None,
                   help="output directory (overrides config output_dir)")
    p.add_argument("--seed", metavar="U64", type=int, default=None,
                   help="master seed (overrides config seeds.master)")
    p.add_argument("--system", choices=("dfl", "cfl"), default=None,
                   help="which federation to run (overrides config)")
    p.add_argument("--kind", choices=("bfc", "llr", "3d"), default=None,
                   help="task kind (overrides config)")


def _load(args) -> "harness.ExperimentConfig":
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seeds.master = args.seed
    if args.system is not None:
        cfg.system = args.system
    if args.kind is not None:
        cfg.kind = args.kind
    if args.out is not None:
        cfg.output_dir = args.out
    return cfg.validate()


def _out_dir(cfg, fallback: str) -> str:
    return cfg.output_dir if cfg.output_dir else fallback


def _parse_values(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"--values: expected comma-separated integers, "
                          f"got {text!r}")
    if not values:
        raise ConfigError("--values: at least one value is required")
    return values


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="chainloc",
        description="Federated WiFi-fingerprint localization with a "
                    "proof-of-stake update ledger.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train one experiment")
    _add_common(p_run)

    p_sweep = sub.add_parser("sweep", help="sweep both systems over an axis")
    _add_common(p_sweep)
    p_sweep.add_argument("--axis", choices=harness.SWEEP_AXES,
                         default="malicious",
                         help="which intensity knob to sweep")
    p_sweep.add_argument("--values", default="0,1,2,3",
                         help="comma-separated axis values")

    p_infer = sub.add_parser("infer-eval",
                             help="evaluate query-time failure impact")
    _add_common(p_infer)
    p_infer.add_argument("--values", default=None,
                         help="comma-separated fault counts "
                              "(default: the configured faults.count)")

    p_audit = sub.add_parser("audit", help="verify a chain dump")
    p_audit.add_argument("path", help="chain.txt to verify")

    args = parser.parse_args(argv)

    if args.command == "audit":
        report = chain.audit_chain_file(args.path)
        if report.ok:
            print(f"ok: {args.path}: {report.sections} section(s), "
                  f"{report.blocks} block(s)")
            return 0
        for err in report.errors:
            print(f"audit error: {err}", file=sys.stderr)
        print(f"FAILED: {args.path}", file=sys.stderr)
        return 1

    try:
        cfg = _load(args)
        if args.command == "run":
            result = harness.run_experiment(cfg)
            out = _out_dir(cfg, "out")
            harness.write_outputs(result, out)
            print(f"wrote {out}/metrics.csv ({len(result.rows)} rows)")
        elif args.command == "sweep":
            out = _out_dir(cfg, "sweep_out")
            rows = harness.run_sweep(cfg, args.axis,
                                     _parse_values(args.values), out)
            print(f"wrote {out}/sweep.csv ({len(rows)} rows)")
        else:
            counts = (_parse_values(args.values) if args.values is not None
                      else [cfg.faults.count])
            rows = harness.evaluate_inference_phase(cfg, counts)
            out = _out_dir(cfg, "infer_out")
            harness.write_inference_csv(rows, out)
            print(f"wrote {out}/infer_eval.csv ({len(rows)} rows)")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
