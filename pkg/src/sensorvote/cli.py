"""Command-line interface.

Exit codes: 0 success, 1 validation error (bad flags, bad config), 2 runtime
error.
"""

from __future__ import annotations

import argparse
import sys
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

from . import csa as csa_mod
from . import harness
from .domain import default_grid
from .harness import ConfigError, ExperimentConfig


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1 instead of 2."""

    def error(self, message):
        raise _UsageError(f"{message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="sensorvote", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML experiment config (defaults to the built-in benchmark)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--workers", type=int, help="scene-parallel worker count")
        p.add_argument("--out", help="output directory (default from config)")

    p_bench = sub.add_parser("bench", help="run the benchmark method matrix")
    common(p_bench)

    p_sweep = sub.add_parser("sweep", help="ablation sweep over one axis")
    common(p_sweep)
    p_sweep.add_argument("--axis", help="one of k, gamma, layers, M, csa (default from config)")
    p_sweep.add_argument("--values", help="comma-separated axis values, e.g. 1,3,5 or 1-3,10-12")

    p_stats = sub.add_parser("stats", help="build source statistics and write an MVPS file")
    common(p_stats)

    p_exp = sub.add_parser("export-embeddings", help="export synthetic encodings to an MVPF file")
    common(p_exp)

    p_lat = sub.add_parser("latency", help="capture-latency table for the CSA policies")
    p_lat.add_argument("--csa", choices=["csa1", "csa2", "csa3", "none"], help="policy (default: table)")
    p_lat.add_argument("--m", type=int, help="candidate count for the policy")
    p_lat.add_argument("--seed", type=int, default=0)
    return parser


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_toml(args.config)
    else:
        cfg = ExperimentConfig.from_dict({})
    overrides: dict = {}
    if args.seed is not None:
        overrides.setdefault("params", {})["seed"] = args.seed
        overrides.setdefault("scenes", {})["seed"] = args.seed
    if args.workers is not None:
        overrides.setdefault("run", {})["workers"] = args.workers
    if args.out is not None:
        overrides.setdefault("output", {})["dir"] = args.out
    if overrides:
        cfg = ExperimentConfig.from_dict(overrides, defaults=cfg.raw)
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.raw.get("output", {}).get("dir", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_bench(args) -> int:
    cfg = _load_config(args)
    report = harness.run_benchmark(cfg)
    out = _out_dir(cfg)
    csv_path = harness.export_report(report, "csv", out / "report.csv")
    json_path = harness.export_report(report, "json", out / "report.json")
    for method in cfg.methods:
        print(f"{method}: accuracy {report.method_accuracy(method):.4f}")
    print(f"wrote {csv_path} and {json_path}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    spec = cfg.raw.get("sweep", {})
    axis = args.axis or spec.get("axis")
    if not axis:
        raise ConfigError("sweep needs --axis (or a [sweep] section in the config)")
    if args.values:
        values = [_parse_value(v) for v in args.values.split(",")]
    else:
        values = spec.get("values")
    if not values:
        raise ConfigError("sweep needs --values (or sweep.values in the config)")
    rows = harness.sweep(cfg, axis, values)
    out = _out_dir(cfg)
    csv_path = harness.export_sweep(rows, "csv", out / f"sweep_{axis}.csv")
    harness.export_sweep(rows, "json", out / f"sweep_{axis}.json")
    for r in rows:
        print(f"{axis}={r['value']}: accuracy {r['accuracy']:.4f}")
    print(f"wrote {csv_path}")
    return 0


def _parse_value(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _cmd_stats(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    path = out / "source.mvps"
    stats = harness.export_source_stats(cfg, path)
    print(f"wrote {path} ({stats.n_layers} layers x {stats.feat_dim} dims)")
    return 0


def _cmd_export_embeddings(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    path = out / "embeddings.mvpf"
    count = harness.export_embeddings(cfg, path)
    print(f"wrote {path} ({count} records)")
    return 0


def _cmd_latency(args) -> int:
    grid = default_grid()
    if args.csa is None and args.m is None:
        rows = [("none", grid.size, csa_mod.capture_latency(grid.configs()))]
        for variant, m in (("csa1", 12), ("csa2", 6), ("csa3", 21)):
            configs = csa_mod.select_candidates(
                grid, csa_mod.CsaPolicy(variant, m, args.seed), master_seed=args.seed
            )
            rows.append((variant, m, csa_mod.capture_latency(configs)))
        for variant, m, latency in rows:
            print(f"{variant:>5} m={m:>2} capture {float(latency):g} s")
        return 0
    if args.csa in (None, "none"):
        configs = grid.configs()
    else:
        if args.m is None:
            raise ConfigError("--csa needs --m")
        configs = csa_mod.select_candidates(
            grid, csa_mod.CsaPolicy(args.csa, args.m, args.seed), master_seed=args.seed
        )
    print(f"{float(csa_mod.capture_latency(configs)):g}")
    return 0


_COMMANDS = {
    "bench": _cmd_bench,
    "sweep": _cmd_sweep,
    "stats": _cmd_stats,
    "export-embeddings": _cmd_export_embeddings,
    "latency": _cmd_latency,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
