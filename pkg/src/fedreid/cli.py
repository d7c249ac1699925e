"""Command-line entry point.

Subcommands: ``run``, ``baselines``, ``compare``, ``eval``, ``export-world``.
Exit codes: 0 success, 1 usage, 2 configuration or input error, 3 runtime failure.

Config files are JSON with two optional sections::

    {"world": {...WorldConfig fields...},
     "experiment": {...ExperimentConfig fields...},
     "world_file": "path/to/world.jsonl"}

``world_file`` (or ``--world``) loads an exported world instead of generating one.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import metrics as M
from .datagen import ConfigError, FederatedWorld, WorldConfig, export_world, generate_world, import_world
from .fedsim import (STRATEGIES, ExperimentConfig, MetricsReport, RoundError, TraceWriter,
                     run_centralized, run_experiment, run_standalone)
from .model import Backbone, load_checkpoint

logger = logging.getLogger("fedreid")

RUN_SCHEMA = "fedreid-run/1"
EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InputError(Exception):
    """Bad config file, bad override, or incompatible inputs."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- config loading ---------------------------------------------------------------

def _read_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise InputError(f"{path}: top level must be an object")
    unknown = set(data) - {"world", "experiment", "world_file"}
    if unknown:
        raise InputError(f"{path}: unknown section(s): {', '.join(sorted(unknown))}")
    return data


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> tuple[dict, dict, str | None]:
    """Merge the config file with command-line overrides.

    Returns (world section, experiment section, world file path).
    """
    data = _read_json(args.config) if getattr(args, "config", None) else {}
    world = dict(data.get("world", {}))
    experiment = dict(data.get("experiment", {}))
    world_file = data.get("world_file")
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in ("world", "experiment"):
            raise InputError(f"--set {item!r}: expected world.<field>=<value> or "
                             "experiment.<field>=<value>")
        (world if section == "world" else experiment)[name] = _parse_value(value)
    for flag, name in (("strategy", "strategy"), ("rounds", "rounds"), ("seed", "seed"),
                       ("local_epochs", "local_epochs"), ("batch_size", "batch_size"),
                       ("clients_per_round", "clients_per_round"), ("eval_every", "eval_every")):
        value = getattr(args, flag, None)
        if value is not None:
            experiment[name] = value
    if getattr(args, "world_seed", None) is not None:
        world["seed"] = args.world_seed
    if getattr(args, "world", None):
        world_file = args.world
    return world, experiment, world_file


def build_experiment(section: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.from_dict(section)
    except (TypeError, ValueError) as exc:
        raise InputError(f"experiment: {exc}") from exc


def build_world(section: dict, world_file: str | None) -> FederatedWorld:
    if world_file:
        path = Path(world_file)
        if not path.is_file():
            raise InputError(f"world file not found: {path}")
        try:
            return import_world(path)
        except (ValueError, KeyError) as exc:
            raise InputError(f"{path}: not a valid world export ({exc})") from exc
    try:
        return generate_world(WorldConfig.from_dict(section))
    except (ConfigError, TypeError) as exc:
        raise InputError(f"world: {exc}") from exc


# --- run directories ----------------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _prepare_run_dir(out: Path, world: FederatedWorld, experiment: ExperimentConfig,
                     world_section: dict, kind: str) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    export_world(world, out / "world.jsonl")
    manifest = {
        "schema": RUN_SCHEMA, "version": __version__, "kind": kind,
        "strategy": experiment.strategy if kind == "federated" else kind,
        "seed": experiment.seed, "world_hash": world.fingerprint(),
        "config": {"world": world_section, "experiment": experiment.to_dict()},
        "started": _now(), "finished": None, "status": "running",
        "outputs": {"world": "world.jsonl", "trace": "trace.jsonl", "table": "trace.txt",
                    "report": "report.json"},
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def _finish_run_dir(out: Path, manifest: dict, report: MetricsReport | None, status: str,
                    error: str | None = None) -> None:
    manifest["finished"] = _now()
    manifest["status"] = status
    if error:
        manifest["error"] = error
    if report is not None:
        _write_json(out / "report.json", report.summary())
    _write_json(out / "manifest.json", manifest)


def _write_eval_trace(out: Path, report: MetricsReport) -> None:
    writer = TraceWriter(out)
    writer.write({"type": "header", "schema": "fedreid-trace/1", "strategy": report.strategy,
                  "clients": report.client_names, "volumes": report.volumes, "model_bytes": 0})
    for ev in report.evals:
        writer.write(ev)
    writer.close()


# --- output tables -----------------------------------------------------------------

def format_report(report: MetricsReport) -> str:
    lines = [f"strategy: {report.strategy}"]
    sections = [("global", report.global_metrics), ("local", report.local_metrics)]
    for title, rows in sections:
        if not rows:
            continue
        lines.append(f"{title} models")
        lines.append(f"  {'client':<16}{'volume':>8}{'rank1':>8}{'rank5':>8}{'rank10':>8}{'mAP':>8}")
        for name, vol, row in zip(report.client_names, report.volumes, rows):
            if row is None:
                continue
            lines.append(f"  {name:<16}{vol:>8}{row['rank1']:>8.3f}{row['rank5']:>8.3f}"
                         f"{row['rank10']:>8.3f}{row['mAP']:>8.3f}")
    lines.append(f"communication: {report.per_client_bytes} bytes per client, "
                 f"{report.fleet_bytes} bytes total, {report.aggregations} aggregations")
    return "\n".join(lines)


def _client_rank1(report: dict, model: str) -> list[float | None]:
    order = [model, "global" if model == "local" else "local"]
    for key in order:
        rows = report.get(f"{key}_metrics")
        if rows:
            return [None if r is None else r["rank1"] for r in rows]
    raise InputError(f"run {report.get('strategy')!r} has no per-client metrics")


def compare_runs(baseline: Path, others: list[Path], model: str = "local") -> dict:
    """Per-client rank-1 deltas of each run against ``baseline``."""
    runs = []
    for path in [baseline, *others]:
        manifest_path, report_path = path / "manifest.json", path / "report.json"
        if not manifest_path.is_file() or not report_path.is_file():
            raise InputError(f"{path}: not a completed run directory")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        if manifest.get("status") != "complete":
            raise InputError(f"{path}: run did not complete (status {manifest.get('status')})")
        runs.append((path, manifest, json.loads(report_path.read_text(encoding="utf-8"))))
    base_hash = runs[0][1]["world_hash"]
    for path, manifest, _ in runs[1:]:
        if manifest["world_hash"] != base_hash:
            raise InputError(f"{path}: world hash {manifest['world_hash'][:12]} differs from "
                             f"baseline {base_hash[:12]}; runs are not comparable")
    base_report = runs[0][2]
    base = _client_rank1(base_report, model)
    order = sorted(range(len(base)), key=lambda k: (-base_report["volumes"][k], k))
    columns = []
    for path, manifest, report in runs[1:]:
        values = _client_rank1(report, model)
        # rounding keeps float noise from the best-k averages out of the table
        deltas = [None if values[k] is None or base[k] is None
                  else round(values[k] - base[k], 12) + 0.0 for k in order]
        columns.append({"run": str(path), "strategy": manifest["strategy"], "deltas": deltas})
    return {"baseline": str(baseline), "baseline_strategy": runs[0][1]["strategy"],
            "model": model, "clients": [base_report["client_names"][k] for k in order],
            "volumes": [base_report["volumes"][k] for k in order],
            "baseline_rank1": [base[k] for k in order], "columns": columns}


def format_comparison(table: dict) -> str:
    head = f"{'client':<16}{'volume':>8}{'base':>8}"
    for i, col in enumerate(table["columns"]):
        head += f"{col['strategy'][:13] + f'#{i + 1}':>16}"
    lines = [f"rank-1 deltas vs {table['baseline_strategy']} ({table['model']} models)", head]
    for r, name in enumerate(table["clients"]):
        base = table["baseline_rank1"][r]
        line = f"{name:<16}{table['volumes'][r]:>8}" + (f"{base:>8.3f}" if base is not None else f"{'-':>8}")
        for col in table["columns"]:
            d = col["deltas"][r]
            line += f"{d:>+16.3f}" if d is not None else f"{'-':>16}"
        lines.append(line)
    return "\n".join(lines)


# --- subcommands -----------------------------------------------------------------

def cmd_run(args) -> int:
    world_section, exp_section, world_file = load_config(args)
    experiment = build_experiment(exp_section)
    world = build_world(world_section, world_file)
    try:
        experiment.validate(len(world.clients))
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = Path(args.out)
    manifest = _prepare_run_dir(out, world, experiment, world_section, "federated")
    try:
        report = run_experiment(experiment, world, out, checkpoints=args.checkpoints)
    except RoundError as exc:
        _finish_run_dir(out, manifest, None, "failed", str(exc))
        print(f"run failed: {exc}; partial trace kept in {out / 'trace.jsonl'}", file=sys.stderr)
        return EXIT_RUNTIME
    _finish_run_dir(out, manifest, report, "complete")
    print(format_report(report))
    return EXIT_OK


def cmd_baselines(args) -> int:
    world_section, exp_section, world_file = load_config(args)
    experiment = build_experiment(exp_section)
    world = build_world(world_section, world_file)
    try:
        experiment.validate(len(world.clients))
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    for kind, runner in (("standalone", run_standalone), ("centralized", run_centralized)):
        out = Path(args.out) / kind
        manifest = _prepare_run_dir(out, world, experiment, world_section, kind)
        report = runner(experiment, world)
        _write_eval_trace(out, report)
        _finish_run_dir(out, manifest, report, "complete")
        print(format_report(report))
    return EXIT_OK


def cmd_compare(args) -> int:
    table = compare_runs(Path(args.baseline), [Path(p) for p in args.runs], args.model)
    if args.json:
        Path(args.json).write_text(json.dumps(table, indent=2) + "\n", encoding="utf-8")
    print(format_comparison(table))
    return EXIT_OK


def cmd_eval(args) -> int:
    world = build_world({}, args.world)
    path = Path(args.checkpoint)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    try:
        header, vec = load_checkpoint(path)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    if header["input_dim"] != world.input_dim:
        raise InputError(f"{path}: input_dim {header['input_dim']} does not match the world "
                         f"({world.input_dim})")
    backbone = Backbone.from_vector(vec, header["input_dim"], header["hidden_dim"])
    rows = [M.evaluate(c.query, c.gallery, backbone) for c in world.clients]
    result = {"checkpoint": str(path), "world_hash": world.fingerprint(),
              "clients": [{"client": c.name, **r} for c, r in zip(world.clients, rows)]}
    if args.json:
        Path(args.json).write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    print(f"  {'client':<16}{'rank1':>8}{'rank5':>8}{'rank10':>8}{'mAP':>8}")
    for c, r in zip(world.clients, rows):
        print(f"  {c.name:<16}{r['rank1']:>8.3f}{r['rank5']:>8.3f}{r['rank10']:>8.3f}{r['mAP']:>8.3f}")
    print(f"  {'mean':<16}{np.mean([r['rank1'] for r in rows]):>8.3f}")
    return EXIT_OK


def cmd_export_world(args) -> int:
    world_section, _, world_file = load_config(args)
    world = build_world(world_section, world_file)
    export_world(world, args.out)
    print(f"wrote {args.out} ({len(world.clients)} clients, hash {world.fingerprint()[:12]})")
    return EXIT_OK


def _add_world_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--world", help="exported world file to use instead of generating one")
    p.add_argument("--world-seed", type=int, help="seed for world generation")
    p.add_argument("--set", action="append", metavar="SECTION.FIELD=VALUE",
                   help="override any config field, e.g. experiment.kd_lr=0.001")


def _add_experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--rounds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--local-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--clients-per-round", type=int)
    p.add_argument("--eval-every", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedreid", description="Federated person re-identification simulator")
    parser.add_argument("--version", action="version", version=f"fedreid {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run one federated experiment")
    _add_world_args(p)
    _add_experiment_args(p)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--checkpoints", action="store_true", help="save backbones at each evaluation")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("baselines", help="standalone and centralized reference runs")
    _add_world_args(p)
    _add_experiment_args(p)
    p.add_argument("--out", required=True, help="directory for the two baseline runs")
    p.set_defaults(func=cmd_baselines)

    p = sub.add_parser("compare", help="per-client rank-1 deltas against a baseline run")
    p.add_argument("baseline", help="baseline run directory")
    p.add_argument("runs", nargs="+", help="run directories to compare")
    p.add_argument("--model", choices=("local", "global"), default="local",
                   help="which models to compare (falls back when a run lacks them)")
    p.add_argument("--json", help="also write the table as JSON")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("eval", help="evaluate a backbone checkpoint on a world")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--world", required=True, help="exported world file")
    p.add_argument("--json", help="also write the metrics as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-world", help="generate a world and write it to a file")
    _add_world_args(p)
    p.add_argument("--out", required=True, help="output file")
    p.set_defaults(func=cmd_export_world)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fedreid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"fedreid: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, ValueError, FloatingPointError, OSError) as exc:
        print(f"fedreid: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
