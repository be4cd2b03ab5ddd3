"""Command line entry point: ``taskcrl generate|train|grid|report``."""
from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import jsonschema

from . import data as dm
from .config import load_config
from .constraints import ConstraintError
from .container import ContainerError, atomic_write_bytes
from .evaluation import TableRow, emit_report
from .objective import ObjectiveError
from .scm import ScmError, save_dataset
from .tasks import TaskError
from .tensor import TensorError
from .trainer import (SCHEMA_VERSION, CellResult, ConfigError, ExperimentConfig, RunFailure, aggregate_cells,
                      grid_run, train_run, write_json)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_RUN = 0, 2, 3, 4
CONFIG_ERRORS = (ConfigError, ObjectiveError, TaskError, ConstraintError, ScmError, jsonschema.ValidationError)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load(args) -> dict:
    cfg = copy.deepcopy(load_config(args.config))
    if args.seed is not None:
        cfg.setdefault("run", {})["seed"] = int(args.seed)
    return cfg


def _experiment(cfg: dict) -> ExperimentConfig:
    body = {k: v for k, v in cfg.items() if k not in ("grid", "description")}
    return ExperimentConfig.from_dict(body)


def cmd_generate(args) -> int:
    cfg = _load(args)
    exp = _experiment(cfg) if "objective" in cfg else None
    dcfg = exp.data if exp else dm.resolve_data_config(cfg.get("data", {}))
    run_seed = int(cfg.get("run", {}).get("seed", 0))
    seed = dm.data_seed(dcfg, run_seed)
    ds = dm.generate_from_config(dcfg, seed)
    ds.meta["run_seed"] = run_seed
    out = Path(args.out or "dataset.crl")
    save_dataset(out, ds)
    print(json.dumps({"path": str(out), "latent_dim": ds.latent_dim, "obs_dim": ds.obs_dim,
                      "episodes": ds.episodes, "T": ds.T, "env_count": ds.env_count,
                      "instantaneous": ds.meta.get("instantaneous", False), "seed": seed,
                      "spec_hash": ds.meta["spec_hash"]}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    exp = _experiment(cfg)
    path = exp.data.get("path")
    if path and not Path(path).is_file():
        raise CliError(EXIT_IO, f"dataset not found: {path}")
    out = Path(args.out or "run")
    record = train_run(exp, out_dir=out)
    print(f"{record.final['mcc']!r} {record.final['r2']!r}")
    return EXIT_OK


def _grid_entries(cfg: dict):
    grid = cfg.get("grid")
    if not grid:
        raise CliError(EXIT_CONFIG, "config has no grid section")
    return grid["tasks"], grid["constraints"], int(grid.get("seeds", 5))


def cmd_grid(args) -> int:
    cfg = _load(args)
    tasks, cons, seeds = _grid_entries(cfg)
    base = {k: v for k, v in cfg.items() if k not in ("grid", "description")}
    base.setdefault("objective", {})
    base["objective"].setdefault("task", tasks[0]["task"])
    out = Path(args.out or "grid")
    out.mkdir(parents=True, exist_ok=True)
    result = grid_run(base, tasks, cons, seeds=seeds, jobs=args.jobs, out_dir=out)
    cells = [c.__dict__ for c in result.cells]
    write_json(out / "grid.json", {"schema_version": SCHEMA_VERSION, "method": result.method,
                                   "base_seed": int(base.get("run", {}).get("seed", 0)), "cells": cells})
    csv_text = emit_report(result.rows, "csv")
    md_text = emit_report(result.rows, "md")
    atomic_write_bytes(out / "report.csv", csv_text.encode())
    atomic_write_bytes(out / "report.md", md_text.encode())
    sys.stdout.write(csv_text if args.format == "csv" else md_text)
    for c in result.cells:
        if c.error:
            print(f"failed cell {c.task_label} / {c.constraint_label} rep {c.rep}: {c.error}", file=sys.stderr)
    return EXIT_OK if any(c.error is None for c in result.cells) else EXIT_RUN


def _cells_from_dir(path: Path) -> tuple[list, str]:
    if (path / "grid.json").is_file():
        doc = json.loads((path / "grid.json").read_text())
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise CliError(EXIT_CONFIG, f"{path}: schema version {doc.get('schema_version')} != {SCHEMA_VERSION}")
        return [CellResult(**c) for c in doc["cells"]], doc.get("method", "pearson")
    if (path / "record.json").is_file():
        rec = json.loads((path / "record.json").read_text())
        if rec.get("schema_version") != SCHEMA_VERSION:
            raise CliError(EXIT_CONFIG, f"{path}: schema version {rec.get('schema_version')} != {SCHEMA_VERSION}")
        label = "+".join(rec.get("constraints") or ["none"])
        cell = CellResult(task_idx=0, constraint_idx=0, rep=0, seed=rec["seed"], task_label=rec["task"],
                          constraint_label=label, mcc=rec["final"]["mcc"], r2=rec["final"]["r2"],
                          run_dir=str(path))
        return [cell], rec["final"].get("method", "pearson")
    raise CliError(EXIT_IO, f"{path} holds neither grid.json nor record.json")


def merge_runs(paths) -> list[TableRow]:
    """Merge run or grid directories into one table with a deterministic row order."""
    cells, methods = [], set()
    for p in paths:
        c, m = _cells_from_dir(Path(p))
        cells.extend(c)
        methods.add(m)
    if len(methods) > 1:
        raise CliError(EXIT_CONFIG, f"cannot merge reports using different methods: {sorted(methods)}")
    unique = {}
    for c in cells:
        unique.setdefault((c.constraint_label, c.task_label, c.seed), c)
    order = {}
    for c in sorted(unique.values(), key=lambda c: (c.constraint_idx, c.task_idx, c.constraint_label,
                                                    c.task_label)):
        order.setdefault((c.constraint_label, c.task_label), len(order))
    merged = []
    for c in sorted(unique.values(), key=lambda c: (order[(c.constraint_label, c.task_label)], c.seed)):
        merged.append(CellResult(order[(c.constraint_label, c.task_label)], 0, c.seed, c.seed, c.task_label,
                                 c.constraint_label, c.mcc, c.r2, c.error))
    return aggregate_cells(merged, methods.pop() if methods else "pearson")


def cmd_report(args) -> int:
    if not args.runs:
        raise CliError(EXIT_CONFIG, "report needs at least one run directory")
    rows = merge_runs(args.runs)
    text = emit_report(rows, args.format)
    if args.out:
        atomic_write_bytes(args.out, text.encode())
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taskcrl", description="Task x constraint representation learning runs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="config path or preset name")
        p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--format", choices=["csv", "md"], default="csv")

    common(sub.add_parser("generate", help="generate a synthetic dataset"))
    common(sub.add_parser("train", help="train one configuration"))
    g = sub.add_parser("grid", help="run a task x constraint grid")
    common(g)
    g.add_argument("--jobs", type=int, default=1, help="parallel grid cells")
    r = sub.add_parser("report", help="merge run or grid directories into one table")
    common(r, config=False)
    r.add_argument("runs", nargs="*")
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "grid": cmd_grid, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ContainerError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (RunFailure, TensorError, FloatingPointError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
