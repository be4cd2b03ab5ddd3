"""Objective composition, optimisation, checkpoints, and task x constraint grids."""
from __future__ import annotations

import copy
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as dm
from . import tensor as tn
from .container import atomic_write_bytes, canonical_hash, read_container, write_container
from .evaluation import EvalReport, TableRow, evaluate
from .models import TermError, build_model, resolve_model_config, total_from_terms
from .objective import ObjectiveSpec
from .prng import STREAM_BATCH, PrngStream, derive_seed
from .scm import load_dataset

SCHEMA_VERSION = 1
OPTIMIZER_DEFAULTS = {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}
RUN_DEFAULTS = {"steps": 3000, "batch": 64, "seed": 0, "eval_every": 0, "log_every": 1, "checkpoint_every": 0}
EVAL_DEFAULTS = {"method": "pearson", "regressor": "linear_ridge", "alpha": 1e-3, "max_samples": 4000}


class ConfigError(ValueError):
    pass


class RunFailure(RuntimeError):
    """Training aborted; ``term`` names the offending loss term when known."""

    def __init__(self, message: str, term: str | None = None):
        super().__init__(message)
        self.term = term


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.param = name


# ---------------------------------------------------------------- config

@dataclass
class ExperimentConfig:
    objective: ObjectiveSpec
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    run: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.data = dm.resolve_data_config(self.data)
        self.optimizer = {**OPTIMIZER_DEFAULTS, **(self.optimizer or {})}
        self.run = {**RUN_DEFAULTS, **(self.run or {})}
        self.eval = {**EVAL_DEFAULTS, **(self.eval or {})}
        self.model = dict(self.model or {})
        if int(self.run["steps"]) < 0:
            raise ConfigError("run.steps must be >= 0")
        if int(self.run["batch"]) < 1:
            raise ConfigError("run.batch must be >= 1")
        if self.optimizer["lr"] <= 0 or self.optimizer["eps"] <= 0:
            raise ConfigError("optimizer lr and eps must be positive")
        if not (0 <= self.optimizer["beta1"] < 1 and 0 <= self.optimizer["beta2"] < 1):
            raise ConfigError("optimizer betas must lie in [0, 1)")
        temporal = self.objective.pipeline == "temporal_video"
        if temporal != (self.data["kind"] == "temporal") and self.data.get("path") is None:
            raise ConfigError(f"pipeline {self.objective.pipeline!r} cannot use {self.data['kind']!r} data")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            objective=ObjectiveSpec.from_dict(d.get("objective", {})),
            data=copy.deepcopy(d.get("data", {})),
            model=copy.deepcopy(d.get("model", {})),
            optimizer=copy.deepcopy(d.get("optimizer", {})),
            run=copy.deepcopy(d.get("run", {})),
            eval=copy.deepcopy(d.get("eval", {})),
            schema_version=d.get("schema_version", SCHEMA_VERSION),
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "data": copy.deepcopy(self.data),
            "model": copy.deepcopy(self.model),
            "objective": self.objective.to_dict(),
            "optimizer": dict(self.optimizer),
            "run": dict(self.run),
            "eval": dict(self.eval),
        }

    def hash(self) -> str:
        return canonical_hash(self.to_dict())

    @property
    def seed(self) -> int:
        return int(self.run["seed"])


# ---------------------------------------------------------------- objective

def compose_total_loss(objective: ObjectiveSpec, batch: dict, model, step: int, seed: int = 0):
    """Weighted task loss plus weighted constraints.

    Returns ``(total, breakdown)`` where ``breakdown`` maps term names to the
    floats that were summed, in the same order, to produce ``total``.
    """
    if getattr(model, "objective", None) is not objective:
        model_pipe = getattr(model, "pipeline", None)
        if model_pipe != objective.pipeline:
            raise ConfigError(f"model serves {model_pipe!r}, objective targets {objective.pipeline!r}")
        model.objective = objective
    terms = model.loss_terms(batch, step, seed)
    total = total_from_terms(terms)
    return total, {k: float(v.data) for k, v in terms.items()}


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    ``params`` and ``grads`` map names to arrays. Inputs are not modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads.get(name, np.zeros_like(p)), dtype=np.float64)
        if g.shape != p.shape:
            raise tn.ShapeError("adam_step", [p.shape, g.shape])
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(t, m_new, v_new)


def _diagnose_nonfinite(model, batch: dict, step: int, seed: int, params: dict) -> str | None:
    """Find the first loss term whose gradient alone is non-finite."""
    terms = model.loss_terms(batch, step, seed)
    names = list(params)
    for term, value in terms.items():
        if not np.isfinite(value.data):
            return term
        grads = tn.grad(value, [params[n] for n in names])
        if any(not np.all(np.isfinite(g)) for g in grads):
            return term
    return None


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model, state: AdamState, step: int, config_hash: str, seed: int) -> None:
    arrays = {}
    for name, value in model.state_dict().items():
        arrays[f"param/{name}"] = value
        arrays[f"adam_m/{name}"] = state.m.get(name, np.zeros_like(value))
        arrays[f"adam_v/{name}"] = state.v.get(name, np.zeros_like(value))
    meta = {"step": int(step), "adam_t": int(state.t), "config_hash": config_hash, "seed": int(seed),
            "schema_version": SCHEMA_VERSION}
    write_container(path, arrays, meta, kind="checkpoint")


def load_checkpoint(path, model) -> tuple[AdamState, dict]:
    header, arrays = read_container(path)
    if header.get("kind") != "checkpoint":
        raise ConfigError(f"{path} is not a checkpoint container")
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(params)
    m = {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")}
    v = {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    meta = header["meta"]
    return AdamState(int(meta["adam_t"]), m, v), meta


# ---------------------------------------------------------------- runs

@dataclass
class RunRecord:
    config_hash: str
    seed: int
    pipeline: str
    steps_completed: int
    logged_steps: list
    traces: dict
    eval_history: list
    final: dict
    checkpoint: str | None = None
    data_hash: str | None = None
    task: str = ""
    constraints: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    @property
    def report(self) -> EvalReport:
        return EvalReport.from_dict(self.final)


@dataclass
class RunContext:
    config: ExperimentConfig
    model: object
    train: dm.TrainData
    held_out: dm.TrainData | None
    data_hash: str | None


def prepare_run(config: ExperimentConfig) -> RunContext:
    dcfg = config.data
    temporal = config.objective.pipeline == "temporal_video"
    dseed = dm.data_seed(dcfg, config.seed)
    if dcfg.get("path"):
        ds = load_dataset(dcfg["path"])
    else:
        ds = dm.generate_from_config(dcfg, dseed)
    td = dm.to_train_data(ds, temporal)
    train, held_out = dm.split(td, float(dcfg["eval_fraction"]), dseed)
    mcfg = resolve_model_config(config.model, config.objective.pipeline, ds.latent_dim, ds.meta.get("lag"))
    model = build_model(config.objective, mcfg, ds.obs_dim, ds.env_count, config.seed,
                        invariant_set=ds.meta.get("invariant_set"))
    return RunContext(config, model, train, held_out, ds.meta.get("spec_hash"))


def evaluate_model(model, held_out: dm.TrainData, eval_cfg: dict) -> EvalReport:
    z_hat = model.embed(held_out.x)
    z_true = held_out.flat_latents()
    cap = int(eval_cfg.get("max_samples", 0) or 0)
    if cap and z_hat.shape[0] > cap:
        z_hat, z_true = z_hat[:cap], z_true[:cap]
    return evaluate(z_hat, z_true, eval_cfg["method"], eval_cfg["regressor"], float(eval_cfg["alpha"]))


def train_run(config, out_dir=None, resume_from=None, stop_at: int | None = None,
              context: RunContext | None = None) -> RunRecord:
    """Train one configuration; optionally resume from a checkpoint or stop early.

    Every step draws its batch, views and reparameterisation noise from streams
    keyed by ``(seed, step)``, so a resumed run matches an uninterrupted one.
    """
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    started = time.perf_counter()
    ctx = context or prepare_run(config)
    model, train = ctx.model, ctx.train
    seed = config.seed
    chash = config.hash()
    opt = config.optimizer
    steps = int(config.run["steps"])
    end = steps if stop_at is None else min(steps, int(stop_at))
    log_every = max(1, int(config.run["log_every"]))
    eval_every = int(config.run["eval_every"])
    ckpt_every = int(config.run["checkpoint_every"])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    state, start = AdamState(), 0
    if resume_from is not None:
        state, meta = load_checkpoint(resume_from, model)
        if meta.get("config_hash") != chash:
            raise ConfigError("checkpoint was written by a different configuration")
        start = int(meta["step"])

    params = model.named_parameters()
    names = list(params)
    traces: dict[str, list] = {}
    logged: list[int] = []
    history = []
    can_eval = ctx.held_out is not None
    if start == 0 and can_eval:
        history.append({"step": 0, **_summary(evaluate_model(model, ctx.held_out, config.eval))})
    batch_size = min(int(config.run["batch"]), train.size)

    for step in range(start, end):
        idx = PrngStream(seed, STREAM_BATCH, step).generator().choice(train.size, batch_size, replace=False)
        batch = train.batch(idx)
        try:
            total, breakdown = compose_total_loss(config.objective, batch, model, step, seed)
            if not np.isfinite(total.data):
                raise TermError(next((k for k, v in breakdown.items() if not np.isfinite(v)), "total"),
                                "loss is not finite")
            grads = dict(zip(names, tn.grad(total, [params[n] for n in names])))
            new_params, state = adam_step(state, {n: params[n].data for n in names}, grads, opt["lr"],
                                          opt["beta1"], opt["beta2"], opt["eps"])
        except TermError as exc:
            raise RunFailure(f"step {step}: {exc}", exc.term) from exc
        except NonFiniteGradient as exc:
            term = _diagnose_nonfinite(model, batch, step, seed, params)
            raise RunFailure(f"step {step}: NaN/Inf gradient in loss term '{term}' ({exc})", term) from exc
        for n in names:
            params[n].data[...] = new_params[n]
        model.post_step()
        if step % log_every == 0:
            logged.append(step)
            for k, v in breakdown.items():
                traces.setdefault(k, []).append(v)
            traces.setdefault("total", []).append(float(total.data))
        done = step + 1
        if can_eval and eval_every and done % eval_every == 0 and done < steps:
            history.append({"step": done, **_summary(evaluate_model(model, ctx.held_out, config.eval))})
        if out is not None and ckpt_every and done % ckpt_every == 0 and done < end:
            save_checkpoint(out / f"checkpoint_{done}.crl", model, state, done, chash, seed)

    final = evaluate_model(model, ctx.held_out, config.eval) if can_eval else None
    if final is not None and (not history or history[-1]["step"] != end):
        history.append({"step": end, **_summary(final)})
    ckpt_path = None
    if out is not None:
        ckpt_path = str(out / "checkpoint.crl")
        save_checkpoint(ckpt_path, model, state, end, chash, seed)
    record = RunRecord(
        config_hash=chash, seed=seed, pipeline=config.objective.pipeline, steps_completed=end,
        logged_steps=logged, traces=traces, eval_history=history, final=final.to_dict() if final is not None else {},
        checkpoint=ckpt_path, data_hash=ctx.data_hash, task=config.objective.task.kind,
        constraints=[c.kind for c, _ in config.objective.constraints],
        wall_seconds=round(time.perf_counter() - started, 3),
    )
    if out is not None:
        write_json(out / "record.json", record.to_dict())
        write_json(out / "config.json", config.to_dict())
    return record


def _summary(report: EvalReport) -> dict:
    return {"mcc": report.mcc, "r2": report.r2}


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


# ---------------------------------------------------------------- grids

@dataclass
class CellResult:
    task_idx: int
    constraint_idx: int
    rep: int
    seed: int
    task_label: str
    constraint_label: str
    mcc: float | None = None
    r2: float | None = None
    error: str | None = None
    run_dir: str | None = None


@dataclass
class GridResult:
    rows: list
    cells: list
    method: str = "pearson"


def cell_seed(base_seed: int, task_idx: int, constraint_idx: int, rep: int) -> int:
    return derive_seed(int(base_seed), int(task_idx), int(constraint_idx), int(rep))


def cell_config(base: dict, task_entry: dict, constraint_entry: dict, task_idx: int, constraint_idx: int,
                rep: int) -> dict:
    cfg = copy.deepcopy(base)
    base_seed = int(cfg.get("run", {}).get("seed", RUN_DEFAULTS["seed"]))
    obj = cfg.setdefault("objective", {})
    obj["task"] = copy.deepcopy(task_entry["task"])
    obj["constraints"] = copy.deepcopy(constraint_entry.get("constraints", []))
    if "pipeline" in constraint_entry:
        obj["pipeline"] = constraint_entry["pipeline"]
    cfg.setdefault("run", {})["seed"] = cell_seed(base_seed, task_idx, constraint_idx, rep)
    data = cfg.setdefault("data", {})
    if data.get("seed") is None and not data.get("path"):
        # the same dataset for every cell of one repetition
        data["seed"] = derive_seed("data", base_seed, rep)
    return cfg


def _run_cell(payload: dict) -> dict:
    cfg, meta, out_dir = payload["config"], payload["meta"], payload["out_dir"]
    try:
        record = train_run(cfg, out_dir=out_dir)
        return {**meta, "mcc": record.final["mcc"], "r2": record.final["r2"], "error": None, "run_dir": out_dir}
    except Exception as exc:  # a failed cell must not kill the grid
        return {**meta, "mcc": None, "r2": None, "error": f"{type(exc).__name__}: {exc}", "run_dir": out_dir}


def _label(entry: dict, fallback: str) -> str:
    return str(entry.get("label") or fallback)


def grid_run(base: dict, tasks: list, constraint_presets: list, seeds=5, jobs: int = 1,
             out_dir=None) -> GridResult:
    """Run every (constraint preset, task, repetition) cell and aggregate per cell.

    ``tasks`` entries are ``{"label", "task": {...}}``; constraint presets are
    ``{"label", "constraints": [...]}``. Rows follow preset order, then task
    order, independent of execution order.
    """
    if not tasks or not constraint_presets:
        raise ConfigError("grid needs at least one task and one constraint preset")
    reps = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    if not reps:
        raise ConfigError("grid needs at least one seed")
    base = copy.deepcopy(base.to_dict() if isinstance(base, ExperimentConfig) else base)
    payloads = []
    for ci, cons in enumerate(constraint_presets):
        for ti, task in enumerate(tasks):
            for rep in reps:
                cfg = cell_config(base, task, cons, ti, ci, rep)
                ExperimentConfig.from_dict(cfg)  # validate before launching anything
                meta = {"task_idx": ti, "constraint_idx": ci, "rep": rep, "seed": cfg["run"]["seed"],
                        "task_label": _label(task, task["task"].get("kind", "task")),
                        "constraint_label": _label(cons, "+".join(c["kind"] for c in cons.get("constraints", []))
                                                   or "none")}
                run_dir = None if out_dir is None else str(Path(out_dir) / "cells" / f"c{ci}_t{ti}_r{rep}")
                payloads.append({"config": cfg, "meta": meta, "out_dir": run_dir})
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_limit_threads) as pool:
            results = list(pool.map(_run_cell, payloads))
    else:
        results = [_run_cell(p) for p in payloads]
    cells = sorted((CellResult(**r) for r in results), key=lambda c: (c.constraint_idx, c.task_idx, c.rep))
    method = base.get("eval", {}).get("method", EVAL_DEFAULTS["method"])
    rows = aggregate_cells(cells, method)
    return GridResult(rows, cells, method)


def aggregate_cells(cells: list, method: str = "pearson") -> list:
    rows: dict = {}
    for c in sorted(cells, key=lambda c: (c.constraint_idx, c.task_idx, c.rep)):
        row = rows.setdefault((c.constraint_idx, c.task_idx), TableRow(c.task_label, c.constraint_label, [], [],
                                                                       method))
        if c.error is None:
            row.mcc.append(c.mcc)
            row.r2.append(c.r2)
        else:
            row.failed += 1
    return list(rows.values())


def _limit_threads() -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")
