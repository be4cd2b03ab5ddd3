"""JSON configuration: schema validation and preset lookup."""
from __future__ import annotations

import json
import os
from pathlib import Path

import jsonschema

from .constraints import CONSTRAINT_KINDS
from .data import DATA_DEFAULTS
from .models import MODEL_DEFAULTS
from .objective import PIPELINES
from .tasks import TASK_KINDS
from .trainer import EVAL_DEFAULTS, OPTIMIZER_DEFAULTS, RUN_DEFAULTS, SCHEMA_VERSION, ConfigError

PRESET_ENV = "CRL_PRESET_DIR"
PRESET_DIR = Path(__file__).parent / "presets"

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_int = {"type": "integer"}
_bool = {"type": "boolean"}


def _closed(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


TASK_SCHEMA = _closed({
    "kind": {"enum": list(TASK_KINDS)},
    "weight": _nonneg,
    "tau": _pos,
    "n_prototypes": {"type": "integer", "minimum": 1},
    "tau_p": _pos,
    "sinkhorn": _bool,
    "sinkhorn_iters": {"type": "integer", "minimum": 1},
    "sigma_noise": _pos,
    "mask_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "n_views": {"type": "integer", "minimum": 2},
    "exclude_same_sequence": _bool,
    "extra": {"type": "object"},
}, required=("kind",))

CONSTRAINT_SCHEMA = _closed({
    "kind": {"enum": list(CONSTRAINT_KINDS)},
    "weight": _nonneg,
    "params": {"type": "object"},
}, required=("kind",))

OBJECTIVE_SCHEMA = _closed({
    "pipeline": {"enum": list(PIPELINES)},
    "task": TASK_SCHEMA,
    "constraints": {"type": "array", "items": CONSTRAINT_SCHEMA},
})

_DATA_TYPES = {
    "kind": {"enum": ["static", "temporal", "paired"]},
    "path": {"type": ["string", "null"]},
    "seed": {"type": ["integer", "null"]},
    "mechanism": {"enum": ["linear", "mlp"]},
    "noise": {"enum": ["gaussian", "laplace"]},
    "noise_range": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
    "instantaneous": _bool,
    "intervention": _closed({"targets": {"type": "array", "items": _int},
                             "kind": {"enum": ["do_value", "noise_shift"]}, "value": _num}),
    "eval_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "obs_dim": {"type": ["integer", "null"], "minimum": 1},
    "p_edge": {"type": "number", "minimum": 0, "maximum": 1},
    "p_delayed": {"type": "number", "minimum": 0, "maximum": 1},
    "p_inst": {"type": "number", "minimum": 0, "maximum": 1},
    "noise_scale": _pos,
}
DATA_SCHEMA = _closed({k: _DATA_TYPES.get(k, {"type": "integer", "minimum": 1}) for k in DATA_DEFAULTS})

_MODEL_TYPES = {
    "latent_dim": {"type": ["integer", "null"], "minimum": 1},
    "style_dim": {"type": ["integer", "null"], "minimum": 0},
    "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
    "activation": {"enum": ["leaky_relu", "tanh", "relu"]},
    "lag": {"type": ["integer", "null"], "minimum": 1},
    "flow_env": _bool,
    "extractor": {"type": ["boolean", "null"]},
    "extractor_seed": _int,
    "decoder": {"enum": ["mlp", "additive"]},
    "blocks": {"type": ["array", "null"], "items": {"type": "array", "items": _int}},
    "learned_energy": _bool,
}
MODEL_SCHEMA = _closed({k: _MODEL_TYPES.get(k, {"type": "integer", "minimum": 1}) for k in MODEL_DEFAULTS})

OPTIMIZER_SCHEMA = _closed({k: _num for k in OPTIMIZER_DEFAULTS})
RUN_SCHEMA = _closed({
    "steps": {"type": "integer", "minimum": 0},
    "batch": {"type": "integer", "minimum": 1},
    "seed": {"type": "integer", "minimum": 0},
    **{k: {"type": "integer", "minimum": 0} for k in RUN_DEFAULTS if k not in ("steps", "batch", "seed")},
})
EVAL_SCHEMA = _closed({
    "method": {"enum": ["pearson", "spearman"]},
    "regressor": {"enum": ["linear_ridge", "none"]},
    "alpha": _nonneg,
    "max_samples": {"type": "integer", "minimum": 0},
})

GRID_SCHEMA = _closed({
    "tasks": {"type": "array", "minItems": 1,
              "items": _closed({"label": {"type": "string"}, "task": TASK_SCHEMA}, required=("task",))},
    "constraints": {"type": "array", "minItems": 1,
                    "items": _closed({"label": {"type": "string"},
                                      "constraints": {"type": "array", "items": CONSTRAINT_SCHEMA}})},
    "seeds": {"type": "integer", "minimum": 1},
}, required=("tasks", "constraints"))

CONFIG_SCHEMA = _closed({
    "schema_version": {"const": SCHEMA_VERSION},
    "description": {"type": "string"},
    "data": DATA_SCHEMA,
    "model": MODEL_SCHEMA,
    "objective": OBJECTIVE_SCHEMA,
    "optimizer": OPTIMIZER_SCHEMA,
    "run": RUN_SCHEMA,
    "eval": EVAL_SCHEMA,
    "grid": GRID_SCHEMA,
})


def validate_config(cfg: dict) -> dict:
    """Validate against the schema; raise ConfigError naming the offending key."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {err.message}")
    return cfg


def preset_dirs() -> list[Path]:
    dirs = []
    if os.environ.get(PRESET_ENV):
        dirs.append(Path(os.environ[PRESET_ENV]))
    dirs.append(PRESET_DIR)
    return dirs


def list_presets() -> list[str]:
    names = set()
    for d in preset_dirs():
        if d.is_dir():
            names.update(p.stem for p in d.glob("*.json"))
    return sorted(names)


def resolve_config_path(ref: str) -> Path:
    """An existing file path, or a preset name looked up in CRL_PRESET_DIR first."""
    p = Path(ref)
    if p.is_file():
        return p
    name = ref[:-5] if ref.endswith(".json") else ref
    for d in preset_dirs():
        cand = d / f"{name}.json"
        if cand.is_file():
            return cand
    raise FileNotFoundError(f"config {ref!r} is neither a file nor a known preset ({', '.join(list_presets())})")


def load_config(ref: str) -> dict:
    path = resolve_config_path(ref)
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return validate_config(cfg)
