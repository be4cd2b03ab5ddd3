"""Dataset construction from a config section and train/eval splitting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import scm
from .prng import STREAM_DATA, STREAM_ENV, STREAM_MIXING, PrngStream, derive_seed

DATA_DEFAULTS = {
    "kind": "static",
    "path": None,
    "seed": None,
    "latent_dim": 3,
    "obs_dim": None,
    "mixing_layers": 2,
    "mechanism": "linear",
    "noise": "gaussian",
    "noise_scale": 1.0,
    "p_edge": 0.0,
    "env_count": 1,
    "noise_range": [0.25, 2.0],
    "n_per_env": 500,
    "episodes": 256,
    "T": 8,
    "lag": 1,
    "p_delayed": 0.4,
    "p_inst": 0.4,
    "instantaneous": False,
    "n": 2000,
    "intervention": {"targets": [0], "kind": "do_value", "value": 0.0},
    "eval_fraction": 0.2,
}


def resolve_data_config(cfg: dict) -> dict:
    out = dict(DATA_DEFAULTS)
    out.update(cfg or {})
    if out["obs_dim"] is None:
        out["obs_dim"] = out["latent_dim"]
    return out


def data_seed(cfg: dict, run_seed: int) -> int:
    return int(cfg["seed"]) if cfg.get("seed") is not None else derive_seed("data", run_seed)


def generate_from_config(cfg: dict, seed: int):
    """Build the dataset described by a (resolved) data section.

    Paired data packs both views along the time axis (T = 2) and records the
    invariant set in ``meta["invariant_set"]``.
    """
    d, n_obs = int(cfg["latent_dim"]), int(cfg["obs_dim"])
    noise = (cfg["noise"], float(cfg["noise_scale"]))
    mixing = scm.sample_mixing(d, n_obs, int(cfg["mixing_layers"]), PrngStream(seed, STREAM_MIXING))
    kind = cfg["kind"]
    if kind == "static":
        model = scm.sample_scm(d, float(cfg["p_edge"]), cfg["mechanism"], noise, PrngStream(seed, STREAM_DATA, 1 << 20))
        envs = (scm.sample_environments(int(cfg["env_count"]), d, PrngStream(seed, STREAM_ENV),
                                        tuple(cfg["noise_range"]))
                if int(cfg["env_count"]) > 1 else scm.single_environment(d))
        return scm.generate_static(model, mixing, envs, int(cfg["n_per_env"]), PrngStream(seed, STREAM_DATA))
    if kind == "temporal":
        tscm = scm.sample_temporal_scm(d, int(cfg["lag"]), float(cfg["p_delayed"]), float(cfg["p_inst"]),
                                       bool(cfg["instantaneous"]), cfg["mechanism"], noise,
                                       PrngStream(seed, STREAM_DATA, 1 << 20))
        envs = (scm.sample_environments(int(cfg["env_count"]), d, PrngStream(seed, STREAM_ENV),
                                        tuple(cfg["noise_range"]))
                if int(cfg["env_count"]) > 1 else scm.single_environment(d))
        return scm.generate_temporal(tscm, int(cfg["episodes"]), int(cfg["T"]), PrngStream(seed, STREAM_DATA),
                                     mixing, envs)
    if kind == "paired":
        model = scm.sample_scm(d, float(cfg["p_edge"]), cfg["mechanism"], noise, PrngStream(seed, STREAM_DATA, 1 << 20))
        iv = cfg["intervention"]
        spec = scm.InterventionSpec(tuple(iv.get("targets", ())), iv.get("kind", "do_value"), iv.get("value", 0.0))
        v1, v2, _ = scm.generate_paired(model, mixing, spec, int(cfg["n"]), PrngStream(seed, STREAM_DATA))
        return _merge_paired(v1, v2)
    raise scm.ScmError(f"unknown data kind {kind!r}")


def _merge_paired(v1: scm.Dataset, v2: scm.Dataset) -> scm.Dataset:
    """Pack both views into one dataset along the time axis (T = 2)."""
    z = np.concatenate([v1.z_true, v2.z_true], axis=1)
    x = np.concatenate([v1.x_obs, v2.x_obs], axis=1)
    meta = {k: v for k, v in v1.meta.items() if k != "view"}
    meta["paired"] = True
    return scm.Dataset(z, x, v1.u, meta)


@dataclass
class TrainData:
    """Arrays consumed by the models.

    Static pipelines see ``x`` as (N, n) and ``z`` as (N, D); temporal ones
    keep the time axis. Paired data carries the second view in ``x_pair``.
    """

    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    env_count: int
    x_pair: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.x.shape[0]

    def batch(self, idx) -> dict:
        out = {"x": self.x[idx], "u": self.u[idx]}
        if self.x_pair is not None:
            out["x_pair"] = self.x_pair[idx]
        return out

    def subset(self, idx) -> "TrainData":
        return TrainData(self.x[idx], self.z[idx], self.u[idx], self.env_count,
                         None if self.x_pair is None else self.x_pair[idx], self.meta)

    def flat_latents(self) -> np.ndarray:
        return self.z.reshape(-1, self.z.shape[-1])


def to_train_data(ds: scm.Dataset, temporal: bool) -> TrainData:
    if temporal:
        return TrainData(ds.x_obs, ds.z_true, ds.u, ds.env_count, meta=dict(ds.meta))
    if ds.meta.get("paired"):
        return TrainData(ds.x_obs[:, 0], ds.z_true[:, 0], ds.u, ds.env_count, x_pair=ds.x_obs[:, 1],
                         meta=dict(ds.meta))
    if ds.T != 1:
        raise scm.ScmError("static pipelines need T = 1 data")
    return TrainData(ds.x_obs[:, 0], ds.z_true[:, 0], ds.u, ds.env_count, meta=dict(ds.meta))


def split(data: TrainData, eval_fraction: float, seed: int) -> tuple[TrainData, TrainData]:
    """Seeded permutation split into train and held-out evaluation parts."""
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError("eval_fraction must lie in (0, 1)")
    perm = PrngStream(seed, STREAM_DATA, 1 << 30).generator().permutation(data.size)
    n_eval = max(1, int(round(eval_fraction * data.size)))
    return data.subset(np.sort(perm[n_eval:])), data.subset(np.sort(perm[:n_eval]))
