"""Synthetic latent structural causal models and their observations.

Static data follows ``Z_j := m_j(Z_pa(j), eps_j)`` in topological order and is
observed through an injective leaky-ReLU mixing ``X = g(Z)``. Temporal data
adds lagged parents and, optionally, same-step (instantaneous) parents.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .container import canonical_hash, read_container, write_container
from .prng import PrngStream

MLP_HIDDEN = 16
LINEAR_RANGE = (0.5, 1.5)


class ScmError(ValueError):
    pass


# ---------------------------------------------------------------- graphs

@dataclass(frozen=True)
class DagSpec:
    d: int
    edges: np.ndarray  # edges[i, j] == True means i -> j
    order: np.ndarray  # topological order

    def __post_init__(self):
        if self.d < 1:
            raise ScmError("DAG needs at least one node")
        edges = np.asarray(self.edges, dtype=bool)
        if edges.shape != (self.d, self.d):
            raise ScmError(f"edge matrix shape {edges.shape} does not match d={self.d}")
        pos = np.empty(self.d, dtype=int)
        pos[np.asarray(self.order)] = np.arange(self.d)
        src, dst = np.nonzero(edges)
        if np.any(pos[src] >= pos[dst]):
            raise ScmError("edges are not consistent with the topological order (cycle?)")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "order", np.asarray(self.order, dtype=int))

    def parents(self, j: int) -> np.ndarray:
        return np.nonzero(self.edges[:, j])[0]

    def to_dict(self) -> dict:
        return {"d": self.d, "edges": self.edges.astype(int).tolist(), "order": self.order.tolist()}


def dag_from_edges(d: int, edge_list: Sequence[tuple[int, int]]) -> DagSpec:
    edges = np.zeros((d, d), dtype=bool)
    for i, j in edge_list:
        if not (0 <= i < d and 0 <= j < d):
            raise ScmError(f"edge ({i}, {j}) out of range for d={d}")
        edges[i, j] = True
    order = topological_order(edges)
    return DagSpec(d, edges, order)


def topological_order(edges: np.ndarray) -> np.ndarray:
    """Kahn's algorithm; smallest index first among ready nodes."""
    edges = np.asarray(edges, dtype=bool)
    d = edges.shape[0]
    indeg = edges.sum(axis=0).astype(int)
    ready = sorted(np.nonzero(indeg == 0)[0].tolist())
    out = []
    while ready:
        i = ready.pop(0)
        out.append(i)
        for j in np.nonzero(edges[i])[0]:
            indeg[j] -= 1
            if indeg[j] == 0:
                ready.append(int(j))
                ready.sort()
    if len(out) != d:
        raise ScmError("graph contains a cycle")
    return np.array(out, dtype=int)


def sample_dag(d: int, p_edge: float, stream: PrngStream) -> DagSpec:
    if not 0.0 <= p_edge <= 1.0:
        raise ScmError(f"p_edge must lie in [0, 1], got {p_edge}")
    gen = stream.generator()
    order = gen.permutation(d)
    coin = gen.random((d, d)) < p_edge
    edges = np.zeros((d, d), dtype=bool)
    for a in range(d):
        for b in range(a + 1, d):
            if coin[a, b]:
                edges[order[a], order[b]] = True
    return DagSpec(d, edges, order)


def descendants(dag: DagSpec, targets) -> set[int]:
    """Intervened nodes together with everything reachable from them."""
    targets = set(int(i) for i in targets)
    for i in targets:
        if not 0 <= i < dag.d:
            raise ScmError(f"node {i} out of range for d={dag.d}")
    seen = set(targets)
    frontier = list(targets)
    while frontier:
        i = frontier.pop()
        for j in np.nonzero(dag.edges[i])[0]:
            if int(j) not in seen:
                seen.add(int(j))
                frontier.append(int(j))
    return seen


def invariant_set(dag: DagSpec, targets) -> list[int]:
    de = descendants(dag, targets)
    return [j for j in range(dag.d) if j not in de]


# ---------------------------------------------------------------- mechanisms

@dataclass
class MechanismSpec:
    """Per-node mechanism reading a fixed-width parent input vector.

    ``parent_mask[j]`` selects which input coordinates node ``j`` may read;
    for static SCMs the input is ``z`` itself, for temporal SCMs it is
    ``[z_{t-1}, ..., z_{t-L}, z_t]``.
    """

    kinds: tuple
    parent_mask: np.ndarray
    weights: dict
    noise: tuple  # per node: (kind, scale)

    @property
    def d(self) -> int:
        return len(self.kinds)

    def mean(self, j: int, inputs: np.ndarray) -> np.ndarray:
        x = inputs * self.parent_mask[j]
        if self.kinds[j] == "linear":
            return x @ self.weights["linear"][j]
        hidden = np.tanh(x @ self.weights["mlp_w1"][j] + self.weights["mlp_b1"][j])
        return hidden @ self.weights["mlp_w2"][j]

    def sample_noise(self, gen: np.random.Generator, n: int) -> np.ndarray:
        out = np.empty((n, self.d))
        for j, (kind, scale) in enumerate(self.noise):
            if kind == "gaussian":
                out[:, j] = scale * gen.standard_normal(n)
            elif kind == "laplace":
                out[:, j] = gen.laplace(0.0, scale, n)
            else:
                raise ScmError(f"unknown noise kind {kind!r}")
        return out

    def to_dict(self) -> dict:
        return {
            "kinds": list(self.kinds),
            "parent_mask": self.parent_mask.astype(int).tolist(),
            "weights": {k: np.round(v, 12).tolist() for k, v in self.weights.items()},
            "noise": [list(n) for n in self.noise],
        }


def sample_mechanisms(parent_mask: np.ndarray, kind: str, noise, stream: PrngStream,
                      weight_range=LINEAR_RANGE) -> MechanismSpec:
    parent_mask = np.asarray(parent_mask, dtype=bool)
    d, in_dim = parent_mask.shape
    gen = stream.generator()
    lo, hi = weight_range
    mag = gen.uniform(lo, hi, (d, in_dim))
    sign = np.where(gen.random((d, in_dim)) < 0.5, -1.0, 1.0)
    linear = mag * sign * parent_mask
    fan = np.maximum(parent_mask.sum(axis=1), 1)[:, None, None]
    w1 = gen.standard_normal((d, in_dim, MLP_HIDDEN)) * 1.5 / np.sqrt(fan)
    b1 = 0.1 * gen.standard_normal((d, MLP_HIDDEN))
    w2 = gen.standard_normal((d, MLP_HIDDEN)) * 2.0 / np.sqrt(MLP_HIDDEN)
    if isinstance(noise, tuple) and isinstance(noise[0], str):
        noise = (noise,) * d
    return MechanismSpec(
        kinds=(kind,) * d,
        parent_mask=parent_mask,
        weights={"linear": linear, "mlp_w1": w1, "mlp_b1": b1, "mlp_w2": w2},
        noise=tuple((str(k), float(s)) for k, s in noise),
    )


@dataclass
class ScmSpec:
    dag: DagSpec
    mechanisms: MechanismSpec

    def __post_init__(self):
        if self.mechanisms.parent_mask.shape != (self.dag.d, self.dag.d):
            raise ScmError("mechanism parent mask must be d x d for a static SCM")
        if np.any(self.mechanisms.parent_mask & ~self.dag.edges.T):
            raise ScmError("mechanism reads a non-parent")

    def to_dict(self) -> dict:
        return {"dag": self.dag.to_dict(), "mechanisms": self.mechanisms.to_dict()}


def sample_scm(d: int, p_edge: float, kind: str, noise, stream: PrngStream) -> ScmSpec:
    dag = sample_dag(d, p_edge, stream)
    mech = sample_mechanisms(dag.edges.T, kind, noise, stream)
    return ScmSpec(dag, mech)


# ---------------------------------------------------------------- mixing

@dataclass
class MixingSpec:
    layers: list
    lift: np.ndarray | None = None
    slope: float = 0.2

    @property
    def d(self) -> int:
        return self.layers[0].shape[0]

    @property
    def n_obs(self) -> int:
        return self.d if self.lift is None else self.lift.shape[1]

    def __call__(self, z: np.ndarray) -> np.ndarray:
        mats = list(self.layers) + ([self.lift] if self.lift is not None else [])
        h = z
        for k, w in enumerate(mats):
            if k > 0:
                h = np.where(h > 0, h, self.slope * h)
            h = h @ w
        return h

    def to_dict(self) -> dict:
        return {
            "layers": [np.round(w, 12).tolist() for w in self.layers],
            "lift": None if self.lift is None else np.round(self.lift, 12).tolist(),
            "slope": self.slope,
        }


def identity_mixing(d: int) -> MixingSpec:
    return MixingSpec([np.eye(d)])


def sample_mixing(d: int, n_obs: int, n_layers: int, stream: PrngStream,
                  max_cond: float = 1e3) -> MixingSpec:
    if n_obs < d:
        raise ScmError(f"observed dimension {n_obs} smaller than latent dimension {d}")
    gen = stream.generator()
    layers = []
    while len(layers) < n_layers:
        q, r = np.linalg.qr(gen.standard_normal((d, d)))
        q = q * np.sign(np.diag(r))
        w = q * gen.uniform(0.5, 1.5, d)
        if np.linalg.cond(w) <= max_cond:
            layers.append(w)
    lift = None
    if n_obs > d:
        while True:
            lift = gen.standard_normal((d, n_obs)) / np.sqrt(d)
            if np.linalg.matrix_rank(lift) == d and np.linalg.cond(lift) <= max_cond:
                break
    return MixingSpec(layers, lift)


# ---------------------------------------------------------------- environments / interventions

@dataclass
class EnvironmentSpec:
    env_count: int
    noise_scale: np.ndarray   # (env_count, d)
    weight_scale: np.ndarray  # (env_count, d)

    def __post_init__(self):
        if self.env_count < 1:
            raise ScmError("env_count must be >= 1")
        self.noise_scale = np.asarray(self.noise_scale, dtype=float)
        self.weight_scale = np.asarray(self.weight_scale, dtype=float)
        if self.noise_scale.shape[0] != self.env_count or self.weight_scale.shape[0] != self.env_count:
            raise ScmError("modulation tables must have env_count rows")
        if np.any(self.noise_scale <= 0) or np.any(self.weight_scale <= 0):
            raise ScmError("environment modulations must be strictly positive")

    def to_dict(self) -> dict:
        return {"env_count": self.env_count, "noise_scale": np.round(self.noise_scale, 12).tolist(),
                "weight_scale": np.round(self.weight_scale, 12).tolist()}


def single_environment(d: int) -> EnvironmentSpec:
    return EnvironmentSpec(1, np.ones((1, d)), np.ones((1, d)))


def sample_environments(env_count: int, d: int, stream: PrngStream,
                        noise_range=(0.25, 2.0), weight_range=(1.0, 1.0)) -> EnvironmentSpec:
    gen = stream.generator()
    ns = gen.uniform(*noise_range, (env_count, d))
    ws = gen.uniform(*weight_range, (env_count, d))
    return EnvironmentSpec(env_count, ns, ws)


@dataclass
class InterventionSpec:
    targets: tuple = ()
    kind: str = "do_value"   # do_value | noise_shift
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("do_value", "noise_shift"):
            raise ScmError(f"unknown intervention kind {self.kind!r}")
        self.targets = tuple(int(t) for t in self.targets)

    @property
    def is_null(self) -> bool:
        return not self.targets


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    z_true: np.ndarray  # episodes x time x D
    x_obs: np.ndarray   # episodes x time x n
    u: np.ndarray       # episodes
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u = np.asarray(self.u).astype(int)
        if self.z_true.ndim != 3 or self.x_obs.ndim != 3:
            raise ScmError("z_true and x_obs must be episodes x time x dim")
        if self.z_true.shape[:2] != self.x_obs.shape[:2] or self.u.shape != (self.z_true.shape[0],):
            raise ScmError(f"inconsistent dataset shapes {self.z_true.shape}, {self.x_obs.shape}, {self.u.shape}")

    @property
    def episodes(self) -> int:
        return self.z_true.shape[0]

    @property
    def T(self) -> int:
        return self.z_true.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.z_true.shape[2]

    @property
    def obs_dim(self) -> int:
        return self.x_obs.shape[2]

    @property
    def env_count(self) -> int:
        return int(self.meta.get("env_count", int(self.u.max()) + 1 if self.u.size else 1))


def _apply_static(scm: ScmSpec, eps: np.ndarray, u: np.ndarray, envs: EnvironmentSpec,
                  intervention: InterventionSpec | None = None) -> np.ndarray:
    n, d = eps.shape
    z = np.zeros((n, d))
    ns = envs.noise_scale[u]
    ws = envs.weight_scale[u]
    for j in scm.dag.order:
        if intervention is not None and j in intervention.targets and intervention.kind == "do_value":
            z[:, j] = intervention.value
            continue
        noise = eps[:, j] * ns[:, j]
        if intervention is not None and j in intervention.targets:
            noise = noise + intervention.value
        z[:, j] = ws[:, j] * scm.mechanisms.mean(j, z) + noise
    return z


def _check_dims(scm_d: int, mixing: MixingSpec, envs: EnvironmentSpec):
    if mixing.d != scm_d:
        raise ScmError(f"mixing expects {mixing.d} latents, SCM has {scm_d}")
    if envs.noise_scale.shape[1] != scm_d:
        raise ScmError(f"environment tables cover {envs.noise_scale.shape[1]} nodes, SCM has {scm_d}")


def generate_static(scm: ScmSpec, mixing: MixingSpec, envs: EnvironmentSpec, n_per_env: int,
                    stream: PrngStream) -> Dataset:
    _check_dims(scm.dag.d, mixing, envs)
    gen = stream.generator()
    u = np.repeat(np.arange(envs.env_count), n_per_env)
    eps = scm.mechanisms.sample_noise(gen, u.size)
    z = _apply_static(scm, eps, u, envs)
    x = mixing(z)
    spec = {"kind": "static", "scm": scm.to_dict(), "mixing": mixing.to_dict(), "envs": envs.to_dict(),
            "n_per_env": n_per_env}
    meta = {"kind": "static", "spec_hash": canonical_hash(spec), "seed": stream.seed,
            "env_count": envs.env_count, "instantaneous": False}
    return Dataset(z[:, None, :], x[:, None, :], u, meta)


def generate_paired(scm: ScmSpec, mixing: MixingSpec, intervention: InterventionSpec, n: int,
                    stream: PrngStream, envs: EnvironmentSpec | None = None):
    """Observational and interventional views sharing exogenous noise.

    Returns ``(view1, view2, A)`` with ``A`` the coordinates outside the
    descendants of the intervention targets.
    """
    envs = envs or single_environment(scm.dag.d)
    _check_dims(scm.dag.d, mixing, envs)
    A = invariant_set(scm.dag, intervention.targets)
    gen = stream.generator()
    u = np.zeros(n, dtype=int)
    eps = scm.mechanisms.sample_noise(gen, n)
    z1 = _apply_static(scm, eps, u, envs)
    z2 = _apply_static(scm, eps, u, envs, None if intervention.is_null else intervention)
    spec = {"kind": "paired", "scm": scm.to_dict(), "mixing": mixing.to_dict(),
            "intervention": [list(intervention.targets), intervention.kind, intervention.value], "n": n}
    h = canonical_hash(spec)
    meta = {"kind": "paired", "spec_hash": h, "seed": stream.seed, "env_count": 1,
            "invariant_set": A, "instantaneous": False}
    v1 = Dataset(z1[:, None, :], mixing(z1)[:, None, :], u, dict(meta, view=1))
    v2 = Dataset(z2[:, None, :], mixing(z2)[:, None, :], u, dict(meta, view=2))
    return v1, v2, A


@dataclass
class TemporalScmSpec:
    base: DagSpec              # instantaneous edges
    delayed: list              # lag-ordered boolean d x d matrices, delayed[l][i, j]: z_{t-l-1,i} -> z_{t,j}
    mechanisms: MechanismSpec  # parent input [z_{t-1}, ..., z_{t-L}, z_t]
    instantaneous_enabled: bool = False

    def __post_init__(self):
        if len(self.delayed) < 1:
            raise ScmError("temporal SCM needs lag L >= 1")
        self.delayed = [np.asarray(m, dtype=bool) for m in self.delayed]
        if self.base.edges.any() and not self.instantaneous_enabled:
            raise ScmError("instantaneous edges present while instantaneous_enabled is false")
        d = self.base.d
        if self.mechanisms.parent_mask.shape != (d, (self.lag + 1) * d):
            raise ScmError("mechanism parent mask must be d x (L+1)d")

    @property
    def lag(self) -> int:
        return len(self.delayed)

    @property
    def d(self) -> int:
        return self.base.d

    def to_dict(self) -> dict:
        return {"base": self.base.to_dict(), "delayed": [m.astype(int).tolist() for m in self.delayed],
                "mechanisms": self.mechanisms.to_dict(), "instantaneous": self.instantaneous_enabled}


def temporal_parent_mask(base: DagSpec, delayed: Sequence[np.ndarray]) -> np.ndarray:
    blocks = [np.asarray(m, dtype=bool).T for m in delayed] + [base.edges.T]
    return np.concatenate(blocks, axis=1)


def sample_temporal_scm(d: int, lag: int, p_delayed: float, p_inst: float, instantaneous: bool,
                        kind: str, noise, stream: PrngStream, self_loops: bool = True) -> TemporalScmSpec:
    base = sample_dag(d, p_inst if instantaneous else 0.0, stream)
    gen = stream.generator()
    delayed = []
    for _ in range(lag):
        m = gen.random((d, d)) < p_delayed
        if self_loops:
            np.fill_diagonal(m, True)
        delayed.append(m)
    mech = sample_mechanisms(temporal_parent_mask(base, delayed), kind, noise, stream)
    return TemporalScmSpec(base, delayed, mech, instantaneous)


def generate_temporal(tscm: TemporalScmSpec, episodes: int, T: int, stream: PrngStream,
                      mixing: MixingSpec | None = None, envs: EnvironmentSpec | None = None) -> Dataset:
    L, d = tscm.lag, tscm.d
    if T <= L:
        raise ScmError(f"sequence length T={T} must exceed lag L={L}")
    if tscm.base.edges.any() and not tscm.instantaneous_enabled:
        raise ScmError("instantaneous edges present while instantaneous_enabled is false")
    mixing = mixing or identity_mixing(d)
    envs = envs or single_environment(d)
    _check_dims(d, mixing, envs)
    gen = stream.generator()
    u = np.arange(episodes) % envs.env_count
    ns = envs.noise_scale[u]
    ws = envs.weight_scale[u]
    z = np.zeros((episodes, T, d))
    z[:, :L] = gen.standard_normal((episodes, L, d))
    for t in range(L, T):
        eps = tscm.mechanisms.sample_noise(gen, episodes) * ns
        inputs = np.concatenate([z[:, t - l - 1] for l in range(L)] + [np.zeros((episodes, d))], axis=1)
        for j in tscm.base.order:
            val = ws[:, j] * tscm.mechanisms.mean(j, inputs) + eps[:, j]
            z[:, t, j] = val
            inputs[:, L * d + j] = val
    x = mixing(z.reshape(-1, d)).reshape(episodes, T, -1)
    spec = {"kind": "temporal", "tscm": tscm.to_dict(), "mixing": mixing.to_dict(), "envs": envs.to_dict(),
            "episodes": episodes, "T": T}
    meta = {"kind": "temporal", "spec_hash": canonical_hash(spec), "seed": stream.seed,
            "env_count": envs.env_count, "instantaneous": bool(tscm.instantaneous_enabled), "lag": L}
    return Dataset(z, x, u, meta)


# ---------------------------------------------------------------- persistence

def save_dataset(path, ds: Dataset) -> None:
    meta = dict(ds.meta)
    meta["dims"] = {"latent": ds.latent_dim, "obs": ds.obs_dim}
    meta["counts"] = {"episodes": ds.episodes, "T": ds.T}
    arrays = {"z_true": ds.z_true, "x_obs": ds.x_obs, "u": ds.u.astype(np.float64)}
    write_container(path, arrays, meta, kind="dataset")


def load_dataset(path) -> Dataset:
    header, arrays = read_container(path)
    if header.get("kind") != "dataset":
        from .container import FormatError
        raise FormatError(f"container holds {header.get('kind')!r}, not a dataset")
    return Dataset(arrays["z_true"], arrays["x_obs"], arrays["u"].astype(int), header["meta"])
