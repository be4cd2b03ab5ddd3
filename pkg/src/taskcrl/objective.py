"""Executable objective: one task plus weighted constraints, bound to a pipeline."""
from __future__ import annotations

from dataclasses import dataclass, field

from .constraints import ConstraintSpec
from .tasks import TaskSpec

PIPELINES = ("static_image", "temporal_video", "sparsity_vae")

_STATIC_TASKS = {"reconstruction", "denoising", "masked", "contrastive", "cross_view", "prototype",
                 "target_pred", "transform_correct", "multi_view"}
_STATIC_CONSTRAINTS = {"none", "vae_kl", "capacity_kl", "vib", "l1_sparsity", "target_sparsity", "energy", "vq",
                       "cond_prior_static", "style_gaussian", "invariance", "jacobian_sparsity"}

PIPELINE_TASKS = {
    "static_image": _STATIC_TASKS,
    "sparsity_vae": _STATIC_TASKS,
    "temporal_video": {"reconstruction", "next_frame", "mid_latent", "contrastive", "prototype", "masked",
                       "autoregressive"},
}
PIPELINE_CONSTRAINTS = {
    "static_image": _STATIC_CONSTRAINTS,
    "sparsity_vae": _STATIC_CONSTRAINTS,
    "temporal_video": {"none", "temporal_prior", "latent_recon", "delta_match", "mechanism_sparsity",
                       "l1_sparsity", "target_sparsity", "energy", "vae_kl"},
}


class ObjectiveError(ValueError):
    pass


@dataclass
class ObjectiveSpec:
    task: TaskSpec
    constraints: list = field(default_factory=list)  # [(ConstraintSpec, weight)]
    pipeline: str = "static_image"

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ObjectiveError(f"unknown pipeline {self.pipeline!r}")
        if self.task.kind not in PIPELINE_TASKS[self.pipeline]:
            raise ObjectiveError(f"task {self.task.kind!r} is not available in the {self.pipeline} pipeline")
        seen = set()
        for spec, lam in self.constraints:
            if spec.kind not in PIPELINE_CONSTRAINTS[self.pipeline]:
                raise ObjectiveError(f"constraint {spec.kind!r} is incompatible with the {self.pipeline} pipeline")
            if lam < 0:
                raise ObjectiveError(f"constraint weight for {spec.kind!r} must be nonnegative")
            if spec.kind in seen:
                raise ObjectiveError(f"constraint {spec.kind!r} listed twice")
            seen.add(spec.kind)

    def kinds(self) -> set:
        return {c.kind for c, _ in self.constraints}

    def get(self, kind: str):
        for spec, lam in self.constraints:
            if spec.kind == kind:
                return spec, lam
        return None

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveSpec":
        task = TaskSpec(**d.get("task", {}))
        cons = [(ConstraintSpec(c["kind"], dict(c.get("params", {}))), float(c.get("weight", 1.0)))
                for c in d.get("constraints", [])]
        return cls(task, cons, d.get("pipeline", "static_image"))

    def to_dict(self) -> dict:
        t = self.task
        task = {k: getattr(t, k) for k in t.__dataclass_fields__}
        return {
            "pipeline": self.pipeline,
            "task": task,
            "constraints": [{"kind": c.kind, "params": dict(c.params), "weight": lam} for c, lam in self.constraints],
        }
