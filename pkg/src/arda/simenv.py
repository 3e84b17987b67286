"""Deterministic simulated experiment environment.

A :class:`ResponseSurface` maps an experiment plan to a metric vector as a
sum of per-template base effects, parameter modifiers, pairwise interaction
effects and seeded Gaussian noise. The plan's features are its template names
plus one ``Template.param=value`` feature for every effective parameter
(schema defaults overlaid with the plan's own values).

Surface files are JSON::

    {
      "surface_version": 1,
      "seed": 0,
      "noise_scale": 1.0,
      "metrics": {"excess_return": {"direction": "maximize", "noise_sd": 0.004}},
      "base_effects": {"LGBModel": {"excess_return": 0.06}},
      "modifiers": {"Alpha158.normalization=MinMaxNorm": {"excess_return": 0.01}},
      "interactions": [{"features": ["LGBModel", "Alpha158.normalization=MinMaxNorm"],
                        "effects": {"excess_return": -0.004}}]
    }

Noise comes from numpy's PCG64 generator seeded with the surface seed and a
SHA-256 digest of the plan's configuration, so it is a pure function of
(plan, seed).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from arda.knowledge import MetricVector
from arda.symlang import (
    ComponentPredicate,
    ExperimentPlan,
    FrameworkSchema,
    enumerate_plans,
)

TRACE_PARTS = ("base", "modifiers", "interactions", "noise")


class SurfaceError(ValueError):
    pass


@dataclass(frozen=True)
class ResponseSurface:
    metrics: Mapping[str, Mapping[str, Any]]
    base_effects: Mapping[str, Mapping[str, float]]
    modifiers: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    interactions: Sequence[tuple[frozenset, Mapping[str, float]]] = ()
    noise_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_scale < 0:
            raise SurfaceError("noise scale must be non-negative")
        entries = list(self.base_effects.values()) + list(self.modifiers.values())
        entries += [eff for _, eff in self.interactions]
        for entry in entries:
            for m, v in entry.items():
                if m not in self.metrics:
                    raise SurfaceError(f"effect on undeclared metric {m!r}")
                if not math.isfinite(v):
                    raise SurfaceError(f"non-finite effect on {m!r}")

    @property
    def metric_names(self) -> list[str]:
        return sorted(self.metrics)

    def direction(self, metric: str) -> str:
        return self.metrics[metric].get("direction", "maximize")

    def with_seed(self, seed: int) -> ResponseSurface:
        return ResponseSurface(self.metrics, self.base_effects, self.modifiers,
                               self.interactions, self.noise_scale, seed)

    def with_noise(self, noise_scale: float) -> ResponseSurface:
        return ResponseSurface(self.metrics, self.base_effects, self.modifiers,
                               self.interactions, noise_scale, self.seed)

    def to_dict(self) -> dict:
        return {
            "surface_version": 1,
            "seed": self.seed,
            "noise_scale": self.noise_scale,
            "metrics": {k: dict(v) for k, v in self.metrics.items()},
            "base_effects": {k: dict(v) for k, v in self.base_effects.items()},
            "modifiers": {k: dict(v) for k, v in self.modifiers.items()},
            "interactions": [{"features": sorted(f), "effects": dict(e)}
                             for f, e in self.interactions],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ResponseSurface:
        if d.get("surface_version", 1) != 1:
            raise SurfaceError(f"unsupported surface_version {d.get('surface_version')!r}")
        inter = []
        for i, entry in enumerate(d.get("interactions") or []):
            feats = entry["features"]
            if len(feats) != 2:
                raise SurfaceError(f"interactions[{i}] must name exactly two features")
            inter.append((frozenset(feats), dict(entry["effects"])))
        return cls(
            metrics={k: dict(v) for k, v in d["metrics"].items()},
            base_effects={k: dict(v) for k, v in d["base_effects"].items()},
            modifiers={k: dict(v) for k, v in (d.get("modifiers") or {}).items()},
            interactions=tuple(inter),
            noise_scale=float(d.get("noise_scale", 0.0)),
            seed=int(d.get("seed", 0)),
        )


def load_surface(path: str | Path | None = None) -> ResponseSurface:
    """Load a surface file; ``None`` loads the shipped demo surface."""
    if path is None:
        text = resources.files("arda.data").joinpath("demo_surface.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return ResponseSurface.from_dict(json.loads(text))


@dataclass(frozen=True)
class SimResult:
    metrics: MetricVector
    trace: Mapping[str, Mapping[str, float]]  # metric -> part -> value


def _value_text(v: Any) -> str:
    return v if isinstance(v, str) else json.dumps(v)


def plan_features(plan: ExperimentPlan, schema: FrameworkSchema | None) -> list[str]:
    feats = []
    for slot_name, sp in plan.slots:
        feats.append(sp.template)
        params: dict[str, Any] = {}
        if schema is not None and slot_name in schema.slot_names:
            tmpl = schema.template(slot_name, sp.template)
            if tmpl is not None:
                params.update(tmpl.defaults)
        params.update(sp.param_dict)
        feats.extend(f"{sp.template}.{p}={_value_text(v)}" for p, v in sorted(params.items()))
    return feats


def evaluation_setting_of(plan: ExperimentPlan, schema: FrameworkSchema | None) -> str:
    """``market_freq`` of the evaluation slot, e.g. ``a_share_day``."""
    for slot_name, sp in plan.slots:
        if schema is not None and slot_name in schema.slot_names:
            slot = schema.slot(slot_name)
            if slot.kind != "evaluation":
                continue
            tmpl = slot.template(sp.template)
            params = dict(tmpl.defaults) if tmpl else {}
        elif slot_name != "evaluation":
            continue
        else:
            params = {}
        params.update(sp.param_dict)
        if "market" in params:
            return f"{params['market']}_{params.get('freq', 'day')}"
    return "default"


def _noise_generator(seed: int, plan: ExperimentPlan) -> np.random.Generator:
    digest = hashlib.sha256(json.dumps(plan.to_dict()["slots"], sort_keys=True).encode()).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 32, 4)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & 0xFFFFFFFF] + words)))


class SimEnvironment:
    """Evaluates grounded projects (or bare plans) on a response surface."""

    def __init__(self, surface: ResponseSurface, schema: FrameworkSchema | None = None):
        self.surface = surface
        self.schema = schema

    def evaluate(self, project, seed: int | None = None,
                 evaluation_setting: str | None = None) -> SimResult:
        plan = _plan_of(project)
        s = self.surface
        feats = plan_features(plan, self.schema)
        missing = [sp.template for _, sp in plan.slots if sp.template not in s.base_effects]
        if missing:
            raise SurfaceError(f"templates absent from the surface: {', '.join(missing)}")
        featset = set(feats)
        active = [eff for pair, eff in s.interactions if pair <= featset]
        rng = _noise_generator(s.seed if seed is None else seed, plan) if s.noise_scale > 0 else None
        entries, trace = {}, {}
        for m in s.metric_names:
            base = 0.0
            for _, sp in plan.slots:
                base += s.base_effects[sp.template].get(m, 0.0)
            mods = 0.0
            for f in feats:
                mods += s.modifiers.get(f, {}).get(m, 0.0)
            inter = 0.0
            for eff in active:
                inter += eff.get(m, 0.0)
            noise = 0.0
            if rng is not None:
                noise = s.noise_scale * float(s.metrics[m].get("noise_sd", 0.0)) * float(rng.standard_normal())
            entries[m] = base + mods + inter + noise
            trace[m] = {"base": base, "modifiers": mods, "interactions": inter, "noise": noise}
        setting = evaluation_setting or evaluation_setting_of(plan, self.schema)
        return SimResult(MetricVector(entries, setting), trace)

    def true_value(self, plan: ExperimentPlan, metric: str) -> float:
        env = SimEnvironment(self.surface.with_noise(0.0), self.schema)
        return env.evaluate(plan).metrics[metric]


def _plan_of(project) -> ExperimentPlan:
    if isinstance(project, ExperimentPlan):
        return project
    if getattr(project, "runnable", True) is False:
        raise ValueError("project is not runnable")
    plan = getattr(project, "executed_plan", None) or getattr(project, "plan", None)
    if plan is None:
        raise TypeError(f"cannot evaluate {type(project).__name__}")
    return plan


def best_action(surface: ResponseSurface, schema: FrameworkSchema,
                predicates: Iterable[ComponentPredicate] = (), metric: str = "excess_return",
                direction: str | None = None) -> tuple[ExperimentPlan, MetricVector]:
    """Exhaustive noise-free search of the constrained template grid.

    Ties keep the earliest plan in enumeration order.
    """
    direction = direction or surface.direction(metric)
    grid = enumerate_plans(schema, predicates)
    if not grid:
        raise SurfaceError("constrained grid is empty")
    env = SimEnvironment(surface.with_noise(0.0), schema)
    best_plan, best_vec = None, None
    for plan in grid:
        vec = env.evaluate(plan).metrics
        if best_vec is None or (vec[metric] > best_vec[metric] if direction == "maximize"
                                else vec[metric] < best_vec[metric]):
            best_plan, best_vec = plan, vec
    return best_plan, best_vec
