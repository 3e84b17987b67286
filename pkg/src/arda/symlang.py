"""Framework schemas as a typed plan language.

A :class:`FrameworkSchema` declares the extension points (slots) of an
experiment framework and the templates available in each. An
:class:`ExperimentPlan` picks one template configuration per slot. Plans are
validated against the schema, decomposed into per-slot subtasks and diffed.

Documents are JSON. Schema documents look like::

    {
      "schema_version": 1,
      "name": "qlib-demo",
      "version": "1.0",
      "slots": [
        {"name": "datahandler", "kind": "data",
         "extension_interface": "...",
         "templates": [
           {"name": "Alpha158", "doc": "...", "tags": ["factor"],
            "search_params": ["normalization"],
            "parameters": {
              "normalization": {"type": "categorical",
                                "choices": ["none", "MinMaxNorm"]}},
            "defaults": {"normalization": "none"}}]}]
    }

Parameter ``type`` is one of ``real``, ``integer``, ``categorical`` or
``text``. Numeric domains take ``low``/``high`` plus optional
``low_inclusive``/``high_inclusive`` (default true); a missing bound is
unbounded. A parameter without a ``type`` is free text.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

SCHEMA_VERSION = 1
SLOT_KINDS = ("data", "model", "evaluation")
ROLE_TARGET = "target"
ROLE_CONTROL = "control"


class SchemaError(ValueError):
    """A schema document is malformed or violates a schema invariant."""

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class PlanError(ValueError):
    """A plan cannot be used for the requested operation."""


@dataclass(frozen=True)
class ParamDomain:
    type: str = "text"
    low: float | None = None
    high: float | None = None
    low_inclusive: bool = True
    high_inclusive: bool = True
    choices: tuple = ()

    def contains(self, value: Any) -> bool:
        if self.type == "text":
            return value is None or isinstance(value, str)
        if self.type == "categorical":
            return any(value == c and type(value) is type(c) for c in self.choices)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return False
        if self.type == "integer" and not float(value).is_integer():
            return False
        if not math.isfinite(value):
            return False
        if self.low is not None:
            if value < self.low or (value == self.low and not self.low_inclusive):
                return False
        if self.high is not None:
            if value > self.high or (value == self.high and not self.high_inclusive):
                return False
        return True

    def describe(self) -> str:
        if self.type in ("real", "integer"):
            lo = "-inf" if self.low is None else f"{self.low:g}"
            hi = "inf" if self.high is None else f"{self.high:g}"
            left = "[" if self.low_inclusive and self.low is not None else "("
            right = "]" if self.high_inclusive and self.high is not None else ")"
            return f"{self.type} {left}{lo}, {hi}{right}"
        if self.type == "categorical":
            return "one of " + ", ".join(json.dumps(c) for c in self.choices)
        return "free text"

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"type": self.type}
        if self.type in ("real", "integer"):
            if self.low is not None:
                out["low"] = self.low
                if not self.low_inclusive:
                    out["low_inclusive"] = False
            if self.high is not None:
                out["high"] = self.high
                if not self.high_inclusive:
                    out["high_inclusive"] = False
        elif self.type == "categorical":
            out["choices"] = list(self.choices)
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None, location: str = "") -> ParamDomain:
        if not d:
            return cls()
        kind = d.get("type", "text")
        if kind not in ("real", "integer", "categorical", "text"):
            raise SchemaError(f"unknown parameter type {kind!r}", location)
        if kind == "categorical" and not d.get("choices"):
            raise SchemaError("categorical parameter needs choices", location)
        return cls(
            type=kind,
            low=d.get("low"),
            high=d.get("high"),
            low_inclusive=d.get("low_inclusive", True),
            high_inclusive=d.get("high_inclusive", True),
            choices=tuple(d.get("choices", ())),
        )


@dataclass(frozen=True)
class Template:
    name: str
    parameters: Mapping[str, ParamDomain] = field(default_factory=dict)
    defaults: Mapping[str, Any] = field(default_factory=dict)
    doc: str = ""
    tags: tuple[str, ...] = ()
    search_params: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "doc": self.doc,
            "tags": list(self.tags),
            "search_params": list(self.search_params),
            "parameters": {k: v.to_dict() for k, v in self.parameters.items()},
            "defaults": dict(self.defaults),
        }


@dataclass(frozen=True)
class ModuleSlot:
    name: str
    kind: str
    templates: tuple[Template, ...]
    extension_interface: str = ""

    def template(self, name: str) -> Template | None:
        for t in self.templates:
            if t.name == name:
                return t
        return None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "extension_interface": self.extension_interface,
            "templates": [t.to_dict() for t in self.templates],
        }


@dataclass(frozen=True)
class FrameworkSchema:
    name: str
    slots: tuple[ModuleSlot, ...]
    version: str = "1"

    @property
    def slot_names(self) -> list[str]:
        return [s.name for s in self.slots]

    def slot(self, name: str) -> ModuleSlot:
        for s in self.slots:
            if s.name == name:
                return s
        raise KeyError(name)

    def slots_of_kind(self, kind: str) -> list[ModuleSlot]:
        return [s for s in self.slots if s.kind == kind]

    def resolve(self, component: str) -> list[ModuleSlot]:
        """Slots addressed by a slot name or a slot kind."""
        named = [s for s in self.slots if s.name == component]
        return named or self.slots_of_kind(component)

    def template(self, slot: str, name: str) -> Template | None:
        return self.slot(slot).template(name)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "version": self.version,
            "slots": [s.to_dict() for s in self.slots],
        }


def define_schema(descriptor: Mapping[str, Any]) -> FrameworkSchema:
    """Build a :class:`FrameworkSchema` from a parsed schema document.

    Raises:
        SchemaError: on duplicate slot names, missing slot-kind coverage,
            dangling template references or out-of-domain defaults. The
            error's ``location`` names the offending element.
    """
    version = descriptor.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {version!r}", "schema_version")
    raw_slots = descriptor.get("slots") or []
    seen: set[str] = set()
    slots = []
    for i, rs in enumerate(raw_slots):
        loc = f"slots[{i}]"
        name = rs.get("name")
        if not name:
            raise SchemaError("slot without a name", loc)
        if name in seen:
            raise SchemaError(f"duplicate slot name {name!r}", loc)
        seen.add(name)
        kind = rs.get("kind")
        if kind not in SLOT_KINDS:
            raise SchemaError(f"slot kind must be one of {SLOT_KINDS}, got {kind!r}", loc)
        templates = [
            _template_from_dict(rt, f"{loc}.templates[{j}]")
            for j, rt in enumerate(rs.get("templates") or [])
        ]
        if not templates:
            raise SchemaError(f"slot {name!r} declares no templates", loc)
        tnames = [t.name for t in templates]
        if len(set(tnames)) != len(tnames):
            raise SchemaError(f"duplicate template name in slot {name!r}", loc)
        slots.append(
            ModuleSlot(name, kind, tuple(templates), rs.get("extension_interface", ""))
        )
    kinds = {s.kind for s in slots}
    missing = [k for k in SLOT_KINDS if k not in kinds]
    if missing:
        raise SchemaError("missing kind coverage: " + ", ".join(missing), "slots")
    schema = FrameworkSchema(
        name=descriptor.get("name", "schema"),
        slots=tuple(slots),
        version=str(descriptor.get("version", "1")),
    )
    for i, ref in enumerate(descriptor.get("template_refs") or []):
        slot, _, tname = ref.partition(".")
        if slot not in seen or schema.template(slot, tname) is None:
            raise SchemaError(f"dangling template reference {ref!r}", f"template_refs[{i}]")
    return schema


def _template_from_dict(rt: Mapping[str, Any], loc: str) -> Template:
    name = rt.get("name")
    if not name:
        raise SchemaError("template without a name", loc)
    params = {
        p: ParamDomain.from_dict(d, f"{loc}.parameters.{p}")
        for p, d in (rt.get("parameters") or {}).items()
    }
    defaults = dict(rt.get("defaults") or {})
    for p, v in defaults.items():
        if p not in params:
            raise SchemaError(f"default for undeclared parameter {p!r}", f"{loc}.defaults")
        if not params[p].contains(v):
            raise SchemaError(
                f"default {p}={v!r} outside domain ({params[p].describe()})",
                f"{loc}.defaults",
            )
    search = tuple(rt.get("search_params") or ())
    for p in search:
        if p not in params or params[p].type != "categorical":
            raise SchemaError(f"search parameter {p!r} must be categorical", loc)
    return Template(
        name=name,
        parameters=params,
        defaults=defaults,
        doc=rt.get("doc", ""),
        tags=tuple(rt.get("tags") or ()),
        search_params=search,
    )


def load_schema(path: str | Path | None = None) -> FrameworkSchema:
    """Load a schema document; ``None`` loads the shipped demo schema."""
    if path is None:
        text = resources.files("arda.data").joinpath("demo_schema.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return define_schema(json.loads(text))


def dump_schema(schema: FrameworkSchema, path: str | Path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n", encoding="utf-8")


# -- plans ------------------------------------------------------------------


def _freeze(params: Mapping[str, Any]) -> tuple:
    return tuple(sorted(params.items()))


@dataclass(frozen=True)
class SlotPlan:
    template: str
    params: tuple = ()  # sorted (name, value) pairs
    extension: str | None = None

    @classmethod
    def of(cls, template: str, params: Mapping[str, Any] | None = None,
           extension: str | None = None) -> SlotPlan:
        return cls(template, _freeze(params or {}), extension)

    @property
    def param_dict(self) -> dict[str, Any]:
        return dict(self.params)

    def with_params(self, **updates: Any) -> SlotPlan:
        merged = self.param_dict
        merged.update(updates)
        return SlotPlan(self.template, _freeze(merged), self.extension)

    def render(self) -> str:
        parts = [self.template]
        parts += [f"{k}={_render_value(v)}" for k, v in self.params]
        if self.extension:
            parts.append(f"extension: {self.extension}")
        return " ".join(parts)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"template": self.template, "params": dict(self.params)}
        if self.extension:
            out["extension"] = self.extension
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SlotPlan:
        return cls.of(d["template"], d.get("params") or {}, d.get("extension") or None)


def _render_value(v: Any) -> str:
    return v if isinstance(v, str) else json.dumps(v)


@dataclass(frozen=True)
class ExperimentPlan:
    slots: tuple  # (slot name, SlotPlan) pairs in schema order
    hypothesis: str = ""
    target_slot: str | None = None
    controls: tuple[str, ...] = ()

    @classmethod
    def of(cls, slots: Mapping[str, SlotPlan] | Iterable[tuple[str, SlotPlan]],
           hypothesis: str = "", target_slot: str | None = None,
           controls: Iterable[str] = ()) -> ExperimentPlan:
        items = slots.items() if isinstance(slots, Mapping) else slots
        return cls(tuple(items), hypothesis, target_slot, tuple(controls))

    @property
    def slot_map(self) -> dict[str, SlotPlan]:
        return dict(self.slots)

    def get(self, slot: str) -> SlotPlan | None:
        return self.slot_map.get(slot)

    def replace_slot(self, slot: str, slot_plan: SlotPlan) -> ExperimentPlan:
        items = tuple((n, slot_plan if n == slot else sp) for n, sp in self.slots)
        return ExperimentPlan(items, self.hypothesis, self.target_slot, self.controls)

    def with_roles(self, target_slot: str | None, controls: Iterable[str],
                   hypothesis: str | None = None) -> ExperimentPlan:
        return ExperimentPlan(
            self.slots,
            self.hypothesis if hypothesis is None else hypothesis,
            target_slot,
            tuple(controls),
        )

    def configuration(self) -> tuple:
        """The action itself, without hypothesis or role annotations."""
        return self.slots

    def render(self) -> str:
        return "; ".join(f"{name}: {sp.render()}" for name, sp in self.slots)

    def to_dict(self) -> dict:
        return {
            "slots": {name: sp.to_dict() for name, sp in self.slots},
            "slot_order": [name for name, _ in self.slots],
            "hypothesis": self.hypothesis,
            "target_slot": self.target_slot,
            "controls": list(self.controls),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ExperimentPlan:
        raw = d.get("slots") or {}
        order = d.get("slot_order") or list(raw)
        return cls.of(
            [(name, SlotPlan.from_dict(raw[name])) for name in order],
            hypothesis=d.get("hypothesis", ""),
            target_slot=d.get("target_slot"),
            controls=d.get("controls") or (),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class Violation:
    slot: str
    rule: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()
    notes: tuple[Violation, ...] = ()  # non-blocking flags, e.g. extensions

    @property
    def valid(self) -> bool:
        return not self.violations


def validate_plan(plan: ExperimentPlan, schema: FrameworkSchema) -> ValidationReport:
    """Check a plan against a schema; never raises."""
    violations: list[Violation] = []
    notes: list[Violation] = []
    seen: dict[str, int] = {}
    for name, _ in plan.slots:
        seen[name] = seen.get(name, 0) + 1
    for name, count in seen.items():
        if count > 1:
            violations.append(Violation(name, "duplicate-slot", f"slot {name!r} planned {count} times"))
    declared = set(schema.slot_names)
    for name in seen:
        if name not in declared:
            violations.append(Violation(name, "unknown-slot", f"schema has no slot {name!r}"))
    planned = plan.slot_map
    for slot in schema.slots:
        sp = planned.get(slot.name)
        if sp is None:
            violations.append(Violation(slot.name, "missing-slot", f"no plan for slot {slot.name!r}"))
            continue
        tmpl = slot.template(sp.template)
        if tmpl is None:
            if sp.extension:
                notes.append(Violation(slot.name, "extension",
                                       f"new template {sp.template!r}; extension, unverifiable statically"))
            else:
                violations.append(Violation(slot.name, "unknown-template",
                                            f"slot {slot.name!r} has no template {sp.template!r}"))
            continue
        for pname, value in sp.params:
            dom = tmpl.parameters.get(pname)
            if dom is None:
                if sp.extension:
                    notes.append(Violation(slot.name, "extension-parameter",
                                           f"{pname!r} not declared by {tmpl.name}; extension, unverifiable statically"))
                else:
                    violations.append(Violation(slot.name, "unknown-parameter",
                                                f"{tmpl.name} has no parameter {pname!r}"))
            elif not dom.contains(value):
                violations.append(Violation(slot.name, "domain",
                                            f"{pname}={value!r} outside {dom.describe()}"))
        if sp.extension and tmpl is not None:
            notes.append(Violation(slot.name, "extension", "extension, unverifiable statically"))
    if plan.target_slot is not None:
        if plan.target_slot not in declared:
            violations.append(Violation(plan.target_slot, "target-slot",
                                        f"target slot {plan.target_slot!r} not in schema"))
        if plan.target_slot in plan.controls:
            violations.append(Violation(plan.target_slot, "target-is-control",
                                        "target slot also listed as a control"))
    for c in plan.controls:
        if c not in declared:
            violations.append(Violation(c, "control-slot", f"control slot {c!r} not in schema"))
    return ValidationReport(tuple(violations), tuple(notes))


@dataclass(frozen=True)
class SubTask:
    slot: str
    kind: str
    role: str
    slot_plan: SlotPlan
    extension_interface: str
    template_doc: str = ""

    def render(self) -> str:
        return f"{self.kind} {self.slot}: {self.slot_plan.render()}"


def decompose(plan: ExperimentPlan, schema: FrameworkSchema) -> list[SubTask]:
    """Split a valid plan into one subtask per schema slot, in schema order."""
    report = validate_plan(plan, schema)
    if not report.valid:
        raise PlanError("cannot decompose an invalid plan: "
                        + "; ".join(v.message for v in report.violations))
    planned = plan.slot_map
    out = []
    for slot in schema.slots:
        sp = planned[slot.name]
        tmpl = slot.template(sp.template)
        role = ROLE_TARGET if slot.name == plan.target_slot else ROLE_CONTROL
        out.append(SubTask(slot.name, slot.kind, role, sp, slot.extension_interface,
                           tmpl.doc if tmpl else ""))
    return out


@dataclass(frozen=True)
class PlanDelta:
    changed_slots: tuple  # (slot, before SlotPlan, after SlotPlan)
    unchanged_slots: tuple[str, ...]

    @property
    def changed_names(self) -> list[str]:
        return [c[0] for c in self.changed_slots]

    @property
    def is_empty(self) -> bool:
        return not self.changed_slots

    def render(self) -> str:
        return "; ".join(f"{slot}: {after.render()}" for slot, _, after in self.changed_slots)

    def describe(self) -> str:
        return "; ".join(f"{slot}: {before.render()} -> {after.render()}"
                         for slot, before, after in self.changed_slots)

    def to_dict(self) -> dict:
        return {
            "changed": [{"slot": s, "before": b.to_dict(), "after": a.to_dict()}
                        for s, b, a in self.changed_slots],
            "unchanged": list(self.unchanged_slots),
        }


def diff_plans(a: ExperimentPlan, b: ExperimentPlan) -> PlanDelta:
    """Slots whose template, parameters or extension text differ."""
    names_a = [n for n, _ in a.slots]
    names_b = [n for n, _ in b.slots]
    if sorted(names_a) != sorted(names_b):
        raise PlanError(f"plans cover different slots: {names_a} vs {names_b}")
    mb = b.slot_map
    changed, unchanged = [], []
    for name, spa in a.slots:
        spb = mb[name]
        if spa == spb:
            unchanged.append(name)
        else:
            changed.append((name, spa, spb))
    return PlanDelta(tuple(changed), tuple(unchanged))


def apply_delta(plan: ExperimentPlan, delta: PlanDelta) -> ExperimentPlan:
    """Move ``plan`` to the after-state of every changed slot in ``delta``."""
    out = plan
    for slot, _, after in delta.changed_slots:
        out = out.replace_slot(slot, after)
    return out


def default_slot_plan(template: Template) -> SlotPlan:
    return SlotPlan.of(template.name, template.defaults)


def load_plan(path: str | Path) -> ExperimentPlan:
    with open(path, encoding="utf-8") as fh:
        return ExperimentPlan.from_dict(json.load(fh))


def dump_plan(plan: ExperimentPlan, path: str | Path) -> None:
    doc = {"schema_version": SCHEMA_VERSION, **plan.to_dict()}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- constraint predicates ----------------------------------------------------

PREDICATE_OPS = ("equals", "allowed", "forbidden", "tag_required", "tag_forbidden", "param_equals")


@dataclass(frozen=True)
class ComponentPredicate:
    """A constraint over one plan component.

    ``component`` is a slot name or a slot kind (``data``, ``model``,
    ``evaluation``); a kind addresses every slot of that kind. Template tags
    come from the schema, so tag predicates need one.
    """

    component: str
    op: str
    values: tuple = ()
    param: str | None = None
    provenance: str = ""

    def __post_init__(self):
        if self.op not in PREDICATE_OPS:
            raise ValueError(f"unknown predicate op {self.op!r}")
        if self.op == "param_equals" and not self.param:
            raise ValueError("param_equals needs a parameter name")

    def holds(self, plan: ExperimentPlan, schema: FrameworkSchema) -> bool:
        slots = schema.resolve(self.component)
        if not slots:
            return False
        planned = plan.slot_map
        for slot in slots:
            sp = planned.get(slot.name)
            if sp is None or not self._holds_slot(slot, sp):
                return False
        return True

    def _holds_slot(self, slot: ModuleSlot, sp: SlotPlan) -> bool:
        tmpl = slot.template(sp.template)
        if self.op == "equals":
            return sp.template == self.values[0]
        if self.op == "allowed":
            return sp.template in self.values
        if self.op == "forbidden":
            return sp.template not in self.values
        tags = set(tmpl.tags) if tmpl else set()
        if self.op == "tag_required":
            return all(v in tags for v in self.values)
        if self.op == "tag_forbidden":
            return not any(v in tags for v in self.values)
        # param_equals
        params = dict(tmpl.defaults) if tmpl else {}
        params.update(sp.param_dict)
        return self.param in params and params[self.param] == self.values[0]

    def describe(self) -> str:
        if self.op == "param_equals":
            return f"{self.component}.{self.param} == {self.values[0]!r}"
        return f"{self.component} {self.op} {', '.join(map(str, self.values))}"

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"component": self.component, "op": self.op, "values": list(self.values)}
        if self.param:
            out["param"] = self.param
        if self.provenance:
            out["provenance"] = self.provenance
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ComponentPredicate:
        values = d.get("values")
        if values is None and "value" in d:
            values = [d["value"]]
        return cls(d["component"], d["op"], tuple(values or ()), d.get("param"),
                   d.get("provenance", ""))


def satisfies(plan: ExperimentPlan, predicates: Iterable[ComponentPredicate],
              schema: FrameworkSchema) -> bool:
    return all(p.holds(plan, schema) for p in predicates)


def enumerate_plans(schema: FrameworkSchema,
                    predicates: Iterable[ComponentPredicate] = (),
                    limit: int | None = None) -> list[ExperimentPlan]:
    """All template/search-parameter combinations that satisfy ``predicates``.

    ``param_equals`` predicates are applied constructively so that a fixed
    market or frequency does not empty the grid. Order is deterministic:
    schema slot order, template order, declared choice order.
    """
    predicates = list(predicates)
    fixed: dict[str, dict[str, Any]] = {}
    for p in predicates:
        if p.op == "param_equals":
            for slot in schema.resolve(p.component):
                fixed.setdefault(slot.name, {})[p.param] = p.values[0]
    per_slot: list[list[SlotPlan]] = []
    for slot in schema.slots:
        options = []
        for tmpl in slot.templates:
            base = {k: v for k, v in fixed.get(slot.name, {}).items() if k in tmpl.parameters}
            combos: list[dict[str, Any]] = [base]
            for pname in tmpl.search_params:
                if pname in base:
                    continue
                combos = [dict(c, **{pname: v}) for c in combos
                          for v in tmpl.parameters[pname].choices]
            options.extend(SlotPlan.of(tmpl.name, c) for c in combos)
        per_slot.append(options)
    out: list[ExperimentPlan] = []

    def walk(i: int, chosen: list[tuple[str, SlotPlan]]) -> bool:
        if i == len(schema.slots):
            plan = ExperimentPlan.of(list(chosen))
            if satisfies(plan, predicates, schema):
                out.append(plan)
                if limit is not None and len(out) >= limit:
                    return True
            return False
        for sp in per_slot[i]:
            if walk(i + 1, chosen + [(schema.slots[i].name, sp)]):
                return True
        return False

    walk(0, [])
    return out
