"""The R&D cycle: requirement analysis, utility-scored proposal, grounding,
execution and knowledge update.

:class:`RDAgent` ties together a framework schema, a knowledge base, a chat
backend and an environment. One call to :meth:`RDAgent.run_cycle` analyses an
intention once and then runs ``budget`` iterations of propose -> ground ->
execute -> record, each iteration attempting a group of ``k`` experiments
that vary a single target slot while the other slots stay fixed.
"""

from __future__ import annotations

import json
import logging
import math
import random
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from arda.embedding import cosine
from arda.knowledge import (
    STATUS_FAILED,
    STATUS_SUCCEEDED,
    DocCorpus,
    KnowledgeBase,
    MetricVector,
    goal_text,
    query_infrastructure,
)
from arda.llmclient import ChatRequest, LLMError, PromptRegistry
from arda.symlang import (
    PREDICATE_OPS,
    ComponentPredicate,
    ExperimentPlan,
    FrameworkSchema,
    PlanError,
    SlotPlan,
    SubTask,
    apply_delta,
    decompose,
    enumerate_plans,
    satisfies,
    validate_plan,
)

log = logging.getLogger(__name__)

DIRECTIONS = ("maximize", "minimize")


class AnalysisError(RuntimeError):
    def __init__(self, message: str, transcript: Sequence[TranscriptEntry] = ()):
        super().__init__(message)
        self.transcript = list(transcript)


class ExecutionError(RuntimeError):
    pass


# -- domain types ----------------------------------------------------------------


@dataclass(frozen=True)
class Intention:
    text: str
    id: str = "intention"

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("intention text is empty")


@dataclass(frozen=True)
class RequirementSpec:
    target_metric: str
    direction: str
    evaluation_setting: str
    constraints: tuple[ComponentPredicate, ...] = ()
    secondary_targets: tuple[tuple[str, str], ...] = ()

    @property
    def goal(self) -> str:
        return goal_text(self.target_metric, self.direction)

    def better(self, a: float, b: float) -> bool:
        return a > b if self.direction == "maximize" else a < b

    def to_dict(self) -> dict:
        return {
            "target_metric": self.target_metric,
            "direction": self.direction,
            "evaluation_setting": self.evaluation_setting,
            "constraints": [c.to_dict() for c in self.constraints],
            "secondary_targets": [{"metric": m, "direction": d} for m, d in self.secondary_targets],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RequirementSpec:
        return cls(
            d["target_metric"], d["direction"], d["evaluation_setting"],
            tuple(ComponentPredicate.from_dict(c) for c in d.get("constraints") or ()),
            tuple((s["metric"], s["direction"]) for s in d.get("secondary_targets") or ()),
        )


@dataclass(frozen=True)
class UtilityScore:
    exploitation: float
    exploration: float
    future_value: float
    aggregate: float
    weights: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {"exploitation": self.exploitation, "exploration": self.exploration,
                "future_value": self.future_value, "aggregate": self.aggregate,
                "weights": list(self.weights)}


@dataclass(frozen=True)
class Proposal:
    plan: ExperimentPlan
    utility: UtilityScore
    provenance: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"plan": self.plan.to_dict(), "utility": self.utility.to_dict(),
                "provenance": list(self.provenance)}


@dataclass
class ProposedExperimentSet:
    experiments: list[Proposal]
    budget_remaining: int = 0
    diagnostic: str = ""

    def __len__(self) -> int:
        return len(self.experiments)

    @property
    def plans(self) -> list[ExperimentPlan]:
        return [p.plan for p in self.experiments]


@dataclass
class Fragment:
    slot: str
    kind: str
    template: str
    params: dict[str, Any]
    code: str | None = None
    attempts: int = 1

    def to_dict(self) -> dict:
        return {"kind": self.kind, "template": self.template, "params": dict(sorted(self.params.items())),
                "code": self.code, "attempts": self.attempts}


@dataclass
class RunnableProject:
    plan: ExperimentPlan
    fragments: dict[str, Fragment] = field(default_factory=dict)
    runnable: bool = False
    failed_slot: str | None = None
    error: str = ""

    @property
    def attempts(self) -> dict[str, int]:
        return {s: f.attempts for s, f in self.fragments.items()}

    @property
    def executed_plan(self) -> ExperimentPlan:
        out = self.plan
        for slot, frag in self.fragments.items():
            sp = self.plan.get(slot)
            out = out.replace_slot(slot, SlotPlan.of(frag.template, frag.params,
                                                     sp.extension if sp else None))
        return out

    def to_implementation(self) -> dict:
        return {"fragments": {s: f.to_dict() for s, f in self.fragments.items()}}


@dataclass(frozen=True)
class TranscriptEntry:
    stage: str
    messages: tuple[tuple[str, str], ...]
    response: str | None
    usage: Mapping[str, int]
    wall_time: float
    error: str = ""

    def to_dict(self) -> dict:
        return {"stage": self.stage,
                "messages": [{"role": r, "content": c} for r, c in self.messages],
                "response": self.response, "usage": dict(sorted(self.usage.items())),
                "wall_time": self.wall_time, "error": self.error}


@dataclass
class Outcome:
    record_id: str
    status: str
    grounded: bool
    metrics: MetricVector | None
    failure: str = ""

    def to_dict(self) -> dict:
        return {"record_id": self.record_id, "status": self.status, "grounded": self.grounded,
                "metrics": self.metrics.to_dict() if self.metrics else None,
                "failure": self.failure}


@dataclass
class Iteration:
    proposed: ProposedExperimentSet
    outcomes: list[Outcome]

    def to_dict(self) -> dict:
        return {"proposed": [p.to_dict() for p in self.proposed.experiments],
                "diagnostic": self.proposed.diagnostic,
                "budget_remaining": self.proposed.budget_remaining,
                "outcomes": [o.to_dict() for o in self.outcomes]}


@dataclass
class CycleReport:
    intention: Intention
    requirement: RequirementSpec
    iterations: list[Iteration]
    best: tuple[ExperimentPlan, MetricVector] | None
    best_record: str | None
    transcript: list[TranscriptEntry]

    @property
    def records(self) -> list[str]:
        return [o.record_id for it in self.iterations for o in it.outcomes]

    @property
    def outcomes(self) -> list[Outcome]:
        return [o for it in self.iterations for o in it.outcomes]

    @property
    def plans(self) -> list[ExperimentPlan]:
        return [p.plan for it in self.iterations for p in it.proposed.experiments]

    def to_dict(self) -> dict:
        return {
            "report_version": 1,
            "intention": {"id": self.intention.id, "text": self.intention.text},
            "requirement": self.requirement.to_dict(),
            "iterations": [it.to_dict() for it in self.iterations],
            "best": None if self.best is None else {
                "record_id": self.best_record,
                "plan": self.best[0].to_dict(),
                "metrics": self.best[1].to_dict(),
            },
            "transcript": [t.to_dict() for t in self.transcript],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def render(self) -> str:
        req = self.requirement
        lines = [f"# R&D cycle: {self.intention.text}", "",
                 f"Target: {req.direction} {req.target_metric} on {req.evaluation_setting}"]
        for m, d in req.secondary_targets:
            lines.append(f"Secondary: {d} {m}")
        for c in req.constraints:
            src = f"  (from: {c.provenance})" if c.provenance else ""
            lines.append(f"Constraint: {c.describe()}{src}")
        for i, it in enumerate(self.iterations, 1):
            lines += ["", f"## Iteration {i}"]
            if it.proposed.diagnostic:
                lines.append(f"Note: {it.proposed.diagnostic}")
            for p, o in zip(it.proposed.experiments, it.outcomes):
                value = (f"{o.metrics[req.target_metric]:.4f}"
                         if o.metrics and req.target_metric in o.metrics.entries else o.failure or "-")
                lines.append(f"- {o.record_id} [{o.status}] {p.plan.render()} -> {value} "
                             f"(utility {p.utility.aggregate:.3f})")
        if self.best is not None:
            lines += ["", f"Best: {self.best_record} {self.best[0].render()} "
                          f"{req.target_metric}={self.best[1][req.target_metric]:.4f}"]
        return "\n".join(lines) + "\n"


@dataclass
class AgentConfig:
    weights: tuple[float, float, float] = (0.5, 0.4, 0.1)
    # one-slot edits of a plan sit ~0.055 apart under the hash embedder
    bandwidth: float = 0.06
    exploration_clip: float = 0.06
    retries: int = 3
    pool_cap: int = 64
    idea_k: int = 5
    demo_k: int = 2
    infra_k: int = 2
    knowledge_k: int = 3
    transfer_plans: int = 3

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if len(w) != 3 or min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"utility weights must be 3 non-negative numbers summing to 1, got {w}")
        self.weights = w
        if self.retries < 1:
            raise ValueError("retries must be at least 1")
        if self.bandwidth <= 0 or self.exploration_clip <= 0:
            raise ValueError("bandwidth and exploration clip must be positive")


# -- helpers ---------------------------------------------------------------------


def extract_json(text: str) -> Any:
    """Parse the first JSON object in an LLM reply, tolerating code fences."""
    text = text.strip()
    fenced = re.search(r"```(?:json)?\s*(.*?)```", text, re.S)
    if fenced:
        text = fenced.group(1).strip()
    try:
        return json.loads(text)
    except ValueError:
        pass
    start = text.find("{")
    if start < 0:
        raise ValueError("no JSON object in reply")
    obj, _ = json.JSONDecoder().raw_decode(text[start:])
    return obj


def schema_summary(schema: FrameworkSchema) -> str:
    lines = []
    for slot in schema.slots:
        tmpls = ", ".join(f"{t.name}[{','.join(t.tags)}]" for t in slot.templates)
        lines.append(f"{slot.name} ({slot.kind}): {tmpls}")
    return "\n".join(lines)


def best_record(kb: KnowledgeBase, spec: RequirementSpec, ids: Iterable[str] | None = None):
    allowed = set(ids) if ids is not None else None
    best = None
    for r in kb.experiments:
        if r.status != STATUS_SUCCEEDED or spec.target_metric not in r.results.entries:
            continue
        if allowed is not None and r.id not in allowed:
            continue
        if best is None or spec.better(r.results[spec.target_metric], best.results[spec.target_metric]):
            best = r
    return best


# -- the agent -------------------------------------------------------------------


class RDAgent:
    """Autonomous R&D agent over one schema, knowledge base and chat backend.

    Args:
        schema: the framework the plans are written in.
        kb: knowledge base; experiment records are appended to it.
        llm: any object with ``complete(ChatRequest) -> str``.
        config: utility weights, retry limit and query widths.
        metric_directions: declared direction per metric; defaults to the
            knowledge base configuration.
        prompts: prompt registry; defaults to the shipped one.
        corpus: framework documentation for infrastructure queries; built
            from the schema when omitted.
        policy: ``"utility"`` or ``"random"`` (uniform baseline).
        seed: seed for the random policy.
    """

    def __init__(self, schema: FrameworkSchema, kb: KnowledgeBase, llm,
                 config: AgentConfig | None = None,
                 metric_directions: Mapping[str, str] | None = None,
                 prompts: PromptRegistry | None = None, corpus: DocCorpus | None = None,
                 policy: str = "utility", seed: int = 0):
        if policy not in ("utility", "random"):
            raise ValueError(f"unknown policy {policy!r}")
        self.schema = schema
        self.kb = kb
        self.llm = llm
        self.config = config or AgentConfig()
        self.metric_directions = dict(metric_directions or kb.config.metric_directions)
        self.prompts = prompts or PromptRegistry.load()
        self.corpus = corpus or DocCorpus.from_schema(schema, kb.embedder)
        self.policy = policy
        self.rng = random.Random(seed)
        self.transcript: list[TranscriptEntry] = []

    # -- LLM plumbing ----------------------------------------------------------

    def _complete(self, stage: str, request: ChatRequest) -> str:
        messages = tuple((m.role, m.content) for m in request.messages)
        try:
            response = self.llm.complete(request)
        except LLMError as exc:
            self.transcript.append(TranscriptEntry(stage, messages, None, {}, 0.0, str(exc)))
            raise
        usage, latency = {}, 0.0
        session = getattr(self.llm, "session", None)
        if session:
            usage, latency = dict(session[-1].usage), session[-1].latency
        self.transcript.append(TranscriptEntry(stage, messages, response, usage, latency))
        return response

    def _feedback(self, request: ChatRequest, response: str, errors: Sequence[str]) -> ChatRequest:
        text = self.prompts.render("retry_feedback", errors="\n".join(f"- {e}" for e in errors))
        return request.followup(response, text)

    # -- requirement analysis --------------------------------------------------

    def analyze_requirements(self, intention: Intention) -> RequirementSpec:
        """Turn an intention into a :class:`RequirementSpec` via the LLM.

        Domain knowledge retrieved for the intention is put in the prompt.
        Replies that do not parse, or whose constraints are not traceable to
        the intention or to retrieved knowledge, are retried with feedback up
        to ``config.retries`` attempts in total.

        Raises:
            AnalysisError: unknown target metric, backend failure or retries
                exhausted; carries the transcript.
        """
        hits = self.kb.query_general(intention.text, "domain", self.config.knowledge_k)
        knowledge = "\n".join(f"[knowledge:{h.item.id}] {h.item.key}"
                              + (f" -- {h.item.value}" if h.item.value else "") for h in hits) or "(none)"
        metrics = "\n".join(f"{m}: {d}" for m, d in sorted(self.metric_directions.items()))
        request = self.prompts.request(
            "analyze_requirements", intention=intention.text, metrics=metrics,
            schema=schema_summary(self.schema), knowledge=knowledge, ops=", ".join(PREDICATE_OPS))
        known_ids = {h.item.id for h in hits}
        start = len(self.transcript)
        for _ in range(self.config.retries):
            try:
                response = self._complete("analyze_requirements", request)
            except LLMError as exc:
                raise AnalysisError(f"analysis failed: {exc}", self.transcript[start:]) from exc
            try:
                data = extract_json(response)
            except ValueError as exc:
                request = self._feedback(request, response, [f"reply is not JSON: {exc}"])
                continue
            metric = data.get("target_metric") if isinstance(data, dict) else None
            if isinstance(metric, str) and metric not in self.metric_directions:
                raise AnalysisError(f"unknown target metric {metric!r}", self.transcript[start:])
            spec, errors = self._parse_requirement(data, intention, known_ids)
            if spec is not None:
                return spec
            request = self._feedback(request, response, errors)
        raise AnalysisError(f"requirement analysis unparseable after {self.config.retries} attempts",
                            self.transcript[start:])

    def _parse_requirement(self, data: Any, intention: Intention,
                           known_ids: set[str]) -> tuple[RequirementSpec | None, list[str]]:
        if not isinstance(data, dict):
            return None, ["reply must be a JSON object"]
        errors = []
        metric = data.get("target_metric")
        direction = data.get("direction") or self.metric_directions.get(metric)
        if not isinstance(metric, str):
            errors.append("target_metric missing")
        if direction not in DIRECTIONS:
            errors.append(f"direction must be one of {DIRECTIONS}")
        secondary = []
        for s in data.get("secondary_targets") or []:
            try:
                m, d = s["metric"], s.get("direction", "maintain")
            except (TypeError, KeyError):
                errors.append(f"bad secondary target {s!r}")
                continue
            if m not in self.metric_directions:
                errors.append(f"unknown secondary metric {m!r}")
            secondary.append((m, d))
        constraints = []
        for c in data.get("constraints") or []:
            try:
                pred = ComponentPredicate.from_dict(c)
            except (TypeError, KeyError, ValueError) as exc:
                errors.append(f"bad constraint {c!r}: {exc}")
                continue
            problem = self._check_predicate(pred, intention, known_ids)
            if problem:
                errors.append(problem)
            else:
                constraints.append(pred)
        eval_slots = self.schema.slots_of_kind("evaluation")
        setting_parts = []
        for key in ("market", "freq"):
            value = data.get(key)
            owner = next((s for s in eval_slots for t in s.templates if key in t.parameters), None)
            if owner is None:
                continue
            if value is None:
                value = next(t.defaults.get(key) for t in owner.templates if key in t.parameters)
            else:
                domains = [t.parameters[key] for t in owner.templates if key in t.parameters]
                if not any(dom.contains(value) for dom in domains):
                    errors.append(f"{key}={value!r} not offered by slot {owner.name}")
                    continue
                constraints.append(ComponentPredicate(owner.name, "param_equals", (value,), key,
                                                      f"{key} stated in analysis"))
            setting_parts.append(str(value))
        if errors:
            return None, errors
        setting = data.get("evaluation_setting") or "_".join(setting_parts) or "default"
        return RequirementSpec(metric, direction, setting, tuple(constraints), tuple(secondary)), []

    def _check_predicate(self, pred: ComponentPredicate, intention: Intention,
                         known_ids: set[str]) -> str | None:
        slots = self.schema.resolve(pred.component)
        if not slots:
            return f"constraint references unknown component {pred.component!r}"
        if pred.op in ("equals", "allowed", "forbidden"):
            names = {t.name for s in slots for t in s.templates}
            unknown = [v for v in pred.values if v not in names]
            if unknown:
                return f"constraint references unknown templates {unknown}"
        if pred.op == "param_equals" and not any(pred.param in t.parameters
                                                 for s in slots for t in s.templates):
            return f"constraint references unknown parameter {pred.param!r}"
        prov = pred.provenance.strip()
        if prov.startswith("knowledge:"):
            if prov.split(":", 1)[1] not in known_ids:
                return f"provenance {prov!r} does not name retrieved knowledge"
        elif not prov or prov.lower() not in intention.text.lower():
            return f"provenance {prov!r} is not a phrase of the intention"
        return None

    # -- utility -----------------------------------------------------------------

    def score_utility(self, candidate: ExperimentPlan, spec: RequirementSpec) -> UtilityScore:
        """Exploitation, exploration and future-value terms for a candidate.

        exploitation: Gaussian-kernel weighted mean of the min-max normalised
        target over stored results (kernel on cosine distance between plan
        embeddings), 0.5 when nothing is stored. exploration: distance to the
        nearest stored plan, clipped and scaled to [0, 1]. future_value:
        share of the candidate's templates no stored experiment has used.
        """
        return self._score(candidate, spec, self._utility_context(spec))

    def _utility_context(self, spec: RequirementSpec) -> dict:
        records = self.kb.experiments
        scored = [r for r in records if r.status == STATUS_SUCCEEDED
                  and r.results.evaluation_setting == spec.evaluation_setting
                  and spec.target_metric in r.results.entries]
        values = [r.results[spec.target_metric] for r in scored]
        norm = []
        if values:
            lo, hi = min(values), max(values)
            for v in values:
                n = 0.5 if hi == lo else (v - lo) / (hi - lo)
                norm.append(n if spec.direction == "maximize" else 1.0 - n)
        return {
            "all": [self.kb.plan_embedding(r) for r in records],
            "scored": [self.kb.plan_embedding(r) for r in scored],
            "norm": norm,
            "templates": {sp.template for r in records for _, sp in r.plan.slots},
        }

    def _score(self, candidate: ExperimentPlan, spec: RequirementSpec, ctx: dict) -> UtilityScore:
        cfg = self.config
        vec = self.kb.embed(candidate.render())
        if ctx["scored"]:
            num = den = 0.0
            for emb, n in zip(ctx["scored"], ctx["norm"]):
                d = 1.0 - cosine(vec, emb)
                w = math.exp(-d * d / (2 * cfg.bandwidth ** 2))
                num += w * n
                den += w
            exploit = num / den
        else:
            exploit = 0.5
        if ctx["all"]:
            dmin = min(1.0 - cosine(vec, emb) for emb in ctx["all"])
            explore = min(max(dmin, 0.0), cfg.exploration_clip) / cfg.exploration_clip
        else:
            explore = 1.0
        templates = [sp.template for _, sp in candidate.slots]
        future = sum(t not in ctx["templates"] for t in templates) / len(templates)
        wx, wr, wf = cfg.weights
        return UtilityScore(exploit, explore, future, wx * exploit + wr * explore + wf * future,
                            cfg.weights)

    # -- proposal ------------------------------------------------------------------

    def propose_experiments(self, spec: RequirementSpec, k: int,
                            budget_remaining: int = 0) -> ProposedExperimentSet:
        """Build one experiment group of at most ``k`` plans.

        The pool is the union of LLM suggestions, idea-candidate deltas
        transferred onto the best executed plans, and the constrained
        template grid (capped at ``config.pool_cap``). Plans already in the
        knowledge base are dropped. The group is anchored on the top-utility
        candidate (a random one under the random policy) and filled with
        candidates that differ from the anchor only in one target slot.
        """
        if k < 1:
            raise ValueError("k must be at least 1")
        executed = {r.plan.configuration() for r in self.kb.experiments}
        pool: dict[tuple, list[str]] = {}
        order: list[ExperimentPlan] = []
        rejected: list[str] = []

        def offer(plan: ExperimentPlan, source: str) -> None:
            cfg = plan.configuration()
            if cfg in executed:
                return
            if not validate_plan(plan, self.schema).valid:
                rejected.append(f"{source}: invalid plan")
                return
            if not satisfies(plan, spec.constraints, self.schema):
                rejected.append(f"{source}: violates constraints")
                return
            if cfg not in pool:
                pool[cfg] = []
                order.append(ExperimentPlan(cfg))
            if source not in pool[cfg]:
                pool[cfg].append(source)

        ideas = self.kb.propose_idea_candidates(spec.goal, (), self.config.idea_k,
                                                metric=spec.target_metric)
        ideas = [i for i in ideas if i.evaluation_setting == spec.evaluation_setting] or ideas
        grid = [p for p in enumerate_plans(self.schema, spec.constraints)
                if p.configuration() not in executed][:self.config.pool_cap]
        for plan, source in self._llm_suggestions(spec, ideas):
            offer(plan, source)
        for plan, source in self._idea_transfers(spec, ideas, grid):
            offer(plan, source)
        for plan in grid:
            offer(plan, "enumeration")
        if not order:
            diag = "no candidate satisfies the constraints"
            if rejected:
                diag += f" ({len(rejected)} rejected)"
            return ProposedExperimentSet([], budget_remaining, diag)
        ctx = self._utility_context(spec)
        scores = {p.configuration(): self._score(p, spec, ctx) for p in order}
        group, target = self._group(order, scores, k)
        controls = [n for n in self.schema.slot_names if n != target]
        varied = ", ".join(p.get(target).render() for p in group)
        hypothesis = (f"Varying {target} over [{varied}] with {', '.join(controls)} held fixed "
                      f"changes {spec.target_metric} ({spec.direction}).")
        proposals = [Proposal(p.with_roles(target, controls, hypothesis), scores[p.configuration()],
                              tuple(pool[p.configuration()])) for p in group]
        return ProposedExperimentSet(proposals, budget_remaining)

    def _llm_suggestions(self, spec: RequirementSpec, ideas) -> list[tuple[ExperimentPlan, str]]:
        best = best_record(self.kb, spec)
        executed = "\n".join(f"{r.id}: {r.plan.render()} -> {r.results[spec.target_metric]:.4g}"
                             for r in self.kb.experiments
                             if r.status == STATUS_SUCCEEDED and spec.target_metric in r.results.entries)
        request = self.prompts.request(
            "propose_experiments",
            requirement=json.dumps(spec.to_dict(), sort_keys=True),
            schema=schema_summary(self.schema),
            executed=executed or "(none)",
            ideas="\n".join(i.describe() for i in ideas) or "(none)",
        )
        try:
            data = extract_json(self._complete("propose_experiments", request))
        except (LLMError, ValueError) as exc:
            log.info("no usable LLM suggestions: %s", exc)
            return []
        base = best.plan if best is not None else None
        out = []
        for i, s in enumerate(data.get("suggestions") or [] if isinstance(data, dict) else []):
            try:
                slots = {n: SlotPlan.from_dict(d) for n, d in (s.get("slots") or {}).items()}
            except (KeyError, TypeError, AttributeError):
                continue
            items = []
            for slot in self.schema.slots:
                if slot.name in slots:
                    items.append((slot.name, slots[slot.name]))
                elif base is not None and base.get(slot.name) is not None:
                    items.append((slot.name, base.get(slot.name)))
                else:
                    t = slot.templates[0]
                    items.append((slot.name, SlotPlan.of(t.name, {p: t.defaults[p] for p in t.search_params
                                                                   if p in t.defaults})))
            out.append((ExperimentPlan.of(items), f"llm:{i}"))
        return out

    def _idea_transfers(self, spec: RequirementSpec, ideas,
                        grid: Sequence[ExperimentPlan]) -> list[tuple[ExperimentPlan, str]]:
        """Apply each idea's delta to the best executed plans and to the grid."""
        ranked = [r for r in self.kb.experiments if r.status == STATUS_SUCCEEDED
                  and spec.target_metric in r.results.entries]
        ranked.sort(key=lambda r: r.results[spec.target_metric],
                    reverse=spec.direction == "maximize")
        out = []
        for idea in ideas:
            goals = {self.kb.get_experiment(i).components["goal"] for i in idea.source_pair}
            tag = "cross-goal " if any(g != spec.goal for g in goals) else ""
            source = f"{tag}idea:{idea.source_pair[0]}->{idea.source_pair[1]}:{idea.metric}"
            bases = [ExperimentPlan(r.plan.configuration()) for r in ranked[:self.config.transfer_plans]]
            for base in bases + list(grid):
                out.append((apply_delta(base, idea.delta), source))
        return out

    def _group(self, order: list[ExperimentPlan], scores: dict, k: int):
        names = self.schema.slot_names

        def agg(p):
            return scores[p.configuration()].aggregate

        if self.policy == "random":
            anchor = self.rng.choice(order)
        else:
            anchor = max(order, key=agg)  # first maximum in pool order
        options = []
        for idx, slot in enumerate(names):
            variants = [p for p in order if p is not anchor and p.get(slot) != anchor.get(slot)
                        and all(p.get(n) == anchor.get(n) for n in names if n != slot)]
            if self.policy == "random":
                picked = self.rng.sample(variants, min(k - 1, len(variants)))
            else:
                picked = sorted(variants, key=agg, reverse=True)[:k - 1]
            group = [anchor] + picked
            mean = sum(agg(p) for p in group) / len(group)
            options.append((len(group), mean, -idx, slot, group))
        if self.policy == "random":
            full = [o for o in options if o[0] == max(o[0] for o in options)]
            choice = self.rng.choice(full)
        else:
            choice = max(options, key=lambda o: (o[0], o[1], o[2]))
        return choice[4], choice[3]

    # -- grounding -----------------------------------------------------------------

    def ground(self, plan: ExperimentPlan) -> RunnableProject:
        """Ground each slot of a valid plan into a configuration fragment.

        Each subtask is prompted with demonstrations and documentation
        excerpts. Fragments that fail validation are retried with the errors
        as feedback; a slot that fails ``config.retries`` attempts stops
        grounding and the project is returned non-runnable.
        """
        project = RunnableProject(plan)
        try:
            subtasks = decompose(plan, self.schema)
        except PlanError as exc:
            project.error = str(exc)
            return project
        for sub in subtasks:
            demos = self.kb.query_demonstrations(sub, self.config.demo_k)
            infra = query_infrastructure(f"{sub.slot_plan.template} {sub.extension_interface}",
                                         self.corpus, self.config.infra_k)
            request = self.prompts.request(
                "ground_slot", slot=sub.slot, kind=sub.kind, role=sub.role,
                slot_plan=sub.slot_plan.render(), extension_interface=sub.extension_interface,
                template_doc=sub.template_doc or "(extension)",
                demonstrations="\n".join(f"{d.record_id}: {json.dumps(d.artifact, sort_keys=True)}"
                                         for d in demos) or "(none)",
                infrastructure="\n".join(f"[{h.item[0]}] {h.item[1]}" for h in infra) or "(none)",
            )
            fragment, errors = None, []
            for attempt in range(1, self.config.retries + 1):
                try:
                    response = self._complete(f"ground:{sub.slot}", request)
                except LLMError as exc:
                    errors = [f"backend failure: {exc}"]
                    break
                fragment, errors = self._parse_fragment(response, sub, attempt)
                if fragment is not None:
                    break
                request = self._feedback(request, response, errors)
            if fragment is None:
                project.failed_slot = sub.slot
                project.error = "; ".join(errors)
                return project
            project.fragments[sub.slot] = fragment
        project.runnable = True
        return project

    def _parse_fragment(self, response: str, sub: SubTask, attempt: int):
        try:
            data = extract_json(response)
        except ValueError as exc:
            return None, [f"reply is not JSON: {exc}"]
        if not isinstance(data, dict):
            return None, ["reply must be a JSON object"]
        planned = sub.slot_plan
        template = data.get("template") or planned.template
        if template != planned.template:
            return None, [f"fragment template {template!r} deviates from planned {planned.template!r}"]
        params = planned.param_dict
        extra = data.get("params") or {}
        if not isinstance(extra, dict):
            return None, ["params must be an object"]
        params.update(extra)
        code = data.get("code")
        slot = self.schema.slot(sub.slot)
        tmpl = slot.template(template)
        errors = []
        if tmpl is None:
            if not code:
                errors.append(f"extension template {template!r} needs code implementing the interface")
        else:
            for p, v in params.items():
                dom = tmpl.parameters.get(p)
                if dom is None:
                    if not (planned.extension and code):
                        errors.append(f"{template} has no parameter {p!r}")
                elif not dom.contains(v):
                    errors.append(f"{p}={v!r} outside {dom.describe()}")
        if errors:
            return None, errors
        return Fragment(sub.slot, sub.kind, template, params, code, attempt), []

    # -- execution -------------------------------------------------------------------

    def execute(self, project: RunnableProject, env, evaluation_setting: str | None = None) -> MetricVector:
        if not project.runnable:
            raise ValueError("project is not runnable")
        try:
            result = env.evaluate(project, evaluation_setting=evaluation_setting)
        except Exception as exc:  # any environment failure becomes a failed record
            raise ExecutionError(f"environment failure: {exc}") from exc
        return getattr(result, "metrics", result)

    # -- the cycle -----------------------------------------------------------------

    def run_cycle(self, intention: Intention, budget: int, k: int, env,
                  spec: RequirementSpec | None = None) -> CycleReport:
        """Analyse once, then run ``budget`` propose/ground/execute/record rounds.

        Every attempted experiment, failed or not, is appended to the
        knowledge base. ``spec`` skips requirement analysis when given.
        """
        if budget < 1:
            raise ValueError("budget must be at least 1")
        start = len(self.transcript)
        if spec is None:
            spec = self.analyze_requirements(intention)
        iterations = []
        cycle_ids: list[str] = []
        for it in range(budget):
            proposed = self.propose_experiments(spec, k, budget_remaining=budget - it - 1)
            outcomes = []
            for proposal in proposed.experiments:
                project = self.ground(proposal.plan)
                metrics, failure = None, ""
                if project.runnable:
                    try:
                        metrics = self.execute(project, env, spec.evaluation_setting)
                    except ExecutionError as exc:
                        failure = str(exc)
                else:
                    failure = f"grounding failed on {project.failed_slot}: {project.error}"
                status = STATUS_SUCCEEDED if metrics is not None else STATUS_FAILED
                record = self.kb.make_record(
                    proposal.plan, spec.goal, metrics, status,
                    implementation=project.to_implementation() if project.runnable else None)
                self.kb.add_experiment(record)
                cycle_ids.append(record.id)
                outcomes.append(Outcome(record.id, status, project.runnable, metrics, failure))
            iterations.append(Iteration(proposed, outcomes))
        best = best_record(self.kb, spec, cycle_ids)
        return CycleReport(
            intention, spec, iterations,
            (best.plan, best.results) if best is not None else None,
            best.id if best is not None else None,
            self.transcript[start:],
        )


def run_cycle(intention: Intention, budget: int, k: int, env, kb: KnowledgeBase, llm,
              schema: FrameworkSchema, **agent_kwargs) -> CycleReport:
    """Functional entry point: build an :class:`RDAgent` and run one cycle."""
    return RDAgent(schema, kb, llm, **agent_kwargs).run_cycle(intention, budget, k, env)
