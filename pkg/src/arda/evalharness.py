"""Benchmark fixtures, score aggregation and live-run scoring.

Two halves:

* Static: the 40 benchmark tasks and the expert score sheets ship as
  checksummed JSON fixtures. The aggregators turn a sheet into the single
  score printed in the results tables, and :func:`reproduce_tables` rebuilds
  both results tables and compares them to the printed values.
* Live: :func:`live_run` drives the agent on the simulated environment with a
  scripted LLM, and :func:`score_live_run` measures regret against the
  exhaustive optimum. :func:`compare_policies` runs the utility proposer, the
  uniform-random proposer and a warm-started utility proposer over a seed set.
"""

from __future__ import annotations

import hashlib
import json
import math
import statistics
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from arda.agentloop import AgentConfig, CycleReport, Intention, RDAgent
from arda.knowledge import KnowledgeBase, MetricVector
from arda.llmclient import Script, ScriptedBackend, ScriptEntry, match_any, match_contains
from arda.symlang import ExperimentPlan, FrameworkSchema, SlotPlan, load_schema, satisfies
from arda.simenv import ResponseSurface, SimEnvironment, best_action, load_surface

PHASES = ("understanding", "explore_exploit", "grounding", "transferability")
SCENARIOS = ("cold", "warm")
FIXTURE_FILES = ("tasks.json", "score_sheets.json", "main_tables.json", "grounding_plans.json")

COLD_EE_WEIGHTS = (1 / 3, 1 / 3, 1 / 3)
WARM_EE_WEIGHTS = (0.25, 0.5, 0.25)

# printed-table tolerances per phase
TOLERANCES = {
    ("cold", "understanding"): 0.006,
    ("cold", "explore_exploit"): 0.006,
    ("cold", "grounding"): 0.003,
    ("cold", "overall"): 0.003,
    ("warm", "explore_exploit"): 0.003,
    ("warm", "transferability"): 0.001,
}

EPSILON = 0.01  # regret threshold for iterations-to-epsilon


class FixtureError(RuntimeError):
    pass


# -- fixtures --------------------------------------------------------------------


@dataclass(frozen=True)
class EvalTask:
    id: str
    phase: str
    scenario: str
    text: str

    def __post_init__(self):
        if self.phase not in PHASES:
            raise FixtureError(f"task {self.id}: unknown phase {self.phase!r}")
        if self.scenario not in SCENARIOS:
            raise FixtureError(f"task {self.id}: unknown scenario {self.scenario!r}")


@dataclass(frozen=True)
class ScoreSheet:
    """One method's per-task scores for one phase and scenario.

    ``column`` is the sheet's position in its source table and ``header`` the
    label printed above it; ``method`` is the attribution actually used.
    """

    method: str
    phase: str
    scenario: str
    criteria: tuple[str, ...]
    rows: Mapping[str, tuple[float, ...]]
    column: int = 0
    header: str = ""
    note: str = ""

    def __post_init__(self):
        for tid, row in self.rows.items():
            if len(row) != len(self.criteria):
                raise FixtureError(f"{self.method}/{self.phase}: row {tid} has {len(row)} scores, "
                                   f"expected {len(self.criteria)}")
            for v in row:
                if not 0.0 <= v <= 1.0:
                    raise FixtureError(f"{self.method}/{self.phase}: score {v} of {tid} outside [0, 1]")

    def column_values(self, criterion: str) -> list[float]:
        i = self.criteria.index(criterion)
        return [row[i] for row in self.rows.values()]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ScoreSheet:
        return cls(d["method"], d["phase"], d["scenario"], tuple(d["criteria"]),
                   {t: tuple(float(v) for v in r) for t, r in d["rows"].items()},
                   int(d.get("column", 0)), d.get("header", ""), d.get("note", ""))


@dataclass
class Fixtures:
    tasks: list[EvalTask]
    sheets: list[ScoreSheet]
    main_tables: dict
    grounding_plans: dict[str, ExperimentPlan]
    reuse: dict[tuple[str, str], str] = field(default_factory=dict)

    def tasks_for(self, phase: str, scenario: str) -> list[EvalTask]:
        """Tasks of a phase and scenario, including ones reused from another phase."""
        src = self.reuse.get((phase, scenario))
        if src is not None:
            return [EvalTask(t.id, phase, scenario, t.text) for t in self.tasks
                    if t.phase == src and t.scenario == scenario]
        return [t for t in self.tasks if t.phase == phase and t.scenario == scenario]

    def sheet(self, method: str, phase: str, scenario: str) -> ScoreSheet:
        for s in self.sheets:
            if (s.method, s.phase, s.scenario) == (method, phase, scenario):
                return s
        raise KeyError((method, phase, scenario))

    def task(self, task_id: str, phase: str | None = None) -> EvalTask:
        for t in self.tasks:
            if t.id == task_id and (phase is None or t.phase == phase):
                return t
        raise KeyError(task_id)


def _fixture_dir(path: str | Path | None):
    if path is None:
        return resources.files("arda.data").joinpath("fixtures")
    return Path(path)


def verify_manifest(path: str | Path | None = None) -> dict[str, bytes]:
    """Read every fixture file and check it against the SHA-256 manifest."""
    root = _fixture_dir(path)
    try:
        manifest = root.joinpath("MANIFEST").read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise FixtureError(f"fixture manifest missing under {root}") from exc
    expected = {}
    for line in manifest.splitlines():
        if line.strip():
            digest, name = line.split(None, 1)
            expected[name.strip()] = digest
    blobs = {}
    for name in FIXTURE_FILES:
        if name not in expected:
            raise FixtureError(f"{name} is not listed in the fixture manifest")
        try:
            data = root.joinpath(name).read_bytes()
        except FileNotFoundError as exc:
            raise FixtureError(f"fixture file {name} missing") from exc
        got = hashlib.sha256(data).hexdigest()
        if got != expected[name]:
            raise FixtureError(f"checksum mismatch for {name}: expected {expected[name]}, got {got}")
        blobs[name] = data
    return blobs


def load_fixtures(path: str | Path | None = None) -> Fixtures:
    """Load and verify the task, score-sheet, main-table and plan fixtures.

    Raises:
        FixtureError: a file is missing, fails its checksum, or a sheet's
            rows do not match its phase's task set.
    """
    blobs = verify_manifest(path)
    docs = {n: json.loads(b.decode("utf-8")) for n, b in blobs.items()}
    task_doc = docs["tasks.json"]
    tasks = [EvalTask(t["id"], t["phase"], t["scenario"], t["text"]) for t in task_doc["tasks"]]
    ids = [t.id for t in tasks]
    if len(set(ids)) != len(ids):
        raise FixtureError("duplicate task id")
    reuse = {(r["phase"], r["scenario"]): r["from_phase"] for r in task_doc.get("reuse", [])}
    sheets = [ScoreSheet.from_dict(s) for s in docs["score_sheets.json"]["sheets"]]
    plans = {p["task"]: ExperimentPlan.from_dict(p["plan"]) for p in docs["grounding_plans.json"]["plans"]}
    main = {k: v for k, v in docs["main_tables.json"].items() if k != "fixture_version"}
    fx = Fixtures(tasks, sheets, main, plans, reuse)
    for s in sheets:
        want = {t.id for t in fx.tasks_for(s.phase, s.scenario)}
        if set(s.rows) != want:
            raise FixtureError(f"sheet {s.method}/{s.phase}/{s.scenario} rows do not match the task set")
    return fx


# -- aggregators -----------------------------------------------------------------


def _check_rows(sheet: ScoreSheet, task_ids: Iterable[str] | None) -> None:
    if not sheet.rows:
        raise ValueError("empty score sheet")
    if task_ids is not None:
        missing = sorted(set(task_ids) - set(sheet.rows))
        if missing:
            raise ValueError(f"sheet {sheet.method} lacks rows for {missing}")


def aggregate_understanding(sheet: ScoreSheet, task_ids: Iterable[str] | None = None) -> float:
    """Mean over tasks of the mean of target and constraint alignment."""
    _check_rows(sheet, task_ids)
    return statistics.fmean(statistics.fmean(r) for r in sheet.rows.values())


def aggregate_ee(sheet: ScoreSheet, weights: Sequence[float] = COLD_EE_WEIGHTS,
                 task_ids: Iterable[str] | None = None) -> float:
    """Mean over tasks of the weighted accuracy/professionalism/feasibility sum."""
    w = tuple(float(x) for x in weights)
    if len(w) != 3 or min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
        raise ValueError(f"weights must be 3 non-negative numbers summing to 1, got {w}")
    _check_rows(sheet, task_ids)
    return statistics.fmean(sum(wi * x for wi, x in zip(w, r)) for r in sheet.rows.values())


def aggregate_grounding(sheet: ScoreSheet, task_ids: Iterable[str] | None = None) -> float:
    """Mean of the pass rate and the mean planning alignment."""
    _check_rows(sheet, task_ids)
    return (statistics.fmean(sheet.column_values(sheet.criteria[0]))
            + statistics.fmean(sheet.column_values(sheet.criteria[1]))) / 2


def aggregate_transferability(sheet: ScoreSheet, task_ids: Iterable[str] | None = None) -> float:
    _check_rows(sheet, task_ids)
    return statistics.fmean(statistics.fmean(r) for r in sheet.rows.values())


def overall(understanding: float, ee: float, grounding: float) -> float:
    return (understanding + ee + grounding) / 3


@dataclass(frozen=True)
class Comparison:
    scenario: str
    method: str
    column: str
    computed: float
    printed: float
    tolerance: float

    @property
    def delta(self) -> float:
        return self.computed - self.printed

    @property
    def ok(self) -> bool:
        return abs(self.delta) <= self.tolerance + 1e-12

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "method": self.method, "column": self.column,
                "computed": self.computed, "printed": self.printed,
                "tolerance": self.tolerance, "ok": self.ok}


@dataclass
class AggregateReport:
    """Recomputed results tables.

    ``cold[method]`` holds understanding, explore_exploit, grounding and
    overall; ``warm[method]`` holds explore_exploit and, where scored,
    transferability. Cold overall is the mean of the printed (two or three
    decimal) phase scores, which is how the printed overall column was
    formed; ``overall_unrounded`` keeps the mean of the exact values.
    """

    cold: dict[str, dict[str, float]]
    warm: dict[str, dict[str, float]]
    overall_unrounded: dict[str, float]
    comparisons: list[Comparison] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.comparisons)

    def to_dict(self) -> dict:
        return {"cold": self.cold, "warm": self.warm, "overall_unrounded": self.overall_unrounded,
                "comparisons": [c.to_dict() for c in self.comparisons], "ok": self.ok}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def render(self) -> str:
        out = ["Cold start", f"{'method':<12}{'underst.':>10}{'E&E':>10}{'ground.':>10}{'overall':>10}"]
        for m, row in self.cold.items():
            out.append(f"{m:<12}" + "".join(f"{row[c]:>10.4f}" for c in
                                            ("understanding", "explore_exploit", "grounding", "overall")))
        out += ["", "Warm start", f"{'method':<12}{'E&E':>10}{'transfer':>10}"]
        for m, row in self.warm.items():
            t = row.get("transferability")
            out.append(f"{m:<12}{row['explore_exploit']:>10.4f}" + (f"{t:>10.4f}" if t is not None else f"{'N/A':>10}"))
        out += ["", "Printed vs computed"]
        for c in self.comparisons:
            out.append(f"{'ok  ' if c.ok else 'FAIL'} {c.scenario:<5}{c.method:<12}{c.column:<17}"
                       f"computed {c.computed:.4f}  printed {c.printed:.3f}  tol {c.tolerance}")
        return "\n".join(out) + "\n"


def reproduce_tables(fixtures: Fixtures | None = None) -> AggregateReport:
    fx = fixtures or load_fixtures()
    cold_ids = [t.id for t in fx.tasks_for("understanding", "cold")]
    cold, warm, unrounded = {}, {}, {}
    printed_cold = fx.main_tables["cold"]
    printed_warm = fx.main_tables["warm"]
    comps: list[Comparison] = []
    for method, printed in printed_cold["rows"].items():
        row = {
            "understanding": aggregate_understanding(fx.sheet(method, "understanding", "cold"), cold_ids),
            "explore_exploit": aggregate_ee(fx.sheet(method, "explore_exploit", "cold"), COLD_EE_WEIGHTS, cold_ids),
            "grounding": aggregate_grounding(fx.sheet(method, "grounding", "cold")),
        }
        p = dict(zip(printed_cold["columns"], printed))
        row["overall"] = overall(p["understanding"], p["explore_exploit"], p["grounding"])
        unrounded[method] = overall(row["understanding"], row["explore_exploit"], row["grounding"])
        cold[method] = row
        for col in printed_cold["columns"]:
            comps.append(Comparison("cold", method, col, row[col], p[col], TOLERANCES[("cold", col)]))
    for method, printed in printed_warm["rows"].items():
        p = dict(zip(printed_warm["columns"], printed))
        row = {"explore_exploit": aggregate_ee(fx.sheet(method, "explore_exploit", "warm"), WARM_EE_WEIGHTS)}
        if p.get("transferability") is not None:
            row["transferability"] = aggregate_transferability(fx.sheet(method, "transferability", "warm"))
        warm[method] = row
        for col, value in row.items():
            comps.append(Comparison("warm", method, col, value, p[col], TOLERANCES[("warm", col)]))
    return AggregateReport(cold, warm, unrounded, comps)


# -- live runs -------------------------------------------------------------------

DEFAULT_INTENTION = "I want to build an A-share stock market daily portfolio and maximize the excess return."
DEFAULT_ANALYSIS = {"target_metric": "excess_return", "direction": "maximize",
                    "market": "a_share", "freq": "day", "constraints": []}
WARM_GOAL = "minimize max_drawdown"
# five prior experiments run for a different requirement; none is the optimum
WARM_SEED_PLANS = (("RobustZScoreNorm", "LGBModel"), ("ZScoreNorm", "Transformer"), ("none", "LSTM"),
                   ("CSRankNorm", "MLP"), ("MinMaxNorm", "Tabnet"))


def scripted_script(analysis: Mapping[str, Any] | None = None) -> Script:
    """Canned LLM: fixed analysis, no free-form suggestions, accept every plan as grounded."""
    return Script([
        ScriptEntry(match_contains("task: analyze_requirements"),
                    json.dumps(dict(analysis or DEFAULT_ANALYSIS), sort_keys=True), None),
        ScriptEntry(match_contains("task: propose_experiments"), '{"suggestions": []}', None),
        ScriptEntry(match_any(), "{}", None),
    ])


def demo_plan(normalization: str, model: str, market: str = "a_share") -> ExperimentPlan:
    return ExperimentPlan.of([
        ("datahandler", SlotPlan.of("Alpha158", {"normalization": normalization})),
        ("model", SlotPlan.of(model)),
        ("evaluation", SlotPlan.of("backtest", {"market": market, "freq": "day"})),
    ])


def seed_warm_start(kb: KnowledgeBase, env: SimEnvironment,
                    plans: Sequence[tuple[str, str]] = WARM_SEED_PLANS, goal: str = WARM_GOAL) -> list[str]:
    ids = []
    for norm, model in plans:
        plan = demo_plan(norm, model)
        ids.append(kb.add_experiment(kb.make_record(plan, goal, env.evaluate(plan).metrics)))
    return ids


@dataclass
class LiveScore:
    regret: float
    iterations_to_epsilon: int
    pass_rate: float
    violations: int
    attempts: int
    oracle_value: float
    best_value: float | None
    trajectory: list[float]

    def to_dict(self) -> dict:
        return {"regret": self.regret, "iterations_to_epsilon": self.iterations_to_epsilon,
                "pass_rate": self.pass_rate, "violations": self.violations, "attempts": self.attempts,
                "oracle_value": self.oracle_value, "best_value": self.best_value,
                "trajectory": self.trajectory}


def score_live_run(report: CycleReport, oracle: tuple[ExperimentPlan, MetricVector],
                   env: SimEnvironment, epsilon: float = EPSILON) -> LiveScore:
    """Regret, grounding pass rate and constraint violations of one cycle.

    Regret is the direction-adjusted gap between the oracle value and the
    noise-free value of the best plan found (chosen by its observed value).
    ``iterations_to_epsilon`` is the first iteration after which regret is at
    most ``epsilon``, or ``budget + 1`` if that never happens.
    """
    req = report.requirement
    metric, sign = req.target_metric, (1.0 if req.direction == "maximize" else -1.0)
    oracle_value = oracle[1][metric]
    best_plan, best_obs = None, None
    trajectory = []
    hit = len(report.iterations) + 1
    for i, it in enumerate(report.iterations, 1):
        for prop, out in zip(it.proposed.experiments, it.outcomes):
            if out.metrics is None or metric not in out.metrics.entries:
                continue
            v = out.metrics[metric]
            if best_obs is None or sign * v > sign * best_obs:
                best_plan, best_obs = prop.plan, v
        r = math.inf if best_plan is None else sign * (oracle_value - env.true_value(best_plan, metric))
        trajectory.append(r)
        if r <= epsilon + 1e-12 and hit > i:
            hit = i
    outcomes = report.outcomes
    attempts = len(outcomes)
    grounded = sum(o.grounded for o in outcomes)
    schema = env.schema
    violations = sum(not satisfies(p, req.constraints, schema) for p in report.plans) if schema else 0
    return LiveScore(
        regret=trajectory[-1] if trajectory else math.inf,
        iterations_to_epsilon=hit,
        pass_rate=grounded / attempts if attempts else 0.0,
        violations=violations,
        attempts=attempts,
        oracle_value=oracle_value,
        best_value=None if best_plan is None else env.true_value(best_plan, metric),
        trajectory=trajectory,
    )


def live_run(seed: int, policy: str = "utility", warm: bool = False, budget: int = 8, width: int = 2,
             surface: ResponseSurface | None = None, schema: FrameworkSchema | None = None,
             config: AgentConfig | None = None, kb_path: str | Path | None = None,
             intention: str = DEFAULT_INTENTION) -> tuple[CycleReport, LiveScore]:
    """One scripted cycle on the simulated environment, scored against the optimum."""
    schema = schema or load_schema()
    surface = (surface or load_surface()).with_seed(seed)
    env = SimEnvironment(surface, schema)
    kb = KnowledgeBase(kb_path, schema=schema, clock=lambda: "1970-01-01T00:00:00Z")
    try:
        if warm:
            seed_warm_start(kb, env)
        agent = RDAgent(schema, kb, ScriptedBackend(scripted_script()), config=config,
                        policy=policy, seed=seed)
        report = agent.run_cycle(Intention(intention), budget, width, env)
    finally:
        kb.close()
    req = report.requirement
    oracle = best_action(surface, schema, req.constraints, req.target_metric, req.direction)
    return report, score_live_run(report, oracle, env)


@dataclass
class PolicyComparison:
    seeds: list[int]
    utility: list[LiveScore]
    random: list[LiveScore]
    warm: list[LiveScore]
    epsilon: float = EPSILON

    @staticmethod
    def _median(xs: Iterable[float]) -> float:
        return statistics.median(list(xs))

    @property
    def median_regret_utility(self) -> float:
        return self._median(s.regret for s in self.utility)

    @property
    def median_regret_random(self) -> float:
        return self._median(s.regret for s in self.random)

    @property
    def median_iterations_cold(self) -> float:
        return self._median(s.iterations_to_epsilon for s in self.utility)

    @property
    def median_iterations_warm(self) -> float:
        return self._median(s.iterations_to_epsilon for s in self.warm)

    @property
    def utility_beats_random(self) -> bool:
        return self.median_regret_utility <= self.median_regret_random + 1e-12

    @property
    def warm_no_later(self) -> bool:
        return self.median_iterations_warm <= self.median_iterations_cold

    @property
    def violations(self) -> int:
        return sum(s.violations for s in self.utility + self.random + self.warm)

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds, "epsilon": self.epsilon,
            "median_regret": {"utility": self.median_regret_utility, "random": self.median_regret_random},
            "median_iterations_to_epsilon": {"cold": self.median_iterations_cold,
                                             "warm": self.median_iterations_warm},
            "utility_beats_random": self.utility_beats_random,
            "warm_no_later": self.warm_no_later,
            "violations": self.violations,
            "runs": {k: [s.to_dict() for s in v] for k, v in
                     (("utility", self.utility), ("random", self.random), ("warm", self.warm))},
        }

    def render(self) -> str:
        return "\n".join([
            f"seeds: {len(self.seeds)}  epsilon: {self.epsilon}",
            f"median regret  utility {self.median_regret_utility:.4f}  random {self.median_regret_random:.4f}"
            f"  -> {'ok' if self.utility_beats_random else 'FAIL'}",
            f"median iterations to epsilon  cold {self.median_iterations_cold}  warm {self.median_iterations_warm}"
            f"  -> {'ok' if self.warm_no_later else 'FAIL'}",
            f"constraint violations: {self.violations}",
        ]) + "\n"


def compare_policies(seeds: Sequence[int] = tuple(range(20)), budget: int = 8, width: int = 2,
                     surface: ResponseSurface | None = None, schema: FrameworkSchema | None = None,
                     config: AgentConfig | None = None) -> PolicyComparison:
    schema = schema or load_schema()
    surface = surface or load_surface()
    runs = {"utility": [], "random": [], "warm": []}
    for seed in seeds:
        for key, policy, warm in (("utility", "utility", False), ("random", "random", False),
                                  ("warm", "utility", True)):
            _, score = live_run(seed, policy, warm, budget, width, surface, schema, config)
            runs[key].append(score)
    return PolicyComparison(list(seeds), runs["utility"], runs["random"], runs["warm"])
