import itertools
import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arda.agentloop import RunnableProject
from arda.evalharness import demo_plan
from arda.symlang import ComponentPredicate, ExperimentPlan, SlotPlan, define_schema, enumerate_plans
from arda.simenv import (
    ResponseSurface,
    SimEnvironment,
    SurfaceError,
    best_action,
    evaluation_setting_of,
    load_surface,
    plan_features,
)

NORMS = ["none", "MinMaxNorm", "ZScoreNorm", "RobustZScoreNorm", "CSRankNorm"]
MODELS = ["LGBModel", "LSTM", "MLP", "Transformer", "Tabnet", "IGMTF"]

MINI_SCHEMA = define_schema({"slots": [
    {"name": "d", "kind": "data", "templates": [{"name": "D1"}, {"name": "D2"}]},
    {"name": "m", "kind": "model", "templates": [{"name": "M1"}, {"name": "M2"}, {"name": "M3"}]},
    {"name": "e", "kind": "evaluation", "templates": [{"name": "E"}]},
]})


def mini_surface(base=None, inter=(), noise=0.0, seed=0):
    base = base or {"D1": 0.1, "D2": 0.3, "M1": 1.0, "M2": 0.5, "M3": 0.7, "E": 0.0}
    return ResponseSurface(
        metrics={"y": {"direction": "maximize", "noise_sd": 1.0}},
        base_effects={t: {"y": v} for t, v in base.items()},
        interactions=tuple((frozenset(p), {"y": v}) for p, v in inter),
        noise_scale=noise, seed=seed)


def mini_plan(d, m):
    return define_plan([("d", d), ("m", m), ("e", "E")])


def define_plan(items):
    return ExperimentPlan.of([(n, SlotPlan.of(t)) for n, t in items])


# -- evaluate --------------------------------------------------------------------


def test_noise_free_sum_of_base_effects():
    env = SimEnvironment(mini_surface(), MINI_SCHEMA)
    result = env.evaluate(mini_plan("D2", "M3"))
    assert result.metrics["y"] == 0.3 + 0.7 + 0.0
    assert result.trace["y"] == {"base": 0.3 + 0.7 + 0.0, "modifiers": 0.0, "interactions": 0.0, "noise": 0.0}


def test_g1_g2_differ_by_the_minmaxnorm_effect(fixtures, quiet_env):
    t1 = quiet_env.evaluate(fixtures.grounding_plans["G1"]).trace
    t2 = quiet_env.evaluate(fixtures.grounding_plans["G2"]).trace
    diff = {m: {p: round(t2[m][p] - t1[m][p], 12) for p in t1[m]} for m in t1}
    # frozen from the shipped surface: only the MinMaxNorm modifier moves
    assert diff == {
        "excess_return": {"base": 0.0, "modifiers": 0.01, "interactions": 0.0, "noise": 0.0},
        "max_drawdown": {"base": 0.0, "modifiers": -0.01, "interactions": 0.0, "noise": 0.0},
        "sharpe": {"base": 0.0, "modifiers": 0.12, "interactions": 0.0, "noise": 0.0},
        "training_time": {"base": 0.0, "modifiers": 1.0, "interactions": 0.0, "noise": 0.0},
    }


def test_seeds_change_noise_only(env, plan):
    r1, r2 = env.evaluate(plan, seed=1), env.evaluate(plan, seed=2)
    assert r1.metrics.entries != r2.metrics.entries
    for m in r1.trace:
        for part in ("base", "modifiers", "interactions"):
            assert r1.trace[m][part] == r2.trace[m][part]
        assert math.isfinite(r1.metrics[m]) and math.isfinite(r2.metrics[m])


def test_noise_is_pinned(env, plan):
    # frozen PCG64 draw for (seed 0, this plan); guards generator drift
    assert round(env.evaluate(plan, seed=0).trace["excess_return"]["noise"], 12) == 0.000651942783
    a = env.evaluate(plan, seed=0).metrics.entries
    b = SimEnvironment(load_surface(), env.schema).evaluate(plan, seed=0).metrics.entries
    assert a == b


def test_setting_and_features(schema):
    plan = demo_plan("MinMaxNorm", "LGBModel", market="us")
    assert evaluation_setting_of(plan, schema) == "us_day"
    feats = plan_features(plan, schema)
    assert "Alpha158.normalization=MinMaxNorm" in feats
    assert "LGBModel.early_stopping=true" in feats  # schema default overlaid
    assert "backtest.market=us" in feats


def test_errors(env, schema):
    with pytest.raises(SurfaceError, match="absent from the surface"):
        env.evaluate(demo_plan("none", "MLP").replace_slot("model", SlotPlan.of("XGBoost", extension="x")))
    with pytest.raises(ValueError, match="not runnable"):
        env.evaluate(RunnableProject(demo_plan("none", "MLP")))
    with pytest.raises(SurfaceError, match="undeclared metric"):
        ResponseSurface({"y": {}}, {"A": {"z": 1.0}})
    with pytest.raises(SurfaceError, match="non-finite"):
        ResponseSurface({"y": {}}, {"A": {"y": float("nan")}})
    with pytest.raises(SurfaceError):
        ResponseSurface({"y": {}}, {"A": {"y": 1.0}}, noise_scale=-1)


def test_surface_round_trip(surface, tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps(surface.to_dict()))
    assert load_surface(path) == surface


# -- best_action -----------------------------------------------------------------


def independent_argmax(surface, schema, preds=()):
    """Second enumerator: itertools over template and search-parameter choices."""
    env = SimEnvironment(surface.with_noise(0.0), schema)
    per_slot = []
    for slot in schema.slots:
        opts = []
        for t in slot.templates:
            if t.search_params:
                (p,) = t.search_params
                opts += [(slot.name, SlotPlan.of(t.name, {p: c})) for c in t.parameters[p].choices]
            else:
                opts.append((slot.name, SlotPlan.of(t.name)))
        per_slot.append(opts)
    best = None
    for combo in itertools.product(*per_slot):
        plan = ExperimentPlan.of(list(combo))
        if not all(p.holds(plan, schema) for p in preds):
            continue
        v = env.evaluate(plan).metrics["y" if "y" in surface.metrics else "excess_return"]
        if best is None or v > best[1]:
            best = (plan, v)
    return best


def test_single_plan_grid():
    schema = define_schema({"slots": [
        {"name": "d", "kind": "data", "templates": [{"name": "D1"}]},
        {"name": "m", "kind": "model", "templates": [{"name": "M1"}]},
        {"name": "e", "kind": "evaluation", "templates": [{"name": "E"}]}]})
    plan, vec = best_action(mini_surface(), schema, metric="y")
    assert plan == mini_plan("D1", "M1") and vec["y"] == 0.1 + 1.0


def test_two_by_three_grid_matches_independent_enumeration():
    surface = mini_surface(inter=[(("D2", "M2"), 0.9)])
    plan, vec = best_action(surface, MINI_SCHEMA, metric="y")
    ref_plan, ref_value = independent_argmax(surface, MINI_SCHEMA)
    assert plan == ref_plan and vec["y"] == ref_value
    assert plan == mini_plan("D2", "M2")


def test_constraints_move_the_optimum(surface, schema):
    free, vec0 = best_action(surface, schema)
    assert free == ExperimentPlan.of([
        ("datahandler", SlotPlan.of("Alpha158", {"normalization": "ZScoreNorm"})),
        ("model", SlotPlan.of("LSTM")), ("evaluation", SlotPlan.of("backtest"))])
    assert round(vec0["excess_return"], 12) == 0.111
    no_gpu = [ComponentPredicate("model", "tag_forbidden", ("gpu",))]
    plan, vec = best_action(surface, schema, no_gpu)
    assert plan.get("model").template in ("LGBModel", "MLP")
    assert all(p.holds(plan, schema) for p in no_gpu)
    ref_plan, ref_value = independent_argmax(surface, schema, no_gpu)
    assert plan == ref_plan and vec["excess_return"] == ref_value
    with pytest.raises(SurfaceError, match="empty"):
        best_action(surface, schema, [ComponentPredicate("model", "forbidden", tuple(MODELS))])


def test_optimum_is_not_a_best_marginal(surface, schema):
    """Exploration must pay off: no single best template leads to the optimum."""
    models = {m: surface.base_effects[m]["excess_return"] for m in MODELS}
    norms = {n: surface.modifiers[f"Alpha158.normalization={n}"]["excess_return"] for n in NORMS}
    opt, _ = best_action(surface, schema)
    assert max(models, key=models.get) == "LGBModel" != opt.get("model").template
    assert max(norms, key=norms.get) == "MinMaxNorm" != opt.get("datahandler").param_dict["normalization"]
    assert len(enumerate_plans(schema)) == 30


# -- invariants ------------------------------------------------------------------

plans = st.builds(demo_plan, st.sampled_from(NORMS), st.sampled_from(MODELS), st.sampled_from(["a_share", "us"]))


@settings(max_examples=150, deadline=None)
@given(plans, st.integers(0, 2**40), st.floats(0, 5))
def test_determinism_and_trace_conservation(surface, schema, plan, seed, noise):
    env = SimEnvironment(surface.with_noise(noise), schema)
    a, b = env.evaluate(plan, seed=seed), env.evaluate(plan, seed=seed)
    assert a.metrics.entries == b.metrics.entries
    for m, parts in a.trace.items():
        assert abs(sum(parts.values()) - a.metrics[m]) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(MODELS + ["Alpha158", "backtest"]), st.floats(0, 1), plans)
def test_raising_a_base_effect_never_lowers_the_metric(surface, schema, template, bump, plan):
    raised = dict(surface.base_effects)
    raised[template] = dict(raised[template], excess_return=raised[template]["excess_return"] + bump)
    higher = ResponseSurface(surface.metrics, raised, surface.modifiers, surface.interactions, 0.0)
    before = SimEnvironment(surface.with_noise(0.0), schema).evaluate(plan).metrics["excess_return"]
    after = SimEnvironment(higher, schema).evaluate(plan).metrics["excess_return"]
    assert after >= before
