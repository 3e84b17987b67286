import copy
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arda.evalharness import demo_plan
from arda.symlang import (
    ComponentPredicate,
    ExperimentPlan,
    ParamDomain,
    PlanError,
    SchemaError,
    SlotPlan,
    apply_delta,
    decompose,
    define_schema,
    diff_plans,
    dump_plan,
    dump_schema,
    enumerate_plans,
    load_plan,
    load_schema,
    satisfies,
    validate_plan,
)

TOY = {
    "schema_version": 1,
    "name": "toy",
    "slots": [
        {"name": "data", "kind": "data", "templates": [{"name": "D"}]},
        {"name": "model", "kind": "model", "templates": [{"name": "M"}]},
        {"name": "eval", "kind": "evaluation", "templates": [{"name": "E"}]},
    ],
}


def toy(**changes):
    d = copy.deepcopy(TOY)
    d.update(changes)
    return d


# -- define_schema ---------------------------------------------------------------


def test_demo_schema_shape(schema):
    assert schema.slot_names == ["datahandler", "model", "evaluation"]
    assert [t.name for t in schema.slot("datahandler").templates] == ["Alpha158"]
    assert [t.name for t in schema.slot("model").templates] == [
        "LGBModel", "LSTM", "MLP", "Transformer", "Tabnet", "IGMTF"]
    assert [t.name for t in schema.slot("evaluation").templates] == ["backtest"]


def test_zero_slots_reports_missing_kind_coverage():
    with pytest.raises(SchemaError, match="missing kind coverage") as exc:
        define_schema(toy(slots=[]))
    assert exc.value.location == "slots"


def test_duplicate_slot_name():
    d = toy()
    d["slots"].append({"name": "model", "kind": "model", "templates": [{"name": "M2"}]})
    with pytest.raises(SchemaError, match="duplicate slot name") as exc:
        define_schema(d)
    assert exc.value.location == "slots[3]"


def test_dangling_template_reference():
    with pytest.raises(SchemaError, match="dangling template reference") as exc:
        define_schema(toy(template_refs=["model.M", "model.Nope"]))
    assert exc.value.location == "template_refs[1]"


@pytest.mark.parametrize("slot_patch, message", [
    ({"templates": []}, "declares no templates"),
    ({"kind": "storage"}, "slot kind must be one of"),
    ({"templates": [{"name": "M", "parameters": {"x": {"type": "integer", "low": 0}},
                     "defaults": {"x": -1}}]}, "outside domain"),
    ({"templates": [{"name": "M", "defaults": {"y": 1}}]}, "undeclared parameter"),
    ({"templates": [{"name": "M", "parameters": {"x": {"type": "weird"}}}]}, "unknown parameter type"),
    ({"templates": [{"name": "M", "parameters": {"x": {"type": "real"}},
                     "search_params": ["x"]}]}, "must be categorical"),
])
def test_schema_invariants_rejected(slot_patch, message):
    d = toy()
    d["slots"][1].update(slot_patch)
    with pytest.raises(SchemaError, match=message):
        define_schema(d)


def test_schema_round_trips_through_file(schema, tmp_path):
    path = tmp_path / "schema.json"
    dump_schema(schema, path)
    assert load_schema(path) == schema


def test_unsupported_schema_version():
    with pytest.raises(SchemaError, match="schema_version"):
        define_schema(toy(schema_version=2))


# -- domains ---------------------------------------------------------------------


@pytest.mark.parametrize("domain, value, ok", [
    (ParamDomain("real", 0, 1, low_inclusive=False), 0.0, False),
    (ParamDomain("real", 0, 1, low_inclusive=False), 1.0, True),
    (ParamDomain("real", 0, 1, low_inclusive=False), -1, False),
    (ParamDomain("integer", 1, None), 3, True),
    (ParamDomain("integer", 1, None), 2.5, False),
    (ParamDomain("integer", 1, None), True, False),
    (ParamDomain("real"), float("nan"), False),
    (ParamDomain("categorical", choices=(True, False)), 1, False),
    (ParamDomain("categorical", choices=("a", None)), None, True),
    (ParamDomain("text"), "anything", True),
    (ParamDomain("text"), 3, False),
])
def test_domain_membership(domain, value, ok):
    assert domain.contains(value) is ok


# -- validate_plan ---------------------------------------------------------------


def test_g1_plan_validates(fixtures, schema):
    report = validate_plan(fixtures.grounding_plans["G1"], schema)
    assert report.valid and report.violations == ()


def test_missing_evaluation_slot(schema):
    plan = ExperimentPlan.of([(n, sp) for n, sp in demo_plan("none", "MLP").slots if n != "evaluation"])
    report = validate_plan(plan, schema)
    assert not report.valid
    assert [(v.slot, v.rule) for v in report.violations] == [("evaluation", "missing-slot")]


def test_learning_rate_out_of_domain(schema):
    plan = demo_plan("none", "LGBModel").replace_slot(
        "model", SlotPlan.of("LGBModel", {"learning_rate": -1}))
    report = validate_plan(plan, schema)
    assert [(v.slot, v.rule) for v in report.violations] == [("model", "domain")]
    assert "(0, 1]" in report.violations[0].message


def test_unknown_template_and_parameter(schema):
    plan = demo_plan("none", "MLP").replace_slot("model", SlotPlan.of("XGBoost"))
    assert [v.rule for v in validate_plan(plan, schema).violations] == ["unknown-template"]
    plan = demo_plan("none", "MLP").replace_slot("model", SlotPlan.of("MLP", {"depth": 3}))
    assert [v.rule for v in validate_plan(plan, schema).violations] == ["unknown-parameter"]


def test_extension_is_flagged_not_rejected(schema):
    plan = demo_plan("none", "MLP").replace_slot(
        "model", SlotPlan.of("MyGRU", {"units": 7}, extension="a GRU with attention pooling"))
    report = validate_plan(plan, schema)
    assert report.valid
    assert [n.rule for n in report.notes] == ["extension"]
    assert "unverifiable statically" in report.notes[0].message


def test_duplicate_and_unknown_slots(schema):
    slots = list(demo_plan("none", "MLP").slots)
    plan = ExperimentPlan.of(slots + [slots[1], ("optimizer", SlotPlan.of("Adam"))])
    rules = {v.rule for v in validate_plan(plan, schema).violations}
    assert {"duplicate-slot", "unknown-slot"} <= rules


def test_role_violations(schema):
    plan = demo_plan("none", "MLP").with_roles("model", ["model", "datahandler"])
    assert [v.rule for v in validate_plan(plan, schema).violations] == ["target-is-control"]
    plan = demo_plan("none", "MLP").with_roles("optimizer", ["ghost"])
    assert {v.rule for v in validate_plan(plan, schema).violations} == {"target-slot", "control-slot"}


def test_all_grounding_fixture_plans_validate(fixtures, schema):
    assert len(fixtures.grounding_plans) == 20
    for tid, plan in fixtures.grounding_plans.items():
        assert validate_plan(plan, schema).valid, tid


# -- decompose -------------------------------------------------------------------


def test_decompose_order_and_roles(schema):
    plan = demo_plan("MinMaxNorm", "LGBModel").with_roles("datahandler", ["model", "evaluation"])
    subs = decompose(plan, schema)
    assert [s.slot for s in subs] == schema.slot_names
    assert [s.role for s in subs] == ["target", "control", "control"]
    assert all(s.extension_interface == schema.slot(s.slot).extension_interface for s in subs)


def test_decompose_g11_carries_tabnet_parameters(fixtures, schema):
    subs = decompose(fixtures.grounding_plans["G11"], schema)
    model = next(s for s in subs if s.slot == "model")
    assert model.slot_plan.template == "Tabnet"
    assert model.slot_plan.param_dict == {
        "n_d": 8, "n_a": 8, "n_steps": 3, "gamma": 1.3, "n_independent": 2, "n_shared": 2,
        "epsilon": 1e-15, "virtual_batch_size": 128, "momentum": 0.02, "mask_type": "sparsemax",
    }


def test_decompose_rejects_invalid_plan(schema):
    plan = demo_plan("none", "MLP").replace_slot("model", SlotPlan.of("XGBoost"))
    with pytest.raises(PlanError):
        decompose(plan, schema)


# -- diff_plans ------------------------------------------------------------------


def test_g1_g2_differ_only_in_datahandler(fixtures):
    delta = diff_plans(fixtures.grounding_plans["G1"], fixtures.grounding_plans["G2"])
    assert delta.changed_names == ["datahandler"]
    assert delta.unchanged_slots == ("model", "evaluation")
    _, before, after = delta.changed_slots[0]
    assert before.param_dict["normalization"] == "none"
    assert after.param_dict["normalization"] == "MinMaxNorm"


def test_diff_all_slots():
    a = demo_plan("none", "MLP")
    b = demo_plan("CSRankNorm", "LSTM", market="us")
    assert diff_plans(a, b).changed_names == ["datahandler", "model", "evaluation"]


def test_diff_requires_same_slots():
    a = demo_plan("none", "MLP")
    b = ExperimentPlan.of(a.slots[:2])
    with pytest.raises(PlanError):
        diff_plans(a, b)


def test_extension_text_counts_as_a_change():
    a = demo_plan("none", "MLP")
    b = a.replace_slot("model", SlotPlan.of("MLP", extension="wider hidden layers"))
    assert diff_plans(a, b).changed_names == ["model"]


# -- predicates and enumeration --------------------------------------------------


def test_predicate_ops(schema):
    plan = demo_plan("none", "LSTM")
    P = ComponentPredicate
    assert P("model", "equals", ("LSTM",)).holds(plan, schema)
    assert P("model", "allowed", ("MLP", "LSTM")).holds(plan, schema)
    assert not P("model", "forbidden", ("LSTM",)).holds(plan, schema)
    assert P("model", "tag_required", ("gpu", "recurrent")).holds(plan, schema)
    assert not P("model", "tag_forbidden", ("gpu",)).holds(plan, schema)
    assert P("evaluation", "param_equals", ("a_share",), "market").holds(plan, schema)
    assert P("datahandler", "param_equals", (True,), "fillna").holds(plan, schema)  # schema default
    assert not P("optimizer", "equals", ("Adam",)).holds(plan, schema)


def test_predicate_rejects_bad_op():
    with pytest.raises(ValueError):
        ComponentPredicate("model", "resembles", ("MLP",))
    with pytest.raises(ValueError):
        ComponentPredicate("model", "param_equals", (1,))


def test_enumerate_grid(schema):
    grid = enumerate_plans(schema)
    assert len(grid) == 5 * 6
    assert len({p.configuration() for p in grid}) == 30
    no_gpu = enumerate_plans(schema, [ComponentPredicate("model", "tag_forbidden", ("gpu",))])
    assert {p.get("model").template for p in no_gpu} == {"LGBModel", "MLP"}
    us = enumerate_plans(schema, [ComponentPredicate("evaluation", "param_equals", ("us",), "market")])
    assert len(us) == 30 and all(p.get("evaluation").param_dict["market"] == "us" for p in us)
    assert enumerate_plans(schema, [ComponentPredicate("model", "forbidden",
                                                       tuple(t.name for t in schema.slot("model").templates))]) == []
    assert len(enumerate_plans(schema, limit=4)) == 4


# -- files -----------------------------------------------------------------------


def test_plan_file_round_trip(tmp_path, fixtures):
    plan = fixtures.grounding_plans["G12"].with_roles("model", ["datahandler", "evaluation"], "h")
    dump_plan(plan, tmp_path / "p.json")
    assert json.loads((tmp_path / "p.json").read_text())["schema_version"] == 1
    assert load_plan(tmp_path / "p.json") == plan


# -- properties ------------------------------------------------------------------

NORMS = ["none", "MinMaxNorm", "ZScoreNorm", "RobustZScoreNorm", "CSRankNorm"]
MODELS = ["LGBModel", "LSTM", "MLP", "Transformer", "Tabnet", "IGMTF"]

slot_plans = st.builds(
    lambda n, m, mk, lr, ext: demo_plan(n, m, mk).replace_slot(
        "model", SlotPlan.of(m, {} if lr is None else {"lr": lr}, ext)),
    st.sampled_from(NORMS), st.sampled_from(MODELS), st.sampled_from(["a_share", "us"]),
    st.one_of(st.none(), st.floats(-1, 2, allow_nan=False)),
    st.one_of(st.none(), st.just("custom layer")),
)


@settings(max_examples=200, deadline=None)
@given(slot_plans, slot_plans)
def test_diff_symmetry(p, q):
    d1, d2 = diff_plans(p, q), diff_plans(q, p)
    assert d1.changed_names == d2.changed_names
    assert [(s, a, b) for s, b, a in d2.changed_slots] == list(d1.changed_slots)
    assert set(d1.changed_names) | set(d1.unchanged_slots) == {"datahandler", "model", "evaluation"}
    assert not set(d1.changed_names) & set(d1.unchanged_slots)
    assert diff_plans(p, p).is_empty
    assert apply_delta(p, d1).configuration() == q.configuration()


@settings(max_examples=200, deadline=None)
@given(slot_plans)
def test_validation_is_pure_and_round_trip_stable(schema, p):
    r1, r2 = validate_plan(p, schema), validate_plan(p, schema)
    assert r1 == r2
    again = ExperimentPlan.from_dict(json.loads(p.to_json()))
    assert again == p
    assert validate_plan(again, schema) == r1
    if r1.valid:
        assert len(decompose(p, schema)) == len(schema.slots)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["model", "datahandler", "evaluation", "data"]),
                          st.sampled_from(["equals", "allowed", "forbidden", "tag_required", "tag_forbidden"]),
                          st.lists(st.sampled_from(MODELS + ["gpu", "cpu", "Alpha158", "backtest"]),
                                   min_size=1, max_size=3)),
                max_size=3))
def test_enumeration_matches_filtered_grid(schema, raw):
    preds = [ComponentPredicate(c, op, tuple(v)) for c, op, v in raw]
    full = enumerate_plans(schema)
    assert enumerate_plans(schema, preds) == [p for p in full if satisfies(p, preds, schema)]
