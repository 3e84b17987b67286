"""Requirement analysis turns a hardware constraint into a plan predicate.

The intention says there is no GPU. Analysis emits a ``tag_forbidden gpu``
predicate whose provenance is a phrase of the intention, and every plan the
cycle proposes respects it.

    python3 demos/02_constrained_intention.py
"""

import json
from importlib import resources

from arda.agentloop import Intention, RDAgent
from arda.evalharness import load_fixtures
from arda.knowledge import KnowledgeBase, import_knowledge
from arda.llmclient import Script, ScriptedBackend
from arda.simenv import SimEnvironment, best_action, load_surface
from arda.symlang import enumerate_plans, load_schema, satisfies

schema = load_schema()
surface = load_surface()
script = json.loads(resources.files("arda.data").joinpath("demo_script.json").read_text(encoding="utf-8"))
kb = KnowledgeBase(schema=schema)
import_knowledge(kb)
agent = RDAgent(schema, kb, ScriptedBackend(Script.from_dict(script)))

text = load_fixtures().task("U6").text
print(f"Intention: {text}\n")
print("Domain notes retrieved for it:")
for hit in kb.query_general(text, "domain", 3):
    print(f"  {hit.score:.3f}  {hit.item.key}")

spec = agent.analyze_requirements(Intention(text))
print(f"\nTarget: {spec.direction} {spec.target_metric} on {spec.evaluation_setting}")
for c in spec.constraints:
    print(f"Constraint: {c.describe()}  (from: {c.provenance})")

grid = enumerate_plans(schema, spec.constraints)
print(f"\nAdmissible plans: {len(grid)} of {len(enumerate_plans(schema))}")
report = agent.run_cycle(Intention(text), budget=2, k=2, env=SimEnvironment(surface, schema), spec=spec)
bad = [p for p in report.plans if not satisfies(p, spec.constraints, schema)]
print(f"Proposed {len(report.plans)} plans, {len(bad)} violate a constraint.")
plan, vec = best_action(surface, schema, spec.constraints)
print(f"Constrained optimum: {plan.render()} excess_return={vec['excess_return']:.4f}")
