"""One R&D cycle from an empty knowledge base.

The scripted backend plays the LLM, the simulated environment plays the
backtest. Every attempted experiment lands in the knowledge base, and the
report shows which plan each iteration tried and why it was chosen.

    python3 demos/01_cold_start_cycle.py
"""

from arda.agentloop import Intention, RDAgent
from arda.evalharness import DEFAULT_INTENTION, scripted_script
from arda.knowledge import KnowledgeBase, import_knowledge
from arda.llmclient import ScriptedBackend
from arda.simenv import SimEnvironment, best_action, load_surface
from arda.symlang import load_schema

schema = load_schema()
surface = load_surface()
env = SimEnvironment(surface, schema)
kb = KnowledgeBase(schema=schema)
import_knowledge(kb)

agent = RDAgent(schema, kb, ScriptedBackend(scripted_script()))
report = agent.run_cycle(Intention(DEFAULT_INTENTION), budget=4, k=2, env=env)
print(report.render())

print("Utility breakdown of the first group:")
for p in report.iterations[0].proposed.experiments:
    u = p.utility
    print(f"  {p.plan.render()}\n    exploit {u.exploitation:.3f}  explore {u.exploration:.3f}  "
          f"future {u.future_value:.3f}  -> {u.aggregate:.3f}  via {', '.join(p.provenance)}")

oracle_plan, oracle_vec = best_action(surface, schema)
print(f"\nNoise-free optimum: {oracle_plan.render()} excess_return={oracle_vec['excess_return']:.4f}")
print(f"Knowledge base now holds {len(kb.experiments)} experiments and {len(kb.items)} notes.")
