"""Records from a different goal still help: warm versus cold start.

Five experiments run earlier for a drawdown goal seed the knowledge base.
Their leaderboard gaps become idea candidates, marked cross-goal, which the
proposer transfers onto new plans. The script compares how many iterations
each start needs to get within epsilon of the optimum.

    python3 demos/03_warm_start_transfer.py
"""

import statistics

from arda.evalharness import EPSILON, live_run

seeds = range(10)
cold = [live_run(s, warm=False)[1] for s in seeds]
warm_runs = [live_run(s, warm=True) for s in seeds]
warm = [score for _, score in warm_runs]

print(f"epsilon = {EPSILON}")
print(f"{'seed':>4} {'cold iters':>11} {'warm iters':>11} {'cold regret':>12} {'warm regret':>12}")
for s, c, w in zip(seeds, cold, warm):
    print(f"{s:>4} {c.iterations_to_epsilon:>11} {w.iterations_to_epsilon:>11} {c.regret:>12.4f} {w.regret:>12.4f}")
print(f"median iterations: cold {statistics.median(c.iterations_to_epsilon for c in cold)}, "
      f"warm {statistics.median(w.iterations_to_epsilon for w in warm)}")

report, _ = warm_runs[0]
print("\nWarm seed 0: proposals that came from idea candidates")
for i, it in enumerate(report.iterations, 1):
    for p in it.proposed.experiments:
        ideas = [s for s in p.provenance if "idea:" in s]
        if ideas:
            print(f"  iteration {i}: {p.plan.render()}\n    <- {', '.join(ideas)}")
