"""Recompute the summary tables from the per-task expert score sheets.

The sheets ship as checksummed fixtures; aggregation is a plain mean of each
task's (weighted) criteria. The script prints the recomputed tables and the
comparison against the printed values.

    python3 demos/04_reproduce_tables.py
"""

from arda.evalharness import load_fixtures, reproduce_tables

fx = load_fixtures()
print(f"{len(fx.tasks)} tasks, {len(fx.sheets)} score sheets\n")
report = reproduce_tables(fx)
print(report.render())
for s in fx.sheets:
    if s.note:
        print(f"{s.method}/{s.phase}/{s.scenario}: {s.note}")
