"""Independent brute-force references for the knowledge queries.

Similarities are exact dot products (``math.fsum``) rounded to 12 decimals;
ties go to the earlier insertion. Nothing here calls the query code under
test; only the stored embeddings and the embedder are shared.
"""

import itertools
import math
import random
import re

from arda.evalharness import demo_plan
from arda.knowledge import KnowledgeBase, MetricVector
from arda.symlang import ComponentPredicate, decompose

DECIMALS = 12

NORMS = ["none", "MinMaxNorm", "ZScoreNorm", "RobustZScoreNorm", "CSRankNorm"]
MODELS = ["LGBModel", "LSTM", "MLP", "Transformer", "Tabnet", "IGMTF"]
GOALS = ["maximize excess_return", "minimize max_drawdown", "maximize sharpe",
         "maximize excess_return with low drawdown"]
WORDS = ["normalization", "gpu", "memory", "momentum", "factor", "rank", "daily", "market",
         "MinMaxNorm", "LSTM", "tree", "interpretable", "us", "a_share"]
CATEGORIES = ["domain", "infrastructure", "pitfall"]
SETTINGS = ["a_share_day", "us_day"]
METRICS = ["excess_return", "max_drawdown", "sharpe"]


def sim(a, b):
    return round(math.fsum(float(x) * float(y) for x, y in zip(a, b)), DECIMALS)


def ranked(scored, k):
    """``scored`` is (similarity, insertion index, payload); best first."""
    return [(s, p) for s, _, p in sorted(scored, key=lambda t: (-t[0], t[1]))[:k]]


# -- random stores ---------------------------------------------------------------


def random_store(seed, n_items, n_records, schema, path=None):
    rng = random.Random(seed)
    kb = KnowledgeBase(path, schema=schema, clock=lambda: "2024-01-01T00:00:00+00:00")
    for _ in range(n_items):
        key = " ".join(rng.choices(WORDS, k=rng.randint(1, 4)))
        value = None if rng.random() < 0.3 else " ".join(rng.choices(WORDS, k=3))
        kb.add_knowledge(key, value, rng.choice(CATEGORIES))
    for _ in range(n_records):
        plan = demo_plan(rng.choice(NORMS), rng.choice(MODELS), rng.choice(["a_share", "us"]))
        if rng.random() < 0.2:
            plan = plan.replace_slot("model", plan.get("model").with_params(GPU=rng.choice([-1, 0, 1])))
        goal = rng.choice(GOALS)
        if rng.random() < 0.15:
            kb.add_experiment(kb.make_record(plan, goal, None, "failed"))
            continue
        setting = rng.choice(SETTINGS)
        metrics = rng.sample(METRICS, rng.randint(1, 3))
        # three decimals so leaderboard values and gaps tie often
        results = MetricVector({m: round(rng.uniform(-0.1, 0.3), 3) for m in metrics}, setting)
        impl = None
        if rng.random() < 0.7:
            impl = {"fragments": {
                name: {"slot": name, "kind": schema.slot(name).kind, "template": sp.template,
                       "params": sp.param_dict, "code": None, "attempts": 1}
                for name, sp in plan.slots}}
        kb.add_experiment(kb.make_record(plan, goal, results, implementation=impl))
    return kb


def random_predicates(rng, schema):
    preds = []
    for _ in range(rng.randint(0, 2)):
        op = rng.choice(["equals", "allowed", "forbidden", "tag_required", "tag_forbidden", "param_equals"])
        if op == "param_equals":
            preds.append(ComponentPredicate("evaluation", op, (rng.choice(["a_share", "us"]),), "market"))
        elif op in ("tag_required", "tag_forbidden"):
            preds.append(ComponentPredicate("model", op, (rng.choice(["gpu", "cpu", "tree", "attention"]),)))
        else:
            preds.append(ComponentPredicate("model", op, tuple(rng.sample(MODELS, rng.randint(1, 3)))))
    return preds


# -- oracles ---------------------------------------------------------------------


def _effective(plan, slot, schema):
    sp = plan.get(slot)
    tmpl = schema.template(slot, sp.template)
    params = dict(tmpl.defaults) if tmpl else {}
    params.update(sp.param_dict)
    return sp.template, (set(tmpl.tags) if tmpl else set()), params


def holds(pred, plan, schema):
    """Predicate check written against the demo schema's slot names."""
    slots = {"model": ["model"], "evaluation": ["evaluation"], "datahandler": ["datahandler"],
             "data": ["datahandler"]}.get(pred.component, [])
    if not slots:
        return False
    for slot in slots:
        template, tags, params = _effective(plan, slot, schema)
        ok = {
            "equals": lambda: template == pred.values[0],
            "allowed": lambda: template in pred.values,
            "forbidden": lambda: template not in pred.values,
            "tag_required": lambda: all(v in tags for v in pred.values),
            "tag_forbidden": lambda: not any(v in tags for v in pred.values),
            "param_equals": lambda: pred.param in params and params[pred.param] == pred.values[0],
        }[pred.op]()
        if not ok:
            return False
    return True


def oracle_general(kb, query, category, k):
    q = kb.embed(query)
    scored = [(sim(it.embedding, q), i, it.id) for i, it in enumerate(kb.items) if it.category == category]
    return ranked(scored, k)


def oracle_experiments(kb, goal, preds, k, status=None):
    q = kb.embed(goal)
    scored = [(sim(r.component_embeddings["goal"], q), i, r.id) for i, r in enumerate(kb.experiments)
              if (status is None or r.status == status) and all(holds(p, r.plan, kb.schema) for p in preds)]
    return ranked(scored, k)


def oracle_demonstrations(kb, subtask, k):
    q = kb.embed(f"{subtask.slot}: {subtask.slot_plan.render()}")
    scored = []
    for i, r in enumerate(kb.experiments):
        if r.status != "succeeded" or not r.implementation:
            continue
        for slot, frag in r.implementation["fragments"].items():
            if frag["kind"] == subtask.kind:
                scored.append((sim(r.component_embeddings[subtask.kind], q), i, (r.id, slot)))
    return ranked(scored, k)


def oracle_infrastructure(corpus, query, k):
    q = corpus.embedder.embed(query)
    return ranked([(sim(row, q), i, (c.doc_id, c.text))
                   for i, (row, c) in enumerate(zip(corpus.matrix, corpus.chunks))], k)


def oracle_leaderboard(kb, setting, metric):
    rows = [(i, r.id, r.results.entries[metric]) for i, r in enumerate(kb.experiments)
            if r.status == "succeeded" and r.results.evaluation_setting == setting
            and metric in r.results.entries]
    maximize = kb.config.direction(metric) == "maximize"
    rows.sort(key=lambda t: ((-t[2] if maximize else t[2]), t[0]))
    return [(rid, v) for _, rid, v in rows]


def oracle_ideas(kb, goal, preds, k, metric=None):
    """Every pair on every shared leaderboard, ranked by gap, novelty, id pair."""
    records = [r for r in kb.experiments if r.status == "succeeded"
               and all(holds(p, r.plan, kb.schema) for p in preds)]
    if len(records) < 2:
        return []
    if metric is not None:
        metrics = {metric}
    else:
        known = set(kb.config.metric_directions) | {m for r in records for m in r.results.entries}
        words = set(re.findall(r"[a-z0-9_]+", goal.lower()))
        metrics = known & words
    executed = [r.component_embeddings["plan"] for r in kb.experiments]
    novelty_cache = {}

    def novelty(text):
        if text not in novelty_cache:
            q = kb.embed(text)
            best = max(sim(e, q) for e in executed)
            novelty_cache[text] = min(1.0, max(0.0, 1.0 - best))
        return novelty_cache[text]

    pairs = []
    for a, b in itertools.combinations(records, 2):
        if a.plan.configuration() == b.plan.configuration():
            continue
        if a.results.evaluation_setting != b.results.evaluation_setting:
            continue
        for m in set(a.results.entries) & set(b.results.entries):
            if metrics and m not in metrics:
                continue
            pairs.append((abs(a.results.entries[m] - b.results.entries[m]), a, b, m))
    if not pairs:
        return []
    # gap is the primary key: novelty only matters at or above the k-th gap
    cutoff = sorted((p[0] for p in pairs), reverse=True)[min(k, len(pairs)) - 1]
    out = []
    for gap, a, b, m in pairs:
        if gap < cutoff:
            continue
        va, vb = a.results.entries[m], b.results.entries[m]
        maximize = kb.config.direction(m) == "maximize"
        worse, better = (b, a) if (va > vb if maximize else va < vb) else (a, b)
        changed = [n for (n, sp), (_, sq) in zip(worse.plan.slots, better.plan.slots) if sp != sq]
        text = "; ".join(f"{n}: {better.plan.get(n).render()}" for n in changed)
        out.append((gap, novelty(text), tuple(sorted((a.id, b.id))), m, (worse.id, better.id), changed))
    out.sort(key=lambda t: (-t[0], -t[1], t[2], t[3]))
    return [(gap, nov, pair, m, names) for gap, nov, _, m, pair, names in out[:k]]


def subtask_for(kb, rng):
    plan = demo_plan(rng.choice(NORMS), rng.choice(MODELS))
    return rng.choice(decompose(plan, kb.schema))
