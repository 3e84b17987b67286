"""Knowledge base for the R&D loop.

Holds two append-only logs: general knowledge items (key, optional value,
category) and executed experiment records. Every query ranks by cosine
similarity of unit embeddings; similarities are rounded to 12 decimals and
exact ties go to the earlier insertion.

On disk a knowledge base is a directory::

    kb/config            JSON: embedding dim, provider, metric directions
    kb/knowledge.log     one JSON knowledge item per line
    kb/experiments.log   one JSON experiment record per line

The logs are the source of truth. Indexes and leaderboards are rebuilt from
them when the directory is opened.
"""

from __future__ import annotations

import json
import math
import re
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from arda.embedding import DEFAULT_DIM, SIMILARITY_DECIMALS, make_embedder
from arda.symlang import (
    ComponentPredicate,
    ExperimentPlan,
    FrameworkSchema,
    PlanDelta,
    SlotPlan,
    SubTask,
    diff_plans,
    satisfies,
)

RECORD_VERSION = 1
COMPONENTS = ("data", "model", "evaluation", "goal")
STATUS_SUCCEEDED = "succeeded"
STATUS_FAILED = "failed"

DEFAULT_METRIC_DIRECTIONS = {
    "excess_return": "maximize",
    "annualized_return": "maximize",
    "max_drawdown": "minimize",
    "sharpe": "maximize",
    "information_ratio": "maximize",
    "ic": "maximize",
    "icir": "maximize",
    "training_time": "minimize",
}


class KnowledgeError(ValueError):
    pass


@dataclass(frozen=True)
class MetricVector:
    entries: Mapping[str, float]
    evaluation_setting: str

    def __post_init__(self):
        for name, value in self.entries.items():
            if not math.isfinite(value):
                raise KnowledgeError(f"metric {name} is not finite: {value!r}")

    def __getitem__(self, name: str) -> float:
        return self.entries[name]

    def to_dict(self) -> dict:
        return {"entries": dict(sorted(self.entries.items())),
                "evaluation_setting": self.evaluation_setting}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> MetricVector:
        return cls(dict(d["entries"]), d["evaluation_setting"])


@dataclass(frozen=True)
class KnowledgeItem:
    key: str
    category: str
    value: str | None = None
    embedding: np.ndarray | None = field(default=None, compare=False, repr=False)
    id: str | None = None


@dataclass
class ExperimentRecord:
    id: str
    components: dict[str, str]
    component_embeddings: dict[str, np.ndarray]
    plan: ExperimentPlan
    results: MetricVector | None
    status: str
    created_at: str
    implementation: dict | None = None

    def to_dict(self) -> dict:
        return {
            "record_version": RECORD_VERSION,
            "id": self.id,
            "components": dict(self.components),
            "component_embeddings": {k: [float(x) for x in v]
                                     for k, v in sorted(self.component_embeddings.items())},
            "plan": self.plan.to_dict(),
            "implementation": self.implementation,
            "results": self.results.to_dict() if self.results else None,
            "status": self.status,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ExperimentRecord:
        return cls(
            id=d["id"],
            components=dict(d["components"]),
            component_embeddings={k: np.asarray(v, dtype=float)
                                  for k, v in d["component_embeddings"].items()},
            plan=ExperimentPlan.from_dict(d["plan"]),
            results=MetricVector.from_dict(d["results"]) if d.get("results") else None,
            status=d["status"],
            created_at=d["created_at"],
            implementation=d.get("implementation"),
        )


@dataclass(frozen=True)
class Hit:
    item: Any
    score: float


@dataclass(frozen=True)
class Leaderboard:
    evaluation_setting: str
    metric: str
    direction: str
    rows: tuple  # (experiment id, value), best first

    def rank_of(self, exp_id: str) -> int | None:
        for i, (rid, _) in enumerate(self.rows, 1):
            if rid == exp_id:
                return i
        return None


@dataclass(frozen=True)
class IdeaCandidate:
    delta: PlanDelta
    source_pair: tuple[str, str]  # (worse, better)
    gap: float
    novelty: float
    evaluation_setting: str
    metric: str

    def describe(self) -> str:
        return (f"{self.source_pair[0]} -> {self.source_pair[1]} on {self.metric} "
                f"(gap {self.gap:.4g}): {self.delta.describe()}")


@dataclass(frozen=True)
class Demonstration:
    record_id: str
    slot: str
    plan_fragment: SlotPlan
    artifact: Mapping[str, Any]
    score: float


@dataclass
class KBConfig:
    embedding_dim: int = DEFAULT_DIM
    provider: str = "hash"
    metric_directions: dict[str, str] = field(
        default_factory=lambda: dict(DEFAULT_METRIC_DIRECTIONS))
    transfer_similarity: float = 0.8

    def direction(self, metric: str) -> str:
        return self.metric_directions.get(metric, "maximize")

    def to_dict(self) -> dict:
        return {
            "config_version": 1,
            "embedding_dim": self.embedding_dim,
            "provider": self.provider,
            "metric_directions": dict(sorted(self.metric_directions.items())),
            "transfer_similarity": self.transfer_similarity,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> KBConfig:
        return cls(
            embedding_dim=d.get("embedding_dim", DEFAULT_DIM),
            provider=d.get("provider", "hash"),
            metric_directions=dict(d.get("metric_directions") or DEFAULT_METRIC_DIRECTIONS),
            transfer_similarity=d.get("transfer_similarity", 0.8),
        )


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _scores(matrix: np.ndarray, query: np.ndarray) -> list[float]:
    if len(matrix) == 0:
        return []
    return [round(float(s), SIMILARITY_DECIMALS) for s in matrix @ query]


def _top(scored: Sequence[tuple[float, int, Any]], k: int) -> list[Hit]:
    ranked = sorted(scored, key=lambda t: (-t[0], t[1]))
    return [Hit(item, score) for score, _, item in ranked[:k]]


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError("k must be at least 1")


def goal_text(metric: str, direction: str) -> str:
    return f"{direction} {metric}"


def component_texts(plan: ExperimentPlan, schema: FrameworkSchema | None, goal: str) -> dict[str, str]:
    """Render a plan's data/model/evaluation components plus its goal."""
    kinds: dict[str, list[str]] = {"data": [], "model": [], "evaluation": []}
    for name, sp in plan.slots:
        if schema is not None and name in schema.slot_names:
            kind = schema.slot(name).kind
        else:
            kind = name if name in kinds else "data"
        kinds[kind].append(f"{name}: {sp.render()}")
    out = {k: "; ".join(v) for k, v in kinds.items()}
    out["goal"] = goal
    return out


class KnowledgeBase:
    """Append-only knowledge store with similarity queries.

    Args:
        path: directory to persist into; ``None`` keeps everything in memory.
        schema: framework schema used to classify slots and evaluate tag
            predicates.
        config: embedding and metric-direction settings. When ``path``
            already holds a config, that one wins.
        embedder: overrides the provider named in ``config``.
        clock: returns the ``created_at`` timestamp for new records.
    """

    def __init__(self, path: str | Path | None = None, schema: FrameworkSchema | None = None,
                 config: KBConfig | None = None, embedder=None,
                 clock: Callable[[], str] | None = None):
        self.path = Path(path) if path is not None else None
        self.schema = schema
        self.clock = clock or _utcnow
        self._lock = threading.RLock()
        self._items: list[KnowledgeItem] = []
        self._item_vecs: list[np.ndarray] = []
        self._records: list[ExperimentRecord] = []
        self._record_index: dict[str, int] = {}
        self._boards: dict[tuple[str, str], list[tuple[int, str, float]]] = {}
        self._plan_cache: dict[str, np.ndarray] = {}
        if self.path is not None:
            self.path.mkdir(parents=True, exist_ok=True)
            cfg_file = self.path / "config"
            if cfg_file.exists():
                config = KBConfig.from_dict(json.loads(cfg_file.read_text(encoding="utf-8")))
            else:
                config = config or KBConfig()
                cfg_file.write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")
        self.config = config or KBConfig()
        self.embedder = embedder or make_embedder(self.config.provider, self.config.embedding_dim)
        if self.embedder.dim != self.config.embedding_dim:
            raise KnowledgeError("embedder dimension does not match configuration")
        if self.path is not None:
            self._replay()

    # -- persistence --------------------------------------------------------

    def _replay(self) -> None:
        for line in self._read_log("knowledge.log"):
            d = json.loads(line)
            self._insert_item(KnowledgeItem(d["key"], d["category"], d.get("value"),
                                            np.asarray(d["embedding"], dtype=float), d["id"]))
        for line in self._read_log("experiments.log"):
            self._insert_record(ExperimentRecord.from_dict(json.loads(line)))

    def _read_log(self, name: str) -> list[str]:
        f = self.path / name
        if not f.exists():
            return []
        return [ln for ln in f.read_text(encoding="utf-8").splitlines() if ln.strip()]

    def _append(self, name: str, doc: Mapping[str, Any]) -> None:
        if self.path is None:
            return
        with open(self.path / name, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(doc, sort_keys=True) + "\n")

    def close(self) -> None:
        """Nothing is buffered; kept for symmetry with :meth:`open`."""

    @classmethod
    def open(cls, path: str | Path, schema: FrameworkSchema | None = None, **kwargs) -> KnowledgeBase:
        return cls(path, schema=schema, **kwargs)

    # -- embeddings ---------------------------------------------------------

    def embed(self, text: str) -> np.ndarray:
        return self.embedder.embed(text)

    def _check_vector(self, vec: np.ndarray, what: str) -> np.ndarray:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.config.embedding_dim,):
            raise KnowledgeError(f"{what}: embedding dimension {vec.shape} != "
                                 f"({self.config.embedding_dim},)")
        if abs(float(np.linalg.norm(vec)) - 1.0) > 1e-9:
            raise KnowledgeError(f"{what}: embedding is not unit length")
        return vec

    # -- general knowledge --------------------------------------------------

    def put_knowledge(self, item: KnowledgeItem) -> str:
        """Store a key/value item; the key is embedded when no embedding is given."""
        if not item.category:
            raise KnowledgeError("knowledge item needs a category")
        vec = item.embedding if item.embedding is not None else self.embed(item.key)
        vec = self._check_vector(vec, f"knowledge item {item.key!r}")
        with self._lock:
            item_id = f"k-{len(self._items) + 1:05d}"
            stored = KnowledgeItem(item.key, item.category, item.value, vec, item_id)
            self._append("knowledge.log", {
                "record_version": RECORD_VERSION, "id": item_id, "key": item.key,
                "value": item.value, "category": item.category,
                "embedding": [float(x) for x in vec],
            })
            self._insert_item(stored)
        return item_id

    def add_knowledge(self, key: str, value: str | None = None, category: str = "domain") -> str:
        return self.put_knowledge(KnowledgeItem(key, category, value))

    def _insert_item(self, item: KnowledgeItem) -> None:
        self._items.append(item)
        self._item_vecs.append(item.embedding)

    @property
    def items(self) -> list[KnowledgeItem]:
        with self._lock:
            return list(self._items)

    def query_general(self, query: str, category: str, k: int) -> list[Hit]:
        _check_k(k)
        with self._lock:
            pool = [(i, it) for i, it in enumerate(self._items) if it.category == category]
            vecs = [self._item_vecs[i] for i, _ in pool]
        if not pool:
            return []
        sims = _scores(np.vstack(vecs), self.embed(query))
        return _top([(s, i, it) for s, (i, it) in zip(sims, pool)], k)

    # -- experiments --------------------------------------------------------

    def __len__(self) -> int:
        return len(self._records)

    @property
    def experiments(self) -> list[ExperimentRecord]:
        with self._lock:
            return list(self._records)

    def get_experiment(self, exp_id: str) -> ExperimentRecord:
        with self._lock:
            if exp_id not in self._record_index:
                raise KeyError(exp_id)
            return self._records[self._record_index[exp_id]]

    def next_experiment_id(self) -> str:
        with self._lock:
            return f"exp-{len(self._records) + 1:05d}"

    def make_record(self, plan: ExperimentPlan, goal: str, results: MetricVector | None,
                    status: str = STATUS_SUCCEEDED, implementation: dict | None = None,
                    exp_id: str | None = None) -> ExperimentRecord:
        """Render and embed the components of an executed plan."""
        comps = component_texts(plan, self.schema, goal)
        embs = {k: self.embed(v) for k, v in comps.items()}
        embs["plan"] = self.embed(plan.render())
        return ExperimentRecord(
            id=exp_id or self.next_experiment_id(),
            components=comps,
            component_embeddings=embs,
            plan=plan,
            results=results,
            status=status,
            created_at=self.clock(),
            implementation=implementation,
        )

    def add_experiment(self, record: ExperimentRecord) -> str:
        missing = [c for c in COMPONENTS if c not in record.components]
        if missing:
            raise KnowledgeError(f"record {record.id} lacks components {missing}")
        for c in COMPONENTS:
            if c not in record.component_embeddings:
                raise KnowledgeError(f"record {record.id} lacks an embedding for {c}")
            self._check_vector(record.component_embeddings[c], f"record {record.id} {c}")
        if record.status not in (STATUS_SUCCEEDED, STATUS_FAILED):
            raise KnowledgeError(f"unknown status {record.status!r}")
        has_results = record.results is not None and bool(record.results.entries)
        if has_results != (record.status == STATUS_SUCCEEDED):
            raise KnowledgeError("results must be present exactly when the record succeeded")
        with self._lock:
            if record.id in self._record_index:
                raise KnowledgeError(f"duplicate experiment id {record.id!r}")
            self._append("experiments.log", record.to_dict())
            self._insert_record(record)
        return record.id

    def _insert_record(self, record: ExperimentRecord) -> None:
        seq = len(self._records)
        self._records.append(record)
        self._record_index[record.id] = seq
        if record.status == STATUS_SUCCEEDED:
            setting = record.results.evaluation_setting
            for metric, value in record.results.entries.items():
                self._boards.setdefault((setting, metric), []).append((seq, record.id, value))

    def plan_embedding(self, record: ExperimentRecord) -> np.ndarray:
        vec = record.component_embeddings.get("plan")
        if vec is None:
            vec = self._plan_cache.get(record.id)
            if vec is None:
                vec = self._plan_cache[record.id] = self.embed(record.plan.render())
        return vec

    # -- leaderboards -------------------------------------------------------

    def leaderboard(self, evaluation_setting: str, metric: str) -> Leaderboard:
        direction = self.config.direction(metric)
        with self._lock:
            rows = list(self._boards.get((evaluation_setting, metric), []))
        sign = -1.0 if direction == "maximize" else 1.0
        rows.sort(key=lambda r: (sign * r[2], r[0]))
        return Leaderboard(evaluation_setting, metric, direction,
                           tuple((rid, v) for _, rid, v in rows))

    def leaderboards(self) -> list[Leaderboard]:
        with self._lock:
            keys = sorted(self._boards)
        return [self.leaderboard(s, m) for s, m in keys]

    # -- experiment queries -------------------------------------------------

    def _matching(self, constraints: Sequence[ComponentPredicate],
                  status: str | None = None) -> list[tuple[int, ExperimentRecord]]:
        if constraints and self.schema is None:
            raise KnowledgeError("constraint predicates need a schema")
        with self._lock:
            records = list(enumerate(self._records))
        return [(i, r) for i, r in records
                if (status is None or r.status == status)
                and (not constraints or satisfies(r.plan, constraints, self.schema))]

    def query_experiments(self, goal: str, constraints: Sequence[ComponentPredicate] = (),
                          k: int = 5, status: str | None = None) -> list[Hit]:
        """Records meeting every predicate, ranked by goal similarity."""
        _check_k(k)
        matches = self._matching(constraints, status)
        if not matches:
            return []
        mat = np.vstack([r.component_embeddings["goal"] for _, r in matches])
        sims = _scores(mat, self.embed(goal))
        return _top([(s, i, r) for s, (i, r) in zip(sims, matches)], k)

    def metrics_in(self, text: str) -> list[str]:
        known = set(self.config.metric_directions)
        with self._lock:
            known.update(m for _, m in self._boards)
        words = re.findall(r"[a-z0-9_]+", text.lower())
        return [w for w in dict.fromkeys(words) if w in known]

    def novelty(self, text: str) -> float:
        """1 minus the best similarity of ``text`` to any executed plan."""
        with self._lock:
            records = list(self._records)
        if not records:
            return 1.0
        mat = np.vstack([self.plan_embedding(r) for r in records])
        best = max(_scores(mat, self.embed(text)))
        return min(1.0, max(0.0, 1.0 - best))

    def propose_idea_candidates(self, goal: str, constraints: Sequence[ComponentPredicate] = (),
                                k: int = 5, metric: str | None = None) -> list[IdeaCandidate]:
        """Plan differences between leaderboard neighbours worth exploring.

        Every pair of constraint-matching succeeded records that share a
        leaderboard yields the delta from the worse plan to the better one.
        Candidates rank by leaderboard gap, then novelty, then id pair. The
        leaderboard metric is ``metric``, else any configured metric named in
        ``goal``, else every metric.
        """
        _check_k(k)
        matches = self._matching(constraints, STATUS_SUCCEEDED)
        if len(matches) < 2:
            return []
        metrics = [metric] if metric else self.metrics_in(goal)
        by_board: dict[tuple[str, str], list[ExperimentRecord]] = {}
        for _, r in matches:
            for m, _ in r.results.entries.items():
                if metrics and m not in metrics:
                    continue
                by_board.setdefault((r.results.evaluation_setting, m), []).append(r)
        # Gaps of all pairs come from one vectorised pass; only pairs at or
        # above the k-th largest gap can be returned, so only those get a
        # plan diff and a novelty score.
        boards = sorted(by_board.items())
        pair_sets = []
        for b, ((_, m), recs) in enumerate(boards):
            if len(recs) < 2:
                continue
            values = np.array([r.results[m] for r in recs])
            codes: dict[tuple, int] = {}
            cfg = np.array([codes.setdefault(r.plan.configuration(), len(codes)) for r in recs])
            iu, ju = np.triu_indices(len(recs), 1)
            keep = cfg[iu] != cfg[ju]
            iu, ju = iu[keep], ju[keep]
            pair_sets.append((b, iu, ju, np.abs(values[iu] - values[ju])))
        if not pair_sets:
            return []
        all_gaps = np.concatenate([g for *_, g in pair_sets])
        if not len(all_gaps):
            return []
        cutoff = -np.partition(-all_gaps, min(k, len(all_gaps)) - 1)[min(k, len(all_gaps)) - 1]
        novelty_cache: dict[str, float] = {}
        out = []
        for b, iu, ju, gaps in pair_sets:
            (setting, m), recs = boards[b]
            maximize = self.config.direction(m) == "maximize"
            for i, j in zip(iu[gaps >= cutoff], ju[gaps >= cutoff]):
                a, c = recs[i], recs[j]
                va, vc = a.results[m], c.results[m]
                a_better = va > vc if maximize else va < vc
                worse, better = (c, a) if a_better else (a, c)
                delta = diff_plans(worse.plan, better.plan)
                text = delta.render()
                if text not in novelty_cache:
                    novelty_cache[text] = self.novelty(text)
                out.append(IdeaCandidate(delta, (worse.id, better.id), abs(va - vc),
                                         novelty_cache[text], setting, m))
        out.sort(key=lambda c: (-c.gap, -c.novelty, tuple(sorted(c.source_pair)), c.metric))
        return out[:k]

    def query_demonstrations(self, subtask: SubTask, k: int = 3) -> list[Demonstration]:
        """Successful implementations of slots of the same kind as ``subtask``."""
        _check_k(k)
        query = self.embed(f"{subtask.slot}: {subtask.slot_plan.render()}")
        with self._lock:
            records = list(enumerate(self._records))
        scored = []
        for seq, r in records:
            if r.status != STATUS_SUCCEEDED or not r.implementation:
                continue
            fragments = r.implementation.get("fragments", {})
            for slot_name, frag in fragments.items():
                kind = frag.get("kind")
                if kind is None and self.schema is not None and slot_name in self.schema.slot_names:
                    kind = self.schema.slot(slot_name).kind
                if kind != subtask.kind or r.plan.get(slot_name) is None:
                    continue
                sim = round(float(np.dot(r.component_embeddings[kind], query)), SIMILARITY_DECIMALS)
                scored.append((sim, seq, Demonstration(r.id, slot_name, r.plan.get(slot_name), frag, sim)))
        return [h.item for h in _top(scored, k)]


# -- infrastructure documents -----------------------------------------------


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    text: str


class DocCorpus:
    """Framework documentation chunked by paragraph and embedded at ingest."""

    def __init__(self, docs: Mapping[str, str] | Iterable[tuple[str, str]], embedder=None,
                 max_words: int = 120):
        self.embedder = embedder or make_embedder()
        self.chunks: list[Chunk] = []
        items = docs.items() if isinstance(docs, Mapping) else docs
        for doc_id, text in items:
            for para in re.split(r"\n\s*\n", text):
                words = para.split()
                for start in range(0, len(words), max_words):
                    piece = " ".join(words[start:start + max_words])
                    if piece:
                        self.chunks.append(Chunk(doc_id, piece))
        dim = self.embedder.dim
        self.matrix = (np.vstack([self.embedder.embed(c.text) for c in self.chunks])
                       if self.chunks else np.zeros((0, dim)))

    def __len__(self) -> int:
        return len(self.chunks)

    @classmethod
    def from_schema(cls, schema: FrameworkSchema, embedder=None) -> DocCorpus:
        docs = {}
        for slot in schema.slots:
            parts = [f"{slot.name} ({slot.kind} slot). {slot.extension_interface}"]
            for t in slot.templates:
                params = ", ".join(f"{p}: {d.describe()}" for p, d in t.parameters.items())
                parts.append(f"{t.name} template. {t.doc} Parameters: {params}.")
            docs[slot.name] = "\n\n".join(parts)
        return cls(docs, embedder)

    @classmethod
    def from_directory(cls, path: str | Path, embedder=None) -> DocCorpus:
        root = Path(path)
        files = sorted(p for p in root.rglob("*") if p.suffix in (".md", ".txt", ".rst"))
        return cls([(str(p.relative_to(root)), p.read_text(encoding="utf-8")) for p in files],
                   embedder)


def query_infrastructure(query: str, corpus: DocCorpus, k: int) -> list[Hit]:
    """Top-``k`` documentation chunks; each hit's item is ``(doc_id, excerpt)``."""
    _check_k(k)
    if not len(corpus):
        return []
    sims = _scores(corpus.matrix, corpus.embedder.embed(query))
    return _top([(s, i, (c.doc_id, c.text)) for i, (s, c) in enumerate(zip(sims, corpus.chunks))], k)


def import_knowledge(kb: KnowledgeBase, path: str | Path | None = None) -> list[str]:
    """Add general-knowledge items from a JSON file; ``None`` loads the shipped set."""
    if path is None:
        text = resources.files("arda.data").joinpath("domain_knowledge.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    doc = json.loads(text)
    return [kb.add_knowledge(it["key"], it.get("value"), it.get("category", "domain"))
            for it in doc.get("items", [])]
