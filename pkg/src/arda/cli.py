"""Command-line entry point.

::

    arda run "maximize the excess return on A-share daily data" --kb ./kb --budget 4
    arda kb list --kb ./kb
    arda kb query --kb ./kb --goal "maximize excess_return" --k 3
    arda kb show exp-00001 --kb ./kb
    arda eval aggregate
    arda eval live --seeds 20

Settings resolve as flags, then ``ARDA_*`` environment variables, then a
JSON config file (``--config``), then built-in defaults. The API key is read
from ``ARDA_API_KEY`` only.

Exit codes: 0 success, 1 unknown record or checksum failure, 2 configuration
error, 3 requirement analysis failed, 4 no experiment executed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

EXIT_OK = 0
EXIT_NOT_FOUND = 1
EXIT_CONFIG = 2
EXIT_ANALYSIS = 3
EXIT_NO_EXPERIMENTS = 4

log = logging.getLogger("arda")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    schema: str | None = None  # None: shipped demo schema
    kb: str = "arda-kb"
    backend: str = "scripted:"  # "scripted:" alone uses the shipped demo script
    surface: str | None = None
    seed: int = 0
    budget: int = 3
    width: int = 2
    weights: tuple[float, float, float] = (0.5, 0.4, 0.1)
    retries: int = 3
    policy: str = "utility"
    out: str = "."

    def validate(self) -> None:
        for name in ("schema", "surface"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{name} file not found: {p}")
        if self.backend.startswith("scripted:"):
            p = self.backend[len("scripted:"):]
            if p and not Path(p).is_file():
                raise ConfigError(f"script file not found: {p}")
        elif self.backend != "remote":
            raise ConfigError(f"backend must be scripted:<path> or remote, got {self.backend!r}")
        if self.budget < 1 or self.width < 1:
            raise ConfigError("budget and width must be at least 1")
        if self.retries < 1:
            raise ConfigError("retries must be at least 1")
        w = self.weights
        if len(w) != 3 or min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ConfigError(f"weights must be three non-negative numbers summing to 1, got {w}")
        if self.policy not in ("utility", "random"):
            raise ConfigError(f"unknown policy {self.policy!r}")


_INT_KEYS = ("seed", "budget", "width", "retries")


def _parse_weights(value: Any) -> tuple[float, ...]:
    if isinstance(value, str):
        parts = value.split(",")
    else:
        parts = list(value)
    try:
        return tuple(float(x) for x in parts)
    except ValueError as exc:
        raise ConfigError(f"weights must be numbers: {value!r}") from exc


def _coerce(key: str, value: Any) -> Any:
    if key in _INT_KEYS:
        try:
            return int(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key} must be an integer, got {value!r}") from exc
    if key == "weights":
        return _parse_weights(value)
    return value


def resolve_config(args: argparse.Namespace, environ: dict | None = None) -> RunConfig:
    """Merge flags over ``ARDA_*`` variables over the config file over defaults."""
    env = os.environ if environ is None else environ
    merged: dict[str, Any] = {}
    cfg_path = getattr(args, "config", None) or env.get("ARDA_CONFIG")
    if cfg_path:
        try:
            doc = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config file {cfg_path}: {exc}") from exc
        if "api_key" in doc:
            raise ConfigError("API keys belong in ARDA_API_KEY, not the config file")
        merged.update(doc)
    fields = RunConfig.__dataclass_fields__
    for key in fields:
        value = env.get(f"ARDA_{key.upper()}")
        if value is not None:
            merged[key] = value
    for key in fields:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    unknown = set(merged) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in merged.items()})
    cfg.validate()
    return cfg


def _make_backend(cfg: RunConfig):
    from arda.llmclient import RemoteBackend, RemoteConfig, Script, ScriptedBackend

    if cfg.backend == "remote":
        rc = RemoteConfig.from_env(max_attempts=cfg.retries)
        if not rc.endpoint:
            raise ConfigError("remote backend needs ARDA_ENDPOINT")
        return RemoteBackend(rc)
    path = cfg.backend[len("scripted:"):]
    if path:
        return ScriptedBackend(Script.load(path))
    text = resources.files("arda.data").joinpath("demo_script.json").read_text(encoding="utf-8")
    return ScriptedBackend(Script.from_dict(json.loads(text)))


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# -- run -----------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    from arda.agentloop import AgentConfig, AnalysisError, Intention, RDAgent
    from arda.knowledge import KnowledgeBase, import_knowledge
    from arda.llmclient import LLMError
    from arda.simenv import SimEnvironment, load_surface
    from arda.symlang import SchemaError, load_schema

    try:
        cfg = resolve_config(args)
        schema = load_schema(cfg.schema)
        surface = load_surface(cfg.surface).with_seed(cfg.seed)
        llm = _make_backend(cfg)
    except (ConfigError, SchemaError, OSError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    kb = KnowledgeBase(cfg.kb, schema=schema)
    if not kb.items and not args.no_domain_knowledge:
        import_knowledge(kb)
    agent = RDAgent(schema, kb, llm, AgentConfig(weights=cfg.weights, retries=cfg.retries),
                    policy=cfg.policy, seed=cfg.seed)
    env = SimEnvironment(surface, schema)
    try:
        report = agent.run_cycle(Intention(args.intention), cfg.budget, cfg.width, env)
    except AnalysisError as exc:
        print(f"analysis failed: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    except LLMError as exc:
        print(f"llm failure: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    out = Path(cfg.out)
    _write(out / "report.json", report.to_json())
    _write(out / "report.md", report.render())
    print(report.render(), end="")
    executed = sum(o.status == "succeeded" for o in report.outcomes)
    if executed == 0:
        print("no experiment executed", file=sys.stderr)
        return EXIT_NO_EXPERIMENTS
    return EXIT_OK


# -- kb --------------------------------------------------------------------------


def _open_kb_readonly(path: str | None):
    from arda.knowledge import KnowledgeBase
    from arda.symlang import load_schema

    schema = load_schema(None)
    if path is None or not Path(path).exists():
        return KnowledgeBase(schema=schema)
    return KnowledgeBase(path, schema=schema)


def _kb_path(args) -> str:
    return args.kb or os.environ.get("ARDA_KB") or RunConfig.kb


def cmd_kb(args: argparse.Namespace) -> int:
    from arda.symlang import ComponentPredicate

    kb = _open_kb_readonly(_kb_path(args))
    if args.kb_command == "list":
        rows = [{"id": r.id, "status": r.status, "goal": r.components["goal"],
                 "setting": r.results.evaluation_setting if r.results else None,
                 "plan": r.plan.render()} for r in kb.experiments]
        if args.json:
            print(json.dumps(rows, indent=2, sort_keys=True))
        else:
            print(f"{'id':<11}{'status':<11}{'goal':<26}plan")
            for r in rows:
                print(f"{r['id']:<11}{r['status']:<11}{r['goal']:<26}{r['plan']}")
        return EXIT_OK
    if args.kb_command == "query":
        try:
            preds = [ComponentPredicate.from_dict(json.loads(c)) for c in args.constraint or []]
            hits = kb.query_experiments(args.goal, preds, args.k, status=args.status)
        except ValueError as exc:
            print(f"bad query: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        rows = [{"id": h.item.id, "score": h.score, "plan": h.item.plan.render()} for h in hits]
        if args.json:
            print(json.dumps(rows, indent=2, sort_keys=True))
        else:
            for r in rows:
                print(f"{r['id']}\t{r['score']:.6f}\t{r['plan']}")
        return EXIT_OK
    if args.kb_command == "show":
        try:
            rec = kb.get_experiment(args.id)
        except KeyError:
            print(f"no experiment {args.id!r}", file=sys.stderr)
            return EXIT_NOT_FOUND
        d = rec.to_dict()
        d.pop("component_embeddings", None)
        print(json.dumps(d, indent=2, sort_keys=True))
        return EXIT_OK
    raise AssertionError(args.kb_command)


# -- eval ------------------------------------------------------------------------


def cmd_eval(args: argparse.Namespace) -> int:
    from arda.evalharness import FixtureError, compare_policies, load_fixtures, reproduce_tables

    if args.eval_command == "aggregate":
        try:
            report = reproduce_tables(load_fixtures(args.fixtures))
        except FixtureError as exc:
            print(f"fixture error: {exc}", file=sys.stderr)
            return EXIT_NOT_FOUND
        print(report.render(), end="")
        if args.out:
            _write(Path(args.out), report.to_json())
        return EXIT_OK if report.ok else EXIT_NOT_FOUND
    if args.eval_command == "live":
        if args.seeds < 1 or args.budget < 1 or args.width < 1:
            print("config error: seeds, budget and width must be at least 1", file=sys.stderr)
            return EXIT_CONFIG
        comp = compare_policies(range(args.seeds), args.budget, args.width)
        print(comp.render(), end="")
        if args.out:
            _write(Path(args.out), json.dumps(comp.to_dict(), indent=2, sort_keys=True) + "\n")
        return EXIT_OK
    raise AssertionError(args.eval_command)


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="arda", description="Autonomous R&D loop over a framework schema.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one R&D cycle for an intention")
    run.add_argument("intention")
    run.add_argument("--schema")
    run.add_argument("--kb")
    run.add_argument("--backend", help="scripted:<path> or remote")
    run.add_argument("--surface")
    run.add_argument("--seed", type=int)
    run.add_argument("--budget", type=int)
    run.add_argument("--width", type=int)
    run.add_argument("--weights", help="wx,wr,wf")
    run.add_argument("--retries", type=int)
    run.add_argument("--policy", choices=("utility", "random"))
    run.add_argument("--out", help="directory for report.json and report.md")
    run.add_argument("--config", help="JSON config file")
    run.add_argument("--no-domain-knowledge", action="store_true",
                     help="do not seed an empty knowledge base with the shipped domain notes")
    run.set_defaults(func=cmd_run)

    kb = sub.add_parser("kb", help="inspect a knowledge base")
    kb_sub = kb.add_subparsers(dest="kb_command", required=True)
    for name in ("list", "query", "show"):
        sp = kb_sub.add_parser(name)
        sp.add_argument("--kb")
        sp.add_argument("--json", action="store_true")
        if name == "query":
            sp.add_argument("--goal", required=True)
            sp.add_argument("--k", type=int, default=5)
            sp.add_argument("--status", choices=("succeeded", "failed"))
            sp.add_argument("--constraint", action="append",
                            help='JSON predicate, e.g. {"component": "model", "op": "equals", "values": ["MLP"]}')
        if name == "show":
            sp.add_argument("id")
    kb.set_defaults(func=cmd_kb)

    ev = sub.add_parser("eval", help="evaluation harness")
    ev_sub = ev.add_subparsers(dest="eval_command", required=True)
    agg = ev_sub.add_parser("aggregate", help="reproduce the results tables from the score sheets")
    agg.add_argument("--fixtures", help="fixture directory (default: shipped)")
    agg.add_argument("--out", help="write the machine-readable report here")
    live = ev_sub.add_parser("live", help="compare proposal policies on the simulated environment")
    live.add_argument("--seeds", type=int, default=20)
    live.add_argument("--budget", type=int, default=8)
    live.add_argument("--width", type=int, default=2)
    live.add_argument("--out")
    ev.set_defaults(func=cmd_eval)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors are configuration errors
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
