"""Command-line front end.

Exit codes: 0 all goals hold, 1 a violation was found, 2 usage or parse
error, 3 resource limit hit.  With ``--json`` every report is a single
JSON document on stdout; identical arguments and seed give identical
bytes.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .bounded import ExploreConfig, Exploration, Integrity, ResourceLimit
from .dsl import (
    CORPUS_NAMES, ProtocolSpec, SourceError, UnknownCorpus, corpus_path,
    elaborate, load_corpus, parse_file, print_spec, tg_goal,
)
from .formulas import holds
from .intruder import IntruderConfig
from .tg import TG, build_tg, check_goal, export_dot
from .tg import reduce as reduce_tg

USAGE_ERROR = 2
LIMIT_ERROR = 3


# ---------------------------------------------------------------------------
# Argument plumbing

def _add_source(p: argparse.ArgumentParser) -> None:
    p.add_argument("file", nargs="?", help="protocol source file")
    p.add_argument("--corpus", metavar="NAME",
                   help="use a built-in protocol instead of a file")
    p.add_argument("--json", action="store_true",
                   help="machine-readable report on stdout")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sessions", type=int, default=1, metavar="N",
                   help="copies of each replicable role (default 1)")
    p.add_argument("--seed", type=int, default=0, metavar="N",
                   help="fresh-constant counter seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="cpv", description="protocol verification toolkit")
    sub = top.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("parse", help="check a protocol source and echo it")
    _add_source(p)

    p = sub.add_parser("tg", help="build the control-point product graph")
    _add_source(p)
    _add_model(p)
    p.add_argument("--reduce", action="store_true",
                   help="remove unrealizable edges and unreachable nodes")
    p.add_argument("--dot", metavar="PATH",
                   help="write a Graphviz rendering (\"-\" for stdout)")
    p.add_argument("--facts", action="store_true",
                   help="include per-node facts (implies --reduce)")

    p = sub.add_parser("check", help="verify control-point goals on the "
                                     "reduced graph")
    _add_source(p)
    _add_model(p)

    p = sub.add_parser("explore", help="bounded state exploration against "
                                       "an active adversary")
    _add_source(p)
    _add_model(p)
    p.add_argument("--depth", type=int, default=24, metavar="N",
                   help="maximum transitions per run (default 24)")
    p.add_argument("--deriv-depth", type=int, default=2, metavar="N",
                   help="adversary construction depth (default 2)")
    p.add_argument("--fresh-budget", type=int, default=2, metavar="N",
                   help="adversary fresh constants per kind (default 2)")
    p.add_argument("--max-states", type=int, default=200_000, metavar="N",
                   help="state budget before giving up (default 200000)")
    p.add_argument("--workers", type=int, default=1, metavar="N",
                   help="threads for successor computation (default 1)")

    p = sub.add_parser("selftest", help="run the built-in cross-validation "
                                        "suite")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("corpus", help="list built-in protocols")
    p.add_argument("--json", action="store_true")

    return top


def _load_spec(parser: argparse.ArgumentParser,
               args: argparse.Namespace) -> ProtocolSpec:
    if bool(args.corpus) == bool(args.file):
        parser.error("give exactly one of FILE or --corpus NAME")
    path = corpus_path(args.corpus) if args.corpus else Path(args.file)
    return parse_file(path)


def _emit(args: argparse.Namespace, report: dict,
          lines: Sequence[str]) -> None:
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        for ln in lines:
            print(ln)


# ---------------------------------------------------------------------------
# Commands

def cmd_parse(parser: argparse.ArgumentParser, args: argparse.Namespace) -> int:
    spec = _load_spec(parser, args)
    if args.json:
        report = {
            "protocol": spec.name,
            "agents": list(spec.agents),
            "intermediaries": list(spec.intermediaries),
            "processes": [
                {"name": p.name, "agent": p.agent,
                 "replicable": p.replicable,
                 "nodes": len(p.nodes()), "actions": len(p.actions)}
                for p in spec.procs
            ],
            "goals": [{"kind": g.kind, "name": g.name} for g in spec.goals],
        }
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        sys.stdout.write(print_spec(spec))
    return 0


def _edge_json(tg: TG, e) -> dict:
    out = {
        "src": tg.name_of(e.src),
        "dst": tg.name_of(e.dst),
        "label": e.label(),
        "realizable": e.realizable,
    }
    if e.reason:
        out["reason"] = e.reason
    return out


def cmd_tg(parser: argparse.ArgumentParser, args: argparse.Namespace) -> int:
    spec = _load_spec(parser, args)
    proto, _ = elaborate(spec, args.sessions)
    tg = build_tg(proto)
    if args.reduce or args.facts:
        reduce_tg(tg)
    report = {
        "protocol": spec.name,
        "init": tg.name_of(tg.init),
        "nodes": [n.name for n in tg.nodes],
        "edges": [_edge_json(tg, e) for e in tg.edges],
        "reduced": tg.reduced,
        "alive": tg.alive_node_names(),
        "rounds": tg.rounds,
        "findings": [f.to_json() for f in tg.findings],
    }
    lines = [
        f"{spec.name}: {len(tg.nodes)} nodes, {len(tg.edges)} edges,"
        f" initial {report['init']}",
    ]
    if tg.reduced:
        for i, removed in enumerate(tg.rounds, 1):
            lines.append(f"round {i}: removed {', '.join(removed)}")
        lines.append(f"alive: {', '.join(report['alive'])}")
    for f in tg.findings:
        lines.append(f"finding: {f.message} [{f.edge.label()}]")
    if args.facts:
        report["facts"] = tg.facts_json()
        lines.append("facts:")
        for name, phi in sorted(report["facts"].items()):
            lines.append(f"  {name}: {json.dumps(phi, sort_keys=True)}")
    if args.dot:
        dot = export_dot(tg, reduced=tg.reduced)
        if args.dot == "-":
            sys.stdout.write(dot)
        else:
            Path(args.dot).write_text(dot, encoding="utf-8")
            lines.append(f"wrote {args.dot}")
    _emit(args, report, lines)
    return 0


def cmd_check(parser: argparse.ArgumentParser, args: argparse.Namespace) -> int:
    spec = _load_spec(parser, args)
    proto, props = elaborate(spec, args.sessions)
    goals = [p for p in props if isinstance(p, Integrity)]
    if not goals:
        print(f"{spec.name}: no control-point goals; use explore",
              file=sys.stderr)
        return USAGE_ERROR
    tg = build_tg(proto)
    reduce_tg(tg)
    verdicts = [check_goal(tg, tg_goal(g)) for g in goals]
    ok = all(v.ok for v in verdicts)
    report = {
        "protocol": spec.name,
        "ok": ok,
        "alive": tg.alive_node_names(),
        "rounds": tg.rounds,
        "verdicts": [v.to_json() for v in verdicts],
    }
    lines = [f"{spec.name}: reduced to {len(tg.alive_nodes)} nodes"
             f" in {len(tg.rounds)} rounds"]
    for v in verdicts:
        lines.append(f"goal '{v.name}': {'ok' if v.ok else 'VIOLATED'}")
        for d in v.details:
            if "finding" in d:
                lines.append(f"  {d['message']} [{d['edge']}]")
            else:
                mark = "entails" if d["ok"] else "does NOT entail"
                lines.append(
                    f"  {d['node']} {mark} {', '.join(d['requires'])}")
    _emit(args, report, lines)
    return 0 if ok else 1


def cmd_explore(parser: argparse.ArgumentParser,
                args: argparse.Namespace) -> int:
    spec = _load_spec(parser, args)
    proto, props = elaborate(spec, args.sessions)
    cfg = ExploreConfig(
        max_depth=args.depth,
        intruder=IntruderConfig(deriv_depth=args.deriv_depth,
                                fresh_budget=args.fresh_budget),
        seed=args.seed,
        max_states=args.max_states,
        workers=args.workers,
    )
    ex = Exploration(proto, cfg)
    verdict = ex.run(props)
    report = {
        "protocol": spec.name,
        "sessions": args.sessions,
        "seed": args.seed,
        "truncated": ex.truncated,
        "properties": sorted(p.name for p in props),
        "verdict": verdict.to_json(),
    }
    lines = [f"{spec.name} ({args.sessions} session"
             f"{'s' if args.sessions != 1 else ''}): {verdict.status}"
             f" after {verdict.states_visited} states,"
             f" {verdict.edges_fired} transitions"]
    if ex.truncated:
        lines.append("warning: depth bound reached; result is partial")
    if verdict.counterexample is not None:
        lines.append(f"property '{verdict.property_name}' violated:")
        for i, st in enumerate(verdict.counterexample.steps, 1):
            lines.append(f"  {i}. {st.proc}: {st.action}")
    _emit(args, report, lines)
    return 0 if verdict.ok else 1


def _selftest_one(name: str) -> dict:
    proto, props = load_corpus(name)
    result: dict = {"name": name}
    tg = build_tg(proto)
    reduce_tg(tg)
    goals = [p for p in props if isinstance(p, Integrity)]
    result["goals_ok"] = all(check_goal(tg, tg_goal(g)).ok for g in goals)
    ex = Exploration(proto)
    verdict = ex.run(props)
    result["explore_ok"] = verdict.ok
    result["states"] = verdict.states_visited
    result["controls_match"] = ex.controls() == tg.alive_nodes
    result["facts_hold"] = all(
        holds(tg.fact_formula(s.control()), ex.view(s))
        for s in ex.visited.values())
    result["ok"] = (result["goals_ok"] and result["explore_ok"]
                    and result["controls_match"] and result["facts_hold"])
    return result


def cmd_selftest(parser: argparse.ArgumentParser,
                 args: argparse.Namespace) -> int:
    results = [_selftest_one(n) for n in ("p1", "p2", "p3", "p4")]

    for name in ("yahalom", "unlimited"):
        proto, props = load_corpus(name)
        verdict = Exploration(proto).run(props)
        results.append({"name": name, "explore_ok": verdict.ok,
                        "states": verdict.states_visited,
                        "ok": verdict.ok})

    proto, props = load_corpus("wmf-broken")
    tg = build_tg(proto)
    reduce_tg(tg)
    verdict = Exploration(proto).run(props)
    found = (verdict.status == "violated"
             and verdict.counterexample is not None
             and len(verdict.counterexample) <= 4
             and bool(tg.findings))
    results.append({"name": "wmf-broken", "violation_found": found,
                    "states": verdict.states_visited, "ok": found})

    ok = all(r["ok"] for r in results)
    report = {"ok": ok, "results": results}
    lines = []
    for r in results:
        parts = [f"{k}={v}" for k, v in r.items() if k not in ("name", "ok")]
        lines.append(f"{'PASS' if r['ok'] else 'FAIL'} {r['name']}:"
                     f" {', '.join(parts)}")
    lines.append("selftest " + ("passed" if ok else "FAILED"))
    _emit(args, report, lines)
    return 0 if ok else 1


def cmd_corpus(parser: argparse.ArgumentParser,
               args: argparse.Namespace) -> int:
    entries = []
    for name in CORPUS_NAMES:
        path = corpus_path(name)
        title = ""
        for raw in path.read_text(encoding="utf-8").splitlines():
            if raw.startswith("#"):
                title = raw.lstrip("#").strip()
                break
        entries.append({"name": name, "title": title, "path": str(path)})
    report = {"corpus": entries}
    lines = [f"{e['name']:<12} {e['title']}" for e in entries]
    _emit(args, report, lines)
    return 0


# ---------------------------------------------------------------------------
# Entry point

_COMMANDS = {
    "parse": cmd_parse,
    "tg": cmd_tg,
    "check": cmd_check,
    "explore": cmd_explore,
    "selftest": cmd_selftest,
    "corpus": cmd_corpus,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_ERROR
    try:
        return _COMMANDS[args.cmd](parser, args)
    except SystemExit as exc:  # parser.error inside a command
        return exc.code if isinstance(exc.code, int) else USAGE_ERROR
    except (SourceError, UnknownCorpus) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except ResourceLimit as exc:
        print(f"resource limit: {exc}", file=sys.stderr)
        return LIMIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
