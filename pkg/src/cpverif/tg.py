"""Transition graphs: product construction, symbolic node facts, reduction.

The product graph of the protocol's control graphs abstracts every
interleaving.  Each surviving node carries a fact: secure sets, channel
and key-payload bounds, and a congruence store of equalities, all over
the protocol's own template terms.  Reduction alternates three steps
until stable: mark receives on provably-empty channels as unrealizable,
delete nodes that lost every path from the initial node, and recompute
facts from the seed over what remains.  Marking only ever uses facts
that the current round has justified, so the first round works from the
seed alone.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .formulas import (
    At, ChanContent, EqStore, Formula, INTRUDER, KeyInv, Lit, ProcKnown,
    SecureC, SecureK, Sub, UnknownProcess, Verdict,
    entails, eq_canon, formula_to_json, holds, secure_occurrence,
)
from .intruder import WithIntruder, absorb, default_seed
from .processes import (
    Action, Assign, Protocol, Recv, Send, SeqProc,
    initial_state,
)
from .terms import (
    App, Con, FreshGen, Term, Ty, Var,
    ENCRYPT, OPEN, SHARED_CHANNEL, SHARED_KEY,
    subterm, subterm_set, term_sort_key, to_text, vars_of,
)


class CyclicSP(Exception):
    """Transition graphs need acyclic control graphs."""


@dataclass(frozen=True)
class SecrecyLeak:
    """A send whose side condition could not be verified: some secured
    atom may reach the adversary along this edge.  A finding, not an
    exception; reduction continues and reports it."""

    edge: "TGEdge"
    atom: Term
    message: str

    def to_json(self) -> dict:
        return {
            "finding": "SecrecyLeak",
            "edge": self.edge.label(),
            "atom": to_text(self.atom),
            "message": self.message,
        }


@dataclass(frozen=True)
class GoalSpec:
    """A control-point property: whenever the named process reaches the
    node, the listed equalities must hold."""

    name: str
    at_proc: str
    at_node: int
    eqs: tuple[tuple[Term, Term], ...] = ()


@dataclass(frozen=True)
class TGNode:
    at: tuple[int, ...]
    name: str


@dataclass(eq=False)
class TGEdge:
    src: tuple[int, ...]
    dst: tuple[int, ...]
    actor: str
    action: Action
    realizable: str = "unknown"  # yes | no | unknown
    reason: str = ""

    def label(self) -> str:
        return f"{self.action} @ {self.actor}"


Bound = tuple[frozenset[Term], Optional[frozenset[Term]]]  # (lo, hi); hi None = unbounded


@dataclass
class NodeFact:
    """What is known to be true in every reachable state at one node."""

    secure_c: frozenset[Term] = frozenset()
    secure_k: frozenset[Term] = frozenset()
    chan_bounds: dict[Term, Bound] = field(default_factory=dict)
    key_bounds: dict[Term, Bound] = field(default_factory=dict)
    eqs: EqStore = field(default_factory=EqStore)
    reachable: str = "unknown"  # yes | no | unknown
    # Variables whose values are fresh or self-standing atoms: hidden
    # variables and parameters.  Pairwise distinct, never equal to a
    # constant or a constructed term.
    rigid_vars: frozenset[Var] = frozenset()

    def copy(self) -> "NodeFact":
        return NodeFact(
            secure_c=self.secure_c,
            secure_k=self.secure_k,
            chan_bounds=dict(self.chan_bounds),
            key_bounds=dict(self.key_bounds),
            eqs=self.eqs.copy(),
            reachable=self.reachable,
            rigid_vars=self.rigid_vars,
        )

    def validate(self) -> None:
        for c, (lo, hi) in list(self.chan_bounds.items()) \
                + list(self.key_bounds.items()):
            if hi is not None and not lo <= hi:
                raise ValueError(f"bound for {to_text(c)}: lo not within hi")


class TG:
    """The product graph plus everything a verification run accumulates:
    facts, unrealizability marks, removal history, and leak findings."""

    def __init__(self, proto: Protocol, nodes: list[TGNode],
                 edges: list[TGEdge], init: tuple[int, ...]):
        self.proto = proto
        self.nodes = nodes
        self.edges = edges
        self.init = init
        self._by_at = {n.at: n for n in nodes}
        self._out: dict[tuple[int, ...], list[TGEdge]] = {n.at: [] for n in nodes}
        self._in: dict[tuple[int, ...], list[TGEdge]] = {n.at: [] for n in nodes}
        for e in edges:
            self._out[e.src].append(e)
            self._in[e.dst].append(e)
        self.alive_nodes: set[tuple[int, ...]] = {n.at for n in nodes}
        self.alive_edges: set[TGEdge] = set(edges)
        self.facts: dict[tuple[int, ...], NodeFact] = {}
        self.findings: list[SecrecyLeak] = []
        self._finding_keys: set[tuple[int, Term]] = set()
        self.rounds: list[list[str]] = []
        self.reduced = False
        self._ranks: list[dict[int, int]] = []  # per-sp topological index

    # -- naming and lookup ----------------------------------------------

    def name_of(self, at: tuple[int, ...]) -> str:
        return self._by_at[at].name

    def node_named(self, name: str) -> tuple[int, ...]:
        for n in self.nodes:
            if n.name == name:
                return n.at
        raise KeyError(name)

    def out_edges(self, at: tuple[int, ...], alive: bool = True) -> list[TGEdge]:
        es = self._out[at]
        return [e for e in es if e in self.alive_edges] if alive else list(es)

    def in_edges(self, at: tuple[int, ...], alive: bool = True) -> list[TGEdge]:
        es = self._in[at]
        return [e for e in es if e in self.alive_edges] if alive else list(es)

    def alive_node_names(self) -> list[str]:
        return sorted(self.name_of(at) for at in self.alive_nodes)

    def marked_edges(self) -> list[TGEdge]:
        """Edges disproved from node facts (the figure's black circles)."""
        return [e for e in self.edges
                if e.realizable == "no" and e.reason.startswith("empty")]

    # -- findings -------------------------------------------------------

    def _note_finding(self, edge: TGEdge, atom: Term, message: str) -> None:
        key = (self.edges.index(edge), atom)
        if key not in self._finding_keys:
            self._finding_keys.add(key)
            self.findings.append(SecrecyLeak(edge, atom, message))

    # -- formulas and reports -------------------------------------------

    def fact_formula(self, at: tuple[int, ...]) -> Formula:
        fact = self.facts[at]
        efs = list(_fact_efs(fact))
        for sp, i in zip(self.proto.sps, at):
            efs.append(At(sp.name, i))
        return frozenset(efs)

    def facts_json(self) -> dict:
        return {
            self.name_of(at): formula_to_json(self.fact_formula(at))
            for at in sorted(self.facts, key=self.name_of)
        }


# ---------------------------------------------------------------------------
# Construction

def build_tg(procs: Protocol | Sequence[SeqProc]) -> TG:
    proto = procs if isinstance(procs, Protocol) else Protocol(procs)
    ranks: list[dict[int, int]] = []
    node_lists: list[list[int]] = []
    for sp in proto.sps:
        ranks.append(_topo_ranks(sp))
        node_lists.append(sorted(sp.nodes()))
    nodes: list[TGNode] = []
    for at in itertools.product(*node_lists):
        name = "".join(f"{sp.name}{i}" for sp, i in zip(proto.sps, at))
        nodes.append(TGNode(at=at, name=name))
    edges: list[TGEdge] = []
    for n in nodes:
        for idx, sp in enumerate(proto.sps):
            for e in sp.out_edges(n.at[idx]):
                dst = n.at[:idx] + (e.dst,) + n.at[idx + 1:]
                edges.append(TGEdge(src=n.at, dst=dst, actor=sp.name,
                                    action=e.action))
    tg = TG(proto, nodes, edges, tuple(sp.init for sp in proto.sps))
    tg._ranks = ranks
    return tg


def _topo_ranks(sp: SeqProc) -> dict[int, int]:
    indeg = {n: 0 for n in sp.nodes()}
    for e in sp.edges:
        indeg[e.dst] += 1
    order: list[int] = sorted(n for n, d in indeg.items() if d == 0)
    seen: list[int] = []
    work = list(order)
    while work:
        n = work.pop(0)
        seen.append(n)
        for e in sorted(sp.out_edges(n), key=lambda e: e.dst):
            indeg[e.dst] -= 1
            if indeg[e.dst] == 0:
                work.append(e.dst)
    if len(seen) != len(indeg):
        raise CyclicSP(f"process {sp.name} has a control cycle")
    return {n: i for i, n in enumerate(seen)}


# ---------------------------------------------------------------------------
# Seeds

def default_seed_fact(tg: TG,
                      secure_c: Optional[Iterable[Term]] = None,
                      secure_k: Optional[Iterable[Term]] = None) -> NodeFact:
    """The initial-node fact: secure sets from the protocol's shared
    channels/keys and hidden variables of those kinds (overridable), all
    tracked bounds empty, no equalities."""
    proto = tg.proto
    used_c: set[Term] = set()
    used_k: set[Term] = set()
    rigid: set[Var] = set()
    for sp in proto.sps:
        for v in sp.hidden | sp.params:
            if v.ty is not Ty.A:  # an agent parameter may name anyone
                rigid.add(v)
        for e in sp.edges:
            for t in _action_subterms(e.action):
                if isinstance(t, App) and t.fn == SHARED_CHANNEL:
                    used_c.add(t)
                elif isinstance(t, App) and t.fn == SHARED_KEY:
                    used_k.add(t)
        for v in sp.hidden:
            if v.ty is Ty.C:
                used_c.add(v)
            elif v.ty is Ty.K:
                used_k.add(v)
    e_c = frozenset(used_c if secure_c is None else secure_c)
    e_k = frozenset(used_k if secure_k is None else secure_k)
    empty: Bound = (frozenset(), frozenset())
    fact = NodeFact(
        secure_c=e_c,
        secure_k=e_k,
        chan_bounds={c: empty for c in sorted(e_c, key=term_sort_key)
                     if c.ty is Ty.C},
        key_bounds={k: empty for k in sorted(e_k, key=term_sort_key)
                    if k.ty is Ty.K},
        reachable="yes",
        rigid_vars=frozenset(rigid),
    )
    return fact


def _action_subterms(a: Action) -> Iterable[Term]:
    from .processes import action_terms
    for t in action_terms(a):
        yield from subterm_set(t)


def seed_fact(tg: TG, fact: NodeFact) -> None:
    """Attach the fact to the initial node after checking it really is
    true at the initial state (with the adversary present)."""
    fact.validate()
    s0 = initial_state(tg.proto, FreshGen(0))
    view = WithIntruder(s0, absorb(default_seed(tg.proto), s0))
    phi = frozenset(_fact_efs(fact))
    if not holds(phi, view):
        raise ValueError("seed fact does not hold at the initial state")
    fact.reachable = "yes"
    tg.facts = {tg.init: fact}


def _fact_efs(fact: NodeFact) -> Iterable:
    if fact.secure_c:
        yield SecureC(Lit(fact.secure_c))
    if fact.secure_k:
        yield SecureK(Lit(fact.secure_k))
        for k in sorted(fact.secure_k, key=term_sort_key):
            if k.ty is Ty.K:
                yield Sub(KeyInv(k, ProcKnown(INTRUDER)),
                          KeyInv(k, ChanContent(OPEN)))
    for c, (lo, hi) in sorted(fact.chan_bounds.items(),
                              key=lambda kv: term_sort_key(kv[0])):
        yield Sub(Lit(lo), ChanContent(c))
        if hi is not None:
            yield Sub(ChanContent(c), Lit(hi))
    for k, (lo, hi) in sorted(fact.key_bounds.items(),
                              key=lambda kv: term_sort_key(kv[0])):
        yield Sub(Lit(lo), KeyInv(k, ChanContent(OPEN)))
        if hi is not None:
            yield Sub(KeyInv(k, ChanContent(OPEN)), Lit(hi))
    for a, b in fact.eqs.pairs():
        yield eq_canon(a, b)


# ---------------------------------------------------------------------------
# Distinctness over templates

def _clash(a: Term, b: Term, rigid: frozenset[Var]) -> bool:
    """True when the two templates provably denote different values.
    Rigid variables stand for pairwise-distinct atoms; plain variables
    are unknowns, so they never clash with anything."""
    if a is b:
        return False
    if isinstance(a, Var) and a in rigid:
        return isinstance(b, (Con, App)) or (isinstance(b, Var) and b in rigid)
    if isinstance(b, Var) and b in rigid:
        return isinstance(a, (Con, App))
    if isinstance(a, Var) or isinstance(b, Var):
        return False
    if isinstance(a, Con) or isinstance(b, Con):
        return a is not b if type(a) is type(b) else True
    if a.fn != b.fn or len(a.args) != len(b.args):
        return True
    return any(_clash(x, y, rigid) for x, y in zip(a.args, b.args))


def _distinct(eqs: EqStore, a: Term, b: Term, rigid: frozenset[Var]) -> bool:
    if eqs.equal(a, b):
        return False
    prefer = frozenset(rigid)
    return _clash(eqs.subst_rep(a, prefer), eqs.subst_rep(b, prefer), rigid)


def _in_set(eqs: EqStore, t: Term, members: Iterable[Term]) -> bool:
    return any(eqs.equal(t, m) for m in members)


# ---------------------------------------------------------------------------
# Fact propagation

def step_fact(fact: NodeFact, edge: TGEdge,
              findings: Optional[list[SecrecyLeak]] = None,
              _note=None) -> NodeFact:
    """The strongest fact justified after taking the edge from a state
    satisfying `fact`.  Appends SecrecyLeak findings for sends whose
    side condition cannot be verified."""
    f = fact.copy()
    a = edge.action
    if isinstance(a, Send):
        _send_step(f, a, edge, findings, _note)
    elif isinstance(a, Recv):
        _recv_step(f, a)
    elif isinstance(a, Assign):
        f.eqs.assume(a.lhs, a.rhs)
    f.reachable = "unknown"
    return f


def _send_step(f: NodeFact, a: Send, edge: TGEdge,
               findings: Optional[list[SecrecyLeak]], _note) -> None:
    eqs, rigid = f.eqs, f.rigid_vars
    chan, payload = a.chan, a.payload

    for c, (lo, hi) in list(f.chan_bounds.items()):
        if eqs.equal(chan, c):
            f.chan_bounds[c] = (lo | {payload},
                                None if hi is None else hi | {payload})
        elif hi is not None and not _distinct(eqs, chan, c, rigid):
            f.chan_bounds[c] = (lo, hi | {payload})

    # Key-payload bounds track the open channel's contents, so only sends
    # that may target it matter.
    definitely_open = eqs.equal(chan, OPEN)
    if definitely_open or not _distinct(eqs, chan, OPEN, rigid):
        prefer = rigid | f.secure_k
        resolved = eqs.subst_rep(payload, prefer)
        opaque = any(
            v.ty is Ty.M and v not in rigid for v in vars_of(resolved))
        for k in list(f.key_bounds):
            lo, hi = f.key_bounds[k]
            if hi is None:
                continue
            added_lo: set[Term] = set()
            added_hi: set[Term] = set()
            for sub in subterm_set(resolved):
                if not (isinstance(sub, App) and sub.fn == ENCRYPT):
                    continue
                k0, inner = sub.args
                if definitely_open and eqs.equal(k0, k):
                    added_lo.add(inner)
                    added_hi.add(inner)
                elif not _distinct(eqs, k0, k, rigid):
                    added_hi.add(inner)
            if opaque:
                # An M-kind unknown may carry encryptions we cannot see.
                f.key_bounds[k] = (lo | added_lo, None)
            else:
                f.key_bounds[k] = (lo | added_lo, hi | added_hi)

    # Side conditions: a send outside the secure sets must not expose a
    # secured atom.
    if f.secure_c and not _in_set(eqs, chan, f.secure_c):
        prefer = frozenset(t for t in f.secure_c if not isinstance(t, App))
        resolved = eqs.subst_rep(payload, prefer | f.secure_c)
        for x in sorted(prefer, key=term_sort_key):
            if subterm(x, resolved):
                _report(f, edge, x, "sent on a channel outside the secure set",
                        findings, _note)
    if f.secure_k and not _in_set(
            eqs, chan, (t for t in f.secure_k if t.ty is Ty.C)):
        atoms = frozenset(t for t in f.secure_k if not isinstance(t, App))
        resolved = eqs.subst_rep(payload, atoms | f.secure_k)
        for x in sorted(atoms, key=term_sort_key):
            if not secure_occurrence(x, resolved, f.secure_k):
                _report(f, edge, x, "sent without cover by a secure key",
                        findings, _note)


def _report(f: NodeFact, edge: TGEdge, atom: Term, message: str,
            findings, _note) -> None:
    if _note is not None:
        _note(edge, atom, message)
    elif findings is not None:
        findings.append(SecrecyLeak(edge, atom, message))


def _recv_step(f: NodeFact, a: Recv) -> None:
    eqs = f.eqs
    for c, bound in f.chan_bounds.items():
        if eqs.equal(a.chan, c):
            e0 = _singleton(eqs, bound)
            if e0 is not None:
                eqs.assume(a.pattern, e0)
    pat = a.pattern
    if isinstance(pat, App) and pat.fn == ENCRYPT and eqs.equal(a.chan, OPEN):
        k0, inner = pat.args
        for k, bound in f.key_bounds.items():
            if eqs.equal(k0, k):
                e0 = _singleton(eqs, bound)
                if e0 is not None:
                    eqs.assume(inner, e0)


def _singleton(eqs: EqStore, bound: Bound) -> Optional[Term]:
    lo, hi = bound
    if hi is None or not lo or not hi:
        return None
    e0 = min(hi, key=term_sort_key)
    if all(eqs.equal(e0, t) for t in lo | hi):
        return e0
    return None


def join_facts(incoming: Sequence[NodeFact]) -> NodeFact:
    """The strongest fact implied by each of several incoming facts:
    intersect what is guaranteed, union what is possible."""
    if not incoming:
        raise ValueError("join of no facts")
    out = incoming[0].copy()
    for f in incoming[1:]:
        out.secure_c &= f.secure_c
        out.secure_k &= f.secure_k
        out.chan_bounds = _join_bounds(out.chan_bounds, f.chan_bounds)
        out.key_bounds = _join_bounds(out.key_bounds, f.key_bounds)
        out.eqs = out.eqs.intersect(f.eqs)
        out.rigid_vars &= f.rigid_vars
    return out


def _join_bounds(a: dict[Term, Bound], b: dict[Term, Bound]) -> dict[Term, Bound]:
    out: dict[Term, Bound] = {}
    for c in a:
        if c not in b:
            continue
        lo_a, hi_a = a[c]
        lo_b, hi_b = b[c]
        hi = None if hi_a is None or hi_b is None else hi_a | hi_b
        out[c] = (lo_a & lo_b, hi)
    return out


# ---------------------------------------------------------------------------
# Marking and reduction

def _edge_disproved(fact: NodeFact, e: TGEdge) -> bool:
    a = e.action
    if not isinstance(a, Recv):
        return False
    eqs = fact.eqs
    for c, (lo, hi) in fact.chan_bounds.items():
        if hi is not None and not hi and eqs.equal(a.chan, c):
            return True
    pat = a.pattern
    if isinstance(pat, App) and pat.fn == ENCRYPT and eqs.equal(a.chan, OPEN):
        for k, (lo, hi) in fact.key_bounds.items():
            if hi is not None and not hi and eqs.equal(pat.args[0], k):
                return True
    return False


def mark_unrealizable(tg: TG) -> list[TGEdge]:
    """Mark receives on provably-empty channels from the facts justified
    so far, then propagate: nodes with no non-marked incoming path are
    unreachable and their outgoing edges unrealizable too.  Returns the
    newly fact-marked edges."""
    new_marks: list[TGEdge] = []
    for at in sorted(tg.facts, key=tg.name_of):
        if at not in tg.alive_nodes:
            continue
        fact = tg.facts[at]
        for e in tg.out_edges(at):
            if e.realizable == "no":
                continue
            if _edge_disproved(fact, e):
                e.realizable = "no"
                e.reason = "empty-channel"
                new_marks.append(e)
    _propagate_unreachable(tg)
    return new_marks


def _reach_from_init(tg: TG) -> set[tuple[int, ...]]:
    seen = {tg.init}
    work = [tg.init]
    while work:
        at = work.pop()
        for e in tg.out_edges(at):
            if e.realizable != "no" and e.dst not in seen:
                seen.add(e.dst)
                work.append(e.dst)
    return seen


def _propagate_unreachable(tg: TG) -> None:
    reach = _reach_from_init(tg)
    for at in tg.alive_nodes - reach:
        for e in tg.out_edges(at):
            if e.realizable != "no":
                e.realizable = "no"
                e.reason = "unreachable-source"


def _prune(tg: TG) -> list[str]:
    reach = _reach_from_init(tg)
    removed = sorted(tg.name_of(at) for at in tg.alive_nodes - reach)
    for at in tg.alive_nodes - reach:
        for e in tg.out_edges(at) + tg.in_edges(at):
            tg.alive_edges.discard(e)
        tg.facts.pop(at, None)
    tg.alive_nodes &= reach
    return removed


def _propagate_facts(tg: TG) -> None:
    """Recompute all facts from the seed over the surviving graph, in
    topological order, joining over incoming surviving edges."""
    seed = tg.facts[tg.init]
    ranks = tg._ranks

    def order_key(at: tuple[int, ...]) -> tuple:
        return (sum(r[i] for r, i in zip(ranks, at)), tg.name_of(at))

    tg.facts = {tg.init: seed}
    for at in sorted(tg.alive_nodes, key=order_key):
        if at == tg.init:
            continue
        steps = [
            step_fact(tg.facts[e.src], e, _note=tg._note_finding)
            for e in tg.in_edges(at)
            if e.realizable != "no" and e.src in tg.facts
        ]
        if steps:
            tg.facts[at] = join_facts(steps)


def reduce(tg: TG) -> TG:
    """Run marking, pruning, and fact recomputation to a fixpoint.  The
    removal history is kept per round; the initial node is never removed."""
    if tg.init not in tg.facts:
        seed_fact(tg, default_seed_fact(tg))
    while True:
        marks = mark_unrealizable(tg)
        removed = _prune(tg)
        if removed:
            tg.rounds.append(removed)
        _propagate_facts(tg)
        if not marks and not removed:
            break
    tg.reduced = True
    return tg


# ---------------------------------------------------------------------------
# Goal checking

def check_goal(tg: TG, goal: GoalSpec) -> Verdict:
    """Every surviving node where the named process sits at the goal's
    control point must entail the goal's equalities."""
    names = tg.proto.names()
    if goal.at_proc not in names:
        raise UnknownProcess(goal.at_proc)
    idx = names.index(goal.at_proc)
    want = frozenset(eq_canon(l, r) for l, r in goal.eqs)
    details: list[dict] = []
    ok = True
    for at in sorted(tg.alive_nodes, key=tg.name_of):
        if at[idx] != goal.at_node or at not in tg.facts:
            continue
        good = entails(tg.fact_formula(at), want)
        ok = ok and good
        details.append({
            "node": tg.name_of(at),
            "ok": good,
            "requires": sorted(str(e) for e in want),
        })
    for leak in tg.findings:
        ok = False
        details.append(leak.to_json())
    return Verdict(ok=ok, name=goal.name, details=tuple(details))


# ---------------------------------------------------------------------------
# Export

def export_dot(tg: TG, reduced: bool = False) -> str:
    """Graphviz rendering: double oval for the initial node, a filled
    circle head on edges disproved from facts."""
    lines = ["digraph tg {", "  rankdir=LR;", "  node [shape=oval];"]
    nodes = [n for n in tg.nodes if not reduced or n.at in tg.alive_nodes]
    for n in nodes:
        extra = " [peripheries=2]" if n.at == tg.init else ""
        lines.append(f'  "{n.name}"{extra};')
    for e in tg.edges:
        if reduced and e not in tg.alive_edges:
            continue
        attrs = [f'label="{e.label()}"']
        if e.realizable == "no" and e.reason == "empty-channel":
            attrs.append('arrowhead="dotnormal"')
        lines.append(
            f'  "{tg.name_of(e.src)}" -> "{tg.name_of(e.dst)}"'
            f' [{", ".join(attrs)}];')
    lines.append("}")
    return "\n".join(lines) + "\n"
