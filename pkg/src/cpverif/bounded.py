"""Bounded explicit-state exploration with the adversary in the loop.

The explorer runs breadth-first over the distributed semantics plus
adversary injections, deduplicating states up to renaming of fresh
constants.  Properties are evaluated at every new state; the first
violating state (hence a shortest counterexample) wins.  Exploration is
also the concrete oracle for the symbolic engine: visited control
vectors and per-state formula checks can be compared against a reduced
transition graph.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .formulas import (
    INTRUDER, Lit, SecureC, SecureK, holds,
)
from .intruder import (
    IntruderConfig, IntruderSession, Knowledge, WithIntruder, derivable,
)
from .processes import (
    Action, DistState, Protocol, Recv, Send,
    enabled, fire, initial_state, successors,
)
from .terms import (
    App, Con, ENCRYPT, FreshGen, OPEN, Term, Ty, Var,
    apply, is_fresh_con, subterm, subterm_set, term_sort_key, to_text,
)


class ResourceLimit(Exception):
    """The state cap was hit before the search finished."""


class PreconditionUnmet(Exception):
    """An oracle was asked about a trace point outside its contract."""


# ---------------------------------------------------------------------------
# Properties

@dataclass(frozen=True)
class Secrecy:
    name: str
    terms: frozenset[Term]


@dataclass(frozen=True)
class Witness:
    proc: str
    at: int
    eqs: tuple[tuple[Term, Term], ...]


@dataclass(frozen=True)
class Correspondence:
    name: str
    trigger_proc: str
    trigger_at: int
    witnesses: tuple[Witness, ...]


@dataclass(frozen=True)
class Integrity:
    name: str
    trigger_proc: str
    trigger_at: int
    eqs: tuple[tuple[Term, Term], ...]


PropertySpec = Secrecy | Correspondence | Integrity


@dataclass(frozen=True)
class ExploreConfig:
    sessions: tuple[tuple[str, int], ...] = ()
    max_depth: int = 24
    intruder: IntruderConfig = field(default_factory=IntruderConfig)
    agents: tuple[Term, ...] = ()
    seed: int = 0
    max_states: int = 200_000
    workers: int = 1


# ---------------------------------------------------------------------------
# Traces

@dataclass(frozen=True)
class Step:
    proc: str
    action: Action
    emitted: Optional[Term]  # ground payload for sends
    binding_delta: tuple[tuple[str, str], ...]
    chan_delta: tuple[tuple[str, tuple[str, ...]], ...]

    def to_json(self) -> dict:
        return {
            "proc": self.proc,
            "action": str(self.action),
            "bindingDelta": {n: v for n, v in self.binding_delta},
            "chanDelta": {c: list(ts) for c, ts in self.chan_delta},
        }


@dataclass(frozen=True)
class Trace:
    steps: tuple[Step, ...]
    states: tuple[DistState, ...]  # states[0] is initial; one more than steps

    def __len__(self) -> int:
        return len(self.steps)

    def to_json(self) -> list[dict]:
        return [st.to_json() for st in self.steps]


def _mk_step(parent: DistState, proc: str, action: Action,
             child: DistState) -> Step:
    emitted = None
    if isinstance(action, Send):
        emitted = apply(action.payload, parent.value_binding())
    bdelta = []
    pb, cb = parent.value_binding(), child.value_binding()
    for v in sorted(cb.domain() - pb.domain(), key=lambda v: v.name):
        bdelta.append((v.name, to_text(cb.get(v))))
    cdelta = []
    for cval, content in child.channels():
        old = parent.chan_content(cval)
        new = content - old
        if new:
            cdelta.append((to_text(cval),
                           tuple(sorted(to_text(t) for t in new))))
    return Step(proc, action, emitted, tuple(bdelta), tuple(cdelta))


@dataclass(frozen=True)
class BoundedVerdict:
    status: str  # "holds-at-bounds" | "violated"
    property_name: str
    counterexample: Optional[Trace]
    states_visited: int
    edges_fired: int

    @property
    def ok(self) -> bool:
        return self.status == "holds-at-bounds"

    def to_json(self) -> dict:
        out: dict = {
            "status": self.status,
            "property": self.property_name,
            "states": self.states_visited,
            "edges": self.edges_fired,
        }
        if self.counterexample is not None:
            out["counterexample"] = self.counterexample.to_json()
        return out


# ---------------------------------------------------------------------------
# State canonicalization

def canon_key(s: DistState) -> str:
    """Serialization invariant under consistent renaming of fresh
    constants; first occurrence (control, then bindings by variable name,
    then channels) fixes the numbering."""
    ren: dict[Con, str] = {}

    def ct(t: Term) -> str:
        if isinstance(t, Con):
            if is_fresh_con(t):
                if t not in ren:
                    ren[t] = f"f{len(ren)}"
                return ren[t]
            return t.name
        if isinstance(t, Var):
            return f"?{t.name}"
        assert isinstance(t, App)
        return f"{t.fn}({','.join(ct(a) for a in t.args)})"

    parts = [",".join(f"{n}{s.at(n)}" for n in s.proc_names())]
    th = s.value_binding()
    for v in sorted(th.domain(), key=lambda v: v.name):
        parts.append(f"{v.name}={ct(th.get(v))}")
    for cval, content in s.channels():
        inner = ";".join(sorted(ct(t) for t in content))
        parts.append(f"[{ct(cval)}]={inner}")
    return "|".join(parts)


# ---------------------------------------------------------------------------
# Exploration

# One BFS edge is a short sequence of micro steps, each with its
# post-state: honest moves are single steps, adversary injections come
# fused with the receive that consumes them (an unconsumed injection can
# never influence anything, since it is built from knowledge the
# adversary keeps anyway and channels are monotone).
Transition = tuple[tuple[Step, DistState], ...]


class Exploration:
    """One bounded search over a concrete protocol instance."""

    def __init__(self, proto: Protocol, cfg: Optional[ExploreConfig] = None):
        self.proto = proto
        self.cfg = cfg or ExploreConfig()
        fresh = FreshGen(self.cfg.seed)
        self.s0 = initial_state(proto, fresh, bounded=True)
        self.session = IntruderSession(proto, self.cfg.intruder, fresh)
        # BFS representatives; `state_of` also covers mid-injection states
        self.visited: dict[str, DistState] = {}
        self.state_of: dict[str, DistState] = {}
        self.depth: dict[str, int] = {}
        self.parent: dict[str, Optional[tuple[str, Transition]]] = {}
        self.order: list[str] = []
        # every micro step examined, by source/target canonical key
        self.edges: list[tuple[str, str, Step]] = []
        self.truncated = False

    # -- views -----------------------------------------------------------

    def knowledge(self, s: DistState) -> Knowledge:
        return self.session.knowledge(s)

    def view(self, s: DistState) -> WithIntruder:
        return WithIntruder(s, self.knowledge(s))

    # -- search ----------------------------------------------------------

    def run(self, props: Sequence[PropertySpec] = ()) -> BoundedVerdict:
        k0 = canon_key(self.s0)
        self.visited[k0] = self.state_of[k0] = self.s0
        self.depth[k0] = 0
        self.parent[k0] = None
        self.order.append(k0)
        bad = self._check_props(self.s0, props)
        if bad is not None:
            return self._verdict(bad, k0)
        frontier = [k0]
        while frontier:
            expandable = [k for k in frontier
                          if self.depth[k] < self.cfg.max_depth]
            if len(expandable) < len(frontier):
                self.truncated = True
            trans_of = self._transitions_for(expandable)
            nxt: list[str] = []
            for k in expandable:
                for tr in trans_of[k]:
                    prev = k
                    for step, state in tr:
                        ck = canon_key(state)
                        self.edges.append((prev, ck, step))
                        self.state_of.setdefault(ck, state)
                        prev = ck
                    child = tr[-1][1]
                    ck = prev
                    if ck in self.visited:
                        continue
                    if len(self.visited) >= self.cfg.max_states:
                        raise ResourceLimit(
                            f"more than {self.cfg.max_states} states")
                    self.visited[ck] = child
                    self.depth[ck] = self.depth[k] + 1
                    self.parent[ck] = (k, tr)
                    self.order.append(ck)
                    nxt.append(ck)
                    bad = self._check_props(child, props)
                    if bad is not None:
                        return self._verdict(bad, ck)
            frontier = nxt
        return BoundedVerdict(
            status="holds-at-bounds", property_name="all",
            counterexample=None, states_visited=len(self.visited),
            edges_fired=len(self.edges))

    def _transitions_for(self, keys: list[str]) -> dict[str, list[Transition]]:
        if self.cfg.workers > 1 and len(keys) > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                computed = list(pool.map(
                    lambda k: self._transitions(self.visited[k]), keys))
            return dict(zip(keys, computed))
        return {k: self._transitions(self.visited[k]) for k in keys}

    def _transitions(self, s: DistState) -> list[Transition]:
        out: list[Transition] = []
        for proc, action, child in successors(s):
            out.append(((_mk_step(s, proc, action, child), child),))
        out.extend(self._deliveries(s))
        return out

    def _deliveries(self, s: DistState) -> list[Transition]:
        """Adversary injections paired with every receive that consumes
        them right away.  The injected term stays on the channel, so
        later readers still see it."""
        out: list[Transition] = []
        for _, send, mid in self.session.moves(s):
            injected = send.payload
            mid_step = _mk_step(s, INTRUDER, send, mid)
            for sp in self.proto.sps:
                for e2, ext in enabled(mid, sp.name):
                    if not isinstance(e2.action, Recv):
                        continue
                    got = apply(apply(e2.action.pattern, mid.value_binding()),
                                ext)
                    if got != injected:
                        continue
                    child = fire(mid, sp.name, e2, ext)
                    out.append((
                        (mid_step, mid),
                        (_mk_step(mid, sp.name, e2.action, child), child),
                    ))
        return out

    # -- properties ------------------------------------------------------

    def _check_props(self, s: DistState,
                     props: Sequence[PropertySpec]) -> Optional[PropertySpec]:
        for p in props:
            if isinstance(p, Secrecy):
                if not check_secrecy(s, p.terms, self.knowledge(s)):
                    return p
            elif isinstance(p, Correspondence):
                if not check_correspondence(s, p):
                    return p
            elif isinstance(p, Integrity):
                if not check_integrity(s, p):
                    return p
        return None

    def _verdict(self, prop: PropertySpec, key: str) -> BoundedVerdict:
        return BoundedVerdict(
            status="violated", property_name=prop.name,
            counterexample=self.trace_to(key),
            states_visited=len(self.visited), edges_fired=len(self.edges))

    # -- traces ----------------------------------------------------------

    def trace_to(self, key: str) -> Trace:
        steps: list[Step] = []
        states: list[DistState] = []
        cur = key
        while self.parent[cur] is not None:
            prev, tr = self.parent[cur]
            for step, state in reversed(tr):
                steps.append(step)
                states.append(state)
            cur = prev
        steps.reverse()
        states.reverse()
        return Trace(tuple(steps), (self.visited[cur], *states))

    def controls(self) -> set[tuple[int, ...]]:
        return {s.control() for s in self.visited.values()}


def explore(proto: Protocol, cfg: Optional[ExploreConfig] = None,
            props: Sequence[PropertySpec] = ()) -> BoundedVerdict:
    return Exploration(proto, cfg).run(props)


# ---------------------------------------------------------------------------
# Property checks

def _split_secure(terms: frozenset[Term]):
    e_c = frozenset(t for t in terms if t.ty is Ty.C)
    e_k = terms - e_c
    return e_c, e_k


def check_secrecy(s: DistState, terms: frozenset[Term],
                  kn: Optional[Knowledge] = None) -> bool:
    """Occurrence security of the given family against the adversary,
    cross-checked against non-derivability of each member's value."""
    if kn is None:
        from .intruder import absorb, default_seed
        kn = absorb(default_seed(s.proto), s)
    view = WithIntruder(s, kn)
    e_c, e_k = _split_secure(terms)
    phi = set()
    if e_c:
        phi.add(SecureC(Lit(e_c)))
    if e_k:
        phi.add(SecureK(Lit(e_k)))
    ok = holds(frozenset(phi), view)
    if ok:
        th = s.value_binding()
        for t in sorted(terms, key=term_sort_key):
            val = apply(t, th)
            if derivable(kn, val):
                raise AssertionError(
                    f"secure family member {to_text(val)} is derivable")
    return ok


def check_correspondence(s: DistState, spec: Correspondence) -> bool:
    """Vacuously true off-trigger; otherwise some witness instance must
    sit at its node with all equalities holding under the binding."""
    if s.at(spec.trigger_proc) != spec.trigger_at:
        return True
    th = s.value_binding()
    for w in spec.witnesses:
        if s.at(w.proc) != w.at:
            continue
        if all(apply(l, th) == apply(r, th) for l, r in w.eqs):
            return True
    return False


def check_integrity(s: DistState, spec: Integrity) -> bool:
    if s.at(spec.trigger_proc) != spec.trigger_at:
        return True
    th = s.value_binding()
    return all(apply(l, th) == apply(r, th) for l, r in spec.eqs)


# ---------------------------------------------------------------------------
# Emitter oracle

def find_emitter(trace: Trace, s_index: int, k: Term, e: Term,
                 terms: frozenset[Term],
                 kn: Optional[Knowledge] = None) -> Optional[Step]:
    """The earliest honest send whose ground payload contains the
    encryption of `e` under `k`, among the steps leading to the indexed
    state.  Under key security this send must exist; returning None means
    the correspondence guarantee failed."""
    if not 0 <= s_index < len(trace.states):
        raise PreconditionUnmet(f"no state at index {s_index}")
    s = trace.states[s_index]
    needle = None
    for t in s.chan_content(OPEN):
        for sub in subterm_set(t):
            if isinstance(sub, App) and sub.fn == ENCRYPT \
                    and sub.args[0] == k and sub.args[1] == e:
                needle = sub
    if needle is None:
        raise PreconditionUnmet("open channel holds no such encryption")
    th = s.value_binding()
    if k not in {apply(t, th) for t in terms if t.ty is Ty.K}:
        raise PreconditionUnmet(f"{to_text(k)} is not a secured key")
    if not check_secrecy(s, terms, kn):
        raise PreconditionUnmet("family not secure at this state")
    for step in trace.steps[:s_index]:
        if step.proc == INTRUDER or step.emitted is None:
            continue
        if subterm(needle, step.emitted):
            return step
    return None
