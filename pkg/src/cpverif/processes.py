"""Sequential processes, distributed states, and the firing semantics.

A sequential process (SP) is a finite action-labelled graph over control
nodes.  A protocol is an ordered family of SPs with pairwise disjoint
variables sharing one global binding; channels are monotone term sets.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .formulas import INTRUDER, UnknownProcess
from .terms import (
    App, Binding, Con, FreshGen, Term, Ty, Var,
    DAGGER, EMPTY_BINDING, ENCRYPT, OPEN, SHARED_CHANNEL, SHARED_KEY,
    apply, compose, keys_of, kind_le, match_template, subterm_set, term_sort_key,
    to_text, var, vars_of,
)


class VariableClash(Exception):
    """Two composed processes share a variable or a name."""


class NotEnabled(Exception):
    """fire() was called for an action that is not enabled."""


# ---------------------------------------------------------------------------
# Actions

@dataclass(frozen=True)
class Send:
    chan: Term
    payload: Term

    def __str__(self) -> str:
        return f"{to_text(self.chan)}!{to_text(self.payload)}"


@dataclass(frozen=True)
class Recv:
    chan: Term
    pattern: Term

    def __str__(self) -> str:
        return f"{to_text(self.chan)}?{to_text(self.pattern)}"


@dataclass(frozen=True)
class Assign:
    lhs: Term
    rhs: Term

    def __str__(self) -> str:
        return f"{to_text(self.lhs)}:={to_text(self.rhs)}"


Action = Send | Recv | Assign


def action_terms(a: Action) -> tuple[Term, ...]:
    if isinstance(a, Send):
        return (a.chan, a.payload)
    if isinstance(a, Recv):
        return (a.chan, a.pattern)
    return (a.lhs, a.rhs)


@dataclass(frozen=True)
class Edge:
    src: int
    action: Action
    dst: int

    def __str__(self) -> str:
        return f"{self.src}-[{self.action}]->{self.dst}"


# ---------------------------------------------------------------------------
# Sequential processes

@dataclass(frozen=True)
class SeqProc:
    """One role/process: control graph plus variable discipline.

    `agent` is an A-kind variable in role templates and an agent constant
    once instantiated.  `hidden` variables get fresh values at start,
    `params` are free parameters initialized at start, `bound` variables
    are bound by receives/assignments during execution.
    """

    name: str
    agent: Term
    edges: tuple[Edge, ...]
    hidden: frozenset[Var] = frozenset()
    params: frozenset[Var] = frozenset()
    bound: frozenset[Var] = frozenset()
    init: int = 0
    replicable: bool = False

    def __post_init__(self) -> None:
        cats = [self.hidden, self.params, self.bound]
        for i, a in enumerate(cats):
            for b in cats[i + 1:]:
                if a & b:
                    raise VariableClash(
                        f"{self.name}: variable in two categories: "
                        f"{sorted(v.name for v in a & b)}")
        allowed = self.variables() | ({self.agent} if isinstance(self.agent, Var)
                                      else frozenset())
        for e in self.edges:
            for t in action_terms(e.action):
                stray = {v for v in vars_of(t)} - allowed
                if stray:
                    raise VariableClash(
                        f"{self.name}: action {e.action} uses undeclared "
                        f"variables {sorted(v.name for v in stray)}")

    def variables(self) -> frozenset[Var]:
        return self.hidden | self.params | self.bound

    def nodes(self) -> frozenset[int]:
        out = {self.init}
        for e in self.edges:
            out.add(e.src)
            out.add(e.dst)
        return frozenset(out)

    def out_edges(self, node: int) -> list[Edge]:
        return [e for e in self.edges if e.src == node]


def rename_sp(sp: SeqProc, eta: dict[Var, Var]) -> SeqProc:
    """Apply an injective variable renaming to a whole process."""
    from .terms import rename as rn
    th = Binding({x: y for x, y in eta.items()})

    def rt(t: Term) -> Term:
        rn(t, eta)  # validates injectivity and kinds
        return apply(t, th)

    def ra(a: Action) -> Action:
        if isinstance(a, Send):
            return Send(rt(a.chan), rt(a.payload))
        if isinstance(a, Recv):
            return Recv(rt(a.chan), rt(a.pattern))
        return Assign(rt(a.lhs), rt(a.rhs))

    return SeqProc(
        name=sp.name,
        agent=eta.get(sp.agent, sp.agent) if isinstance(sp.agent, Var) else sp.agent,
        edges=tuple(Edge(e.src, ra(e.action), e.dst) for e in sp.edges),
        hidden=frozenset(eta.get(v, v) for v in sp.hidden),
        params=frozenset(eta.get(v, v) for v in sp.params),
        bound=frozenset(eta.get(v, v) for v in sp.bound),
        init=sp.init,
        replicable=sp.replicable,
    )


def instantiate(role: SeqProc, inst_name: str, agent: Term,
                param_values: Optional[dict[str, Term]] = None) -> SeqProc:
    """Make a concrete copy of a role.

    Variables keep bare names when the copy is named like the role,
    otherwise they become `inst.var`.  The role's agent variable is
    substituted by the given agent constant; A-kind parameters may be
    filled from `param_values` (keyed by bare variable name).
    """
    if agent.ty is not Ty.A:
        raise VariableClash(f"agent of {inst_name} must have kind A, got {agent}")
    eta: dict[Var, Var] = {}
    if inst_name != role.name:
        eta = {v: var(f"{inst_name}.{v.name}", v.ty) for v in role.variables()}
    sp = rename_sp(role, eta) if eta else role
    subst: dict[Var, Term] = {}
    if isinstance(sp.agent, Var):
        subst[sp.agent] = agent
    fills: set[Var] = set()
    for v in sp.params:
        base = v.name.split(".", 1)[-1]
        if param_values and base in param_values:
            subst[v] = param_values[base]
            fills.add(v)
    th = Binding(subst)

    def sa(a: Action) -> Action:
        if isinstance(a, Send):
            return Send(apply(a.chan, th), apply(a.payload, th))
        if isinstance(a, Recv):
            return Recv(apply(a.chan, th), apply(a.pattern, th))
        return Assign(apply(a.lhs, th), apply(a.rhs, th))

    return SeqProc(
        name=inst_name,
        agent=agent,
        edges=tuple(Edge(e.src, sa(e.action), e.dst) for e in sp.edges),
        hidden=sp.hidden,
        params=frozenset(v for v in sp.params if v not in fills),
        bound=sp.bound,
        init=sp.init,
        replicable=sp.replicable,
    )


# ---------------------------------------------------------------------------
# Protocols (ordered families of SPs)

class Protocol:
    """An ordered family of concrete SPs with disjoint variables."""

    def __init__(self, sps: Iterable[SeqProc]):
        self.sps: tuple[SeqProc, ...] = tuple(sps)
        self.by_name: dict[str, SeqProc] = {}
        seen_vars: dict[Var, str] = {}
        for sp in self.sps:
            if sp.name in self.by_name:
                raise VariableClash(f"duplicate process name {sp.name}")
            if isinstance(sp.agent, Var):
                raise VariableClash(
                    f"process {sp.name} still has a symbolic agent")
            self.by_name[sp.name] = sp
            for v in sp.variables():
                if v in seen_vars:
                    raise VariableClash(
                        f"variable {v.name} shared by {seen_vars[v]} and {sp.name}")
                seen_vars[v] = sp.name

    def names(self) -> list[str]:
        return [sp.name for sp in self.sps]

    def agents(self) -> list[Term]:
        out = []
        for sp in self.sps:
            if sp.agent not in out:
                out.append(sp.agent)
        return out


# ---------------------------------------------------------------------------
# Distributed states

@dataclass(frozen=True)
class ProcState:
    at: int
    known: frozenset[Var]
    last: Optional[Action] = field(default=None, compare=False)


class DistState:
    """Immutable distributed state: control, one global binding, channels.

    The `last` components and the protocol reference do not participate
    in equality; channel contents are monotone along any run.
    """

    __slots__ = ("proto", "procs", "binding", "chans", "_h")

    def __init__(self, proto: Protocol, procs: dict[str, ProcState],
                 binding: Binding, chans: dict[Term, frozenset[Term]]):
        self.proto = proto
        self.procs = dict(procs)
        self.binding = binding
        self.chans = {c: v for c, v in chans.items() if v}
        self._h = hash((
            tuple(sorted((n, p.at, p.known) for n, p in self.procs.items())),
            self.binding,
            frozenset(self.chans.items()),
        ))

    def __hash__(self) -> int:
        return self._h

    def __eq__(self, other) -> bool:
        return (isinstance(other, DistState)
                and self._h == other._h
                and self.binding == other.binding
                and self.chans == other.chans
                and {n: (p.at, p.known) for n, p in self.procs.items()}
                == {n: (p.at, p.known) for n, p in other.procs.items()})

    # -- state view interface -------------------------------------------

    def proc_names(self) -> list[str]:
        return [sp.name for sp in self.proto.sps]

    def at(self, proc: str) -> int:
        try:
            return self.procs[proc].at
        except KeyError:
            raise UnknownProcess(proc) from None

    def known_values(self, proc: str) -> frozenset[Term]:
        if proc == INTRUDER:
            raise UnknownProcess(
                "adversary values need an intruder-aware view")
        try:
            ps = self.procs[proc]
        except KeyError:
            raise UnknownProcess(proc) from None
        th = self.binding
        return frozenset(apply(x, th) for x in ps.known)

    def channels(self) -> list[tuple[Term, frozenset[Term]]]:
        return sorted(self.chans.items(), key=lambda cv: term_sort_key(cv[0]))

    def chan_content(self, chan_value: Term) -> frozenset[Term]:
        return self.chans.get(chan_value, frozenset())

    def value_binding(self) -> Binding:
        return self.binding

    def agent_of(self, proc: str) -> Term:
        if proc == INTRUDER:
            return DAGGER
        try:
            return self.proto.by_name[proc].agent
        except KeyError:
            raise UnknownProcess(proc) from None

    # -- misc -----------------------------------------------------------

    def control(self) -> tuple[int, ...]:
        return tuple(self.procs[sp.name].at for sp in self.proto.sps)

    def control_name(self) -> str:
        return "".join(
            f"{sp.name}{self.procs[sp.name].at}" for sp in self.proto.sps)

    def replace(self, proc: str, ps: ProcState,
                binding: Optional[Binding] = None,
                chans: Optional[dict[Term, frozenset[Term]]] = None) -> "DistState":
        procs = dict(self.procs)
        procs[proc] = ps
        return DistState(
            self.proto, procs,
            self.binding if binding is None else binding,
            self.chans if chans is None else chans,
        )

    def __repr__(self) -> str:
        return f"<{self.control_name()} {self.binding!r}>"


def initial_state(proto: Protocol, fresh: FreshGen,
                  bounded: bool = False) -> DistState:
    """Start state: hidden variables fresh, parameters self-bound
    (symbolic mode) or fresh constants (bounded mode, A-kind parameters
    excepted: those must have been filled at instantiation)."""
    theta: dict[Var, Term] = {}
    procs: dict[str, ProcState] = {}
    for sp in proto.sps:
        for v in sorted(sp.hidden, key=lambda v: v.name):
            theta[v] = fresh.fresh(v.ty, v.name)
        for v in sorted(sp.params, key=lambda v: v.name):
            if bounded and v.ty is not Ty.A:
                theta[v] = fresh.fresh(v.ty, v.name)
        procs[sp.name] = ProcState(at=sp.init, known=sp.hidden | sp.params)
    return DistState(proto, procs, Binding(theta), {})


# ---------------------------------------------------------------------------
# Enabledness and firing

def _chan_available(c: Term, known: frozenset[Var]) -> bool:
    # The channel position holds the open channel, a shared-channel
    # application over agents, or an initialized C-kind variable.
    return vars_of(c) <= known


def _nonkey_vars(t: Term) -> frozenset[Var]:
    """Variables with at least one occurrence outside encryption-key
    position (those a receive can legitimately bind)."""
    out: set[Var] = set()

    def walk(u: Term) -> None:
        if isinstance(u, Var):
            out.add(u)
        elif isinstance(u, App):
            if u.fn == ENCRYPT:
                walk(u.args[1])
            else:
                for a in u.args:
                    walk(a)

    walk(t)
    return frozenset(out)


def side_condition_ok(action: Action, theta: Binding, agent: Term) -> bool:
    """Every shared-key/shared-channel application written in the action
    must, with its arguments instantiated, contain the acting agent."""
    for t in action_terms(action):
        for sub in subterm_set(t):
            if isinstance(sub, App) and sub.fn in (SHARED_KEY, SHARED_CHANNEL):
                if agent not in (apply(a, theta) for a in sub.args):
                    return False
    return True


def enabled(s: DistState, proc: str) -> list[tuple[Edge, Binding]]:
    """All (edge, extension) pairs the process can fire now, in a
    deterministic order."""
    sp = s.proto.by_name[proc]
    ps = s.procs[proc]
    th = s.binding
    out: list[tuple[Edge, Binding]] = []
    for e in sp.out_edges(ps.at):
        a = e.action
        if isinstance(a, Send):
            if not (_chan_available(a.chan, ps.known)
                    and vars_of(a.payload) <= ps.known):
                continue
            if side_condition_ok(a, th, sp.agent):
                out.append((e, EMPTY_BINDING))
        elif isinstance(a, Recv):
            if not _chan_available(a.chan, ps.known):
                continue
            cval = apply(a.chan, th)
            pat = apply(a.pattern, th)
            # Keys used for reading must be initialized, or bound by this
            # very receive at a position outside key place.
            if not keys_of(pat) <= (ps.known | _nonkey_vars(pat)):
                continue
            cands = sorted(s.chan_content(cval), key=term_sort_key)
            for t in cands:
                ext = match_template(pat, t)
                if ext is None:
                    continue
                if side_condition_ok(a, compose(th, ext), sp.agent):
                    out.append((e, ext))
        else:
            if not vars_of(a.rhs) <= ps.known:
                continue
            ext = match_template(apply(a.lhs, th), apply(a.rhs, th))
            if ext is not None and side_condition_ok(
                    a, compose(th, ext), sp.agent):
                out.append((e, ext))
    return out


def fire(s: DistState, proc: str, edge: Edge, ext: Binding) -> DistState:
    """Execute one enabled action; monotone on channels and knowledge."""
    if not any(e is edge or e == edge for e, x in enabled(s, proc) if x == ext):
        raise NotEnabled(f"{proc}: {edge} with {ext!r}")
    sp = s.proto.by_name[proc]
    ps = s.procs[proc]
    a = edge.action
    if isinstance(a, Send):
        cval = apply(a.chan, s.binding)
        pval = apply(a.payload, s.binding)
        chans = dict(s.chans)
        chans[cval] = chans.get(cval, frozenset()) | {pval}
        return s.replace(proc, ProcState(edge.dst, ps.known, a), chans=chans)
    if isinstance(a, Recv):
        nb = compose(s.binding, ext)
        nk = ps.known | vars_of(a.pattern)
        return s.replace(proc, ProcState(edge.dst, nk, a), binding=nb)
    nb = compose(s.binding, ext)
    nk = ps.known | vars_of(a.lhs)
    return s.replace(proc, ProcState(edge.dst, nk, a), binding=nb)


MoveProvider = Callable[[DistState], list[tuple[str, Action, DistState]]]


def successors(s: DistState, intruder_moves: Optional[MoveProvider] = None
               ) -> list[tuple[str, Action, DistState]]:
    """Deterministic successor list: honest moves in process order, then
    adversary moves from the supplied provider."""
    out: list[tuple[str, Action, DistState]] = []
    for sp in s.proto.sps:
        for e, ext in enabled(s, sp.name):
            out.append((sp.name, e.action, fire(s, sp.name, e, ext)))
    if intruder_moves is not None:
        out.extend(intruder_moves(s))
    return out
