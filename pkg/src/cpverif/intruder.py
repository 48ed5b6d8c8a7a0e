"""Adversary model: knowledge absorption, bounded derivation, injections.

The adversary owns the open channel and any channel whose C-kind name it
has learned.  Its knowledge base is kept decomposition-closed: tuples are
always split, encrypted payloads are extracted when the key is known.
Shared-key and shared-channel applications are never constructible, so
an outsider can only replay them inside absorbed material.

Injections are lazy: instead of flooding channels, the adversary
enumerates bindings against the receive templates honest processes are
waiting on, combining replay of absorbed terms, guided construction, and
a bounded pool of freshly minted nonces and keys.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

from .formulas import INTRUDER
from .processes import Action, DistState, Protocol, Recv, Send
from .terms import (
    App, Binding, Con, FreshGen, Term, Ty, Var,
    ENCRYPT, OPEN, TUPLE,
    apply, compose, kind_le, match_template, term_sort_key, vars_of,
)


@dataclass(frozen=True)
class IntruderConfig:
    deriv_depth: int = 2
    fresh_budget: int = 2
    extra_knowledge: frozenset[Term] = frozenset()


@dataclass(frozen=True)
class Knowledge:
    base: frozenset[Term]
    deriv_depth: int = 2

    def readable(self, chan_value: Term) -> bool:
        return chan_value is OPEN or chan_value in self.base


def default_seed(proto: Protocol) -> frozenset[Term]:
    """Public startup knowledge: the agent names and the open channel."""
    return frozenset(proto.agents()) | {OPEN}


def _decompose(base: set[Term]) -> None:
    work = list(base)
    while work:
        t = work.pop()
        if not isinstance(t, App):
            continue
        new: list[Term] = []
        if t.fn == TUPLE:
            new = [a for a in t.args if a not in base]
        elif t.fn == ENCRYPT and t.args[0] in base and t.args[1] not in base:
            new = [t.args[1]]
        for n in new:
            base.add(n)
            work.append(n)
        if t.fn == ENCRYPT and t.args[0] not in base:
            # Revisited when the key turns up, via the outer loop.
            pass


def absorb(seed: frozenset[Term], s: DistState) -> Knowledge:
    """Close the seed under readable-channel contents and decomposition."""
    base = set(seed)
    changed = True
    while changed:
        changed = False
        before = len(base)
        _decompose(base)
        for c, content in s.channels():
            if c is OPEN or c in base:
                for t in content:
                    if t not in base:
                        base.add(t)
        if len(base) != before:
            changed = True
    return Knowledge(frozenset(base))


def derivable(k: Knowledge, t: Term, depth: Optional[int] = None) -> bool:
    """Replay (depth 0) or construction by tupling/encryption with a
    known key, within the configured construction depth."""
    d = k.deriv_depth if depth is None else depth
    if t in k.base:
        return True
    if d <= 0 or not isinstance(t, App):
        return False
    if t.fn == TUPLE:
        return all(derivable(k, a, d - 1) for a in t.args)
    if t.fn == ENCRYPT:
        return derivable(k, t.args[0], d - 1) and derivable(k, t.args[1], d - 1)
    # Shared keys/channels and raw decryption terms cannot be built.
    return False


class MintPool:
    """The adversary's own fresh nonces and keys, created once per run and
    reused everywhere, so the injection relation stays state-independent."""

    def __init__(self, fresh: FreshGen, budget: int):
        self.nonces: list[Con] = [
            fresh.fresh(Ty.N, "dagN") for _ in range(budget)]
        self.keys: list[Con] = [
            fresh.fresh(Ty.K, "dagK") for _ in range(budget)]

    def all(self) -> list[Con]:
        return self.nonces + self.keys


def injections(k: Knowledge, pattern: Term,
               bound: frozenset[Var] = frozenset()) -> list[Binding]:
    """Bindings of the pattern's free variables for which the adversary
    can supply the instantiated pattern.

    Constrained (non-constructible) positions are solved by unifying with
    absorbed terms; variables range over knowledge atoms and, for M-kind,
    over whole absorbed terms.  Minted values take part by being in the
    knowledge base.
    """
    base_sorted = sorted(k.base, key=term_sort_key)

    def var_candidates(v: Var) -> list[Term]:
        if v.ty is Ty.M:
            return list(base_sorted)
        return [t for t in base_sorted
                if not isinstance(t, App) and kind_le(t.ty, v.ty)]

    def solve(pat: Term, th: Binding, depth: int) -> Iterable[Binding]:
        pat = apply(pat, th)
        if isinstance(pat, Var) and pat not in bound:
            for cand in var_candidates(pat):
                yield th.extend({pat: cand})
            return
        if not vars_free(pat):
            if derivable(k, pat):
                yield th
            return
        if isinstance(pat, App) and pat.fn == TUPLE and depth > 0:
            states = [th]
            for comp in pat.args:
                nxt: list[Binding] = []
                for cur in states:
                    nxt.extend(solve(comp, cur, depth - 1))
                states = _dedup(nxt)
            yield from states
            return
        if isinstance(pat, App) and pat.fn == ENCRYPT and depth > 0:
            kpat, ppat = pat.args
            # Construction: derive the key, then supply the payload.
            for th1 in _dedup(solve(kpat, th, depth - 1)):
                kval = apply(kpat, th1)
                if not vars_free(kval) and derivable(k, kval):
                    yield from solve(ppat, th1, depth - 1)
        # Replay: unify the whole pattern with an absorbed term.
        for t in base_sorted:
            ext = match_template(pat, t, bound)
            if ext is not None:
                yield compose(th, ext)

    def vars_free(t: Term) -> frozenset[Var]:
        return frozenset(v for v in vars_of(t) if v not in bound)

    found = _dedup(solve(pattern, Binding(), max(1, k.deriv_depth)))
    found.sort(key=lambda b: repr(b))
    return found


def _dedup(bs: Iterable[Binding]) -> list[Binding]:
    seen: set[Binding] = set()
    out: list[Binding] = []
    for b in bs:
        if b not in seen:
            seen.add(b)
            out.append(b)
    return out


class WithIntruder:
    """State view that answers adversary queries from an absorbed
    knowledge base and delegates everything else to the state."""

    def __init__(self, s: DistState, kn: Knowledge):
        self._s = s
        self._kn = kn

    def proc_names(self) -> list[str]:
        return self._s.proc_names()

    def at(self, proc: str) -> int:
        return self._s.at(proc)

    def known_values(self, proc: str) -> frozenset[Term]:
        if proc == INTRUDER:
            return self._kn.base
        return self._s.known_values(proc)

    def channels(self):
        return self._s.channels()

    def chan_content(self, chan_value: Term) -> frozenset[Term]:
        return self._s.chan_content(chan_value)

    def value_binding(self) -> Binding:
        return self._s.value_binding()

    def agent_of(self, proc: str) -> Term:
        return self._s.agent_of(proc)


class IntruderSession:
    """Per-run adversary: seed knowledge, mint pool, move generation."""

    def __init__(self, proto: Protocol, cfg: IntruderConfig, fresh: FreshGen):
        self.cfg = cfg
        self.seed = default_seed(proto) | cfg.extra_knowledge
        self.mints = MintPool(fresh, cfg.fresh_budget)
        self._cache: dict[DistState, Knowledge] = {}

    def knowledge(self, s: DistState) -> Knowledge:
        kn = self._cache.get(s)
        if kn is None:
            closed = absorb(frozenset(self.seed) | frozenset(self.mints.all()), s)
            kn = Knowledge(closed.base, self.cfg.deriv_depth)
            self._cache[s] = kn
        return kn

    def moves(self, s: DistState) -> list[tuple[str, Action, DistState]]:
        """Adversary sends targeted at the receive templates currently
        pending in the state, on channels it can write."""
        kn = self.knowledge(s)
        out: list[tuple[str, Action, DistState]] = []
        sent: set[tuple[Term, Term]] = set()
        for sp in s.proto.sps:
            ps = s.procs[sp.name]
            for e in sp.out_edges(ps.at):
                if not isinstance(e.action, Recv):
                    continue
                if not vars_of(e.action.chan) <= ps.known:
                    continue
                cval = apply(e.action.chan, s.binding)
                if not kn.readable(cval):
                    continue
                pat = apply(e.action.pattern, s.binding)
                for th in injections(kn, pat):
                    t = apply(pat, th)
                    if vars_of(t):
                        continue
                    if t in s.chan_content(cval) or (cval, t) in sent:
                        continue
                    sent.add((cval, t))
                    chans = dict(s.chans)
                    chans[cval] = chans.get(cval, frozenset()) | {t}
                    s2 = DistState(s.proto, s.procs, s.binding, chans)
                    out.append((INTRUDER, Send(cval, t), s2))
        out.sort(key=lambda m: (term_sort_key(m[1].chan),
                                term_sort_key(m[1].payload)))
        return out
