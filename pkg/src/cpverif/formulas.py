"""State formulas: set expressions, element formulas, evaluation, entailment.

A formula is a finite conjunction (frozenset) of element formulas over set
expressions.  Evaluation needs a state view: anything that can report
control positions, known values per process, and channel contents.  The
adversary's value set is queried under the reserved process name #Dagger.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Protocol, Union as TyUnion

from .terms import (
    App, Binding, Con, Term, Ty, Var,
    ENCRYPT, SHARED_CHANNEL, SHARED_KEY,
    app as mk_app, apply, subterm, subterm_set, term_sort_key, to_text,
)

INTRUDER = "#Dagger"


class UnknownProcess(Exception):
    """A formula mentions a process the state does not contain."""


class UnsupportedEFShape(Exception):
    """entails() was asked about a formula outside its sound fragment."""


# ---------------------------------------------------------------------------
# Set expressions

@dataclass(frozen=True)
class Lit:
    terms: frozenset[Term]

    def __str__(self) -> str:
        return "{" + ",".join(sorted(map(to_text, self.terms))) + "}"


@dataclass(frozen=True)
class ProcKnown:
    proc: str

    def __str__(self) -> str:
        return f"[{self.proc}]"


@dataclass(frozen=True)
class ChanContent:
    chan: Term

    def __str__(self) -> str:
        return f"[{to_text(self.chan)}]"


@dataclass(frozen=True)
class KeyInv:
    key: Term
    inner: "Expr"

    def __str__(self) -> str:
        return f"{to_text(self.key)}^-1{self.inner}"


@dataclass(frozen=True)
class Inter:
    parts: tuple["Expr", ...]

    def __str__(self) -> str:
        return "(" + " & ".join(map(str, self.parts)) + ")"


@dataclass(frozen=True)
class Union:
    parts: tuple["Expr", ...]

    def __str__(self) -> str:
        return "(" + " | ".join(map(str, self.parts)) + ")"


Expr = TyUnion[Lit, ProcKnown, ChanContent, KeyInv, Inter, Union]


def lit(*terms: Term) -> Lit:
    return Lit(frozenset(terms))


# ---------------------------------------------------------------------------
# Element formulas

@dataclass(frozen=True)
class In:
    elem: Term
    expr: Expr

    def __str__(self) -> str:
        return f"{to_text(self.elem)} in {self.expr}"


@dataclass(frozen=True)
class Eq:
    lhs: Term
    rhs: Term

    def __str__(self) -> str:
        return f"{to_text(self.lhs)} = {to_text(self.rhs)}"


@dataclass(frozen=True)
class Sub:
    expr: Expr
    of: Expr

    def __str__(self) -> str:
        return f"{self.expr} <= {self.of}"


@dataclass(frozen=True)
class Sup:
    expr: Expr
    of: Expr

    def __str__(self) -> str:
        return f"{self.expr} >= {self.of}"


@dataclass(frozen=True)
class SecureC:
    expr: Expr
    proc: str = INTRUDER

    def __str__(self) -> str:
        return f"{self.expr} secureC {self.proc}"


@dataclass(frozen=True)
class SecureK:
    expr: Expr
    proc: str = INTRUDER

    def __str__(self) -> str:
        return f"{self.expr} secureK {self.proc}"


@dataclass(frozen=True)
class At:
    proc: str
    node: int

    def __str__(self) -> str:
        return f"at_{self.proc} = {self.node}"


EF = TyUnion[In, Eq, Sub, Sup, SecureC, SecureK, At]
Formula = frozenset


def eq_canon(a: Term, b: Term) -> Eq:
    """Order the sides deterministically so Eq(x,y) and Eq(y,x) coincide."""
    if term_sort_key(a) <= term_sort_key(b):
        return Eq(a, b)
    return Eq(b, a)


# ---------------------------------------------------------------------------
# State view

class StateView(Protocol):
    def proc_names(self) -> Iterable[str]: ...

    def at(self, proc: str) -> int: ...

    def known_values(self, proc: str) -> frozenset[Term]: ...

    def channels(self) -> Iterable[tuple[Term, frozenset[Term]]]: ...

    def chan_content(self, chan_value: Term) -> frozenset[Term]: ...

    def value_binding(self) -> Binding: ...

    def agent_of(self, proc: str) -> Term: ...


# ---------------------------------------------------------------------------
# Evaluation

def eval_expr(expr: Expr, s: StateView) -> frozenset[Term]:
    """The value of a set expression in a state, as a finite set of terms."""
    th = s.value_binding()
    if isinstance(expr, Lit):
        return frozenset(apply(t, th) for t in expr.terms)
    if isinstance(expr, ProcKnown):
        if expr.proc != INTRUDER and expr.proc not in set(s.proc_names()):
            raise UnknownProcess(expr.proc)
        return s.known_values(expr.proc)
    if isinstance(expr, ChanContent):
        return s.chan_content(apply(expr.chan, th))
    if isinstance(expr, KeyInv):
        # Payloads under the key anywhere inside the inner set's terms, not
        # just at the top level: k applied to e counts when k(e) is a subterm.
        kval = apply(expr.key, th)
        found: set[Term] = set()
        for t in eval_expr(expr.inner, s):
            for sub in subterm_set(t):
                if isinstance(sub, App) and sub.fn == ENCRYPT \
                        and sub.args[0] == kval:
                    found.add(sub.args[1])
        return frozenset(found)
    if isinstance(expr, Inter):
        out: Optional[frozenset[Term]] = None
        for p in expr.parts:
            v = eval_expr(p, s)
            out = v if out is None else out & v
        return out or frozenset()
    if isinstance(expr, Union):
        out2: frozenset[Term] = frozenset()
        for p in expr.parts:
            out2 |= eval_expr(p, s)
        return out2
    raise UnsupportedEFShape(f"not a set expression: {expr!r}")


def secure_occurrence(x: Term, e: Term, keys: frozenset[Term]) -> bool:
    """True iff every occurrence of `x` in `e` sits under an encryption
    whose key belongs to `keys`.  An occurrence in key position counts as
    inside its own encryption; a bare occurrence is never protected."""

    def walk(t: Term, covered: bool) -> bool:
        if t is x:
            return covered
        if isinstance(t, App):
            if t.fn == ENCRYPT:
                inner = covered or t.args[0] in keys
                return walk(t.args[0], inner) and walk(t.args[1], inner)
            return all(walk(a, covered) for a in t.args)
        return True

    return walk(e, False)


def _atoms(values: frozenset[Term]) -> frozenset[Term]:
    return frozenset(t for t in values if not isinstance(t, App))


def _k_elems(values: frozenset[Term]) -> frozenset[Term]:
    return frozenset(t for t in values if t.ty is Ty.K)


def _holds_secure_c(expr: Expr, proc: str, s: StateView) -> bool:
    S = eval_expr(expr, s)
    agent = s.agent_of(proc)
    # The target's agent must not be a member of any secured term.
    if any(subterm(agent, t) for t in S):
        return False
    X = _atoms(S)
    if not X:
        return True
    for y in s.known_values(proc):
        if any(subterm(x, y) for x in X):
            return False
    for c, content in s.channels():
        if c in S:
            continue
        for e in content:
            if any(subterm(x, e) for x in X):
                return False
    return True


def _holds_secure_k(expr: Expr, proc: str, s: StateView) -> bool:
    S = eval_expr(expr, s)
    agent = s.agent_of(proc)
    if any(subterm(agent, t) for t in S):
        return False
    X = _atoms(S)
    if not X:
        return True
    keys = _k_elems(S)
    for y in s.known_values(proc):
        if not all(secure_occurrence(x, y, keys) for x in X):
            return False
    for c, content in s.channels():
        if c in S:
            continue
        for e in content:
            if not all(secure_occurrence(x, e, keys) for x in X):
                return False
    return True


def holds(phi: Formula, s: StateView) -> bool:
    """Truth of a conjunction of element formulas in a state."""
    th = s.value_binding()
    for ef in phi:
        if isinstance(ef, In):
            if apply(ef.elem, th) not in eval_expr(ef.expr, s):
                return False
        elif isinstance(ef, Eq):
            if apply(ef.lhs, th) != apply(ef.rhs, th):
                return False
        elif isinstance(ef, Sub):
            if not eval_expr(ef.expr, s) <= eval_expr(ef.of, s):
                return False
        elif isinstance(ef, Sup):
            if not eval_expr(ef.expr, s) >= eval_expr(ef.of, s):
                return False
        elif isinstance(ef, At):
            if s.at(ef.proc) != ef.node:
                return False
        elif isinstance(ef, SecureC):
            if not _holds_secure_c(ef.expr, ef.proc, s):
                return False
        elif isinstance(ef, SecureK):
            if not _holds_secure_k(ef.expr, ef.proc, s):
                return False
        else:
            raise UnsupportedEFShape(repr(ef))
    return True


# ---------------------------------------------------------------------------
# Congruence store

class EqStore:
    """Congruence closure over terms, with free-constructor decomposition.

    Signature-table congruence in the usual worklist style: merging two
    classes re-canonicalizes the applications that use them, and equal
    signatures force further merges.  Since every function symbol here is
    a free constructor, merged applications also propagate downward to
    their arguments.  Terms are registered lazily, including at query
    time, which only ever adds derived consequences.
    """

    def __init__(self) -> None:
        self._parent: dict[Term, Term] = {}
        self._use: dict[Term, list[App]] = {}
        self._sig: dict[tuple, App] = {}
        # One witness application per (symbol, arity) per class, for
        # downward decomposition across transitive merges.
        self._members: dict[Term, dict[tuple[str, int], App]] = {}
        self._terms: set[Term] = set()
        self._pending: list[tuple[Term, Term]] = []

    def copy(self) -> "EqStore":
        st = EqStore()
        st._parent = dict(self._parent)
        st._use = {k: list(v) for k, v in self._use.items()}
        st._sig = dict(self._sig)
        st._members = {k: dict(v) for k, v in self._members.items()}
        st._terms = set(self._terms)
        return st

    def find(self, t: Term) -> Term:
        p = self._parent
        root = t
        while root in p:
            root = p[root]
        while t in p and p[t] is not root:
            t, p[t] = p[t], root
        return root

    def _register(self, t: Term) -> None:
        if t in self._terms:
            return
        self._terms.add(t)
        if isinstance(t, App):
            for a in t.args:
                self._register(a)
            head = (t.fn, len(t.args))
            root = self.find(t)
            slot = self._members.setdefault(root, {})
            witness = slot.get(head)
            if witness is None:
                slot[head] = t
            elif witness is not t:
                self._pending.extend(zip(witness.args, t.args))
            sig = (t.fn,) + tuple(self.find(a) for a in t.args)
            other = self._sig.get(sig)
            if other is None:
                self._sig[sig] = t
            elif self.find(other) is not self.find(t):
                self._pending.append((t, other))
            for a in t.args:
                self._use.setdefault(self.find(a), []).append(t)

    def _union(self, a: Term, b: Term) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra is rb:
            return
        # Deterministic root choice keeps serialization stable.
        if (len(to_text(rb)), to_text(rb)) < (len(to_text(ra)), to_text(ra)):
            ra, rb = rb, ra
        self._parent[rb] = ra
        # Downward decomposition: same-symbol members of the merged
        # classes have pairwise equal arguments (free constructors).
        mb = self._members.pop(rb, {})
        ma = self._members.setdefault(ra, {})
        for head, wb in mb.items():
            wa = ma.get(head)
            if wa is None:
                ma[head] = wb
            else:
                self._pending.extend(zip(wa.args, wb.args))
        # Upward congruence: re-canonicalize users of the absorbed class.
        moved = self._use.pop(rb, [])
        for appt in moved:
            sig = (appt.fn,) + tuple(self.find(x) for x in appt.args)
            other = self._sig.get(sig)
            if other is not None and self.find(other) is not self.find(appt):
                self._pending.append((appt, other))
            else:
                self._sig[sig] = appt
            self._use.setdefault(ra, []).append(appt)

    def _settle(self) -> None:
        while self._pending:
            a, b = self._pending.pop()
            self._union(a, b)

    def assume(self, a: Term, b: Term) -> None:
        self._register(a)
        self._register(b)
        self._pending.append((a, b))
        self._settle()

    def equal(self, a: Term, b: Term) -> bool:
        if a is b:
            return True
        self._register(a)
        self._register(b)
        self._settle()
        return self.find(a) is self.find(b)

    def universe(self) -> frozenset[Term]:
        return frozenset(self._terms)

    def rep(self, t: Term, prefer: frozenset[Term] = frozenset()) -> Term:
        """Canonical class member: preferred terms win, then shortest text."""
        root = self.find(t)
        cls = [u for u in self._terms if self.find(u) is root]
        if not cls:
            return t
        pool = [u for u in cls if u in prefer] or cls
        return min(pool, key=lambda u: (len(to_text(u)), to_text(u)))

    def subst_rep(self, t: Term, prefer: frozenset[Term] = frozenset()) -> Term:
        """Rewrite every subterm to its class representative, bottom-up."""
        if isinstance(t, App):
            args = tuple(self.subst_rep(a, prefer) for a in t.args)
            if not all(a is b for a, b in zip(args, t.args)):
                t = mk_app(t.fn, args)
        return self.rep(t, prefer)

    def pairs(self) -> list[tuple[Term, Term]]:
        """Non-trivial equalities as a deterministic spanning list."""
        classes: dict[Term, list[Term]] = {}
        for t in sorted(self._terms, key=term_sort_key):
            classes.setdefault(self.find(t), []).append(t)
        out = []
        for members in classes.values():
            if len(members) > 1:
                first = members[0]
                out.extend((first, m) for m in members[1:])
        out.sort(key=lambda p: (term_sort_key(p[0]), term_sort_key(p[1])))
        return out

    def intersect(self, other: "EqStore") -> "EqStore":
        new = EqStore()
        uni = sorted(self.universe() & other.universe(), key=term_sort_key)
        for i, a in enumerate(uni):
            for b in uni[i + 1:]:
                if self.equal(a, b) and other.equal(a, b):
                    new.assume(a, b)
        return new

    def __eq__(self, other) -> bool:
        return isinstance(other, EqStore) and self.pairs() == other.pairs()

    def __hash__(self) -> int:
        return hash(tuple(self.pairs()))

    def __repr__(self) -> str:
        return "EqStore(" + ", ".join(
            f"{to_text(a)}={to_text(b)}" for a, b in self.pairs()) + ")"


# ---------------------------------------------------------------------------
# Normalization and entailment

def _exact_bounds(phi: Formula) -> dict[Expr, frozenset[Term]]:
    """Set expressions pinned to an exact value by matching lower and
    upper bound formulas in phi."""
    lo: dict[Expr, frozenset[Term]] = {}
    hi: dict[Expr, frozenset[Term]] = {}
    for ef in phi:
        if isinstance(ef, Sub):
            if isinstance(ef.expr, Lit):
                lo[ef.of] = lo.get(ef.of, frozenset()) | ef.expr.terms
            if isinstance(ef.of, Lit):
                prev = hi.get(ef.expr)
                hi[ef.expr] = ef.of.terms if prev is None else prev & ef.of.terms
        elif isinstance(ef, Sup):
            if isinstance(ef.of, Lit):
                lo[ef.expr] = lo.get(ef.expr, frozenset()) | ef.of.terms
            if isinstance(ef.expr, Lit):
                prev = hi.get(ef.of)
                hi[ef.of] = ef.expr.terms if prev is None else prev & ef.expr.terms
    return {e: lo[e] for e in lo if e in hi and lo[e] == hi[e]}


def normalize(phi: Formula) -> Formula:
    """Rewrite memberships in exactly-bounded singleton sets to equations:
    from [c] = {e} and e' in [c], conclude e' = e."""
    exact = _exact_bounds(phi)
    out: set = set()
    for ef in phi:
        if isinstance(ef, In) and ef.expr in exact and len(exact[ef.expr]) == 1:
            (e,) = exact[ef.expr]
            out.add(eq_canon(ef.elem, e))
        elif isinstance(ef, Eq):
            out.add(eq_canon(ef.lhs, ef.rhs))
        else:
            out.add(ef)
    return frozenset(out)


def eq_store_of(phi: Formula) -> EqStore:
    st = EqStore()
    for ef in normalize(phi):
        if isinstance(ef, Eq):
            st.assume(ef.lhs, ef.rhs)
    return st


def _expr_matches(a: Expr, b: Expr, st: EqStore) -> bool:
    if a == b:
        return True
    if isinstance(a, Lit) and isinstance(b, Lit):
        return _set_le(a.terms, b.terms, st) and _set_le(b.terms, a.terms, st)
    if isinstance(a, ChanContent) and isinstance(b, ChanContent):
        return st.equal(a.chan, b.chan)
    if isinstance(a, KeyInv) and isinstance(b, KeyInv):
        return st.equal(a.key, b.key) and _expr_matches(a.inner, b.inner, st)
    return False


def _set_le(xs: frozenset[Term], ys: frozenset[Term], st: EqStore) -> bool:
    return all(any(st.equal(x, y) for y in ys) for x in xs)


def entails(phi: Formula, psi: Formula) -> bool:
    """Sound, deliberately incomplete entailment over the supported
    fragment: equations (via congruence closure), control positions,
    memberships and inclusions against literal bounds, and secure-set
    formulas matched modulo the equations."""
    phi = normalize(phi)
    st = eq_store_of(phi)
    got_subs = [ef for ef in phi if isinstance(ef, Sub)]
    got_sups = [ef for ef in phi if isinstance(ef, Sup)]
    for ef in psi:
        if isinstance(ef, Eq):
            if not st.equal(ef.lhs, ef.rhs):
                return False
        elif isinstance(ef, At):
            if ef not in phi:
                return False
        elif isinstance(ef, In):
            ok = any(
                isinstance(g, In) and _expr_matches(g.expr, ef.expr, st)
                and st.equal(g.elem, ef.elem) for g in phi)
            if not ok:
                ok = any(
                    isinstance(g.expr, Lit) and _expr_matches(g.of, ef.expr, st)
                    and any(st.equal(t, ef.elem) for t in g.expr.terms)
                    for g in got_subs)
            if not ok:
                return False
        elif isinstance(ef, Sub):
            if not _entails_sub(ef.expr, ef.of, phi, st):
                return False
        elif isinstance(ef, Sup):
            if not _entails_sub(ef.of, ef.expr, phi, st):
                return False
        elif isinstance(ef, (SecureC, SecureK)):
            kind = type(ef)
            ok = any(
                isinstance(g, kind) and g.proc == ef.proc
                and _expr_matches(g.expr, ef.expr, st) for g in phi)
            if not ok:
                return False
        else:
            raise UnsupportedEFShape(repr(ef))
    return True


def _entails_sub(small: Expr, big: Expr, phi: Formula, st: EqStore) -> bool:
    if _expr_matches(small, big, st):
        return True
    if isinstance(small, Lit) and isinstance(big, Lit):
        return _set_le(small.terms, big.terms, st)
    for g in phi:
        if isinstance(g, Sub):
            # small <= g.expr <= g.of <= big, with literal endpoints.
            if _expr_matches(g.expr, small, st) and _expr_matches(g.of, big, st):
                return True
            if isinstance(small, Lit) and isinstance(g.expr, Lit) \
                    and _expr_matches(g.of, big, st) \
                    and _set_le(small.terms, g.expr.terms, st):
                return True
            if isinstance(big, Lit) and isinstance(g.of, Lit) \
                    and _expr_matches(g.expr, small, st) \
                    and _set_le(g.of.terms, big.terms, st):
                return True
        if isinstance(g, Sup) and _expr_matches(g.of, small, st) \
                and _expr_matches(g.expr, big, st):
            return True
    if not isinstance(small, (Lit, ChanContent, KeyInv)) \
            or not isinstance(big, (Lit, ChanContent, KeyInv)):
        raise UnsupportedEFShape(f"{small} <= {big}")
    return False


# ---------------------------------------------------------------------------
# Serialization

def formula_to_json(phi: Formula) -> dict:
    """Render a conjunction in the report schema."""
    phi = normalize(phi)
    secure_c: set[str] = set()
    secure_k: set[str] = set()
    bounds: dict[str, dict[str, list[str]]] = {}
    key_bounds: dict[str, dict[str, list[str]]] = {}
    eqs = eq_store_of(phi)
    at: dict[str, int] = {}

    def bound_slot(expr: Expr) -> Optional[dict]:
        # hi stays None (no upper bound known) until a Sub supplies one;
        # an explicit [] means the content is provably empty.
        if isinstance(expr, ChanContent):
            return bounds.setdefault(to_text(expr.chan), {"lo": [], "hi": None})
        if isinstance(expr, KeyInv) and isinstance(expr.inner, ChanContent):
            return key_bounds.setdefault(
                to_text(expr.key), {"lo": [], "hi": None})
        return None

    for ef in sorted(phi, key=str):
        if isinstance(ef, SecureC):
            secure_c |= {to_text(t) for t in _expr_terms(ef.expr)}
        elif isinstance(ef, SecureK):
            secure_k |= {to_text(t) for t in _expr_terms(ef.expr)}
        elif isinstance(ef, Sub):
            if isinstance(ef.expr, Lit):
                slot = bound_slot(ef.of)
                if slot is not None:
                    slot["lo"] = sorted(
                        set(slot["lo"]) | {to_text(t) for t in ef.expr.terms})
            if isinstance(ef.of, Lit):
                slot = bound_slot(ef.expr)
                if slot is not None:
                    slot["hi"] = sorted(
                        set(slot["hi"] or []) | {to_text(t) for t in ef.of.terms})
        elif isinstance(ef, At):
            at[ef.proc] = ef.node
    return {
        "secureC": sorted(secure_c),
        "secureK": sorted(secure_k),
        "bounds": bounds,
        "keyBounds": key_bounds,
        "eqs": [[to_text(a), to_text(b)] for a, b in eqs.pairs()],
        "at": at,
    }


def _expr_terms(expr: Expr) -> frozenset[Term]:
    if isinstance(expr, Lit):
        return expr.terms
    if isinstance(expr, (Inter, Union)):
        out: frozenset[Term] = frozenset()
        for p in expr.parts:
            out |= _expr_terms(p)
        return out
    return frozenset()


@dataclass(frozen=True)
class Verdict:
    """Outcome of one verification question: per-node or per-trace
    details, plus an optional counterexample trace for failures."""

    ok: bool
    name: str
    details: tuple[dict, ...] = ()
    counterexample: Optional[tuple[dict, ...]] = None
    stats: tuple[tuple[str, int], ...] = ()

    def to_json(self) -> dict:
        out: dict = {
            "ok": self.ok,
            "name": self.name,
            "details": list(self.details),
        }
        if self.counterexample is not None:
            out["counterexample"] = list(self.counterexample)
        if self.stats:
            out["stats"] = dict(self.stats)
        return out
