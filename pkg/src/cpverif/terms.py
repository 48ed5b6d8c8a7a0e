"""Term algebra: kinds, terms, bindings, matching, renaming, fresh values.

Terms are interned: structurally equal terms are the same object, so
equality and hashing are O(1).  All construction must go through the
factory functions (`var`, `con`, `enc`, `shared_key`, ...), never the
class constructors directly.
"""
from __future__ import annotations

from typing import Iterator, Optional


class TypeMismatch(Exception):
    """A term or binding violates the kind discipline."""


class NonInjective(Exception):
    """A renaming maps two distinct variables to the same one."""


# ---------------------------------------------------------------------------
# Kinds

class Ty:
    """A term kind: one of the base kinds A C K M N P, or an n-tuple kind.

    M subsumes every kind; tuple kinds are only subsumed by M and by
    themselves.
    """

    __slots__ = ("tag", "arity")
    _cache: dict[tuple[str, int], "Ty"] = {}

    def __new__(cls, tag: str, arity: int = 0) -> "Ty":
        key = (tag, arity)
        hit = cls._cache.get(key)
        if hit is not None:
            return hit
        obj = object.__new__(cls)
        object.__setattr__(obj, "tag", tag)
        object.__setattr__(obj, "arity", arity)
        cls._cache[key] = obj
        return obj

    def __setattr__(self, name: str, value) -> None:
        raise AttributeError("Ty is immutable")

    def __repr__(self) -> str:
        if self.tag == "T":
            return f"Ty.tuple({self.arity})"
        return f"Ty.{self.tag}"

    def __str__(self) -> str:
        if self.tag == "T":
            return f"T{self.arity}"
        return self.tag

    A: "Ty"
    C: "Ty"
    K: "Ty"
    M: "Ty"
    N: "Ty"
    P: "Ty"

    @staticmethod
    def tuple(n: int) -> "Ty":
        if n < 2:
            raise TypeMismatch(f"tuple kind needs arity >= 2, got {n}")
        return Ty("T", n)

    @property
    def is_tuple(self) -> bool:
        return self.tag == "T"


Ty.A = Ty("A")
Ty.C = Ty("C")
Ty.K = Ty("K")
Ty.M = Ty("M")
Ty.N = Ty("N")
Ty.P = Ty("P")

_BASE_TAGS = {"A": Ty.A, "C": Ty.C, "K": Ty.K, "M": Ty.M, "N": Ty.N, "P": Ty.P}


def base_ty(tag: str) -> Ty:
    try:
        return _BASE_TAGS[tag]
    except KeyError:
        raise TypeMismatch(f"unknown kind tag {tag!r}") from None


def kind_le(sub: Ty, sup: Ty) -> bool:
    """Subsumption: every kind fits under M; otherwise kinds must agree."""
    return sub is sup or sup is Ty.M


# ---------------------------------------------------------------------------
# Function symbols

ENCRYPT = "enc"
DECRYPT = "dec"
SHARED_KEY = "sk"
SHARED_CHANNEL = "sc"
TUPLE = "tup"


# ---------------------------------------------------------------------------
# Terms

class Term:
    __slots__ = ("ty", "_h", "_text")

    def __hash__(self) -> int:
        return self._h

    def __str__(self) -> str:
        return to_text(self)

    def __repr__(self) -> str:
        return f"<{to_text(self)}:{self.ty}>"


class Var(Term):
    __slots__ = ("name",)


class Con(Term):
    __slots__ = ("name",)


class App(Term):
    __slots__ = ("fn", "args")
    fn: str
    args: tuple[Term, ...]


_var_cache: dict[tuple[str, Ty], Var] = {}
_con_cache: dict[tuple[str, Ty], Con] = {}
_app_cache: dict[tuple[str, tuple[int, ...]], App] = {}


def var(name: str, ty: Ty) -> Var:
    key = (name, ty)
    hit = _var_cache.get(key)
    if hit is not None:
        return hit
    v = Var.__new__(Var)
    v.ty = ty
    v.name = name
    v._h = hash(("v", name, ty.tag, ty.arity))
    v._text = None
    _var_cache[key] = v
    return v


def con(name: str, ty: Ty) -> Con:
    key = (name, ty)
    hit = _con_cache.get(key)
    if hit is not None:
        return hit
    c = Con.__new__(Con)
    c.ty = ty
    c.name = name
    c._h = hash(("c", name, ty.tag, ty.arity))
    c._text = None
    _con_cache[key] = c
    return c


def _mk_app(fn: str, args: tuple[Term, ...], ty: Ty) -> App:
    key = (fn, tuple(id(a) for a in args))
    hit = _app_cache.get(key)
    if hit is not None:
        return hit
    a = App.__new__(App)
    a.ty = ty
    a.fn = fn
    a.args = args
    a._h = hash((fn,) + tuple(x._h for x in args))
    a._text = None
    _app_cache[key] = a
    return a


def app(fn: str, args: tuple[Term, ...]) -> Term:
    """Build an application, validating kinds and normalizing decryption."""
    if fn == ENCRYPT:
        if len(args) != 2:
            raise TypeMismatch("enc takes a key and a payload")
        k, e = args
        if k.ty is not Ty.K:
            raise TypeMismatch(f"enc key must have kind K, got {k.ty}")
        return _mk_app(ENCRYPT, args, Ty.M)
    if fn == DECRYPT:
        if len(args) != 2:
            raise TypeMismatch("dec takes a key and a payload")
        k, e = args
        if k.ty is not Ty.K:
            raise TypeMismatch(f"dec key must have kind K, got {k.ty}")
        # dec(k, enc(k, e)) rewrites to e at construction time.
        if isinstance(e, App) and e.fn == ENCRYPT and e.args[0] is k:
            return e.args[1]
        return _mk_app(DECRYPT, args, Ty.M)
    if fn in (SHARED_KEY, SHARED_CHANNEL):
        if len(args) < 2:
            raise TypeMismatch(f"{fn} needs at least two agents")
        for a in args:
            if a.ty is not Ty.A:
                raise TypeMismatch(f"{fn} argument {a} must have kind A")
        return _mk_app(fn, args, Ty.K if fn == SHARED_KEY else Ty.C)
    if fn == TUPLE:
        if len(args) < 2:
            raise TypeMismatch("tuples have arity >= 2")
        return _mk_app(TUPLE, args, Ty.tuple(len(args)))
    raise TypeMismatch(f"unknown function symbol {fn!r}")


def enc(k: Term, e: Term) -> Term:
    return app(ENCRYPT, (k, e))


def dec(k: Term, e: Term) -> Term:
    return app(DECRYPT, (k, e))


def shared_key(*agents: Term) -> Term:
    return app(SHARED_KEY, agents)


def shared_channel(*agents: Term) -> Term:
    return app(SHARED_CHANNEL, agents)


def tup(*elems: Term) -> Term:
    return app(TUPLE, elems)


#: The open channel: a reserved C-kind constant known to everyone.
OPEN = con("open", Ty.C)

#: The reserved adversary agent name; never occurs in protocol sources.
DAGGER = con("#Dagger", Ty.A)


def kind_of(t: Term) -> Ty:
    return t.ty


# ---------------------------------------------------------------------------
# Structure

def subterm(e: Term, e2: Term) -> bool:
    """True iff `e` occurs in `e2` (reflexively)."""
    stack = [e2]
    while stack:
        t = stack.pop()
        if t is e:
            return True
        if isinstance(t, App):
            stack.extend(t.args)
    return False


def subterms(e: Term) -> Iterator[Term]:
    """All subterm occurrences of `e`, in preorder (with repeats)."""
    stack = [e]
    while stack:
        t = stack.pop()
        yield t
        if isinstance(t, App):
            stack.extend(reversed(t.args))


def subterm_set(e: Term) -> frozenset[Term]:
    seen: set[Term] = set()
    stack = [e]
    while stack:
        t = stack.pop()
        if t in seen:
            continue
        seen.add(t)
        if isinstance(t, App):
            stack.extend(t.args)
    return frozenset(seen)


def vars_of(e: Term) -> frozenset[Var]:
    return frozenset(t for t in subterm_set(e) if isinstance(t, Var))


def atoms_of(e: Term) -> frozenset[Term]:
    """Non-application subterms (variables and constants)."""
    return frozenset(t for t in subterm_set(e) if not isinstance(t, App))


def keys_of(e: Term) -> frozenset[Var]:
    """K-kind variables used in key position of some encryption in `e`."""
    out: set[Var] = set()
    for t in subterm_set(e):
        if isinstance(t, App) and t.fn == ENCRYPT:
            k = t.args[0]
            if isinstance(k, Var):
                out.add(k)
    return frozenset(out)


# ---------------------------------------------------------------------------
# Bindings

class Binding:
    """An immutable finite map from variables to terms, identity elsewhere.

    Kind preservation is enforced: a variable can only be bound to a term
    whose kind fits under the variable's kind.
    """

    __slots__ = ("_map", "_h")

    def __init__(self, mapping: Optional[dict[Var, Term]] = None):
        m: dict[Var, Term] = {}
        if mapping:
            for x, t in mapping.items():
                if not isinstance(x, Var):
                    raise TypeMismatch(f"binding domain must be variables, got {x}")
                if not kind_le(t.ty, x.ty):
                    raise TypeMismatch(
                        f"cannot bind {x} (kind {x.ty}) to {t} (kind {t.ty})")
                if t is not x:
                    m[x] = t
        self._map = m
        self._h = hash(frozenset(m.items()))

    def get(self, x: Var) -> Term:
        return self._map.get(x, x)

    def __contains__(self, x: Var) -> bool:
        return x in self._map

    def __iter__(self) -> Iterator[Var]:
        return iter(self._map)

    def __len__(self) -> int:
        return len(self._map)

    def items(self):
        return self._map.items()

    def domain(self) -> frozenset[Var]:
        return frozenset(self._map)

    def __eq__(self, other) -> bool:
        return isinstance(other, Binding) and self._map == other._map

    def __hash__(self) -> int:
        return self._h

    def extend(self, mapping: dict[Var, Term]) -> "Binding":
        m = dict(self._map)
        m.update(mapping)
        return Binding(m)

    def __repr__(self) -> str:
        inner = ", ".join(
            f"{x.name}->{to_text(t)}" for x, t in sorted(
                self._map.items(), key=lambda it: it[0].name))
        return "{" + inner + "}"


EMPTY_BINDING = Binding()


def apply(e: Term, theta: Binding) -> Term:
    """Apply a binding to a term."""
    if not theta._map:
        return e
    memo: dict[Term, Term] = {}

    def go(t: Term) -> Term:
        hit = memo.get(t)
        if hit is not None:
            return hit
        if isinstance(t, Var):
            r = theta.get(t)
        elif isinstance(t, App):
            args = tuple(go(a) for a in t.args)
            r = t if all(a is b for a, b in zip(args, t.args)) else app(t.fn, args)
        else:
            r = t
        memo[t] = r
        return r

    return go(e)


def compose(theta: Binding, theta2: Binding) -> Binding:
    """Sequential composition: compose(a, b)(x) = apply(apply(x, a), b)."""
    m: dict[Var, Term] = {}
    for x, t in theta.items():
        m[x] = apply(t, theta2)
    for x, t in theta2.items():
        if x not in theta._map:
            m[x] = t
    return Binding(m)


def match_template(pattern: Term, target: Term,
                   bound: frozenset[Var] = frozenset()) -> Optional[Binding]:
    """Match `target` against `pattern`, binding only variables not in `bound`.

    Returns the unique matcher when one exists, else None.  Repeated free
    variables must match equal subterms; bound variables are rigid symbols.
    """
    found: dict[Var, Term] = {}

    def go(p: Term, t: Term) -> bool:
        if isinstance(p, Var) and p not in bound:
            prev = found.get(p)
            if prev is not None:
                return prev is t
            if not kind_le(t.ty, p.ty):
                return False
            found[p] = t
            return True
        if p is t:
            return True
        if isinstance(p, App) and isinstance(t, App) and p.fn == t.fn \
                and len(p.args) == len(t.args):
            return all(go(a, b) for a, b in zip(p.args, t.args))
        return False

    if go(pattern, target):
        return Binding(found)
    return None


def rename(e: Term, eta: dict[Var, Var]) -> Term:
    """Apply an injective, kind-preserving variable renaming."""
    seen: dict[Var, Var] = {}
    for x, y in eta.items():
        if x.ty is not y.ty:
            raise TypeMismatch(f"renaming {x} -> {y} changes the kind")
        if y in seen:
            raise NonInjective(f"{seen[y]} and {x} both rename to {y}")
        seen[y] = x
    return apply(e, Binding({x: y for x, y in eta.items()}))


# ---------------------------------------------------------------------------
# Fresh values

FRESH_MARK = "ν"  # ν


class FreshGen:
    """Deterministic source of fresh constants, named ν<hint>#<counter>.

    The same seed reproduces the same sequence.  Pools are kept disjoint
    by hint discipline: honest hints are variable names, the intruder
    uses its own reserved hints.
    """

    def __init__(self, seed: int = 0):
        self._n = seed

    def fresh(self, kind: Ty, hint: str = "") -> Con:
        self._n += 1
        return con(f"{FRESH_MARK}{hint}#{self._n}", kind)


def is_fresh_con(t: Term) -> bool:
    return isinstance(t, Con) and t.name.startswith(FRESH_MARK)


# ---------------------------------------------------------------------------
# Canonical text

def to_text(t: Term) -> str:
    """Render a term in canonical concrete syntax.

    Variables print bare; agent constants print bare; other constants get
    a `#` prefix (fresh constants already carry the ν marker).  Shared
    keys/channels print as k[A,B] / c[A,B]; encryption as key(payload);
    tuples as (e1,...,en).
    """
    if t._text is not None:
        return t._text
    if isinstance(t, Var):
        s = t.name
    elif isinstance(t, Con):
        if t.ty is Ty.A or t.name.startswith(FRESH_MARK) or t.name.startswith("#"):
            s = t.name
        elif t is OPEN:
            s = "open"
        else:
            s = "#" + t.name
    else:
        assert isinstance(t, App)
        if t.fn == SHARED_KEY:
            s = "k[" + ",".join(to_text(a) for a in t.args) + "]"
        elif t.fn == SHARED_CHANNEL:
            s = "c[" + ",".join(to_text(a) for a in t.args) + "]"
        elif t.fn == ENCRYPT:
            s = f"{to_text(t.args[0])}({to_text(t.args[1])})"
        elif t.fn == DECRYPT:
            s = f"dec({to_text(t.args[0])},{to_text(t.args[1])})"
        else:
            s = "(" + ",".join(to_text(a) for a in t.args) + ")"
    t._text = s
    return s


def term_sort_key(t: Term) -> str:
    return to_text(t)
