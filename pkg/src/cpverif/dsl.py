"""Protocol description language: parser, checker, and corpus loader.

A `.cp` file declares agents, shared key/channel families, processes
(control nodes with send/recv/let actions), and goals.  `parse` yields a
checked AST; `load_corpus` turns a built-in file into an instantiated
protocol plus its goal properties.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .bounded import Correspondence, Integrity, PropertySpec, Secrecy, Witness
from .processes import Assign, Edge, Protocol, Recv, Send, SeqProc, instantiate
from .terms import (
    Con, Term, Ty, Var,
    OPEN,
    base_ty, con, enc, shared_channel, shared_key, tup, var,
)
from .tg import GoalSpec, export_dot  # noqa: F401  (re-exported)


# ---------------------------------------------------------------------------
# Diagnostics

class SourceError(Exception):
    """A diagnostic tied to a source position."""

    def __init__(self, msg: str, line: int, col: int,
                 expected: tuple[str, ...] = ()):
        self.line = line
        self.col = col
        self.expected = expected
        tail = f" (expected {', '.join(expected)})" if expected else ""
        super().__init__(f"{line}:{col}: {msg}{tail}")


class ProtocolSyntaxError(SourceError):
    """Tokenizer or grammar failure."""


class UndeclaredVariable(SourceError):
    """A name is used but nowhere declared (or is ambiguous)."""


class KindError(SourceError):
    """A term is used at an impossible kind."""


class UnknownCorpus(Exception):
    """load_corpus was asked for a name outside the built-in set."""


# ---------------------------------------------------------------------------
# Tokens

_PUNCT = ("->", ":=", "==", ";", ":", ",", "(", ")", "[", "]",
          "{", "}", "?", "~", ".", "*")


@dataclass(frozen=True)
class Tok:
    kind: str  # ident | nat | punct | eof
    text: str
    line: int
    col: int


def _tokens(text: str) -> list[Tok]:
    out: list[Tok] = []
    line, col = 1, 1
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            out.append(Tok("ident", text[i:j], line, col))
            col += j - i
            i = j
            continue
        if ch.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            out.append(Tok("nat", text[i:j], line, col))
            col += j - i
            i = j
            continue
        two = text[i:i + 2]
        if two in _PUNCT:
            out.append(Tok("punct", two, line, col))
            i += 2
            col += 2
            continue
        if ch in _PUNCT:
            out.append(Tok("punct", ch, line, col))
            i += 1
            col += 1
            continue
        raise ProtocolSyntaxError(f"stray character {ch!r}", line, col)
    out.append(Tok("eof", "", line, col))
    return out


# ---------------------------------------------------------------------------
# AST

@dataclass(frozen=True)
class TName:
    ident: str
    pos: tuple[int, int] = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class TStar:
    pos: tuple[int, int] = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class TBind:
    """`?x`: the first-binding occurrence of x in a receive pattern."""

    ident: str
    pos: tuple[int, int] = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class TQual:
    """`P.x`: process-qualified variable, goals only."""

    proc: str
    ident: str
    pos: tuple[int, int] = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class TOpenChan:
    pos: tuple[int, int] = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class TIndexed:
    """`k[A,J]` / `c[A,B]`: a shared key or channel family member."""

    fam: str
    left: "TermAst"
    right: "TermAst"
    pos: tuple[int, int] = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class TTupleA:
    items: tuple["TermAst", ...]
    pos: tuple[int, int] = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class TEncA:
    key: "TermAst"
    args: tuple["TermAst", ...]
    pos: tuple[int, int] = field(default=(0, 0), compare=False, repr=False)


TermAst = Union[TName, TStar, TBind, TQual, TOpenChan, TIndexed,
                TTupleA, TEncA]


@dataclass(frozen=True)
class VarDecl:
    section: str  # param | hidden | var
    name: str
    ty: str
    pos: tuple[int, int] = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class ActionDecl:
    src: int
    dst: int
    kind: str  # send | recv | let
    chan: Optional[TermAst]
    left: TermAst
    right: Optional[TermAst] = None
    pos: tuple[int, int] = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class ProcDecl:
    name: str
    agent: str
    replicable: bool
    decls: tuple[VarDecl, ...]
    actions: tuple[ActionDecl, ...]
    pos: tuple[int, int] = field(default=(0, 0), compare=False, repr=False)

    def nodes(self) -> frozenset[int]:
        out = {0}
        for a in self.actions:
            out.add(a.src)
            out.add(a.dst)
        return frozenset(out)


@dataclass(frozen=True)
class GoalDecl:
    kind: str  # secrecy | integrity | correspondence
    name: str
    at: Optional[tuple[str, int]] = None
    witness: Optional[tuple[str, int]] = None
    terms: tuple[TermAst, ...] = ()
    eqs: tuple[tuple[TermAst, TermAst], ...] = ()
    pos: tuple[int, int] = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class ProtocolSpec:
    name: str
    agents: tuple[str, ...]
    intermediaries: tuple[str, ...]
    keyfams: tuple[tuple[str, str, str], ...]
    chanfams: tuple[tuple[str, str, str], ...]
    procs: tuple[ProcDecl, ...]
    goals: tuple[GoalDecl, ...]

    def proc(self, name: str) -> ProcDecl:
        for p in self.procs:
            if p.name == name:
                return p
        raise KeyError(name)


# ---------------------------------------------------------------------------
# Parser

class _Parser:
    def __init__(self, text: str):
        self.toks = _tokens(text)
        self.i = 0

    # -- token plumbing --------------------------------------------------

    def peek(self) -> Tok:
        return self.toks[self.i]

    def next(self) -> Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def at(self, text: str) -> bool:
        return self.peek().text == text and self.peek().kind != "eof"

    def expect(self, text: str) -> Tok:
        t = self.peek()
        if t.text != text or t.kind == "eof":
            raise ProtocolSyntaxError(
                f"unexpected {t.text!r}" if t.kind != "eof" else
                "unexpected end of input", t.line, t.col, expected=(text,))
        return self.next()

    def ident(self, what: str = "name") -> Tok:
        t = self.peek()
        if t.kind != "ident":
            raise ProtocolSyntaxError(
                f"expected {what}", t.line, t.col, expected=("identifier",))
        return self.next()

    def nat(self) -> int:
        t = self.peek()
        if t.kind != "nat":
            raise ProtocolSyntaxError(
                "expected a node number", t.line, t.col, expected=("number",))
        self.next()
        return int(t.text)

    # -- grammar ---------------------------------------------------------

    def file(self) -> ProtocolSpec:
        self.expect("protocol")
        name = self.ident("protocol name").text
        self.expect(";")
        agents: list[str] = []
        inter: list[str] = []
        keyf: list[tuple[str, str, str]] = []
        chanf: list[tuple[str, str, str]] = []
        procs: list[ProcDecl] = []
        goals: list[GoalDecl] = []
        while self.peek().kind != "eof":
            t = self.peek()
            if t.text == "agents":
                self.next()
                while self.peek().kind == "ident":
                    agents.append(self.next().text)
                self.expect(";")
            elif t.text == "intermediary":
                self.next()
                inter.append(self.ident("agent name").text)
                self.expect(";")
            elif t.text in ("sharedkey", "sharedchannel"):
                self.next()
                fam = self.ident("family name").text
                self.expect("[")
                a = self.ident("agent name").text
                self.expect(",")
                b = self.ident("agent name").text
                self.expect("]")
                self.expect(";")
                (keyf if t.text == "sharedkey" else chanf).append((fam, a, b))
            elif t.text in ("process", "replicable"):
                procs.append(self.proc_decl())
            elif t.text == "goal":
                goals.append(self.goal_decl(len(goals)))
            else:
                raise ProtocolSyntaxError(
                    f"unexpected {t.text!r}", t.line, t.col,
                    expected=("agents", "intermediary", "sharedkey",
                              "sharedchannel", "process", "replicable",
                              "goal"))
        spec = ProtocolSpec(name, tuple(agents), tuple(inter), tuple(keyf),
                            tuple(chanf), tuple(procs), tuple(goals))
        _check(spec)
        return spec

    def proc_decl(self) -> ProcDecl:
        start = self.peek()
        replicable = False
        if self.at("replicable"):
            replicable = True
            self.next()
        self.expect("process")
        name = self.ident("process name").text
        self.expect("(")
        agent = self.ident("agent name").text
        self.expect(")")
        self.expect("{")
        decls: list[VarDecl] = []
        while self.peek().text in ("param", "hidden", "var"):
            section = self.next().text
            while True:
                p = self.peek()
                sect = section
                if self.at("~"):
                    self.next()
                    sect = "hidden"
                nm = self.ident("variable name").text
                self.expect(":")
                ty = self.ident("kind letter").text
                decls.append(VarDecl(sect, nm, ty, (p.line, p.col)))
                if self.at(","):
                    self.next()
                    continue
                break
            self.expect(";")
        actions: list[ActionDecl] = []
        while self.peek().kind == "nat":
            p = self.peek()
            src = self.nat()
            self.expect(":")
            kw = self.ident("action keyword")
            if kw.text == "send" or kw.text == "recv":
                chan = self.chan_term()
                payload = self.term()
                self.expect("->")
                dst = self.nat()
                self.expect(";")
                actions.append(ActionDecl(src, dst, kw.text, chan, payload,
                                          None, (p.line, p.col)))
            elif kw.text == "let":
                lhs = self.term()
                self.expect(":=")
                rhs = self.term()
                self.expect("->")
                dst = self.nat()
                self.expect(";")
                actions.append(ActionDecl(src, dst, "let", None, lhs, rhs,
                                          (p.line, p.col)))
            else:
                raise ProtocolSyntaxError(
                    f"unexpected {kw.text!r}", kw.line, kw.col,
                    expected=("send", "recv", "let"))
        self.expect("}")
        return ProcDecl(name, agent, replicable, tuple(decls), tuple(actions),
                        (start.line, start.col))

    def goal_decl(self, index: int) -> GoalDecl:
        start = self.expect("goal")
        kind = self.ident("goal kind")
        if kind.text not in ("secrecy", "integrity", "correspondence"):
            raise ProtocolSyntaxError(
                f"unexpected {kind.text!r}", kind.line, kind.col,
                expected=("secrecy", "integrity", "correspondence"))
        name = f"{kind.text}{index}"
        if self.peek().kind == "ident" and self.peek().text not in ("at",):
            name = self.next().text
        at = witness = None
        if kind.text in ("integrity", "correspondence"):
            self.expect("at")
            at = self.goal_ref()
            if kind.text == "correspondence":
                self.expect("witness")
                witness = self.goal_ref()
        self.expect(":")
        terms: list[TermAst] = []
        eqs: list[tuple[TermAst, TermAst]] = []
        while True:
            lhs = self.term()
            if kind.text == "secrecy":
                terms.append(lhs)
            else:
                self.expect("==")
                eqs.append((lhs, self.term()))
            if self.at(","):
                self.next()
                continue
            break
        self.expect(";")
        return GoalDecl(kind.text, name, at, witness, tuple(terms),
                        tuple(eqs), (start.line, start.col))

    def goal_ref(self) -> tuple[str, int]:
        p = self.ident("process name").text
        self.expect(".")
        return (p, self.nat())

    # -- terms -----------------------------------------------------------

    def chan_term(self) -> TermAst:
        """Channel position: a name, family member, or `open`.

        Never takes an encryption trailer, so `send open k[A,J](x)` splits
        unambiguously into channel `open` and payload `k[A,J](x)`.
        """
        t = self.peek()
        if t.text == "open":
            self.next()
            return TOpenChan((t.line, t.col))
        if self.at("?"):
            q = self.next()
            nm = self.ident("variable name").text
            return TBind(nm, (q.line, q.col))
        nm = self.ident("channel").text
        if self.at("["):
            return self.indexed(nm, (t.line, t.col))
        return TName(nm, (t.line, t.col))

    def indexed(self, fam: str, pos: tuple[int, int]) -> TIndexed:
        self.expect("[")
        left = self.index_term()
        self.expect(",")
        right = self.index_term()
        self.expect("]")
        return TIndexed(fam, left, right, pos)

    def index_term(self) -> TermAst:
        t = self.peek()
        if self.at("*"):
            self.next()
            return TStar((t.line, t.col))
        if self.at("?"):
            self.next()
            nm = self.ident("variable name").text
            return TBind(nm, (t.line, t.col))
        return TName(self.ident("agent name").text, (t.line, t.col))

    def term(self) -> TermAst:
        t = self.peek()
        if self.at("?"):
            self.next()
            nm = self.ident("variable name").text
            base: TermAst = TBind(nm, (t.line, t.col))
        elif self.at("("):
            self.next()
            items = [self.term()]
            while self.at(","):
                self.next()
                items.append(self.term())
            self.expect(")")
            base = items[0] if len(items) == 1 else \
                TTupleA(tuple(items), (t.line, t.col))
        elif t.text == "open":
            self.next()
            base = TOpenChan((t.line, t.col))
        elif t.kind == "ident":
            nm = self.next().text
            if self.at("["):
                base = self.indexed(nm, (t.line, t.col))
            elif self.at("."):
                self.next()
                base = TQual(nm, self.ident("variable name").text,
                             (t.line, t.col))
            else:
                base = TName(nm, (t.line, t.col))
        else:
            raise ProtocolSyntaxError(
                f"unexpected {t.text!r}" if t.kind != "eof" else
                "unexpected end of input", t.line, t.col,
                expected=("term",))
        while self.at("("):
            self.next()
            args = [self.term()]
            while self.at(","):
                self.next()
                args.append(self.term())
            self.expect(")")
            base = TEncA(base, tuple(args), (t.line, t.col))
        return base


def parse(text: str) -> ProtocolSpec:
    """Parse and check one protocol source; raises SourceError subclasses."""
    return _Parser(text).file()


def parse_file(path: str | os.PathLike) -> ProtocolSpec:
    return parse(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Printing (parse ∘ print is the identity on parser output)

def print_term(t: TermAst) -> str:
    if isinstance(t, TName):
        return t.ident
    if isinstance(t, TStar):
        return "*"
    if isinstance(t, TBind):
        return f"?{t.ident}"
    if isinstance(t, TQual):
        return f"{t.proc}.{t.ident}"
    if isinstance(t, TOpenChan):
        return "open"
    if isinstance(t, TIndexed):
        return f"{t.fam}[{print_term(t.left)},{print_term(t.right)}]"
    if isinstance(t, TTupleA):
        return "(" + ", ".join(print_term(x) for x in t.items) + ")"
    if isinstance(t, TEncA):
        key = print_term(t.key)
        if isinstance(t.key, (TTupleA, TEncA)):
            key = f"({key})"
        return key + "(" + ", ".join(print_term(x) for x in t.args) + ")"
    raise TypeError(t)


def print_spec(spec: ProtocolSpec) -> str:
    out = [f"protocol {spec.name};", ""]
    if spec.agents:
        out.append("agents " + " ".join(spec.agents) + ";")
    for j in spec.intermediaries:
        out.append(f"intermediary {j};")
    for fam, a, b in spec.keyfams:
        out.append(f"sharedkey {fam}[{a},{b}];")
    for fam, a, b in spec.chanfams:
        out.append(f"sharedchannel {fam}[{a},{b}];")
    for p in spec.procs:
        out.append("")
        star = "replicable " if p.replicable else ""
        out.append(f"{star}process {p.name}({p.agent}) {{")
        for d in p.decls:
            out.append(f"  {d.section} {d.name}:{d.ty};")
        for a in p.actions:
            if a.kind == "let":
                body = f"let {print_term(a.left)} := {print_term(a.right)}"
            else:
                body = f"{a.kind} {print_term(a.chan)} {print_term(a.left)}"
            out.append(f"  {a.src}: {body} -> {a.dst};")
        out.append("}")
    for g in spec.goals:
        out.append("")
        head = f"goal {g.kind} {g.name}"
        if g.at is not None:
            head += f" at {g.at[0]}.{g.at[1]}"
        if g.witness is not None:
            head += f" witness {g.witness[0]}.{g.witness[1]}"
        if g.kind == "secrecy":
            body = ", ".join(print_term(t) for t in g.terms)
        else:
            body = ", ".join(f"{print_term(a)} == {print_term(b)}"
                             for a, b in g.eqs)
        out.append(f"{head} : {body};")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Checking

_KIND_LETTERS = ("A", "C", "K", "M", "N")


def _check(spec: ProtocolSpec) -> None:
    agent_names = set(spec.agents) | set(spec.intermediaries)
    fams = {fam: "key" for fam, _, _ in spec.keyfams}
    fams.update({fam: "chan" for fam, _, _ in spec.chanfams})
    seen_procs: set[str] = set()
    for p in spec.procs:
        if p.name in seen_procs:
            raise ProtocolSyntaxError(
                f"process {p.name} declared twice", *p.pos)
        seen_procs.add(p.name)
        if p.agent not in agent_names:
            raise UndeclaredVariable(
                f"agent {p.agent} of process {p.name} is not declared",
                *p.pos)
        vars_: dict[str, tuple[str, Ty]] = {}
        for d in p.decls:
            if d.ty not in _KIND_LETTERS:
                raise KindError(
                    f"unknown kind {d.ty!r} for {d.name}", *d.pos)
            if d.name in vars_ or d.name in agent_names:
                raise ProtocolSyntaxError(
                    f"{d.name} declared twice in {p.name}", *d.pos)
            vars_[d.name] = (d.section, base_ty(d.ty))
        env = _Env(spec, p, fams, vars_)
        for a in p.actions:
            if a.kind == "send":
                cty = env.kind(a.chan, binding_ok=False)
                env.chan_kind(cty, a.chan)
                env.kind(a.left, binding_ok=False)
            elif a.kind == "recv":
                cty = env.kind(a.chan, binding_ok=False)
                env.chan_kind(cty, a.chan)
                env.kind(a.left, binding_ok=True)
            else:
                env.kind(a.left, binding_ok=True)
                env.kind(a.right, binding_ok=False)
    for g in spec.goals:
        _check_goal(spec, g, fams)


class _Env:
    """Name resolution and kind computation inside one process body."""

    def __init__(self, spec: ProtocolSpec, p: ProcDecl,
                 fams: dict[str, str], vars_: dict[str, tuple[str, Ty]]):
        self.spec = spec
        self.p = p
        self.fams = fams
        self.vars = vars_
        self.agent_names = set(spec.agents) | set(spec.intermediaries)

    def chan_kind(self, ty: Ty, t: TermAst) -> None:
        if ty is not Ty.C:
            raise KindError(
                f"channel position needs kind C, got {ty}", *t.pos)

    def kind(self, t: TermAst, binding_ok: bool) -> Ty:
        if isinstance(t, TOpenChan):
            return Ty.C
        if isinstance(t, TStar):
            raise ProtocolSyntaxError(
                "wildcard is only allowed in secrecy goals", *t.pos)
        if isinstance(t, TQual):
            raise ProtocolSyntaxError(
                "qualified names are only allowed in goals", *t.pos)
        if isinstance(t, TBind):
            if not binding_ok:
                raise ProtocolSyntaxError(
                    "binding marker outside a receive pattern", *t.pos)
            entry = self.vars.get(t.ident)
            if entry is None:
                raise UndeclaredVariable(f"{t.ident} is not declared", *t.pos)
            section, ty = entry
            if section != "var":
                raise KindError(
                    f"{t.ident} is initialized at start; it cannot be bound",
                    *t.pos)
            return ty
        if isinstance(t, TName):
            if t.ident == self.p.agent or t.ident in self.agent_names:
                return Ty.A
            entry = self.vars.get(t.ident)
            if entry is None:
                raise UndeclaredVariable(f"{t.ident} is not declared", *t.pos)
            return entry[1]
        if isinstance(t, TIndexed):
            cat = self.fams.get(t.fam)
            if cat is None:
                raise UndeclaredVariable(
                    f"{t.fam} is not a declared key or channel family",
                    *t.pos)
            for side in (t.left, t.right):
                sty = self.kind(side, binding_ok)
                if sty is not Ty.A:
                    raise KindError(
                        f"family index needs kind A, got {sty}", *side.pos)
            return Ty.K if cat == "key" else Ty.C
        if isinstance(t, TTupleA):
            for x in t.items:
                self.kind(x, binding_ok)
            return Ty.tuple(len(t.items))
        if isinstance(t, TEncA):
            kty = self.kind(t.key, binding_ok)
            if kty is not Ty.K:
                raise KindError(
                    f"encryption key needs kind K, got {kty}", *t.key.pos)
            for x in t.args:
                self.kind(x, binding_ok)
            return Ty.M
        raise TypeError(t)


def _check_goal(spec: ProtocolSpec, g: GoalDecl, fams: dict[str, str]) -> None:
    def ref_ok(ref: tuple[str, int]) -> None:
        try:
            p = spec.proc(ref[0])
        except KeyError:
            raise UndeclaredVariable(
                f"goal names unknown process {ref[0]}", *g.pos) from None
        if ref[1] not in p.nodes():
            raise ProtocolSyntaxError(
                f"process {ref[0]} has no node {ref[1]}", *g.pos)

    def walk(t: TermAst) -> None:
        if isinstance(t, TQual):
            try:
                p = spec.proc(t.proc)
            except KeyError:
                raise UndeclaredVariable(
                    f"{t.proc} is not a declared process", *t.pos) from None
            if all(d.name != t.ident for d in p.decls):
                raise UndeclaredVariable(
                    f"{t.proc} has no variable {t.ident}", *t.pos)
            return
        if isinstance(t, TName):
            if t.ident in set(spec.agents) | set(spec.intermediaries):
                return
            owners = [p.name for p in spec.procs
                      if any(d.name == t.ident for d in p.decls)]
            if not owners:
                raise UndeclaredVariable(
                    f"{t.ident} is not declared", *t.pos)
            if len(owners) > 1:
                raise UndeclaredVariable(
                    f"{t.ident} is declared in several processes; "
                    f"qualify it", *t.pos)
            return
        if isinstance(t, TStar):
            if g.kind != "secrecy":
                raise ProtocolSyntaxError(
                    "wildcard is only allowed in secrecy goals", *t.pos)
            return
        if isinstance(t, TBind):
            raise ProtocolSyntaxError(
                "binding marker outside a receive pattern", *t.pos)
        if isinstance(t, TOpenChan):
            return
        if isinstance(t, TIndexed):
            if t.fam not in fams:
                raise UndeclaredVariable(
                    f"{t.fam} is not a declared key or channel family",
                    *t.pos)
            walk(t.left)
            walk(t.right)
            return
        if isinstance(t, TTupleA):
            for x in t.items:
                walk(x)
            return
        if isinstance(t, TEncA):
            walk(t.key)
            for x in t.args:
                walk(x)
            return
        raise TypeError(t)

    if g.at is not None:
        ref_ok(g.at)
    if g.witness is not None:
        ref_ok(g.witness)
    for t in g.terms:
        walk(t)
    for a, b in g.eqs:
        walk(a)
        walk(b)


# ---------------------------------------------------------------------------
# Elaboration: AST -> engine objects

def _role(spec: ProtocolSpec, p: ProcDecl) -> SeqProc:
    """Build the role template; its agent stays a variable until
    instantiation."""
    agent_v = var(p.agent, Ty.A)
    names = set(spec.agents) | set(spec.intermediaries)
    vars_: dict[str, Var] = {}
    sections: dict[str, str] = {}
    for d in p.decls:
        vars_[d.name] = var(d.name, base_ty(d.ty))
        sections[d.name] = d.section

    def term(t: TermAst) -> Term:
        if isinstance(t, TOpenChan):
            return OPEN
        if isinstance(t, TBind):
            return vars_[t.ident]
        if isinstance(t, TName):
            if t.ident == p.agent:
                return agent_v
            if t.ident in names:
                return con(t.ident, Ty.A)
            return vars_[t.ident]
        if isinstance(t, TIndexed):
            mk = shared_key if any(t.fam == f for f, _, _ in spec.keyfams) \
                else shared_channel
            return mk(term(t.left), term(t.right))
        if isinstance(t, TTupleA):
            return tup(*(term(x) for x in t.items))
        if isinstance(t, TEncA):
            payload = term(t.args[0]) if len(t.args) == 1 else \
                tup(*(term(x) for x in t.args))
            return enc(term(t.key), payload)
        raise TypeError(t)

    edges = []
    for a in p.actions:
        if a.kind == "send":
            act = Send(term(a.chan), term(a.left))
        elif a.kind == "recv":
            act = Recv(term(a.chan), term(a.left))
        else:
            act = Assign(term(a.left), term(a.right))
        edges.append(Edge(a.src, act, a.dst))
    by_sect = {"hidden": set(), "param": set(), "var": set()}
    for nm, v in vars_.items():
        by_sect[sections[nm]].add(v)
    return SeqProc(
        name=p.name, agent=agent_v, edges=tuple(edges),
        hidden=frozenset(by_sect["hidden"]),
        params=frozenset(by_sect["param"]),
        bound=frozenset(by_sect["var"]),
        replicable=p.replicable,
    )


@dataclass(frozen=True)
class Instance:
    """One concrete copy of a role with its name resolution table."""

    sp: SeqProc
    role: str
    agent_symbol: str
    resolver: dict  # bare variable name -> Term (renamed var or fill)

    @property
    def name(self) -> str:
        return self.sp.name

    @property
    def agent(self) -> Term:
        return self.sp.agent


# Session k draws its (initiator, responder) agents from this index
# cycle over the declared agent list; the second entry is the self-session.
_SESSION_PAIRS = ((0, 1), (0, 0), (1, 0), (1, 1))


def _instances(spec: ProtocolSpec, roles: dict[str, SeqProc],
               sessions: int) -> list[Instance]:
    out: list[Instance] = []
    for p in spec.procs:
        role = roles[p.name]
        if not p.replicable:
            out.append(_one_instance(spec, p, role, p.name, 0))
            continue
        for k in range(1, sessions + 1):
            out.append(_one_instance(spec, p, role, f"{p.name}{k}", k))
    return out


def _one_instance(spec: ProtocolSpec, p: ProcDecl, role: SeqProc,
                  inst_name: str, session: int) -> Instance:
    a_params = sorted(v.name for v in role.params if v.ty is Ty.A)
    if session == 0:
        agent = con(p.agent, Ty.A)
        fills = {nm: con(spec.agents[1], Ty.A) for nm in a_params} \
            if len(spec.agents) > 1 else {}
    else:
        ii, rr = _SESSION_PAIRS[(session - 1) % len(_SESSION_PAIRS)]
        if p.agent in spec.intermediaries:
            agent = con(p.agent, Ty.A)
            fills = {}
        elif a_params:
            agent = con(spec.agents[ii], Ty.A)
            fills = {nm: con(spec.agents[rr], Ty.A) for nm in a_params}
        else:
            agent = con(spec.agents[rr], Ty.A)
            fills = {}
    sp = instantiate(role, inst_name, agent, fills)
    resolver: dict[str, Term] = {}
    for v in role.variables():
        if v.name in fills:
            resolver[v.name] = fills[v.name]
        elif inst_name != role.name:
            resolver[v.name] = var(f"{inst_name}.{v.name}", v.ty)
        else:
            resolver[v.name] = v
    return Instance(sp, p.name, p.agent, resolver)


# ---------------------------------------------------------------------------
# Goals -> properties

def _resolve_goal_term(spec: ProtocolSpec, t: TermAst,
                       ctx: dict[str, Instance]) -> Term:
    """Resolve one goal term against role-symbol/instance context."""
    if isinstance(t, TQual):
        inst = ctx.get(t.proc)
        if inst is None:
            raise UndeclaredVariable(
                f"{t.proc} is not in scope for this goal", *t.pos)
        return inst.resolver[t.ident]
    if isinstance(t, TName):
        for inst in ctx.values():
            if t.ident == inst.agent_symbol:
                return inst.agent
        if t.ident in set(spec.agents) | set(spec.intermediaries):
            return con(t.ident, Ty.A)
        owners = [p.name for p in spec.procs
                  if any(d.name == t.ident for d in p.decls)]
        return _resolve_goal_term(spec, TQual(owners[0], t.ident, t.pos), ctx)
    if isinstance(t, TIndexed):
        mk = shared_key if any(t.fam == f for f, _, _ in spec.keyfams) \
            else shared_channel
        return mk(_resolve_goal_term(spec, t.left, ctx),
                  _resolve_goal_term(spec, t.right, ctx))
    if isinstance(t, TTupleA):
        return tup(*(_resolve_goal_term(spec, x, ctx) for x in t.items))
    if isinstance(t, TEncA):
        args = [_resolve_goal_term(spec, x, ctx) for x in t.args]
        payload = args[0] if len(args) == 1 else tup(*args)
        return enc(_resolve_goal_term(spec, t.key, ctx), payload)
    raise TypeError(t)


def _secrecy_terms(spec: ProtocolSpec, g: GoalDecl,
                   instances: list[Instance]) -> frozenset[Term]:
    out: set[Term] = set()
    for t in g.terms:
        if isinstance(t, TIndexed) and (isinstance(t.left, TStar)
                                        or isinstance(t.right, TStar)):
            mk = shared_key if any(t.fam == f for f, _, _ in spec.keyfams) \
                else shared_channel
            fixed = t.right if isinstance(t.left, TStar) else t.left
            fv = _resolve_goal_term(spec, fixed, {})
            # the wildcard ranges over every agent name in play, the
            # intermediary included: a process may well bind an agent
            # variable to the intermediary's (public) name
            for a in spec.agents + spec.intermediaries:
                av = con(a, Ty.A)
                out.add(mk(av, fv) if isinstance(t.left, TStar)
                        else mk(fv, av))
            continue
        if isinstance(t, TQual):
            hits = [i for i in instances if i.role == t.proc]
            for i in hits:
                out.add(i.resolver[t.ident])
            continue
        by_role = {i.role: i for i in instances}
        out.add(_resolve_goal_term(spec, t, by_role))
    return frozenset(out)


def _goal_properties(spec: ProtocolSpec, g: GoalDecl,
                     instances: list[Instance]) -> list[PropertySpec]:
    if g.kind == "secrecy":
        return [Secrecy(g.name, _secrecy_terms(spec, g, instances))]
    if g.kind == "integrity":
        by_role = {i.role: i for i in instances}
        for i in instances:
            if sum(1 for j in instances if j.role == i.role) > 1:
                raise UnknownCorpus(
                    "integrity goals need single-instance roles")
        trig = by_role[g.at[0]]
        eqs = tuple((_resolve_goal_term(spec, a, by_role),
                     _resolve_goal_term(spec, b, by_role))
                    for a, b in g.eqs)
        return [Integrity(g.name, trig.name, g.at[1], eqs)]
    # correspondence: one property per trigger instance, witnesses over
    # every instance of the witness role
    out: list[PropertySpec] = []
    triggers = [i for i in instances if i.role == g.at[0]]
    witnesses = [i for i in instances if i.role == g.witness[0]]
    for r in triggers:
        ws = []
        for i in witnesses:
            ctx = {g.witness[0]: i, g.at[0]: r}
            eqs = tuple((_resolve_goal_term(spec, a, ctx),
                         _resolve_goal_term(spec, b, ctx))
                        for a, b in g.eqs)
            ws.append(Witness(i.name, g.witness[1], eqs))
        name = g.name if len(triggers) == 1 else f"{g.name}:{r.name}"
        out.append(Correspondence(name, r.name, g.at[1], tuple(ws)))
    return out


def elaborate(spec: ProtocolSpec, sessions: int = 1
              ) -> tuple[Protocol, tuple[PropertySpec, ...]]:
    """Instantiate a checked AST into a protocol plus goal properties."""
    roles = {p.name: _role(spec, p) for p in spec.procs}
    instances = _instances(spec, roles, sessions)
    proto = Protocol([i.sp for i in instances])
    props: list[PropertySpec] = []
    for g in spec.goals:
        props.extend(_goal_properties(spec, g, instances))
    return proto, tuple(props)


def tg_goal(p: Integrity) -> GoalSpec:
    """View an integrity property as a transition-graph goal."""
    return GoalSpec(name=p.name, at_proc=p.trigger_proc,
                    at_node=p.trigger_at, eqs=p.eqs)


# ---------------------------------------------------------------------------
# Corpus

CORPUS_NAMES = ("p1", "p2", "p3", "p4", "yahalom", "unlimited", "wmf-broken")


def corpus_dir() -> Path:
    override = os.environ.get("CPVERIF_CORPUS_DIR")
    if override:
        return Path(override)
    return Path(__file__).resolve().parent / "corpus"


def corpus_path(name: str) -> Path:
    if name not in CORPUS_NAMES:
        raise UnknownCorpus(
            f"{name!r} is not a built-in protocol "
            f"(choose from {', '.join(CORPUS_NAMES)})")
    p = corpus_dir() / f"{name}.cp"
    if not p.is_file():
        raise UnknownCorpus(f"corpus file missing: {p}")
    return p


def load_corpus(name: str, sessions: int = 1
                ) -> tuple[Protocol, tuple[PropertySpec, ...]]:
    """Load, check, and instantiate one built-in protocol."""
    spec = parse_file(corpus_path(name))
    return elaborate(spec, sessions=sessions)
