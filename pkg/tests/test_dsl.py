import pytest

from cpverif.bounded import Correspondence, Integrity, Secrecy
from cpverif.dsl import (
    CORPUS_NAMES,
    KindError,
    ProtocolSyntaxError,
    UndeclaredVariable,
    UnknownCorpus,
    corpus_path,
    elaborate,
    load_corpus,
    parse,
    parse_file,
    print_spec,
    tg_goal,
)
from cpverif.processes import Assign, Recv, Send
from cpverif.terms import Ty, con, enc, shared_channel, shared_key, tup, var

A_ = con("A", Ty.A)
B_ = con("B", Ty.A)
J_ = con("J", Ty.A)


def corpus_text(name):
    return corpus_path(name).read_text(encoding="utf-8")


# ---------------------------------------------------------------------------
# parsing and printing

@pytest.mark.parametrize("name", CORPUS_NAMES)
def test_corpus_round_trips(name):
    spec = parse(corpus_text(name))
    assert parse(print_spec(spec)) == spec


def test_printing_is_stable():
    spec = parse(corpus_text("yahalom"))
    assert print_spec(parse(print_spec(spec))) == print_spec(spec)


def test_yahalom_node_counts():
    spec = parse(corpus_text("yahalom"))
    assert [p.name for p in spec.procs] == ["I", "J", "R"]
    assert [len(p.nodes()) for p in spec.procs] == [4, 3, 4]
    assert all(p.replicable for p in spec.procs)


def test_misspelled_channel_is_located():
    src = ("protocol t;\n"
           "agents A B;\n"
           "sharedchannel c[A,B];\n"
           "process A(A) {\n"
           "  param x:M;\n"
           "  0: send d[A,B] x -> 1;\n"
           "}\n")
    with pytest.raises(UndeclaredVariable) as err:
        parse(src)
    assert err.value.line == 6
    assert err.value.col == 11


def test_syntax_error_reports_expected_tokens():
    with pytest.raises(ProtocolSyntaxError) as err:
        parse("protocol t\nagents A;")
    assert err.value.expected == (";",)
    assert err.value.line == 2


def test_kind_errors():
    base = ("protocol t;\nagents A B;\n"
            "process A(A) {{\n  param x:M;\n  {0}\n}}\n")
    with pytest.raises(KindError):
        parse(base.format("0: send open x(x) -> 1;"))  # M-kind key
    with pytest.raises(KindError):
        parse(base.format("0: send x x -> 1;"))  # M-kind channel
    with pytest.raises(ProtocolSyntaxError):
        parse(base.format("0: send open ?x -> 1;"))  # binder in a send


def test_binding_an_initialized_variable_is_rejected():
    src = ("protocol t;\nagents A B;\n"
           "process A(A) {\n  hidden n:N;\n"
           "  0: recv open ?n -> 1;\n}\n")
    with pytest.raises(KindError):
        parse(src)


def test_goal_refs_are_checked():
    base = ("protocol t;\nagents A B;\n"
            "process A(A) {{\n  param x:M;\n"
            "  0: send open x -> 1;\n}}\n{0}\n")
    with pytest.raises(UndeclaredVariable):
        parse(base.format("goal integrity at Z.1 : x == x;"))
    with pytest.raises(ProtocolSyntaxError):
        parse(base.format("goal integrity at A.9 : x == x;"))


def test_let_action_parses_to_assignment():
    src = ("protocol t;\nagents A B;\n"
           "process A(A) {\n  param x:M;\n  var y:M;\n"
           "  0: let y := x -> 1;\n}\n")
    spec = parse(src)
    assert parse(print_spec(spec)) == spec
    proto, _ = elaborate(spec)
    act = proto.sps[0].edges[0].action
    assert isinstance(act, Assign)
    assert act.rhs == var("x", Ty.M)


# ---------------------------------------------------------------------------
# corpus elaboration

def test_p1_matches_handwritten_protocol():
    from test_tg import chain_pair

    proto, props = load_corpus("p1")
    handmade, x, y = chain_pair()
    assert list(proto.sps) == list(handmade.sps)
    (g,) = props
    assert isinstance(g, Integrity)
    assert g.eqs == ((x, y),)
    assert tg_goal(g).at_proc == "B"


def test_p3_action_shapes():
    proto, _ = load_corpus("p3")
    a0 = proto.by_name["A"].edges[0].action
    assert a0 == Send(shared_channel(A_, J_), var("cc", Ty.C))
    a1 = proto.by_name["A"].edges[1].action
    assert a1 == Send(var("cc", Ty.C), var("x", Ty.M))
    b1 = proto.by_name["B"].edges[1].action
    assert b1 == Recv(var("v", Ty.C), var("y", Ty.M))


def test_p4_action_shapes():
    proto, _ = load_corpus("p4")
    kk = var("kk", Ty.K)
    assert proto.by_name["A"].edges[0].action == \
        Send(OPEN := con("open", Ty.C), enc(shared_key(A_, J_), kk))
    assert proto.by_name["A"].edges[1].action == \
        Send(OPEN, enc(kk, var("x", Ty.M)))


def test_wmf_broken_differs_from_p4_only_in_first_payload():
    p4 = parse(corpus_text("p4"))
    broken = parse(corpus_text("wmf-broken"))
    assert [p.name for p in p4.procs] == [p.name for p in broken.procs]
    for pp, bp in zip(p4.procs, broken.procs):
        assert pp.decls == bp.decls
        for i, (pa, ba) in enumerate(zip(pp.actions, bp.actions)):
            if pp.name == "A" and i == 0:
                assert pa != ba
                assert (pa.src, pa.dst, pa.kind, pa.chan) == \
                    (ba.src, ba.dst, ba.kind, ba.chan)
            else:
                assert pa == ba
    assert p4.goals == broken.goals


def test_unknown_corpus():
    with pytest.raises(UnknownCorpus):
        load_corpus("needham")


# ---------------------------------------------------------------------------
# sessions

def test_two_sessions_include_the_self_session():
    proto, _ = load_corpus("yahalom", sessions=2)
    assert proto.names() == ["I1", "I2", "J1", "J2", "R1", "R2"]
    assert proto.by_name["I1"].agent == A_
    assert proto.by_name["R1"].agent == B_
    # session 2 is A talking to itself
    assert proto.by_name["I2"].agent == A_
    assert proto.by_name["R2"].agent == A_
    # the initiator's peer parameter was filled at instantiation
    k1 = proto.by_name["I1"].edges[1].action.pattern
    assert shared_key(A_, J_) in [k1.args[0].args[0]]
    assert proto.by_name["I1"].params == frozenset()


def test_secrecy_family_covers_the_intermediary_self_key():
    _, props = load_corpus("yahalom", sessions=2)
    (sec,) = [p for p in props if isinstance(p, Secrecy)]
    for key in (shared_key(A_, J_), shared_key(B_, J_), shared_key(J_, J_)):
        assert key in sec.terms
    assert var("J1.kj", Ty.K) in sec.terms
    assert var("J2.kj", Ty.K) in sec.terms
    assert var("R2.nr", Ty.N) in sec.terms


def test_correspondence_expansion():
    _, props = load_corpus("yahalom", sessions=2)
    itor = [p for p in props if isinstance(p, Correspondence)
            and p.name.startswith("itor")]
    assert {p.trigger_proc for p in itor} == {"R1", "R2"}
    for p in itor:
        assert {w.proc for w in p.witnesses} == {"I1", "I2"}
        assert all(w.at == 3 for w in p.witnesses)
    # agent equations become constants: (I1, R1) is satisfiable, the
    # cross pair (I1, R2) pins B to the wrong agent
    r1 = next(p for p in itor if p.trigger_proc == "R1")
    w11 = next(w for w in r1.witnesses if w.proc == "I1")
    assert (B_, B_) in w11.eqs
    w21 = next(w for w in r1.witnesses if w.proc == "I2")
    assert (A_, B_) in w21.eqs


def test_corpus_dir_override(tmp_path, monkeypatch):
    (tmp_path / "p1.cp").write_text(corpus_text("p2"))
    monkeypatch.setenv("CPVERIF_CORPUS_DIR", str(tmp_path))
    proto, _ = load_corpus("p1")
    assert proto.by_name["A"].edges[0].action.chan == con("open", Ty.C)
    monkeypatch.delenv("CPVERIF_CORPUS_DIR")
    with pytest.raises(UnknownCorpus):
        monkeypatch.setenv("CPVERIF_CORPUS_DIR", str(tmp_path / "nowhere"))
        load_corpus("p1")
