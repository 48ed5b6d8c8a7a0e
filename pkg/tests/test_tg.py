"""Product graphs, fact propagation, and the reduction loop."""
import pytest

from cpverif.formulas import EqStore, eq_canon, entails
from cpverif.processes import Edge, Protocol, Recv, Send, SeqProc
from cpverif.terms import (
    OPEN, Ty, con, enc, shared_channel, shared_key, tup, var,
)
from cpverif.tg import (
    CyclicSP, GoalSpec, NodeFact, TGEdge,
    build_tg, check_goal, default_seed_fact, export_dot, join_facts,
    mark_unrealizable, reduce, seed_fact, step_fact,
)

A_ = con("A", Ty.A)
B_ = con("B", Ty.A)
J_ = con("J", Ty.A)
CAB = shared_channel(A_, B_)
CAJ = shared_channel(A_, J_)
CBJ = shared_channel(B_, J_)
KAB = shared_key(A_, B_)
KAJ = shared_key(A_, J_)
KBJ = shared_key(B_, J_)


def chain_pair():
    # one send over a pre-shared channel, one receive
    x = var("x", Ty.M)
    y = var("y", Ty.M)
    a = SeqProc(name="A", agent=A_, edges=(Edge(0, Send(CAB, x), 1),),
                params=frozenset({x}))
    b = SeqProc(name="B", agent=B_, edges=(Edge(0, Recv(CAB, y), 1),),
                bound=frozenset({y}))
    return Protocol([a, b]), x, y


def keyed_pair():
    # the same exchange pushed through a pre-shared key on the open channel
    x = var("x2", Ty.M)
    y = var("y2", Ty.M)
    a = SeqProc(name="A", agent=A_, edges=(Edge(0, Send(OPEN, enc(KAB, x)), 1),),
                params=frozenset({x}))
    b = SeqProc(name="B", agent=B_, edges=(Edge(0, Recv(OPEN, enc(KAB, y)), 1),),
                bound=frozenset({y}))
    return Protocol([a, b]), x, y


def forwarded_channel():
    # A makes a private channel, mails it to B via the relay J, then uses it
    cc = var("cc", Ty.C)
    x = var("x3", Ty.M)
    u = var("u", Ty.C)
    v = var("v", Ty.C)
    y = var("y3", Ty.M)
    a = SeqProc(name="A", agent=A_,
                edges=(Edge(0, Send(CAJ, cc), 1), Edge(1, Send(cc, x), 2)),
                hidden=frozenset({cc}), params=frozenset({x}))
    j = SeqProc(name="J", agent=J_,
                edges=(Edge(0, Recv(CAJ, u), 1), Edge(1, Send(CBJ, u), 2)),
                bound=frozenset({u}))
    b = SeqProc(name="B", agent=B_,
                edges=(Edge(0, Recv(CBJ, v), 1), Edge(1, Recv(v, y), 2)),
                bound=frozenset({v, y}))
    return Protocol([a, j, b]), cc, x, u, v, y


def forwarded_key(broken: bool = False):
    # same shape with keys: a fresh key travels under pre-shared keys
    kk = var("kk", Ty.K)
    x = var("x4", Ty.M)
    u = var("u4", Ty.K)
    v = var("v4", Ty.K)
    y = var("y4", Ty.M)
    first = tup(kk, enc(KAJ, kk)) if broken else enc(KAJ, kk)
    a = SeqProc(name="A", agent=A_,
                edges=(Edge(0, Send(OPEN, first), 1),
                       Edge(1, Send(OPEN, enc(kk, x)), 2)),
                hidden=frozenset({kk}), params=frozenset({x}))
    j = SeqProc(name="J", agent=J_,
                edges=(Edge(0, Recv(OPEN, enc(KAJ, u)), 1),
                       Edge(1, Send(OPEN, enc(KBJ, u)), 2)),
                bound=frozenset({u}))
    b = SeqProc(name="B", agent=B_,
                edges=(Edge(0, Recv(OPEN, enc(KBJ, v)), 1),
                       Edge(1, Recv(OPEN, enc(v, y)), 2)),
                bound=frozenset({v, y}))
    return Protocol([a, j, b]), kk, x, u, v, y


def exact(*terms):
    s = frozenset(terms)
    return (s, s)


# ---------------------------------------------------------------------------
# Construction

def test_product_counts_pair():
    proto, _, _ = chain_pair()
    tg = build_tg(proto)
    assert len(tg.nodes) == 4
    assert len(tg.edges) == 4
    assert tg.init == (0, 0)
    assert [n.name for n in tg.nodes] == ["A0B0", "A0B1", "A1B0", "A1B1"]


def test_product_counts_three_roles():
    proto, *_ = forwarded_channel()
    tg = build_tg(proto)
    assert len(tg.nodes) == 27
    assert len(tg.edges) == 54
    assert tg.name_of(tg.init) == "A0J0B0"


def test_product_counts_match_enumeration():
    # node count is the product of per-process control-graph sizes
    proto, *_ = forwarded_key()
    tg = build_tg(proto)
    sizes = [len(sp.nodes()) for sp in proto.sps]
    expect = 1
    for n in sizes:
        expect *= n
    assert len(tg.nodes) == expect
    by_hand = {
        (i, j, k)
        for i in sorted(proto.sps[0].nodes())
        for j in sorted(proto.sps[1].nodes())
        for k in sorted(proto.sps[2].nodes())
    }
    assert {n.at for n in tg.nodes} == by_hand


def test_cyclic_control_graph_rejected():
    w = var("w", Ty.M)
    looped = SeqProc(name="L", agent=A_,
                     edges=(Edge(0, Send(CAB, w), 1), Edge(1, Send(CAB, w), 0)),
                     params=frozenset({w}))
    with pytest.raises(CyclicSP):
        build_tg(Protocol([looped]))


# ---------------------------------------------------------------------------
# Seeds

def test_default_seed_channel_family():
    proto, cc, x, *_ = forwarded_channel()
    tg = build_tg(proto)
    f = default_seed_fact(tg)
    assert f.secure_c == {CAJ, CBJ, cc}
    assert f.secure_k == frozenset()
    assert set(f.chan_bounds) == {CAJ, CBJ, cc}
    assert all(b == (frozenset(), frozenset()) for b in f.chan_bounds.values())
    assert cc in f.rigid_vars and x in f.rigid_vars


def test_default_seed_key_family():
    proto, kk, *_ = forwarded_key()
    tg = build_tg(proto)
    f = default_seed_fact(tg)
    assert f.secure_c == frozenset()
    assert f.secure_k == {KAJ, KBJ, kk}
    assert set(f.key_bounds) == {KAJ, KBJ, kk}


def test_seed_fact_checked_against_initial_state():
    proto, x, _ = chain_pair()
    tg = build_tg(proto)
    bad = default_seed_fact(tg)
    bad.chan_bounds[CAB] = (frozenset({x}), frozenset({x}))
    with pytest.raises(ValueError):
        seed_fact(tg, bad)
    seed_fact(tg, default_seed_fact(tg))
    assert tg.init in tg.facts


# ---------------------------------------------------------------------------
# Single steps

def test_step_send_on_tracked_channel():
    proto, x, _ = chain_pair()
    tg = build_tg(proto)
    seed = default_seed_fact(tg)
    alpha = tg.out_edges(tg.init)[0]
    assert isinstance(alpha.action, Send)
    f = step_fact(seed, alpha)
    assert f.chan_bounds[CAB] == exact(x)


def test_step_recv_binds_singleton_content():
    proto, x, y = chain_pair()
    tg = build_tg(proto)
    f = step_fact(default_seed_fact(tg), tg.out_edges(tg.init)[0])
    beta = next(e for e in tg.out_edges((1, 0)) if isinstance(e.action, Recv))
    g = step_fact(f, beta)
    assert g.eqs.equal(x, y)


def test_step_recv_skips_wide_bounds():
    proto, x, y = chain_pair()
    tg = build_tg(proto)
    f = default_seed_fact(tg)
    f.chan_bounds[CAB] = (frozenset(), frozenset({x}))  # may be empty
    beta = next(e for e in tg.out_edges(tg.init) if isinstance(e.action, Recv))
    g = step_fact(f, beta)
    assert not g.eqs.equal(x, y)


def test_step_send_on_possibly_equal_channel():
    # an uninitialized channel variable may or may not be the tracked one
    proto, x, _ = chain_pair()
    tg = build_tg(proto)
    f = default_seed_fact(tg)
    d = var("d", Ty.C)
    e = TGEdge(src=(0, 0), dst=(1, 0), actor="A", action=Send(d, x))
    g = step_fact(f, e)
    assert g.chan_bounds[CAB] == (frozenset(), frozenset({x}))


def test_step_opaque_payload_drops_upper_bound():
    proto, x, y = keyed_pair()
    tg = build_tg(proto)
    f = default_seed_fact(tg)
    e = TGEdge(src=(0, 0), dst=(1, 0), actor="A", action=Send(OPEN, y))
    g = step_fact(f, e)
    lo, hi = g.key_bounds[KAB]
    assert lo == frozenset() and hi is None


def test_step_clear_send_of_secured_atom_is_a_finding():
    proto, kk, *_ = forwarded_key(broken=True)
    tg = build_tg(proto)
    seed = default_seed_fact(tg)
    first = tg.out_edges(tg.init)[0]
    findings = []
    step_fact(seed, first, findings=findings)
    assert [f.atom for f in findings] == [kk]


# ---------------------------------------------------------------------------
# Joins

def test_join_bounds_intersect_lo_union_hi():
    x = var("jx", Ty.M)
    a = NodeFact(chan_bounds={CAB: exact(x)})
    b = NodeFact(chan_bounds={CAB: (frozenset(), frozenset({x}))})
    j = join_facts([a, b])
    assert j.chan_bounds[CAB] == (frozenset(), frozenset({x}))


def test_join_keeps_common_equalities_only():
    x = var("jx2", Ty.M)
    p = con("p", Ty.M)
    q = con("q", Ty.M)
    e1 = EqStore()
    e1.assume(x, p)
    e2 = EqStore()
    e2.assume(x, p)
    e2.assume(var("jy2", Ty.M), q)
    j = join_facts([NodeFact(eqs=e1), NodeFact(eqs=e2)])
    assert j.eqs.equal(x, p)
    assert not j.eqs.equal(var("jy2", Ty.M), q)


def test_join_unbounded_side_wins():
    x = var("jx3", Ty.M)
    a = NodeFact(key_bounds={KAB: exact(x)})
    b = NodeFact(key_bounds={KAB: (frozenset(), None)})
    j = join_facts([a, b])
    assert j.key_bounds[KAB] == (frozenset(), None)


# ---------------------------------------------------------------------------
# Reduction: channel pair

def test_pair_reduction_end_to_end():
    proto, x, y = chain_pair()
    tg = reduce(build_tg(proto))
    assert len(tg.nodes) == 4
    marked = tg.marked_edges()
    assert len(marked) == 1
    assert (marked[0].src, marked[0].dst) == ((0, 0), (0, 1))
    assert tg.alive_node_names() == ["A0B0", "A1B0", "A1B1"]
    assert tg.rounds == [["A0B1"]]
    final = tg.node_named("A1B1")
    assert entails(tg.fact_formula(final), frozenset({eq_canon(x, y)}))
    assert not tg.findings


def test_pair_reduction_idempotent():
    proto, _, _ = chain_pair()
    tg = reduce(build_tg(proto))
    names = tg.alive_node_names()
    rounds = [list(r) for r in tg.rounds]
    reduce(tg)
    assert tg.alive_node_names() == names
    assert tg.rounds == rounds


def test_keyed_pair_reduction():
    proto, x, y = keyed_pair()
    tg = reduce(build_tg(proto))
    assert tg.alive_node_names() == ["A0B0", "A1B0", "A1B1"]
    assert len(tg.marked_edges()) == 1
    assert tg.facts[tg.node_named("A1B0")].key_bounds[KAB] == exact(x)
    final = tg.node_named("A1B1")
    assert entails(tg.fact_formula(final), frozenset({eq_canon(x, y)}))


# ---------------------------------------------------------------------------
# Reduction: forwarded channel

TEN = ["A0J0B0", "A1J0B0", "A1J1B0", "A1J2B0", "A1J2B1",
       "A2J0B0", "A2J1B0", "A2J2B0", "A2J2B1", "A2J2B2"]


def test_forwarded_channel_rounds():
    proto, *_ = forwarded_channel()
    tg = reduce(build_tg(proto))
    # the whole untouched tier except the initial node goes first
    assert tg.rounds[0] == ["A0J0B1", "A0J0B2", "A0J1B0", "A0J1B1",
                            "A0J1B2", "A0J2B0", "A0J2B1", "A0J2B2"]
    assert tg.rounds[1] == ["A1J0B1", "A1J0B2", "A1J1B1", "A1J1B2",
                            "A2J0B1", "A2J0B2", "A2J1B1", "A2J1B2"]
    # the dead-end tail goes once the relayed equality survives its join
    assert tg.rounds[2] == ["A1J2B2"]
    assert tg.alive_node_names() == TEN
    assert len(tg.rounds) == 3
    assert not tg.findings


def test_forwarded_channel_marks():
    proto, cc, x, u, v, y = forwarded_channel()
    tg = reduce(build_tg(proto))
    marked = {(tg.name_of(e.src), tg.name_of(e.dst)) for e in tg.marked_edges()}
    assert marked == {
        ("A0J0B0", "A0J1B0"), ("A0J0B0", "A0J0B1"),
        ("A1J0B0", "A1J0B1"), ("A2J0B0", "A2J0B1"),
        ("A1J1B0", "A1J1B1"), ("A2J1B0", "A2J1B1"),
        ("A1J2B1", "A1J2B2"),
    }


def test_forwarded_channel_facts():
    proto, cc, x, u, v, y = forwarded_channel()
    tg = reduce(build_tg(proto))

    def fact(name):
        return tg.facts[tg.node_named(name)]

    f = fact("A1J0B0")
    assert f.chan_bounds[CAJ] == exact(cc)
    assert f.chan_bounds[CBJ] == exact()
    assert f.chan_bounds[cc] == exact()

    assert fact("A2J0B0").chan_bounds[cc] == exact(x)
    assert fact("A1J1B0").eqs.equal(u, cc)

    f = fact("A2J1B0")
    assert f.chan_bounds[cc] == exact(x)
    assert f.eqs.equal(u, cc)

    f = fact("A1J2B0")
    assert f.chan_bounds[CBJ] == exact(u)
    assert f.chan_bounds[cc] == exact()
    assert f.eqs.equal(u, cc)

    assert fact("A1J2B1").eqs.equal(v, u)

    f = fact("A2J2B0")
    assert f.chan_bounds[CAJ] == exact(cc)
    assert f.chan_bounds[CBJ] == exact(u)
    assert f.chan_bounds[cc] == exact(x)
    assert f.eqs.equal(u, cc)

    assert fact("A2J2B1").eqs.equal(v, u)
    assert entails(tg.fact_formula(tg.node_named("A2J2B2")),
                   frozenset({eq_canon(x, y)}))


# ---------------------------------------------------------------------------
# Reduction: forwarded key

def test_forwarded_key_facts():
    proto, kk, x, u, v, y = forwarded_key()
    tg = reduce(build_tg(proto))
    assert tg.alive_node_names() == TEN

    def fact(name):
        return tg.facts[tg.node_named(name)]

    f = fact("A1J0B0")
    assert f.key_bounds[KAJ] == exact(kk)
    assert f.key_bounds[KBJ] == exact()
    assert f.key_bounds[kk] == exact()

    assert fact("A2J0B0").key_bounds[kk] == exact(x)
    assert fact("A1J1B0").eqs.equal(u, kk)

    f = fact("A2J1B0")
    assert f.key_bounds[kk] == exact(x)
    assert f.eqs.equal(u, kk)

    f = fact("A1J2B0")
    lo, hi = f.key_bounds[KBJ]
    assert lo == hi and len(lo) == 1
    assert f.eqs.equal(next(iter(lo)), u)
    assert f.key_bounds[kk] == exact()

    f = fact("A1J2B1")
    assert f.eqs.equal(u, kk) and f.eqs.equal(v, u)

    f = fact("A2J2B0")
    assert f.key_bounds[kk] == exact(x)
    assert f.eqs.equal(u, kk)

    assert fact("A2J2B1").eqs.equal(v, u)
    assert entails(tg.fact_formula(tg.node_named("A2J2B2")),
                   frozenset({eq_canon(x, y)}))
    assert not tg.findings


def test_forwarded_key_broken_reports_leak():
    proto, kk, *_ = forwarded_key(broken=True)
    tg = reduce(build_tg(proto))
    assert tg.findings
    leak = tg.findings[0]
    assert leak.atom is kk
    assert leak.edge.src == tg.init
    assert "finding" in leak.to_json()


# ---------------------------------------------------------------------------
# Goals and export

def test_check_goal_on_final_node():
    proto, x, y = chain_pair()
    tg = reduce(build_tg(proto))
    verdict = check_goal(tg, GoalSpec(name="agree", at_proc="B", at_node=1,
                                      eqs=((x, y),)))
    assert verdict.ok
    assert [d["node"] for d in verdict.details] == ["A1B1"]


def test_check_goal_fails_with_findings():
    proto, kk, x, u, v, y = forwarded_key(broken=True)
    tg = reduce(build_tg(proto))
    verdict = check_goal(tg, GoalSpec(name="agree", at_proc="B", at_node=2,
                                      eqs=((x, y),)))
    assert not verdict.ok
    assert any(d.get("finding") == "SecrecyLeak" for d in verdict.details)


def test_export_dot_views():
    proto, _, _ = chain_pair()
    tg = reduce(build_tg(proto))
    full = export_dot(tg)
    assert full.count("->") == 4
    assert '"A0B0" [peripheries=2];' in full
    assert full.count("dotnormal") == 1
    small = export_dot(tg, reduced=True)
    assert "A0B1" not in small
    assert small.count("->") == 2


def test_facts_json_schema():
    proto, _, _ = chain_pair()
    tg = reduce(build_tg(proto))
    js = tg.facts_json()
    assert set(js) == {"A0B0", "A1B0", "A1B1"}
    entry = js["A1B0"]
    assert entry["secureC"] == ["c[A,B]"]
    assert entry["bounds"]["c[A,B]"] == {"lo": ["x"], "hi": ["x"]}
    assert entry["at"] == {"A": 1, "B": 0}


def test_mark_unrealizable_needs_only_seed():
    proto, *_ = forwarded_channel()
    tg = build_tg(proto)
    seed_fact(tg, default_seed_fact(tg))
    new = mark_unrealizable(tg)
    assert len(new) == 2
    assert {tg.name_of(e.src) for e in new} == {"A0J0B0"}
