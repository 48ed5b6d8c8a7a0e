"""Bounded exploration, its oracles, and agreement with the symbolic engine."""
import pytest

from cpverif.bounded import (
    Correspondence, ExploreConfig, Exploration, Integrity, PreconditionUnmet,
    ResourceLimit, Secrecy, Witness,
    canon_key, check_correspondence, check_integrity, check_secrecy, explore,
    find_emitter,
)
from cpverif.formulas import INTRUDER, holds
from cpverif.intruder import IntruderConfig
from cpverif.processes import Edge, Protocol, Recv, Send, SeqProc
from cpverif.terms import OPEN, Ty, con, enc, shared_channel, shared_key, tup, var
from cpverif.tg import build_tg, reduce

from test_tg import chain_pair, forwarded_channel, forwarded_key, keyed_pair

A_ = con("A", Ty.A)
B_ = con("B", Ty.A)
KAB = shared_key(A_, B_)


def noisy_pair():
    # a secret under a pre-shared key plus a receive the adversary can feed
    nn = var("nn", Ty.N)
    aa = var("aa", Ty.A)
    mm = var("mm", Ty.M)
    s = SeqProc(name="S", agent=A_, edges=(Edge(0, Send(OPEN, enc(KAB, nn)), 1),),
                hidden=frozenset({nn}))
    r = SeqProc(name="R", agent=B_, edges=(Edge(0, Recv(OPEN, tup(aa, mm)), 1),),
                bound=frozenset({aa, mm}))
    return Protocol([s, r]), nn


# ---------------------------------------------------------------------------
# Canonicalization and determinism

def test_canon_key_ignores_fresh_numbering():
    proto, *_ = forwarded_key()
    a = Exploration(proto, ExploreConfig(seed=0))
    b = Exploration(proto, ExploreConfig(seed=40))
    assert canon_key(a.s0) == canon_key(b.s0)


def test_exploration_deterministic_across_seeds():
    proto, *_ = forwarded_channel()
    a = Exploration(proto, ExploreConfig(seed=0))
    b = Exploration(proto, ExploreConfig(seed=9))
    a.run()
    b.run()
    assert a.order == b.order
    assert a.controls() == b.controls()


def test_worker_count_does_not_change_result():
    proto, *_ = forwarded_key()
    a = Exploration(proto, ExploreConfig(workers=1))
    b = Exploration(proto, ExploreConfig(workers=4))
    a.run()
    b.run()
    assert a.order == b.order


def test_resource_limit():
    proto, *_ = forwarded_channel()
    with pytest.raises(ResourceLimit):
        explore(proto, ExploreConfig(max_states=3))


def test_depth_cap_marks_truncation():
    proto, *_ = forwarded_channel()
    ex = Exploration(proto, ExploreConfig(max_depth=2))
    ex.run()
    assert ex.truncated
    assert max(ex.depth.values()) == 2


# ---------------------------------------------------------------------------
# Agreement with the reduced transition graph

@pytest.mark.parametrize("factory", [chain_pair, keyed_pair,
                                     forwarded_channel, forwarded_key])
def test_visited_controls_equal_reduced_nodes(factory):
    proto = factory()[0]
    tg = reduce(build_tg(proto))
    ex = Exploration(proto)
    verdict = ex.run()
    assert verdict.ok
    assert ex.controls() == tg.alive_nodes


@pytest.mark.parametrize("factory", [chain_pair, keyed_pair,
                                     forwarded_channel, forwarded_key])
def test_node_facts_hold_at_visited_states(factory):
    proto = factory()[0]
    tg = reduce(build_tg(proto))
    ex = Exploration(proto)
    ex.run()
    checked = 0
    for s in ex.visited.values():
        phi = tg.fact_formula(s.control())
        assert holds(phi, ex.view(s))
        checked += 1
    assert checked == len(tg.alive_nodes)


# ---------------------------------------------------------------------------
# Properties

def test_integrity_holds_on_pair():
    proto, x, y = chain_pair()
    prop = Integrity(name="agree", trigger_proc="B", trigger_at=1,
                     eqs=((x, y),))
    verdict = explore(proto, props=[prop])
    assert verdict.ok and verdict.status == "holds-at-bounds"


def test_secrecy_holds_on_forwarded_key():
    proto, kk, *_ = forwarded_key()
    J_ = con("J", Ty.A)
    family = frozenset({shared_key(A_, J_), shared_key(B_, J_), kk})
    verdict = explore(proto, props=[Secrecy(name="keys", terms=family)])
    assert verdict.ok


def test_secrecy_violated_with_short_trace():
    proto, kk, *_ = forwarded_key(broken=True)
    J_ = con("J", Ty.A)
    family = frozenset({shared_key(A_, J_), shared_key(B_, J_), kk})
    verdict = explore(proto, props=[Secrecy(name="keys", terms=family)])
    assert verdict.status == "violated"
    assert verdict.counterexample is not None
    assert len(verdict.counterexample) <= 4
    assert verdict.to_json()["counterexample"][0]["proc"] == "A"


def test_check_secrecy_cross_check_is_consistent():
    proto, nn = noisy_pair()
    ex = Exploration(proto)
    ex.run()
    for s in ex.visited.values():
        assert check_secrecy(s, frozenset({KAB, nn}), ex.knowledge(s))


def test_correspondence_vacuous_and_witnessed():
    proto, x, y = chain_pair()
    ex = Exploration(proto)
    ex.run()
    spec = Correspondence(
        name="b-after-a", trigger_proc="B", trigger_at=1,
        witnesses=(Witness(proc="A", at=1, eqs=((x, y),)),))
    for s in ex.visited.values():
        assert check_correspondence(s, spec)


def test_correspondence_fails_without_witness():
    proto, x, y = chain_pair()
    ex = Exploration(proto)
    ex.run()
    final = [s for s in ex.visited.values() if s.control() == (1, 1)]
    assert final
    wrong = Correspondence(
        name="never", trigger_proc="B", trigger_at=1,
        witnesses=(Witness(proc="A", at=0, eqs=()),))
    assert not check_correspondence(final[0], wrong)
    assert check_integrity(final[0],
                           Integrity("agree", "B", 1, ((x, y),)))


# ---------------------------------------------------------------------------
# Adversary activity and preservation

def test_adversary_feeds_open_receive():
    proto, nn = noisy_pair()
    ex = Exploration(proto)
    ex.run()
    intruder_edges = [(a, b, st) for a, b, st in ex.edges
                      if st.proc == INTRUDER]
    assert intruder_edges
    family = frozenset({KAB, nn})
    for src, dst, step in intruder_edges:
        s, s2 = ex.state_of[src], ex.state_of[dst]
        # control is untouched and security survives the injection
        assert s.control() == s2.control()
        assert check_secrecy(s, family, ex.knowledge(s))
        assert check_secrecy(s2, family, ex.knowledge(s2))
        # payloads under the protected key on the open channel unchanged
        def under(st):
            return {t.args[1] for t in st.chan_content(OPEN)
                    if hasattr(t, "fn") and t.fn == "enc" and t.args[0] == KAB}
        assert under(s) == under(s2)


def test_trace_steps_carry_deltas():
    proto, x, y = chain_pair()
    ex = Exploration(proto)
    ex.run()
    final = next(k for k, s in ex.visited.items() if s.control() == (1, 1))
    trace = ex.trace_to(final)
    assert [st.proc for st in trace.steps] == ["A", "B"]
    assert trace.steps[0].chan_delta  # the send put something somewhere
    assert trace.steps[1].binding_delta  # the receive bound y
    js = trace.to_json()
    assert js[0]["proc"] == "A" and "chanDelta" in js[0]


# ---------------------------------------------------------------------------
# Emitter oracle

def _final_trace(ex, control):
    key = next(k for k, s in ex.visited.items() if s.control() == control)
    return ex.trace_to(key), key


def test_find_emitter_locates_forwarder():
    proto, kk, *_ = forwarded_key()
    J_ = con("J", Ty.A)
    family = frozenset({shared_key(A_, J_), shared_key(B_, J_), kk})
    ex = Exploration(proto)
    ex.run()
    trace, key = _final_trace(ex, (2, 2, 2))
    s = ex.visited[key]
    th = s.value_binding()
    kk_val = th.get(kk)
    idx = len(trace.steps)
    step = find_emitter(trace, idx, shared_key(B_, J_), kk_val, family,
                        ex.knowledge(s))
    assert step is not None and step.proc == "J"
    step = find_emitter(trace, idx, shared_key(A_, J_), kk_val, family,
                        ex.knowledge(s))
    assert step is not None and step.proc == "A"


def test_find_emitter_rejects_empty_channel():
    proto, kk, *_ = forwarded_key()
    J_ = con("J", Ty.A)
    family = frozenset({shared_key(A_, J_), shared_key(B_, J_), kk})
    ex = Exploration(proto)
    ex.run()
    trace = ex.trace_to(canon_key(ex.s0))
    with pytest.raises(PreconditionUnmet):
        find_emitter(trace, 0, shared_key(A_, J_), con("junk", Ty.N), family)
