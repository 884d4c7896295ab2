import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from scenarios import (
    generated_edge,
    generated_entity,
    index_for,
    medication_graph,
    scripted_gateway,
    triangle,
)
from trail.errors import MalformedConsensus, TruthImmutable
from trail.kg_store import entity_record
from trail.llm_gateway import ModelRole
from trail.refine import (
    CandidateTriple,
    RefineConfig,
    ReevalDecision,
    Refiner,
    combine_confidence,
    parse_consensus,
)
from trail.session import SessionState


def consensus(*triples) -> str:
    return json.dumps([{"head": h, "relation": r, "tail": t} for h, r, t in triples])


# -- parse_consensus --------------------------------------------------------


def test_one_object():
    assert parse_consensus(consensus(("a", "treats", "b"))) == [CandidateTriple("a", "treats", "b")]


def test_object_missing_tail_is_dropped_with_warning():
    warnings = []
    text = json.dumps([{"head": "a", "relation": "r", "tail": "b"}, {"head": "a", "relation": "r"}])
    assert len(parse_consensus(text, warnings)) == 1
    assert len(warnings) == 1


def test_prose_is_malformed():
    with pytest.raises(MalformedConsensus):
        parse_consensus("The drugs are probably related somehow.")


def test_array_inside_prose_and_descriptions():
    text = ('Consensus follows.\n[{"head": "metformin", "relation": "activates", "tail": "AMPK", '
            '"tail_description": "a kinase", "description": "via LKB1"}]\nDone.')
    (c,) = parse_consensus(text)
    assert (c.tail_description, c.edge_description) == ("a kinase", "via LKB1")


def test_repeated_triple_listed_once():
    warnings = []
    out = parse_consensus(consensus(("A", "treats", "B"), ("a", "Treats", "b")), warnings)
    assert len(out) == 1 and len(warnings) == 1


# -- handle_dead_end --------------------------------------------------------


def refiner_for(graph, script, tau=60, index=True):
    gw = scripted_gateway(script)
    idx = index_for(graph) if index else None
    return Refiner(graph, gw, RefineConfig(tau=tau), idx), gw


def dead_end_script(consensus_text, judge_replies):
    return {("generate", "reasoner"): ["draft"] * 3,
            ("aggregate", "aggregator"): [consensus_text],
            ("judge", "judge"): list(judge_replies)}


def test_threshold_gate_85_and_40():
    g = medication_graph()
    before = g.stats()
    refiner, gw = refiner_for(g, dead_end_script(
        consensus(("metformin", "activates", "AMPK"), ("metformin", "inhibits", "complex I")),
        ["Score: 85", "Score: 40"]))
    session = SessionState("s1", "q")
    out = refiner.handle_dead_end(session, "ctx")
    assert out.inserted == [("ampk", 85), ("metformin--activates--ampk", 85)]
    assert [(c.tail_name, s, r) for c, s, r in out.rejected] == [("complex I", 40, "below_threshold")]
    after = g.stats()
    assert (after.entities - before.entities, after.edges - before.edges) == (1, 1)
    assert g.find_entity_by_name("complex I") is None
    assert g.entity("metformin").is_truth
    assert "ampk" in refiner.index
    assert {"ampk", "metformin--activates--ampk"} <= session.rescore_cache
    assert [e.event for e in session.trace] == ["generate", "judge", "insert", "judge"]


def test_generation_request_shape():
    g = medication_graph()
    refiner, gw = refiner_for(g, dead_end_script(consensus(("x", "r", "y")), ["Score: 10"]))
    refiner.handle_dead_end(SessionState("s1", "q"), "ctx")
    (gen,) = gw.calls(step="generate")
    assert (gen.request.sample_count, gen.request.temperature) == (3, 0.2)
    (agg,) = gw.calls(step="aggregate")
    assert agg.request.role is ModelRole.AGGREGATOR and agg.request.temperature == 0.0
    assert agg.request.prompt.count("--- draft") == 3


def test_head_matching_truth_entity_is_reused():
    g = medication_graph()
    snapshot = entity_record(g.entity("lisinopril"))
    refiner, _ = refiner_for(g, dead_end_script(consensus(("Lisinopril", "inhibits", "ACE")), ["Score: 90"]))
    out = refiner.handle_dead_end(SessionState("s1", "q"), "ctx")
    assert out.inserted == [("ace", 90), ("lisinopril--inhibits--ace", 90)]
    assert entity_record(g.entity("lisinopril")) == snapshot


def test_existing_triple_is_duplicate_without_judging():
    g = medication_graph()
    text = g.dumps()
    refiner, gw = refiner_for(g, dead_end_script(consensus(("metformin", "treats", "type 2 diabetes")), []))
    out = refiner.handle_dead_end(SessionState("s1", "q"), "ctx")
    assert [r for _, _, r in out.rejected] == ["duplicate"]
    assert gw.calls(step="judge") == []
    assert g.dumps() == text


def test_judge_failure_rejects_candidate():
    g = medication_graph()
    refiner, _ = refiner_for(g, dead_end_script(consensus(("metformin", "activates", "AMPK")),
                                                ["no idea"] * 3))
    out = refiner.handle_dead_end(SessionState("s1", "q"), "ctx")
    assert out.inserted == []
    assert out.rejected[0][1:] == (None, "judge_failure")
    assert g.find_entity_by_name("AMPK") is None


def test_malformed_consensus_is_a_failed_generation():
    g = medication_graph()
    text = g.dumps()
    refiner, _ = refiner_for(g, dead_end_script("I could not agree on anything.", []))
    session = SessionState("s1", "q")
    out = refiner.handle_dead_end(session, "ctx")
    assert out.failed_generations == 1 and out.inserted == []
    assert g.dumps() == text
    assert "error" in session.trace[0].payload


def test_score_equal_to_tau_is_rejected():
    g = medication_graph()
    refiner, _ = refiner_for(g, dead_end_script(consensus(("metformin", "activates", "AMPK")), ["Score: 60"]))
    out = refiner.handle_dead_end(SessionState("s1", "q"), "ctx")
    assert out.inserted == [] and out.rejected[0][2] == "below_threshold"


def test_inserted_edge_id_avoids_retired_ids():
    g = medication_graph()
    refiner, _ = refiner_for(g, dead_end_script(
        consensus(("metformin", "activates", "AMPK")), ["Score: 90"]))
    refiner.handle_dead_end(SessionState("s1", "q"), "ctx")
    g.remove_entity("ampk")
    refiner.gateway.backends[ModelRole.REASONER].add("generate", "reasoner", ["d"] * 3)
    refiner.gateway.backends[ModelRole.REASONER].add(
        "aggregate", "aggregator", [consensus(("metformin", "activates", "AMPK"))])
    refiner.gateway.backends[ModelRole.REASONER].add("judge", "judge", ["Score: 90"])
    out = refiner.handle_dead_end(SessionState("s2", "q"), "ctx")
    assert out.inserted == [("ampk-2", 90), ("metformin--activates--ampk-2", 90)]


@given(st.lists(st.tuples(st.sampled_from(["a", "b", "c", "new1", "new2"]),
                          st.sampled_from(["related to", "causes"]),
                          st.sampled_from(["a", "b", "c", "new1", "new3"])), max_size=6),
       st.lists(st.integers(0, 100), min_size=6, max_size=6))
def test_dead_end_never_removes_anything(triples, scores):
    g = triangle()
    before = set(g.entities) | set(g.edges)
    refiner, _ = refiner_for(g, dead_end_script(consensus(*triples), [f"Score: {s}" for s in scores]))
    refiner.handle_dead_end(SessionState("s1", "q"), "ctx")
    assert before <= set(g.entities) | set(g.edges)


# -- combine_confidence -----------------------------------------------------


@pytest.mark.parametrize("old,judged,alpha,want", [
    (80, 40, 0.5, 60), (70, 30, 0.5, 50), (70, 90, 0.5, 80),
    (61, 60, 0.5, 61), (0, 1, 0.5, 1), (33, 77, 0.0, 33), (33, 77, 1.0, 77),
    (10, 20, 0.25, 13), (0, 100, 0.3, 30),
])
def test_combine_examples(old, judged, alpha, want):
    assert combine_confidence(old, judged, alpha) == want


@given(st.integers(0, 100), st.integers(0, 100), st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.7, 1.0]))
def test_combine_bounds(old, judged, alpha):
    out = combine_confidence(old, judged, alpha)
    assert isinstance(out, int)
    assert min(old, judged) <= out <= max(old, judged)
    assert combine_confidence(old, judged, 0.0) == old
    assert combine_confidence(old, judged, 1.0) == judged


def test_combine_rejects_bad_inputs():
    with pytest.raises(ValueError):
        combine_confidence(101, 50, 0.5)
    with pytest.raises(ValueError):
        combine_confidence(50, 50, 1.5)


# -- reevaluate_node --------------------------------------------------------


def graph_with_guess(confidence=70):
    g = triangle()
    g.add_entity(generated_entity("guess", confidence))
    g.add_edge(generated_edge("a-guess", "a", "guess", 75))
    g.add_edge(generated_edge("b-guess", "b", "guess", 75))
    return g


def test_low_rescore_prunes_entity_and_incident_edges():
    g = graph_with_guess(70)
    refiner, gw = refiner_for(g, {("reevaluate", "judge"): ["Score: 30"]})
    refiner.index.upsert("guess", [1.0] * 32)
    session = SessionState("s1", "q")
    decision = refiner.reevaluate_node("guess", session)
    assert decision == ReevalDecision(ReevalDecision.PRUNED, 50, 2)
    assert not g.has_entity("guess") and not g.has_edge("a-guess") and not g.has_edge("b-guess")
    assert g.integrity_problems() == []
    assert "guess" not in refiner.index
    assert session.outcome.pruned == ["guess"]
    assert session.outcome.detached_edges == ["a-guess", "b-guess"]
    assert "guess" in session.rescore_cache


def test_low_rescore_prunes_edge_alone():
    g = graph_with_guess(70)
    refiner, _ = refiner_for(g, {("reevaluate", "judge"): ["Score: 20"]})
    decision = refiner.reevaluate_node("a-guess", SessionState("s1", "q"))
    assert decision.kind == ReevalDecision.PRUNED and decision.removed_edges == 0
    assert g.has_entity("guess") and not g.has_edge("a-guess")


def test_high_rescore_kept_then_cached():
    g = graph_with_guess(70)
    refiner, gw = refiner_for(g, {("reevaluate", "judge"): ["Score: 90\n<description>refined</description>"]})
    session = SessionState("s1", "q")
    assert refiner.reevaluate_node("guess", session) == ReevalDecision(ReevalDecision.KEPT, 80)
    assert g.entity("guess").confidence == 80
    assert g.entity("guess").description == "refined"
    assert g.entity("guess").provenance.last_evaluated_session == "s1"
    calls = len(gw.exchanges)
    assert refiner.reevaluate_node("guess", session).kind == ReevalDecision.CACHE_SKIP
    assert len(gw.exchanges) == calls
    assert session.outcome.rescored == [("guess", 70, 80)]


def test_new_session_rescores_again():
    g = graph_with_guess(70)
    refiner, gw = refiner_for(g, {("reevaluate", "judge"): ["Score: 90", "Score: 90"]})
    refiner.reevaluate_node("guess", SessionState("s1", "q"))
    refiner.reevaluate_node("guess", SessionState("s2", "q"))
    assert g.entity("guess").confidence == 85
    assert len(gw.calls(step="reevaluate", subject="guess")) == 2


def test_truth_element_refused():
    g = graph_with_guess()
    refiner, _ = refiner_for(g, {})
    with pytest.raises(TruthImmutable):
        refiner.reevaluate_node("a", SessionState("s1", "q"))


def test_judge_failure_leaves_element_uncached():
    g = graph_with_guess(70)
    refiner, _ = refiner_for(g, {("reevaluate", "judge"): ["?", "?", "?", "Score: 90"]})
    session = SessionState("s1", "q")
    assert refiner.reevaluate_node("guess", session).kind == ReevalDecision.JUDGE_FAILED
    assert g.entity("guess").confidence == 70 and "guess" not in session.rescore_cache
    assert refiner.reevaluate_node("guess", session).kind == ReevalDecision.KEPT


@given(st.lists(st.sampled_from(["guess", "a-guess", "b-guess"]), min_size=1, max_size=12),
       st.lists(st.integers(0, 100), min_size=3, max_size=3))
def test_at_most_one_rescore_per_session(visits, scores):
    g = graph_with_guess(90)
    refiner, gw = refiner_for(g, {("reevaluate", "judge"): [f"Score: {s}" for s in scores]})
    session = SessionState("s1", "q")
    for element_id in visits:
        if element_id in g:
            refiner.reevaluate_node(element_id, session)
    for element_id in set(visits):
        assert len(gw.calls(step="reevaluate", subject=element_id)) <= 1
    assert g.integrity_problems() == []
    assert all(e.confidence >= 60 for e in [*g.entities.values(), *g.edges.values()])
