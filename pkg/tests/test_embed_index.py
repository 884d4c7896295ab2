import math
import random

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from trail.embed_index import EmbeddingIndex, cosine
from trail.errors import DimensionMismatch, EmptyIndex, MalformedRecord, ZeroNorm


def oracle_cosine(u, v) -> float:
    dot = math.fsum(a * b for a, b in zip(u, v))
    return dot / (math.sqrt(math.fsum(a * a for a in u)) * math.sqrt(math.fsum(b * b for b in v)))


def oracle_top_k(items, query, k):
    """Full sort by (-cosine, id) over every entry."""
    scored = [(-oracle_cosine(vec, query), entity_id) for entity_id, vec in items]
    scored.sort()
    return [(entity_id, -neg) for neg, entity_id in scored[:k]]


def test_self_similarity_ranks_first():
    index = EmbeddingIndex(3)
    index.upsert("x", [0.2, -1.0, 3.0])
    index.upsert("y", [1.0, 0.0, 0.0])
    (first, score), _ = index.top_k([0.2, -1.0, 3.0], 2)
    assert first == "x"
    assert score == pytest.approx(1.0, abs=1e-12)


def test_wrong_dimension():
    index = EmbeddingIndex(3)
    with pytest.raises(DimensionMismatch):
        index.upsert("x", [1.0, 2.0])
    index.upsert("x", [1.0, 2.0, 3.0])
    with pytest.raises(DimensionMismatch):
        index.top_k([1.0, 2.0], 1)


def test_second_upsert_wins():
    index = EmbeddingIndex(2)
    index.upsert("x", [1.0, 0.0])
    index.upsert("x", [0.0, 1.0])
    assert index.top_k([0.0, 1.0], 1) == [("x", 1.0)]


def test_cosine_examples():
    assert cosine([3.0, 4.0], [3.0, 4.0]) == pytest.approx(1.0, abs=1e-12)
    assert cosine([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert abs(cosine([1.0, 1.0], [1.0, 0.0]) - 1 / math.sqrt(2)) <= 1e-9


def test_cosine_errors():
    with pytest.raises(ZeroNorm):
        cosine([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(DimensionMismatch):
        cosine([1.0], [1.0, 0.0])


def test_truncates_to_index_size():
    index = EmbeddingIndex(4)
    index.upsert("only", [1.0, 2.0, 3.0, 4.0])
    assert len(index.top_k([1.0, 0.0, 0.0, 0.0], 5)) == 1


def test_fifty_random_vectors_match_full_sort():
    rng = random.Random(7)
    items = [(f"e{i:02d}", [rng.gauss(0, 1) for _ in range(16)]) for i in range(50)]
    index = EmbeddingIndex.from_items(16, items)
    query = [rng.gauss(0, 1) for _ in range(16)]
    got = index.top_k(query, 7)
    want = oracle_top_k(items, query, 7)
    assert [i for i, _ in got] == [i for i, _ in want]
    for (_, a), (_, b) in zip(got, want):
        assert abs(a - b) <= 1e-9


def test_identical_vectors_tie_by_id():
    index = EmbeddingIndex(3)
    for entity_id in ("zeta", "alpha", "mid"):
        index.upsert(entity_id, [0.3, 0.3, 0.9])
    index.upsert("other", [1.0, 0.0, 0.0])
    assert [i for i, _ in index.top_k([0.3, 0.3, 0.9], 3)] == ["alpha", "mid", "zeta"]


def test_parallel_vectors_of_different_length_tie_by_id():
    index = EmbeddingIndex(2)
    index.upsert("b", [2.0, 2.0])
    index.upsert("a", [1.0, 1.0])
    assert [i for i, _ in index.top_k([1.0, 1.0], 2)] == ["a", "b"]


def test_empty_and_zero_queries():
    index = EmbeddingIndex(2)
    with pytest.raises(EmptyIndex):
        index.top_k([1.0, 0.0], 1)
    index.upsert("x", [1.0, 0.0])
    with pytest.raises(ZeroNorm):
        index.top_k([0.0, 0.0], 1)
    with pytest.raises(ValueError):
        index.top_k([1.0, 0.0], 0)


def test_zero_vector_means_missing():
    index = EmbeddingIndex(2)
    index.upsert("ghost", [0.0, 0.0])
    with pytest.raises(EmptyIndex):
        index.top_k([1.0, 0.0], 1)
    index.upsert("x", [0.0, 1.0])
    assert index.ids() == ["x"]
    assert index.get("ghost") is None


def test_remove():
    index = EmbeddingIndex.from_items(2, [("a", [1.0, 0.0]), ("b", [0.9, 0.1])])
    index.remove("a")
    assert [i for i, _ in index.top_k([1.0, 0.0], 2)] == ["b"]


def test_sidecar_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    index = EmbeddingIndex.from_items(8, [(f"e{i}", rng.normal(size=8)) for i in range(12)])
    path = tmp_path / "kg.emb.jsonl"
    index.save(path)
    loaded = EmbeddingIndex.load(path)
    assert loaded.ids() == index.ids()
    for entity_id in index.ids():
        assert np.array_equal(loaded.get(entity_id), index.get(entity_id))


def test_sidecar_bad_dimension_line():
    with pytest.raises(MalformedRecord) as info:
        EmbeddingIndex.loads('{"dim": 2}\n{"id": "a", "vector": [1, 2]}\n{"id": "b", "vector": [1]}\n')
    assert info.value.line == 3


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def vectors(dim):
    return st.lists(finite, min_size=dim, max_size=dim).filter(lambda v: math.fsum(x * x for x in v) > 1e-6)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12).flatmap(lambda d: st.tuples(vectors(d), vectors(d))))
def test_cosine_symmetric(pair):
    u, v = pair
    assert abs(cosine(u, v) - cosine(v, u)) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12).flatmap(lambda d: st.tuples(vectors(d), vectors(d))),
       st.floats(1e-3, 1e3))
def test_cosine_scale_invariant(pair, scale):
    u, v = pair
    assert abs(cosine([scale * x for x in u], v) - cosine(u, v)) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8).flatmap(
    lambda d: st.tuples(st.lists(vectors(d), min_size=1, max_size=30), vectors(d))),
    st.integers(1, 10))
def test_top_k_matches_brute_force(data, k):
    vecs, query = data
    items = [(f"id{i:03d}", v) for i, v in enumerate(vecs)]
    want = oracle_top_k(items, query, k)
    # near-ties can legitimately order differently under two float evaluations
    scores = sorted(s for _, s in oracle_top_k(items, query, len(items)))
    assume(all(b - a > 1e-9 or b == a for a, b in zip(scores, scores[1:])))
    got = EmbeddingIndex.from_items(len(query), items).top_k(query, k)
    assert [i for i, _ in got] == [i for i, _ in want]
    for (_, a), (_, b) in zip(got, want):
        assert abs(a - b) <= 1e-9
