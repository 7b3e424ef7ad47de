import struct

import numpy as np
import pytest

from kgforge.errors import EntityNotFoundError, FormatError, IndexBuildError
from kgforge.index import (
    build_index,
    entity_similarity,
    knn_query,
    load_index,
    load_model,
    save_index,
    save_model,
)
from kgforge.model import EmbeddingModel

from conftest import make_model


def random_model(count, dim, seed):
    rng = np.random.default_rng(seed)
    return make_model(rng.normal(size=(count, dim)), rng.normal(size=(2, dim)))


def brute_force(vectors, query_id, metric):
    """Float64 similarity of every entity to ``query_id``; the query itself is -inf."""
    query = vectors[query_id]
    if metric == "cosine":
        unit = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
        sims = unit @ (query / np.linalg.norm(query))
    else:
        sims = -np.linalg.norm(vectors - query, axis=1)
    sims[query_id] = -np.inf
    return sims


def test_model_round_trip_is_bit_exact(tmp_path):
    model = random_model(20, 6, seed=0)
    save_model(model, tmp_path / "m.kgem")
    loaded = load_model(tmp_path / "m.kgem")
    assert loaded.entities.tobytes() == model.entities.tobytes()
    assert loaded.predicates.tobytes() == model.predicates.tobytes()
    assert loaded.entity_names == model.entity_names
    assert loaded.scorer == model.scorer


def test_randomized_model_round_trips(tmp_path):
    rng = np.random.default_rng(11)
    path = tmp_path / "m.kgem"
    for trial in range(1000):
        count, dim, relations = (int(x) for x in rng.integers([2, 1, 1], [20, 9, 5]))
        scale = 10.0 ** rng.integers(-3, 4)
        model = EmbeddingModel(
            str(rng.choice(["translational", "semantic-matching"])),
            (rng.normal(size=(count, dim)) * scale).astype(np.float32),
            (rng.normal(size=(relations, dim)) * scale).astype(np.float32),
            [f"entité_{trial}_{i}" for i in range(count)],
            [f"p{i}" for i in range(relations)],
        )
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.scorer == model.scorer
        assert loaded.entities.tobytes() == model.entities.tobytes()
        assert loaded.predicates.tobytes() == model.predicates.tobytes()
        assert loaded.entity_names == model.entity_names
        assert loaded.predicate_names == model.predicate_names


def test_truncated_model_is_rejected(tmp_path):
    model = random_model(20, 6, seed=0)
    save_model(model, tmp_path / "m.kgem")
    data = (tmp_path / "m.kgem").read_bytes()
    (tmp_path / "cut.kgem").write_bytes(data[:200])
    with pytest.raises(FormatError, match="Truncated entity matrix") as info:
        load_model(tmp_path / "cut.kgem")
    assert info.value.offset == 29


@pytest.mark.parametrize(
    "dim,entities,predicates,offset",
    [(0, 3, 1, 8), (2, 0, 1, 12), (2, 3, 0, 20)],
)
def test_zero_header_fields_rejected(tmp_path, dim, entities, predicates, offset):
    path = tmp_path / "zero.kgem"
    path.write_bytes(struct.pack("<4sIIQQB", b"KGEM", 1, dim, entities, predicates, 0))
    with pytest.raises(FormatError) as info:
        load_model(path)
    assert info.value.offset == offset


def test_single_cluster_ivf_matches_exact():
    model = random_model(200, 8, seed=1)
    exact = build_index(model)
    ivf = build_index(model, mode="ivf", n_clusters=1, seed=3)
    assert exact.centroids is None
    assert ivf.postings[0].tolist() == list(range(200))
    for query in range(0, 200, 17):
        assert knn_query(exact, query, k=7) == knn_query(ivf, query, k=7)


def test_separated_blobs_form_posting_lists():
    rng = np.random.default_rng(2)
    left = rng.normal(loc=-10, size=(50, 4))
    right = rng.normal(loc=10, size=(40, 4))
    model = make_model(np.concatenate([left, right]), np.zeros((1, 4)))
    index = build_index(model, metric="euclidean", mode="ivf", n_clusters=2, seed=0)
    postings = {frozenset(p.tolist()) for p in index.postings}
    assert postings == {frozenset(range(50)), frozenset(range(50, 90))}


def test_too_many_clusters_rejected():
    with pytest.raises(IndexBuildError):
        build_index(random_model(5, 2, seed=0), mode="ivf", n_clusters=6)


def test_cosine_neighbors_and_self_exclusion():
    model = make_model([[1, 0], [0.9, 0.1], [0, 1]], [[0, 0]])
    index = build_index(model)
    top = knn_query(index, 0, k=1)
    assert [n.entity for n in top] == [1]
    assert [n.entity for n in knn_query(index, 0, k=3)] == [1, 2]
    assert [n.rank for n in knn_query(index, 0, k=3)] == [1, 2]


def test_unknown_entity_query_fails():
    index = build_index(random_model(5, 2, seed=0))
    with pytest.raises(EntityNotFoundError):
        knn_query(index, 5)


def test_raw_vector_query_must_match_dimension():
    index = build_index(random_model(5, 3, seed=0))
    assert len(knn_query(index, [1.0, 0.0, 0.0], k=10)) == 5
    with pytest.raises(ValueError):
        knn_query(index, [1.0, 0.0])


@pytest.mark.parametrize("metric", ["cosine", "euclidean"])
def test_exact_mode_matches_brute_force(metric):
    model = random_model(1000, 16, seed=4)
    index = build_index(model, metric=metric)
    vectors = model.entities.astype(np.float64)
    rng = np.random.default_rng(5)
    for query in rng.choice(1000, size=100, replace=False).tolist():
        result = knn_query(index, query, k=10)
        oracle = brute_force(vectors, query, metric)
        top = np.sort(oracle)[::-1][:10]
        sims = [n.similarity for n in result]
        np.testing.assert_allclose(sims, top, atol=1e-5)
        assert all(oracle[n.entity] >= top[-1] - 1e-5 for n in result)
        assert len({n.entity for n in result}) == 10
        assert sims == sorted(sims, reverse=True)


def test_ties_break_by_ascending_id():
    model = make_model([[1, 0]] + [[0, 1]] * 5, [[0, 0]])
    index = build_index(model)
    assert [n.entity for n in knn_query(index, 0, k=5)] == [1, 2, 3, 4, 5]
    shuffled = make_model([[0, 1]] * 5 + [[1, 0]], [[0, 0]])
    assert [n.entity for n in knn_query(build_index(shuffled), 5, k=5)] == [0, 1, 2, 3, 4]


def test_type_filter_applies_before_top_k():
    model = make_model([[1, 0], [0.99, 0.1], [0.9, 0.4], [0, 1]], [[0, 0]])
    index = build_index(model, type_of=np.array([0, 1, 2, 2]))
    assert [n.entity for n in knn_query(index, 0, k=1, type_filter=2)] == [2]
    assert knn_query(index, 0, k=1, type_filter=7) == []


def _recall(count, dim, clusters, nprobe, queries, seed):
    model = random_model(count, dim, seed)
    exact = build_index(model)
    ivf = build_index(model, mode="ivf", n_clusters=clusters, seed=seed)
    assert sorted(np.concatenate(ivf.postings).tolist()) == list(range(count))
    rng = np.random.default_rng(seed)
    hits = 0
    for query in rng.choice(count, size=queries, replace=False).tolist():
        truth = {n.entity for n in knn_query(exact, query, k=10)}
        found = {n.entity for n in knn_query(ivf, query, k=10, nprobe=nprobe)}
        hits += len(truth & found)
    return hits / (10 * queries)


def test_ivf_recall_small():
    assert _recall(2000, 4, clusters=20, nprobe=5, queries=100, seed=6) >= 0.9


@pytest.mark.slow
def test_ivf_recall_at_scale():
    assert _recall(10_000, 4, clusters=100, nprobe=10, queries=200, seed=7) >= 0.9


def test_index_round_trip(tmp_path):
    model = random_model(60, 5, seed=8)
    index = build_index(
        model, mode="ivf", n_clusters=4, seed=1, type_of=np.arange(60) % 3
    )
    save_index(index, tmp_path / "i.kgix")
    loaded = load_index(tmp_path / "i.kgix", model)
    assert loaded.metric == "cosine" and loaded.mode == "ivf"
    assert np.array_equal(loaded.centroids, index.centroids)
    assert [p.tolist() for p in loaded.postings] == [p.tolist() for p in index.postings]
    assert np.array_equal(loaded.type_of, index.type_of)
    assert knn_query(loaded, 3, k=5, nprobe=2) == knn_query(index, 3, k=5, nprobe=2)
    with pytest.raises(FormatError):
        load_index(tmp_path / "i.kgix", random_model(61, 5, seed=0))


def test_entity_similarity():
    model = make_model([[1, 0], [0, 1], [2, 0]], [[0, 0]])
    assert entity_similarity(model, 0, 1) == 0.0
    assert entity_similarity(model, 0, 2) == pytest.approx(1.0)
    assert entity_similarity(model, 0, 2, metric="euclidean") == pytest.approx(-1.0)
    with pytest.raises(EntityNotFoundError):
        entity_similarity(model, 0, 3)
