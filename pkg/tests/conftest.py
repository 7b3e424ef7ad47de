import numpy as np
import pytest

from kgforge.config import ViewSpec
from kgforge.model import EmbeddingModel
from kgforge.store import GraphStore
from kgforge.views import GraphView, sort_edges


def make_view(edges, entity_count=None, predicate_count=None):
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
    entity_count = entity_count or int(edges[:, [0, 2]].max()) + 1
    predicate_count = predicate_count or int(edges[:, 1].max()) + 1
    return GraphView(
        sort_edges(edges),
        entity_count,
        predicate_count,
        ViewSpec(min_predicate_frequency=0),
        [f"e{i}" for i in range(entity_count)],
        [f"p{i}" for i in range(predicate_count)],
    )


def make_model(entities, predicates, scorer="translational"):
    entities = np.asarray(entities, dtype=np.float32)
    predicates = np.asarray(predicates, dtype=np.float32)
    return EmbeddingModel(
        scorer,
        entities,
        predicates,
        [f"e{i}" for i in range(len(entities))],
        [f"p{i}" for i in range(len(predicates))],
    )


def random_view(entity_count, predicate_count, edge_count, seed):
    """Distinct random edges without self-loops."""
    rng = np.random.default_rng(seed)
    seen = set()
    while len(seen) < edge_count:
        h, t = rng.integers(entity_count, size=2)
        if h != t:
            seen.add((int(h), int(rng.integers(predicate_count)), int(t)))
    return make_view(sorted(seen), entity_count, predicate_count)


def translational_graph(seed, entity_count=1000, bits=10, noise=0.0):
    """Edges of an exact translational model plus a ``noise`` fraction of random edges.

    Entity ``e`` sits at a distinct corner ``codes[e]`` of a ``bits``-cube and
    predicate ``k`` sets bit ``k``, so every consistent edge satisfies
    ``corner(h) + unit(k) == corner(t)``. Returns the view and the codes.
    """
    rng = np.random.default_rng(seed)
    codes = rng.permutation(2**bits)[:entity_count]
    entity_of = {int(code): e for e, code in enumerate(codes)}
    edges = set()
    for h, code in enumerate(codes.tolist()):
        for k in range(bits):
            t = entity_of.get(code | (1 << k))
            if not code >> k & 1 and t is not None:
                edges.add((h, k, t))
    wanted = len(edges) + int(noise * len(edges))
    while len(edges) < wanted:
        h, t = rng.integers(entity_count, size=2)
        if h != t:
            edges.add((int(h), int(rng.integers(bits)), int(t)))
    return make_view(sorted(edges), entity_count, bits), codes


def is_translational_edge(codes, edge):
    h, k, t = (int(x) for x in edge)
    return not codes[h] >> k & 1 and codes[t] == codes[h] | (1 << k)


@pytest.fixture
def people_store():
    store = GraphStore()
    store.add_triple("jordan_player", "occupation", "basketball_player")
    store.add_triple("jordan_player", "occupation", "actor")
    store.add_triple("jordan_player", "member_of", "bulls")
    store.add_triple("jordan_prof", "occupation", "professor")
    store.add_triple("jordan_prof", "employer", "berkeley")
    store.add_triple("jordan_player", "height", "1.98", tail_kind="literal")
    store.set_record(
        "jordan_player", "Michael Jordan", ["MJ", "michael  jordan"], "person", 100.0
    )
    store.set_record("jordan_prof", "Michael Jordan", ["Michael I. Jordan"], "person", 5.0)
    store.set_record("bulls", "Chicago Bulls", ["Bulls"], "team", 40.0)
    store.set_record("berkeley", "UC Berkeley", [], "university", 30.0)
    return store.seal()
