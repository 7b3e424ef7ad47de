import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Set, Tuple, Union

import numpy as np

from .codec import Reader, write_names
from .config import ViewSpec, from_dict, to_dict
from .errors import EmptyViewError, FormatError, SplitError
from .store import GraphStore

logger = logging.getLogger(__name__)

VIEW_MAGIC = b"KGVW"
VIEW_VERSION = 1
_VIEW_HEADER = "<4sIQQQ"

_MASK64 = 0xFFFFFFFFFFFFFFFF


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64)
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def hash_entities(entities: np.ndarray, seed: int) -> np.ndarray:
    """Seeded 64-bit hash of entity ids (splitmix64 over ``mix(seed) ^ id``)."""
    salt = _splitmix64(np.array([seed & _MASK64], dtype=np.uint64))[0]
    return _splitmix64(np.asarray(entities).astype(np.uint64) ^ salt)


@dataclass(eq=False)
class GraphView:
    """An immutable filtered edge list; ``edges`` rows are (head, predicate, tail)."""

    edges: np.ndarray
    entity_count: int
    predicate_count: int
    spec: ViewSpec
    entity_names: List[str]
    predicate_names: List[str]

    def __post_init__(self):
        self.edges = np.ascontiguousarray(self.edges, dtype=np.int64).reshape(-1, 3)
        self.edges.setflags(write=False)

    def __len__(self) -> int:
        return len(self.edges)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GraphView):
            return NotImplemented
        return (
            self.entity_count == other.entity_count
            and self.predicate_count == other.predicate_count
            and self.spec == other.spec
            and self.entity_names == other.entity_names
            and self.predicate_names == other.predicate_names
            and np.array_equal(self.edges, other.edges)
        )

    def edge_keys(self) -> np.ndarray:
        return encode_edges(self.edges, self.entity_count, self.predicate_count)

    def with_edges(self, edges: np.ndarray) -> "GraphView":
        return GraphView(
            edges,
            self.entity_count,
            self.predicate_count,
            self.spec,
            self.entity_names,
            self.predicate_names,
        )

    def as_store(self) -> GraphStore:
        """Materialize as a sealed store with the same id assignment."""
        store = GraphStore()
        for name in self.entity_names:
            store.entity_id(name)
        for name in self.predicate_names:
            store.predicate_id(name)
        for h, r, t in self.edges.tolist():
            store.add_triple(
                self.entity_names[h], self.predicate_names[r], self.entity_names[t]
            )
        return store.seal()


@dataclass
class PartitionedView:
    partitions: int
    entity_partition: np.ndarray
    buckets: Dict[Tuple[int, int], np.ndarray]
    members: List[np.ndarray]
    local_row: np.ndarray

    def bucket(self, i: int, j: int) -> np.ndarray:
        return self.buckets[(i, j)]

    def partition_sizes(self) -> List[int]:
        return [len(m) for m in self.members]


def encode_edges(edges: np.ndarray, entity_count: int, predicate_count: int) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
    return (edges[:, 0] * predicate_count + edges[:, 1]) * entity_count + edges[:, 2]


def sort_edges(edges: np.ndarray) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
    order = np.lexsort((edges[:, 2], edges[:, 1], edges[:, 0]))
    return edges[order]


def _resolve_predicates(store: GraphStore, keys: Iterable[Union[int, str]]) -> Set[int]:
    resolved = set()
    for key in keys:
        if isinstance(key, int):
            resolved.add(key)
            continue
        predicate = store.lookup_predicate(key)
        if predicate is None:
            logger.warning("Predicate %r in view spec is not in the store", key)
        else:
            resolved.add(predicate)
    return resolved


def build_view(store: GraphStore, spec: ViewSpec) -> GraphView:
    """Filter a sealed store: lists, then literals, then frequency threshold."""
    store.check_readable()
    allow = (
        _resolve_predicates(store, spec.predicate_allowlist)
        if spec.predicate_allowlist is not None
        else None
    )
    deny = _resolve_predicates(store, spec.predicate_denylist)
    literal_nodes: Dict[str, int] = {}
    rows = []
    for triple in store.triples:
        if allow is not None and triple.predicate not in allow:
            continue
        if triple.predicate in deny:
            continue
        if triple.is_literal:
            if spec.drop_literal_facts:
                continue
            name = f'"{triple.tail.value}"'
            tail = literal_nodes.setdefault(name, store.entity_count + len(literal_nodes))
        else:
            tail = triple.tail
        rows.append((triple.head, triple.predicate, tail))

    edges = np.array(rows, dtype=np.int64).reshape(-1, 3)
    if len(edges) and spec.min_predicate_frequency > 0:
        counts = np.bincount(edges[:, 1], minlength=store.predicate_count)
        edges = edges[counts[edges[:, 1]] >= spec.min_predicate_frequency]
    if len(edges) == 0:
        raise EmptyViewError("View is empty after filtering; nothing to train on")

    view = GraphView(
        sort_edges(edges),
        store.entity_count + len(literal_nodes),
        store.predicate_count,
        spec,
        list(store.entity_keys) + list(literal_nodes),
        list(store.predicate_keys),
    )
    logger.info(
        "Built view: %d edges over %d entities, %d predicates",
        len(view),
        view.entity_count,
        view.predicate_count,
    )
    return view


def split_view(
    view: GraphView, ratios: Tuple[float, float, float], seed: int
) -> Tuple[GraphView, GraphView, GraphView]:
    """Seeded edge-disjoint train/valid/test split; each part sorted."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise SplitError(f"Split ratios must be three positive numbers, got {ratios}")
    if not math.isclose(sum(ratios), 1.0, rel_tol=0, abs_tol=1e-9):
        raise SplitError(f"Split ratios must sum to 1, got {sum(ratios)}")
    n = len(view)
    n_valid = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    n_train = n - n_valid - n_test
    if min(n_train, n_valid, n_test) <= 0:
        raise SplitError(
            f"Split of {n} edges at {tuple(ratios)} leaves an empty part "
            f"({n_train}, {n_valid}, {n_test})"
        )
    order = np.random.default_rng(seed).permutation(n)
    shuffled = view.edges[order]
    parts = (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_valid],
        shuffled[n_train + n_valid :],
    )
    return tuple(view.with_edges(sort_edges(part)) for part in parts)


def partition_edges(view: GraphView, partitions: int, seed: int) -> PartitionedView:
    """Hash entities into ``partitions`` groups and bucket edges by (head, tail) group."""
    if partitions < 1:
        raise ValueError("partitions must be >= 1")
    entities = np.arange(view.entity_count, dtype=np.int64)
    if partitions == 1:
        assignment = np.zeros(view.entity_count, dtype=np.int64)
    else:
        assignment = (hash_entities(entities, seed) % np.uint64(partitions)).astype(
            np.int64
        )
    members = [np.flatnonzero(assignment == p) for p in range(partitions)]
    local_row = np.empty(view.entity_count, dtype=np.int64)
    for group in members:
        local_row[group] = np.arange(len(group))

    head_part = assignment[view.edges[:, 0]]
    tail_part = assignment[view.edges[:, 2]]
    buckets = {}
    for i in range(partitions):
        for j in range(partitions):
            mask = (head_part == i) & (tail_part == j)
            buckets[(i, j)] = view.edges[mask]
    return PartitionedView(partitions, assignment, buckets, members, local_row)


def latin_square_schedule(partitions: int) -> List[Tuple[int, int]]:
    """Fixed bucket order visiting every (i, j) once.

    Rows are walked alternately left-to-right and right-to-left, so each
    bucket shares exactly one partition with the one before it and a swap
    loads a single partition.
    """
    order = []
    for i in range(partitions):
        columns = range(partitions) if i % 2 == 0 else reversed(range(partitions))
        order.extend((i, j) for j in columns)
    return order


def save_view(view: GraphView, path: Union[str, Path]) -> None:
    with open(path, "wb") as f:
        f.write(
            struct.pack(
                _VIEW_HEADER,
                VIEW_MAGIC,
                VIEW_VERSION,
                view.entity_count,
                view.predicate_count,
                len(view),
            )
        )
        f.write(view.edges.astype("<u8").tobytes())
        write_names(f, [json.dumps(to_dict(view.spec), sort_keys=True)])
        write_names(f, view.entity_names)
        write_names(f, view.predicate_names)


def load_view(path: Union[str, Path]) -> GraphView:
    with open(path, "rb") as f:
        reader = Reader(f.read())
    reader.magic(VIEW_MAGIC)
    version, entity_count, predicate_count, edge_count = reader.unpack(
        "<IQQQ", "view header"
    )
    if version != VIEW_VERSION:
        raise FormatError(f"Unsupported view version {version}", 4)
    if entity_count == 0 or predicate_count == 0 or edge_count == 0:
        raise FormatError("View header has a zero count", 8)
    edges = reader.array("<u8", edge_count * 3, "edge list").astype(np.int64)
    spec_offset = reader.offset
    try:
        spec = from_dict(ViewSpec, json.loads(reader.string("view spec")))
    except ValueError as e:
        raise FormatError(f"Unreadable view spec: {e}", spec_offset) from None
    entity_names = reader.names(entity_count, "entity name")
    predicate_names = reader.names(predicate_count, "predicate name")
    reader.end()
    edges = edges.reshape(-1, 3)
    if edges[:, [0, 2]].max() >= entity_count or edges[:, 1].max() >= predicate_count:
        raise FormatError("Edge id exceeds header counts", 32)
    return GraphView(edges, entity_count, predicate_count, spec, entity_names, predicate_names)
