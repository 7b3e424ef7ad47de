import struct
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Union

import numpy as np

from .codec import Reader
from .config import ViewSpec, WalkConfig
from .errors import EmptyViewError, FormatError
from .views import GraphView, sort_edges

WALK_MAGIC = b"KGWK"
WALK_VERSION = 1
CO_OCCURS = "__co_occurs__"

WalkCorpus = List[np.ndarray]
PairSet = Counter


def undirected_neighbors(view: GraphView) -> List[np.ndarray]:
    """Sorted distinct neighbors of every entity, ignoring edge direction."""
    ends = np.concatenate([view.edges[:, [0, 2]], view.edges[:, [2, 0]]])
    ends = np.unique(ends, axis=0)
    bounds = np.searchsorted(ends[:, 0], np.arange(view.entity_count + 1))
    return [ends[bounds[e] : bounds[e + 1], 1] for e in range(view.entity_count)]


def _walk(neighbors: List[np.ndarray], start: int, walk_index: int, cfg: WalkConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFFFFFFFFFF, start, walk_index])
    walk = [start]
    current = start
    for _ in range(cfg.walk_length - 1):
        options = neighbors[current]
        if len(options) == 0:
            break
        current = int(options[rng.integers(len(options))])
        walk.append(current)
    return np.array(walk, dtype=np.int64)


def sample_walks(view: GraphView, cfg: WalkConfig, workers: int = 1) -> WalkCorpus:
    """Uniform undirected random walks, ``walks_per_node`` from each connected entity.

    Each walk seeds its own generator from (seed, start, walk index), so the
    corpus is the same for any worker count.
    """
    if len(view) == 0:
        raise EmptyViewError("Cannot sample walks from an empty view")
    neighbors = undirected_neighbors(view)
    starts = [e for e in range(view.entity_count) if len(neighbors[e])]

    def walks_from(start: int) -> List[np.ndarray]:
        return [_walk(neighbors, start, n, cfg) for n in range(cfg.walks_per_node)]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(walks_from, starts))
    else:
        batches = [walks_from(start) for start in starts]
    return [walk for batch in batches for walk in batch]


def pairs_from_walks(corpus: WalkCorpus, window: int) -> PairSet:
    """Skip-gram style ordered pairs within ``window`` steps, self-pairs dropped."""
    pairs = Counter()
    for walk in corpus:
        walk = np.asarray(walk)
        for offset in range(1, window + 1):
            if offset >= len(walk):
                break
            left, right = walk[:-offset], walk[offset:]
            keep = left != right
            for a, b in zip(left[keep].tolist(), right[keep].tolist()):
                pairs[(a, b)] += 1
                pairs[(b, a)] += 1
    return pairs


def pairs_to_view(
    pairs: PairSet, entity_names: List[str], min_count: int = 1
) -> GraphView:
    """Distinct pairs as edges of a single co-occurrence predicate."""
    rows = [(a, 0, b) for (a, b), count in pairs.items() if count >= min_count]
    if not rows:
        raise EmptyViewError("No co-occurrence pairs reach min_count")
    spec = ViewSpec(drop_literal_facts=True, min_predicate_frequency=0)
    return GraphView(
        sort_edges(np.array(rows, dtype=np.int64)),
        len(entity_names),
        1,
        spec,
        list(entity_names),
        [CO_OCCURS],
    )


def export_pairs(pairs: PairSet, entity_names: List[str], path: Union[str, Path]) -> int:
    """Write distinct pairs as triples TSV under the co-occurrence predicate."""
    rows = sorted((entity_names[a], entity_names[b]) for a, b in pairs)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for a, b in rows:
            f.write(f"{a}\t{CO_OCCURS}\t{b}\tentity\n")
    return len(rows)


def save_walks(corpus: WalkCorpus, path: Union[str, Path]) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIQ", WALK_MAGIC, WALK_VERSION, len(corpus)))
        for walk in corpus:
            f.write(struct.pack("<I", len(walk)))
            f.write(np.asarray(walk, dtype="<u8").tobytes())


def load_walks(path: Union[str, Path]) -> WalkCorpus:
    with open(path, "rb") as f:
        reader = Reader(f.read())
    reader.magic(WALK_MAGIC)
    version, count = reader.unpack("<IQ", "walk header")
    if version != WALK_VERSION:
        raise FormatError(f"Unsupported walk corpus version {version}", 4)
    corpus = []
    for _ in range(count):
        (length,) = reader.unpack("<I", "walk length")
        corpus.append(reader.array("<u8", length, "walk").astype(np.int64))
    reader.end()
    return corpus

