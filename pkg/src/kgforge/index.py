import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from sklearn.cluster import KMeans

from .codec import Reader, write_names
from .errors import EntityNotFoundError, FormatError, IndexBuildError
from .model import EmbeddingModel
from .store import GraphStore

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"KGEM"
MODEL_VERSION = 1
_MODEL_HEADER = "<4sIIQQB"
SCORER_TAGS = {"translational": 0, "semantic-matching": 1}

INDEX_MAGIC = b"KGIX"
INDEX_VERSION = 1
_INDEX_HEADER = "<4sIBBQIQ"
METRIC_TAGS = {"cosine": 0, "euclidean": 1}
MODE_TAGS = {"exact": 0, "ivf": 1}
KMEANS_ITERATIONS = 25


def save_model(model: EmbeddingModel, path: Union[str, Path]) -> None:
    """Write the ``KGEM`` binary: header, f32 matrices, length-prefixed names."""
    if model.dim == 0 or model.entity_count == 0 or model.predicate_count == 0:
        raise ValueError("Refusing to save a model with a zero dimension or count")
    with open(path, "wb") as f:
        f.write(
            struct.pack(
                _MODEL_HEADER,
                MODEL_MAGIC,
                MODEL_VERSION,
                model.dim,
                model.entity_count,
                model.predicate_count,
                SCORER_TAGS[model.scorer],
            )
        )
        f.write(np.ascontiguousarray(model.entities, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(model.predicates, dtype="<f4").tobytes())
        write_names(f, model.entity_names)
        write_names(f, model.predicate_names)


def load_model(path: Union[str, Path]) -> EmbeddingModel:
    with open(path, "rb") as f:
        reader = Reader(f.read())
    reader.magic(MODEL_MAGIC)
    version, dim, entity_count, predicate_count, scorer_tag = reader.unpack(
        "<IIQQB", "model header"
    )
    if version != MODEL_VERSION:
        raise FormatError(f"Unsupported model version {version}", 4)
    if dim == 0:
        raise FormatError("Model dimension is zero", 8)
    if entity_count == 0:
        raise FormatError("Model entity count is zero", 12)
    if predicate_count == 0:
        raise FormatError("Model predicate count is zero", 20)
    scorers = {tag: name for name, tag in SCORER_TAGS.items()}
    if scorer_tag not in scorers:
        raise FormatError(f"Unknown scorer tag {scorer_tag}", 28)
    entities = reader.array("<f4", entity_count * dim, "entity matrix")
    predicates = reader.array("<f4", predicate_count * dim, "predicate matrix")
    entity_names = reader.names(entity_count, "entity name")
    predicate_names = reader.names(predicate_count, "predicate name")
    reader.end()
    return EmbeddingModel(
        scorers[scorer_tag],
        entities.astype(np.float32).reshape(entity_count, dim),
        predicates.astype(np.float32).reshape(predicate_count, dim),
        entity_names,
        predicate_names,
    )


@dataclass(frozen=True)
class Neighbor:
    entity: int
    similarity: float
    rank: int


@dataclass(eq=False)
class KnnIndex:
    metric: str
    mode: str
    vectors: np.ndarray
    type_of: np.ndarray
    centroids: Optional[np.ndarray] = None
    postings: List[np.ndarray] = field(default_factory=list)
    _unit: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def entity_count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_clusters(self) -> int:
        return 0 if self.centroids is None else self.centroids.shape[0]

    def unit_vectors(self) -> np.ndarray:
        if self._unit is None:
            self._unit = _normalize(self.vectors)
        return self._unit


def _normalize(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float32)
    norms = np.sqrt(np.sum(matrix * matrix, axis=-1, keepdims=True))
    return np.divide(matrix, norms, out=np.zeros_like(matrix), where=norms > 0)


def similarities(metric: str, query: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Similarity of ``query`` to every row; cosine against a zero vector is 0."""
    if metric == "cosine":
        return _normalize(matrix) @ _normalize(query)
    if metric == "euclidean":
        diff = matrix - query
        return -np.sqrt(np.sum(diff * diff, axis=1))
    raise ValueError(f"Unknown metric {metric!r}")


def entity_types(store: GraphStore, entity_count: int) -> np.ndarray:
    """Type id per entity (-1 when untyped), sized to a model's vocabulary."""
    type_of = np.full(entity_count, -1, dtype=np.int64)
    for entity, record in store.records.items():
        if entity < entity_count and record.entity_type is not None:
            type_of[entity] = record.entity_type
    return type_of


def build_index(
    model: EmbeddingModel,
    metric: str = "cosine",
    mode: str = "exact",
    n_clusters: int = 1,
    seed: int = 0,
    type_of: Optional[np.ndarray] = None,
) -> KnnIndex:
    """Exact index (vectors only) or IVF over seeded k-means centroids."""
    if metric not in METRIC_TAGS:
        raise IndexBuildError(f"metric must be one of {tuple(METRIC_TAGS)}")
    if mode not in MODE_TAGS:
        raise IndexBuildError(f"mode must be one of {tuple(MODE_TAGS)}")
    if type_of is None:
        type_of = np.full(model.entity_count, -1, dtype=np.int64)
    index = KnnIndex(metric, mode, model.entities, np.asarray(type_of, dtype=np.int64))
    if mode == "exact":
        return index

    if n_clusters < 1:
        raise IndexBuildError("n_clusters must be >= 1")
    if n_clusters > model.entity_count:
        raise IndexBuildError(
            f"n_clusters={n_clusters} exceeds entity count {model.entity_count}"
        )
    data = index.unit_vectors() if metric == "cosine" else index.vectors
    kmeans = KMeans(
        n_clusters=n_clusters,
        init="k-means++",
        n_init=1,
        max_iter=KMEANS_ITERATIONS,
        random_state=seed & 0xFFFFFFFF,
    ).fit(data)
    centroids = kmeans.cluster_centers_.astype(np.float32)
    if metric == "cosine":
        centroids = _normalize(centroids)
    index.centroids = centroids
    if metric == "cosine":
        labels = np.argmax(data @ centroids.T, axis=1)
    else:
        squared = (
            np.sum(data * data, axis=1, keepdims=True)
            - 2 * data @ centroids.T
            + np.sum(centroids * centroids, axis=1)
        )
        labels = np.argmin(squared, axis=1)
    index.postings = [np.flatnonzero(labels == c) for c in range(n_clusters)]
    logger.info(
        "Built IVF index: %d clusters over %d entities", n_clusters, model.entity_count
    )
    return index


def _nearest_centroids(index: KnnIndex, vector: np.ndarray, nprobe: int) -> np.ndarray:
    sims = similarities(index.metric, vector, index.centroids)
    order = np.lexsort((np.arange(len(sims)), -sims))
    return order[:nprobe]


def knn_query(
    index: KnnIndex,
    query: Union[int, Sequence[float], np.ndarray],
    k: int = 10,
    type_filter: Optional[int] = None,
    nprobe: int = 1,
) -> List[Neighbor]:
    """Top-k entities by similarity; an entity query never returns itself."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if nprobe < 1:
        raise ValueError("nprobe must be >= 1")
    exclude = None
    if isinstance(query, (int, np.integer)):
        if not 0 <= query < index.entity_count:
            raise EntityNotFoundError(int(query))
        exclude = int(query)
        vector = index.vectors[exclude]
    else:
        vector = np.asarray(query, dtype=np.float32)
        if vector.shape != (index.dim,):
            raise ValueError(
                f"Query vector has shape {vector.shape}, expected ({index.dim},)"
            )

    if index.mode == "ivf":
        probed = _nearest_centroids(index, vector, nprobe)
        candidates = np.sort(np.concatenate([index.postings[c] for c in probed]))
    else:
        candidates = np.arange(index.entity_count)
    if exclude is not None:
        candidates = candidates[candidates != exclude]
    if type_filter is not None:
        candidates = candidates[index.type_of[candidates] == type_filter]
    if len(candidates) == 0:
        return []

    if index.metric == "cosine":
        sims = index.unit_vectors()[candidates] @ _normalize(vector)
    else:
        sims = similarities(index.metric, vector, index.vectors[candidates])
    order = np.lexsort((candidates, -sims))[:k]
    return [
        Neighbor(int(candidates[o]), float(sims[o]), rank)
        for rank, o in enumerate(order, start=1)
    ]


def entity_similarity(
    model: EmbeddingModel, a: int, b: int, metric: str = "cosine"
) -> float:
    """Similarity between two entities' vectors under ``metric``."""
    for entity in (a, b):
        if not 0 <= entity < model.entity_count:
            raise EntityNotFoundError(entity)
    return float(similarities(metric, model.entities[a], model.entities[b][None, :])[0])


def save_index(index: KnnIndex, path: Union[str, Path]) -> None:
    with open(path, "wb") as f:
        f.write(
            struct.pack(
                _INDEX_HEADER,
                INDEX_MAGIC,
                INDEX_VERSION,
                METRIC_TAGS[index.metric],
                MODE_TAGS[index.mode],
                index.entity_count,
                index.dim,
                index.n_clusters,
            )
        )
        f.write(index.type_of.astype("<i8").tobytes())
        if index.mode == "ivf":
            f.write(index.centroids.astype("<f4").tobytes())
            f.write(np.array([len(p) for p in index.postings], dtype="<u8").tobytes())
            for posting in index.postings:
                f.write(posting.astype("<u8").tobytes())


def load_index(path: Union[str, Path], model: EmbeddingModel) -> KnnIndex:
    """Read a ``KGIX`` file and attach it to the model whose vectors it indexes."""
    with open(path, "rb") as f:
        reader = Reader(f.read())
    reader.magic(INDEX_MAGIC)
    version, metric_tag, mode_tag, entity_count, dim, n_clusters = reader.unpack(
        "<IBBQIQ", "index header"
    )
    if version != INDEX_VERSION:
        raise FormatError(f"Unsupported index version {version}", 4)
    metrics = {tag: name for name, tag in METRIC_TAGS.items()}
    modes = {tag: name for name, tag in MODE_TAGS.items()}
    if metric_tag not in metrics:
        raise FormatError(f"Unknown metric tag {metric_tag}", 8)
    if mode_tag not in modes:
        raise FormatError(f"Unknown mode tag {mode_tag}", 9)
    if entity_count != model.entity_count or dim != model.dim:
        raise FormatError(
            f"Index covers {entity_count}x{dim} vectors, model has "
            f"{model.entity_count}x{model.dim}",
            10,
        )
    type_of = reader.array("<i8", entity_count, "entity types").astype(np.int64)
    index = KnnIndex(metrics[metric_tag], modes[mode_tag], model.entities, type_of)
    if index.mode == "ivf":
        centroids = reader.array("<f4", n_clusters * dim, "centroids")
        index.centroids = centroids.astype(np.float32).reshape(n_clusters, dim)
        lengths = reader.array("<u8", n_clusters, "posting lengths")
        index.postings = [
            reader.array("<u8", int(n), "posting list").astype(np.int64) for n in lengths
        ]
    reader.end()
    return index
