from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .config import ModelConfig, TrainConfig
from .errors import ConfigError, EmptyViewError, IdOutOfRangeError
from .views import GraphView

_EPS = 1e-12


@dataclass(eq=False)
class EmbeddingModel:
    """Entity and predicate matrices plus the vocabulary they are indexed by."""

    scorer: str
    entities: np.ndarray
    predicates: np.ndarray
    entity_names: List[str]
    predicate_names: List[str]

    @property
    def dim(self) -> int:
        return self.entities.shape[1]

    @property
    def entity_count(self) -> int:
        return self.entities.shape[0]

    @property
    def predicate_count(self) -> int:
        return self.predicates.shape[0]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(
            self.scorer,
            self.entities.copy(),
            self.predicates.copy(),
            list(self.entity_names),
            list(self.predicate_names),
        )

    def check_ids(self, head: int, predicate: int, tail: int) -> None:
        failed = []
        if not 0 <= head < self.entity_count:
            failed.append(("head", head))
        if not 0 <= predicate < self.predicate_count:
            failed.append(("predicate", predicate))
        if not 0 <= tail < self.entity_count:
            failed.append(("tail", tail))
        if failed:
            raise IdOutOfRangeError(failed)


def project_to_unit_ball(matrix: np.ndarray, rows: np.ndarray = None) -> None:
    """Scale rows with L2 norm above 1 back onto the unit sphere, in place.

    Norms are taken in float64 so projected float32 rows stay within 1 + 1e-7.
    """
    rows = np.arange(len(matrix)) if rows is None else np.asarray(rows)
    block = matrix[rows].astype(np.float64)
    norms = np.sqrt(np.sum(block * block, axis=1))
    over = norms > 1
    if not over.any():
        return
    matrix[rows[over]] = block[over] / norms[over, None]


def init_model(view: GraphView, cfg: ModelConfig, seed: int) -> EmbeddingModel:
    """Uniform init in [-6/sqrt(d), 6/sqrt(d)].

    For the translational scorer, entity and predicate rows are then projected
    onto the unit ball.
    """
    if len(view) == 0:
        raise EmptyViewError("Cannot initialize a model for an empty view")
    if cfg.dim < 1:
        raise ConfigError("dim: must be a positive integer", field="dim")
    bound = 6.0 / np.sqrt(cfg.dim)
    rng = np.random.default_rng(seed)
    entities = rng.uniform(-bound, bound, (view.entity_count, cfg.dim)).astype(np.float32)
    predicates = rng.uniform(-bound, bound, (view.predicate_count, cfg.dim)).astype(
        np.float32
    )
    if cfg.scorer == "translational":
        project_to_unit_ball(entities)
        project_to_unit_ball(predicates)
    return EmbeddingModel(
        cfg.scorer, entities, predicates, list(view.entity_names), list(view.predicate_names)
    )


def scores(scorer: str, h: np.ndarray, r: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Plausibility over the last axis; inputs broadcast against each other."""
    if scorer == "translational":
        x = h + r - t
        return -np.sqrt(np.sum(x * x, axis=-1))
    if scorer == "semantic-matching":
        return np.sum(h * r * t, axis=-1)
    raise ValueError(f"Unknown scorer {scorer!r}")


def score_gradients(
    scorer: str, h: np.ndarray, r: np.ndarray, t: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """d(score)/d(h, r, t), each shaped like the broadcast inputs."""
    if scorer == "translational":
        x = h + r - t
        norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
        unit = x / np.maximum(norm, _EPS)
        return -unit, -unit, unit
    if scorer == "semantic-matching":
        h, r, t = np.broadcast_arrays(h, r, t)
        return r * t, h * t, h * r
    raise ValueError(f"Unknown scorer {scorer!r}")


def score_triple(model: EmbeddingModel, head: int, predicate: int, tail: int) -> float:
    model.check_ids(head, predicate, tail)
    return float(
        scores(
            model.scorer,
            model.entities[head],
            model.predicates[predicate],
            model.entities[tail],
        )
    )


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0, -x))


def loss_values(
    loss_name: str,
    margin: float,
    score_pos: np.ndarray,
    scores_neg: np.ndarray,
    mask: np.ndarray = None,
) -> np.ndarray:
    """Per-positive loss; ``scores_neg`` has the negatives on its last axis.

    ``mask`` zeroes negatives that could not be drawn; the mean still divides
    by the full negative count. With no negatives only the positive term is left.
    """
    score_pos = np.asarray(score_pos, dtype=np.float64)
    scores_neg = np.asarray(scores_neg, dtype=np.float64)
    k = scores_neg.shape[-1]
    if loss_name == "margin-ranking":
        per_negative = np.maximum(0, margin - score_pos[..., None] + scores_neg)
        head = np.zeros_like(score_pos)
    elif loss_name == "logistic":
        per_negative = _softplus(scores_neg)
        head = _softplus(-score_pos)
    else:
        raise ValueError(f"Unknown loss {loss_name!r}")
    if k == 0:
        return head
    if mask is not None:
        per_negative = per_negative * mask
    return head + per_negative.sum(axis=-1) / k


def loss_gradients(
    loss_name: str,
    margin: float,
    score_pos: np.ndarray,
    scores_neg: np.ndarray,
    mask: np.ndarray = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """d(loss)/d(score_pos) and d(loss)/d(scores_neg), matching :func:`loss_values`."""
    score_pos = np.asarray(score_pos)
    scores_neg = np.asarray(scores_neg)
    k = max(scores_neg.shape[-1], 1)
    if loss_name == "margin-ranking":
        active = (margin - score_pos[..., None] + scores_neg > 0).astype(scores_neg.dtype)
        if mask is not None:
            active = active * mask
        return -active.sum(axis=-1) / k, active / k
    if loss_name == "logistic":
        d_neg = _sigmoid(scores_neg) / k
        if mask is not None:
            d_neg = d_neg * mask
        return -_sigmoid(-score_pos), d_neg
    raise ValueError(f"Unknown loss {loss_name!r}")


def loss(score_pos: float, scores_neg, cfg: TrainConfig) -> float:
    """Contrastive loss of one positive against its negatives.

    ``scores_neg`` may be a single score or a possibly empty sequence.
    """
    negatives = np.atleast_1d(np.asarray(scores_neg, dtype=np.float64))
    return float(loss_values(cfg.loss, cfg.margin, np.asarray(score_pos), negatives))
