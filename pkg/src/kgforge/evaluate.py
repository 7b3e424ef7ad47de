import logging
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from .model import EmbeddingModel, scores
from .views import GraphView

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LinkPredictionReport:
    mrr: float
    hits_at_1: float
    hits_at_10: float
    ranks: int

    def to_dict(self) -> Dict[str, float]:
        return {
            "mrr": self.mrr,
            "hits@1": self.hits_at_1,
            "hits@10": self.hits_at_10,
            "ranks": self.ranks,
        }


def _known_index(full_view: GraphView):
    tails: Dict[tuple, List[int]] = {}
    heads: Dict[tuple, List[int]] = {}
    for h, r, t in full_view.edges.tolist():
        tails.setdefault((h, r), []).append(t)
        heads.setdefault((r, t), []).append(h)
    return tails, heads


def filtered_rank(candidate_scores: np.ndarray, true_entity: int, other_true: List[int]) -> int:
    """Rank of ``true_entity`` with other true answers removed; ties count against it."""
    target = candidate_scores[true_entity]
    keep = np.ones(len(candidate_scores), dtype=bool)
    keep[other_true] = False
    keep[true_entity] = False
    competitors = candidate_scores[keep]
    return 1 + int(np.count_nonzero(competitors >= target))


def evaluate_link_prediction(
    model: EmbeddingModel, test_view: GraphView, full_view: GraphView
) -> LinkPredictionReport:
    """Filtered MRR and Hits@{1,10}, averaged over tail and head prediction."""
    tails, heads = _known_index(full_view)
    entities = model.entities
    ranks = []
    for h, r, t in test_view.edges.tolist():
        model.check_ids(h, r, t)
        w = model.predicates[r]
        tail_scores = scores(model.scorer, entities[h], w, entities)
        ranks.append(filtered_rank(tail_scores, t, tails.get((h, r), [])))
        head_scores = scores(model.scorer, entities, w, entities[t])
        ranks.append(filtered_rank(head_scores, h, heads.get((r, t), [])))
    if not ranks:
        return LinkPredictionReport(0.0, 0.0, 0.0, 0)
    ranks = np.asarray(ranks, dtype=np.float64)
    report = LinkPredictionReport(
        mrr=float(np.mean(1.0 / ranks)),
        hits_at_1=float(np.mean(ranks <= 1)),
        hits_at_10=float(np.mean(ranks <= 10)),
        ranks=len(ranks),
    )
    logger.info(
        "Link prediction over %d ranks: MRR %.4f, Hits@1 %.4f, Hits@10 %.4f",
        report.ranks,
        report.mrr,
        report.hits_at_1,
        report.hits_at_10,
    )
    return report
