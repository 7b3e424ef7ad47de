"""Fact verification, threshold calibration, fact ranking and related entities."""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import roc_auc_score

from .errors import CalibrationError, EntityNotFoundError, IdOutOfRangeError
from .index import KnnIndex, Neighbor, knn_query
from .model import EmbeddingModel, score_triple, scores
from .store import GraphStore

TripleIds = Tuple[int, int, int]


@dataclass(frozen=True)
class Verdict:
    triple: TripleIds
    score: float
    threshold: float
    accepted: bool

    def to_dict(self) -> Dict:
        head, predicate, tail = self.triple
        return {
            "head": head,
            "predicate": predicate,
            "tail": tail,
            "score": self.score,
            "threshold": self.threshold,
            "accepted": self.accepted,
        }


@dataclass(frozen=True)
class Calibration:
    threshold: float
    balanced_accuracy: float
    auc: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "threshold": self.threshold,
            "balanced_accuracy": self.balanced_accuracy,
            "auc": self.auc,
        }


@dataclass(frozen=True)
class RankedFacts:
    subject: int
    predicate: int
    candidates: List[Tuple[int, float]]

    def to_dict(self) -> Dict:
        return {
            "subject": self.subject,
            "predicate": self.predicate,
            "candidates": [{"entity": e, "score": s} for e, s in self.candidates],
        }


def verify_fact(model: EmbeddingModel, triple: TripleIds, tau: float) -> Verdict:
    head, predicate, tail = (int(x) for x in triple)
    score = score_triple(model, head, predicate, tail)
    return Verdict((head, predicate, tail), score, float(tau), score >= tau)


def verify_facts(
    model: EmbeddingModel, triples: Sequence[TripleIds], tau: float
) -> List[Verdict]:
    """Batch form of :func:`verify_fact`; ids are all checked before scoring."""
    for slot, (h, r, t) in enumerate(triples):
        try:
            model.check_ids(int(h), int(r), int(t))
        except IdOutOfRangeError as e:
            raise IdOutOfRangeError(e.failed, f"Triple {slot}: {e}") from None
    return [verify_fact(model, triple, tau) for triple in triples]


def calibrate_scores(scores_: Sequence[float], labels: Sequence[bool]) -> Calibration:
    """Threshold maximizing balanced accuracy; ties go to the smaller threshold.

    Candidates are the smallest score and every midpoint between consecutive
    distinct scores.
    """
    values = np.asarray(scores_, dtype=np.float64)
    truth = np.asarray(labels, dtype=bool)
    if len(values) != len(truth):
        raise CalibrationError("scores and labels differ in length")
    positives = int(truth.sum())
    negatives = len(truth) - positives
    if positives == 0 or negatives == 0:
        raise CalibrationError("Calibration needs both positive and negative examples")
    distinct = np.unique(values)
    candidates = np.concatenate([distinct[:1], (distinct[:-1] + distinct[1:]) / 2])
    best_tau, best_accuracy = float(candidates[0]), -1.0
    for tau in candidates:
        accepted = values >= tau
        tpr = np.count_nonzero(accepted & truth) / positives
        tnr = np.count_nonzero(~accepted & ~truth) / negatives
        accuracy = (tpr + tnr) / 2
        if accuracy > best_accuracy:
            best_tau, best_accuracy = float(tau), float(accuracy)
    return Calibration(best_tau, best_accuracy, float(roc_auc_score(truth, values)))


def calibrate_threshold(
    model: EmbeddingModel, labeled: Sequence[Tuple[TripleIds, bool]]
) -> Calibration:
    triples = [triple for triple, _ in labeled]
    labels = [bool(label) for _, label in labeled]
    verdicts = verify_facts(model, triples, 0.0)
    return calibrate_scores([v.score for v in verdicts], labels)


def default_candidates(store: GraphStore, subject: int, predicate: int) -> List[int]:
    """Entity objects the store links to ``subject`` through ``predicate``."""
    store.check_readable()
    return sorted(
        {
            t.tail
            for t in (store.triples[p] for p in store._out[subject])
            if t.predicate == predicate
        }
    )


def rank_facts(
    model: EmbeddingModel,
    subject: int,
    predicate: int,
    candidates: Optional[Sequence[int]] = None,
    store: Optional[GraphStore] = None,
    popularity_weight: float = 0.0,
) -> RankedFacts:
    """Order candidate objects by plausibility, ties by ascending id.

    Without explicit ``candidates`` the store's existing objects are ranked.
    ``popularity_weight`` blends in ``log1p(popularity)`` from the store.
    """
    failed = []
    if not 0 <= subject < model.entity_count:
        failed.append(("subject", subject))
    if not 0 <= predicate < model.predicate_count:
        failed.append(("predicate", predicate))
    if failed:
        raise IdOutOfRangeError(failed)
    if candidates is None:
        if store is None:
            raise ValueError("rank_facts needs either candidates or a store")
        candidates = default_candidates(store, subject, predicate)
    ids = np.array(sorted(set(int(c) for c in candidates)), dtype=np.int64)
    if len(ids) == 0:
        return RankedFacts(subject, predicate, [])
    bad = [("candidate", int(c)) for c in ids if not 0 <= c < model.entity_count]
    if bad:
        raise IdOutOfRangeError(bad)
    values = scores(
        model.scorer,
        model.entities[subject],
        model.predicates[predicate],
        model.entities[ids],
    ).astype(np.float64)
    if popularity_weight and store is not None:
        popularity = np.array([store.popularity(int(c)) for c in ids])
        values = values + popularity_weight * np.log1p(popularity)
    order = np.lexsort((ids, -values))
    return RankedFacts(
        subject, predicate, [(int(ids[o]), float(values[o])) for o in order]
    )


def related_entities(
    index: KnnIndex, entity: int, k: int = 10, type_filter: Optional[int] = None, nprobe: int = 1
) -> List[Neighbor]:
    if not 0 <= entity < index.entity_count:
        raise EntityNotFoundError(entity)
    return knn_query(index, int(entity), k=k, type_filter=type_filter, nprobe=nprobe)


def neighbors_to_dicts(neighbors: List[Neighbor], names: Sequence[str]) -> List[Dict]:
    return [
        {
            "entity": n.entity,
            "key": names[n.entity] if n.entity < len(names) else None,
            "similarity": n.similarity if math.isfinite(n.similarity) else None,
            "rank": n.rank,
        }
        for n in neighbors
    ]
