import numpy as np
import pytest

from kgforge.config import ModelConfig, TrainConfig, ViewSpec
from kgforge.evaluate import evaluate_link_prediction, filtered_rank
from kgforge.services import calibrate_scores, verify_facts
from kgforge.train import sample_negatives, train
from kgforge.views import split_view

from conftest import is_translational_edge, make_model, make_view, translational_graph


def test_perfect_model_has_unit_mrr():
    model = make_model([[0.0], [1.0], [5.0]], [[1.0]])
    test = make_view([(0, 0, 1)], entity_count=3)
    report = evaluate_link_prediction(model, test, test)
    assert report.mrr == 1.0
    assert report.hits_at_1 == 1.0
    assert report.ranks == 2


def test_filtered_ranks_on_a_line():
    model = make_model([[0.0], [1.0], [2.0], [3.0], [4.0]], [[2.0]])
    test = make_view([(0, 0, 1)], entity_count=5)

    raw = evaluate_link_prediction(model, test, test)
    # tail: entity 2 scores higher and entity 3 ties; head: entity 0 is best
    assert raw.mrr == pytest.approx((1 / 3 + 1) / 2)

    full = make_view([(0, 0, 1), (0, 0, 2)], entity_count=5)
    filtered = evaluate_link_prediction(model, test, full)
    assert filtered.mrr == pytest.approx(0.75)
    assert filtered.hits_at_1 == 0.5
    assert filtered.hits_at_10 == 1.0


def test_ties_rank_against_the_target():
    model = make_model(np.zeros((5, 3)), np.zeros((1, 3)))
    test = make_view([(0, 0, 1)], entity_count=5)
    report = evaluate_link_prediction(model, test, test)
    assert report.mrr == pytest.approx(1 / 5)
    assert report.hits_at_1 == 0.0


def test_filtered_rank_ignores_other_true_answers():
    scores = np.array([0.9, 0.5, 0.7, 0.1])
    assert filtered_rank(scores, 1, []) == 3
    assert filtered_rank(scores, 1, [0, 1]) == 2


def test_report_serializes_hits_keys():
    model = make_model([[0.0], [1.0]], [[1.0]])
    test = make_view([(0, 0, 1)])
    assert set(evaluate_link_prediction(model, test, test).to_dict()) == {
        "mrr",
        "hits@1",
        "hits@10",
        "ranks",
    }


@pytest.fixture(scope="module")
def synthetic_runs():
    """Three seeds of translational training on the noisy synthetic cube graph."""
    runs = []
    for seed in range(3):
        full, codes = translational_graph(seed, noise=0.05)
        train_view, _, test_view = split_view(full, (0.8, 0.1, 0.1), seed)
        model, _ = train(
            train_view,
            ViewSpec(min_predicate_frequency=0),
            ModelConfig(dim=32),
            TrainConfig(epochs=50, batch_size=100, seed=seed),
            full_view=full,
        )
        runs.append((model, full, test_view, codes))
    return runs


@pytest.mark.slow
def test_synthetic_link_prediction_quality(synthetic_runs):
    reports = [evaluate_link_prediction(m, test, full) for m, full, test, _ in synthetic_runs]
    assert np.mean([r.hits_at_10 for r in reports]) >= 0.90
    assert np.mean([r.mrr for r in reports]) >= 0.60


@pytest.mark.slow
def test_held_out_facts_outscore_corruptions(synthetic_runs):
    for model, full, test, codes in synthetic_runs:
        positives = [tuple(e) for e in test.edges.tolist() if is_translational_edge(codes, e)]
        negatives = [
            tuple(sample_negatives(full, edge, 1, seed=n)[0].tolist())
            for n, edge in enumerate(positives)
        ]
        verdicts = verify_facts(model, positives + negatives, tau=0.0)
        labels = [True] * len(positives) + [False] * len(negatives)
        assert calibrate_scores([v.score for v in verdicts], labels).auc >= 0.95
