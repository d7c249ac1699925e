import numpy as np
import pytest

from fedreid.datagen import SampleSet
from fedreid.metrics import (average_precision, cmc, cmc_from_ranking, communication_cost,
                             evaluate, map_from_ranking, mean_average_precision, rank_gallery)
from fedreid.model import Backbone
from fedreid.numcore import make_rng

from oracles import brute_force_cmc_map, brute_force_ranks


def ranking_from_positions(query_id, positions, gallery_size):
    """Embeddings in 2-D placing true matches at the given 1-based ranks."""
    angles = np.linspace(0.0, 1.5, gallery_size)
    gallery = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    ids = np.full(gallery_size, -1)
    for p in positions:
        ids[p - 1] = query_id
    return gallery, ids


def test_rank1_perfect_when_true_match_first():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    g = np.array([[0.0, 1.0], [1.0, 0.1], [0.5, 0.5]])
    r = rank_gallery(q, np.array([0, 1]), np.array([0, 0]), g, np.array([1, 0, 2]),
                     np.array([1, 1, 1]))
    assert cmc_from_ranking(r)[1] == 1.0


def test_two_queries_matched_at_rank_one_and_three():
    g, ids = ranking_from_positions(7, [1], 6)
    g2, ids2 = ranking_from_positions(8, [3], 6)
    ids = np.where(ids2 == 8, 8, ids)
    q = np.array([[1.0, 0.0], [1.0, 0.0]])
    r = rank_gallery(q, np.array([7, 8]), np.array([0, 0]), g, ids, np.ones(6, int))
    scores = cmc_from_ranking(r, (1, 5))
    assert scores == {1: 0.5, 5: 1.0}


def test_average_precision_five_sixths():
    g, ids = ranking_from_positions(3, [1, 3], 5)
    r = rank_gallery(np.array([[1.0, 0.0]]), np.array([3]), np.array([0]), g, ids,
                     np.ones(5, int))
    assert map_from_ranking(r) == pytest.approx(5 / 6, abs=1e-15)
    assert average_precision(np.array([True, False, True])) == pytest.approx(5 / 6, abs=1e-15)


def test_single_match_first_gives_map_one():
    assert average_precision(np.array([True, False, False])) == 1.0


def test_match_ranked_last_gives_map_one_over_g():
    g, ids = ranking_from_positions(1, [10], 10)
    r = rank_gallery(np.array([[1.0, 0.0]]), np.array([1]), np.array([0]), g, ids,
                     np.ones(10, int))
    assert map_from_ranking(r) == pytest.approx(0.1, abs=1e-15)


def test_same_camera_same_identity_is_junk():
    q = np.array([[1.0, 0.0]])
    g = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
    r = rank_gallery(q, np.array([5]), np.array([0]), g, np.array([5, 2, 5]),
                     np.array([0, 1, 1]))
    assert list(r.orders[0]) == [1, 2]
    assert cmc_from_ranking(r, (1, 2)) == {1: 0.0, 2: 1.0}


def test_queries_without_admissible_match_are_excluded():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    g = np.array([[1.0, 0.0], [0.0, 1.0]])
    r = rank_gallery(q, np.array([1, 2]), np.array([0, 0]), g, np.array([1, 2]),
                     np.array([1, 0]))
    assert r.excluded == 1 and len(r) == 1


def test_random_embeddings_rank1_close_to_chance():
    rng = make_rng(0)
    gallery_size, trials = 20, 4000
    hits = 0
    for _ in range(trials):
        g = rng.normal(size=(gallery_size, 4))
        ids = np.arange(gallery_size)
        r = rank_gallery(rng.normal(size=(1, 4)), np.array([0]), np.array([0]), g, ids,
                         np.ones(gallery_size, int))
        hits += cmc_from_ranking(r, (1,))[1]
    p = 1 / gallery_size
    sigma = np.sqrt(p * (1 - p) / trials)
    assert abs(hits / trials - p) <= 3 * sigma


def random_problem(rng, nq=6, ng=15, ids=5, cams=3, dim=4):
    q_ids = rng.integers(0, ids, nq)
    g_ids = np.concatenate([q_ids, rng.integers(0, ids, ng - nq)])
    return (rng.normal(size=(nq, dim)), q_ids, rng.integers(0, cams, nq),
            rng.normal(size=(ng, dim)), g_ids, rng.integers(0, cams, ng))


@pytest.mark.parametrize("seed", range(30))
def test_matches_brute_force_oracle(seed):
    rng = make_rng(seed)
    qe, qi, qc, ge, gi, gc = random_problem(rng)
    positions = brute_force_ranks(qe, qi, qc, ge, gi, gc)
    if not positions:
        pytest.skip("no valid queries in this draw")
    expected_cmc, expected_map = brute_force_cmc_map(positions, (1, 5, 10))
    r = rank_gallery(qe, qi, qc, ge, gi, gc)
    assert cmc_from_ranking(r, (1, 5, 10)) == pytest.approx(expected_cmc, abs=1e-15)
    assert map_from_ranking(r) == pytest.approx(expected_map, abs=1e-12)


@pytest.mark.parametrize("seed", range(30))
def test_monotone_and_permutation_invariant(seed):
    rng = make_rng(1000 + seed)
    qe, qi, qc, ge, gi, gc = random_problem(rng)
    r = rank_gallery(qe, qi, qc, ge, gi, gc)
    if len(r) == 0:
        pytest.skip("no valid queries in this draw")
    scores = cmc_from_ranking(r, range(1, 16))
    assert all(scores[k] <= scores[k + 1] for k in range(1, 15))
    perm = rng.permutation(len(gi))
    rp = rank_gallery(qe, qi, qc, ge[perm], gi[perm], gc[perm])
    assert cmc_from_ranking(rp, range(1, 16)) == scores
    assert map_from_ranking(rp) == pytest.approx(map_from_ranking(r), abs=1e-15)
    assert 0 < map_from_ranking(r) <= 1


def test_backbone_level_wrappers():
    rng = make_rng(4)
    bb = Backbone(rng.normal(size=(4, 3)), np.ones(3))
    q = SampleSet(rng.normal(size=(3, 4)), [0, 1, 2], [0, 0, 0], [0, 0, 0])
    g = SampleSet(rng.normal(size=(6, 4)), [0, 1, 2, 3, 4, 5], [1] * 6, [0] * 6)
    scores = evaluate(q, g, bb)
    assert scores["rank1"] == cmc(q, g, bb)[1]
    assert scores["mAP"] == mean_average_precision(q, g, bb)
    assert scores["rank1"] <= scores["rank5"] <= scores["rank10"]


def test_communication_cost():
    assert communication_cost(300, 1000) == 600_000
    assert communication_cost(0, 1000, 9) == 0
    assert communication_cost(10, 100, 9) == 18_000
    with pytest.raises(ValueError):
        communication_cost(-1, 10)
