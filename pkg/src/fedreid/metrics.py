"""Retrieval evaluation (CMC rank-k, mAP) and communication accounting.

Gallery entries that share both identity and camera with the query are
dropped before ranking, as in the usual cross-camera ReID protocol.
"""
from __future__ import annotations

import logging
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10)


@dataclass
class RankingResult:
    """Per query: admissible gallery indices best-first, and their match flags."""

    orders: list[np.ndarray] = field(default_factory=list)
    matches: list[np.ndarray] = field(default_factory=list)
    excluded: int = 0

    def __len__(self) -> int:
        return len(self.orders)


def _normalize(emb: np.ndarray) -> np.ndarray:
    emb = np.asarray(emb, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    return np.divide(emb, norms, out=np.zeros_like(emb), where=norms > 0)


def rank_gallery(query_emb: np.ndarray, query_ids: np.ndarray, query_cams: np.ndarray,
                 gallery_emb: np.ndarray, gallery_ids: np.ndarray,
                 gallery_cams: np.ndarray) -> RankingResult:
    """Rank the gallery for every query by descending cosine similarity.

    Ties go to the lower gallery index. Queries without any admissible
    same-identity gallery item are skipped and counted in ``excluded``.
    """
    sim = _normalize(query_emb) @ _normalize(gallery_emb).T
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    result = RankingResult()
    for q in range(len(query_ids)):
        junk = (gallery_ids == query_ids[q]) & (gallery_cams == query_cams[q])
        admissible = np.flatnonzero(~junk)
        order = admissible[np.argsort(-sim[q, admissible], kind="stable")]
        match = gallery_ids[order] == query_ids[q]
        if not match.any():
            result.excluded += 1
            continue
        result.orders.append(order)
        result.matches.append(match)
    if result.excluded:
        logger.info("excluded %d queries with no admissible gallery match", result.excluded)
    return result


def cmc_from_ranking(ranking: RankingResult, ks: Sequence[int] = DEFAULT_KS) -> dict[int, float]:
    if len(ranking) == 0:
        raise ValueError("no valid queries to evaluate")
    first_hit = np.array([int(np.argmax(m)) for m in ranking.matches])
    return {k: float(np.mean(first_hit < k)) for k in ks}


def average_precision(match: np.ndarray) -> float:
    """Mean of precision@rank taken at each true match position.

    Summed as exact fractions so hand-enumerated cases round only once.
    """
    positions = np.flatnonzero(np.asarray(match, dtype=bool)) + 1
    total = sum(Fraction(i + 1, int(p)) for i, p in enumerate(positions))
    return float(total / len(positions))


def map_from_ranking(ranking: RankingResult) -> float:
    if len(ranking) == 0:
        raise ValueError("no valid queries to evaluate")
    return float(np.mean([average_precision(m) for m in ranking.matches]))


def _rank_with_backbone(queries, gallery, backbone) -> RankingResult:
    return rank_gallery(backbone.embed(queries.features), queries.identities, queries.cameras,
                        backbone.embed(gallery.features), gallery.identities, gallery.cameras)


def cmc(queries, gallery, backbone, ks: Sequence[int] = DEFAULT_KS) -> dict[int, float]:
    return cmc_from_ranking(_rank_with_backbone(queries, gallery, backbone), ks)


def mean_average_precision(queries, gallery, backbone) -> float:
    return map_from_ranking(_rank_with_backbone(queries, gallery, backbone))


def evaluate(queries, gallery, backbone, ks: Sequence[int] = DEFAULT_KS) -> dict[str, float]:
    """Rank-k accuracies and mAP of ``backbone`` embeddings on one test split."""
    ranking = _rank_with_backbone(queries, gallery, backbone)
    scores = {f"rank{k}": v for k, v in cmc_from_ranking(ranking, ks).items()}
    scores["mAP"] = map_from_ranking(ranking)
    return scores


def communication_cost(rounds: int, model_bytes: int, participants_per_round: int = 1) -> int:
    """Bytes moved: every participant downloads and uploads the model each round."""
    if min(rounds, model_bytes, participants_per_round) < 0:
        raise ValueError("communication cost inputs must be non-negative")
    return rounds * 2 * model_bytes * participants_per_round
