"""Ranking, average precision over the full returned list, and PR curves."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .pathway import SharedRepresentation

log = logging.getLogger(__name__)

TASKS = {"i2t": "Image->Text", "t2i": "Text->Image"}
RECALL_GRID = np.round(np.arange(1, 101) / 100.0, 2)


@dataclass
class Ranking:
    order: np.ndarray  # gallery indices, best first
    relevant: np.ndarray  # relevance flag per ranked position


@dataclass
class RetrievalReport:
    task: str
    scorer: str
    ap: np.ndarray
    pr_precision: np.ndarray  # interpolated precision on RECALL_GRID
    excluded_from_pr: int = 0
    pr_recall: np.ndarray = field(default_factory=lambda: RECALL_GRID.copy())

    @property
    def map(self) -> float:
        return float(self.ap.mean())


def rank_gallery(scores, gallery_labels, query_label) -> Ranking:
    """Stable descending sort of ``scores``; ties go to the lower gallery index."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.isnan(scores).any():
        raise ValueError("NaN score in ranking input")
    order = np.argsort(-scores, kind="stable")
    relevant = np.asarray(gallery_labels)[order] == query_label
    return Ranking(order, relevant)


def _relevance(r) -> np.ndarray:
    return np.asarray(r.relevant if isinstance(r, Ranking) else r, dtype=bool)


def average_precision(ranking) -> float:
    """``(1/M) * sum_k P@k * rel_k`` over the whole list; 0 when nothing is relevant."""
    rel = _relevance(ranking)
    m = int(rel.sum())
    if m == 0:
        return 0.0
    hits = np.cumsum(rel)
    ranks = np.arange(1, len(rel) + 1)
    # fsum is correctly rounded, so the result does not depend on summation order
    return math.fsum((hits[rel] / ranks[rel]).tolist()) / m


def mean_average_precision(rankings) -> float:
    aps = [average_precision(r) for r in rankings]
    if not aps:
        raise ValueError("MAP needs at least one query")
    return float(np.mean(aps))


def pr_curve(ranking) -> tuple[np.ndarray, np.ndarray]:
    """``(recall, precision)`` at every rank cut-off."""
    rel = _relevance(ranking)
    m = int(rel.sum())
    if m == 0:
        raise ValueError("PR curve is undefined for a query with no relevant items")
    hits = np.cumsum(rel)
    return hits / m, hits / np.arange(1, len(rel) + 1)


def interpolated_precision(recall: np.ndarray, precision: np.ndarray,
                           grid: np.ndarray = RECALL_GRID) -> np.ndarray:
    """Best precision reached at recall >= each grid point."""
    best_from = np.maximum.accumulate(precision[::-1])[::-1]
    pos = np.searchsorted(recall, grid - 1e-12, side="left")
    return best_from[np.minimum(pos, len(best_from) - 1)]


def evaluate_scores(
    scores: np.ndarray,
    query_labels: np.ndarray,
    gallery_labels: np.ndarray,
    task: str,
    scorer: str,
) -> RetrievalReport:
    """Rank the gallery for every query row of ``scores``."""
    aps = np.empty(len(query_labels))
    curves = []
    excluded = 0
    for q, label in enumerate(query_labels):
        ranking = rank_gallery(scores[q], gallery_labels, label)
        aps[q] = average_precision(ranking)
        if ranking.relevant.any():
            curves.append(interpolated_precision(*pr_curve(ranking)))
        else:
            excluded += 1
    if excluded:
        log.warning("%s/%s: %d queries without relevant items left out of the PR curve",
                    scorer, task, excluded)
    pr = np.mean(curves, axis=0) if curves else np.zeros_like(RECALL_GRID)
    return RetrievalReport(task, scorer, aps, pr, excluded)


def evaluate_both(
    image_by_text: np.ndarray,
    image_labels: np.ndarray,
    text_labels: np.ndarray,
    scorer: str,
) -> dict[str, RetrievalReport]:
    """Both retrieval directions from one (images x texts) score matrix."""
    return {
        "i2t": evaluate_scores(image_by_text, image_labels, text_labels, "i2t", scorer),
        "t2i": evaluate_scores(image_by_text.T, text_labels, image_labels, "t2i", scorer),
    }


def cosine_similarity_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity of rows; zero-norm rows score 0 against everything."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero = int((na == 0).sum() + (nb == 0).sum())
    if zero:
        log.warning("cosine: %d zero-norm embeddings scored as 0", zero)
    an = np.divide(a, na[:, None], out=np.zeros_like(a), where=na[:, None] > 0)
    bn = np.divide(b, nb[:, None], out=np.zeros_like(b), where=nb[:, None] > 0)
    return an @ bn.T


def cosine_baseline(rep: SharedRepresentation) -> dict[str, RetrievalReport]:
    sims = cosine_similarity_matrix(rep.image_embeddings, rep.text_embeddings)
    return evaluate_both(sims, rep.image_labels, rep.text_labels, "cosine")
