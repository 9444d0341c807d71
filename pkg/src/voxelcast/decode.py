"""Brain decoding as candidate-image retrieval through a frozen encoder.

Each candidate image is pushed through the encoding model once; a query
response pattern is then scored against every candidate's predicted
pattern with Pearson correlation over a voxel subset (optionally one ROI),
and candidates are ranked by score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import require


@dataclass
class RetrievalResult:
    candidate_ids: list[str]  # ranked, best first
    scores: np.ndarray  # sorted descending
    true_rank: int | None = None  # 1-based rank of the true candidate
    degenerate: np.ndarray | None = None  # per-candidate constant-prediction flag


def candidate_scores(pred: np.ndarray, y_query: np.ndarray):
    """Pearson r of each candidate's prediction against one query pattern.

    pred is [n_candidates, n_voxels] over the scoring subset.  Degenerate
    (constant) predictions or a constant query score 0 and are flagged.
    """
    require(pred.ndim == 2, "pred must be [candidates, voxels]")
    require(pred.shape[1] == y_query.shape[0], "voxel counts differ")
    if pred.shape[1] < 2:
        raise ValueError("retrieval needs at least 2 voxels in the scoring subset")
    p = pred.astype(np.float64)
    q = y_query.astype(np.float64)
    p = p - p.mean(axis=1, keepdims=True)
    q = q - q.mean()
    sp = np.sqrt((p * p).sum(axis=1))
    sq = float(np.sqrt((q * q).sum()))
    degenerate = sp == 0
    if sq == 0:
        scores = np.zeros(pred.shape[0])
        degenerate = np.ones(pred.shape[0], dtype=bool)
    else:
        scores = (p * q).sum(axis=1) / np.where(degenerate, 1.0, sp * sq)
        scores[degenerate] = 0.0
    return scores, degenerate


def rank_from_scores(scores: np.ndarray, candidate_ids: list[str], degenerate, true_id=None):
    """Stable descending sort; ties resolve by candidate index."""
    order = np.argsort(-scores, kind="stable")
    ranked_ids = [candidate_ids[i] for i in order]
    true_rank = None
    if true_id is not None:
        true_rank = ranked_ids.index(true_id) + 1
    return RetrievalResult(
        candidate_ids=ranked_ids,
        scores=scores[order],
        true_rank=true_rank,
        degenerate=degenerate[order] if degenerate is not None else None,
    )


def rank_candidates(
    model,
    candidate_feats: np.ndarray,
    coords: np.ndarray,
    candidate_ids: list[str],
    y_query: np.ndarray,
    voxel_subset: np.ndarray | None = None,
    true_id: str | None = None,
) -> RetrievalResult:
    """Forward every candidate (inference mode) and rank against the query."""
    subset = np.arange(coords.shape[0]) if voxel_subset is None else np.asarray(voxel_subset)
    if subset.size < 2:
        raise ValueError("retrieval needs a voxel subset of at least 2")
    pred = model.predict(candidate_feats, coords, voxel_idx=subset)
    scores, degenerate = candidate_scores(pred, y_query[subset])
    return rank_from_scores(scores, candidate_ids, degenerate, true_id)


def decode_queries(
    model,
    candidate_feats: np.ndarray,
    coords: np.ndarray,
    candidate_ids: list[str],
    queries: np.ndarray,
    true_ids: list[str] | None = None,
    voxel_subset: np.ndarray | None = None,
) -> list[RetrievalResult]:
    """Rank all candidates for many queries, reusing one prediction pass."""
    subset = np.arange(coords.shape[0]) if voxel_subset is None else np.asarray(voxel_subset)
    if subset.size < 2:
        raise ValueError("retrieval needs a voxel subset of at least 2")
    pred = model.predict(candidate_feats, coords, voxel_idx=subset)
    results = []
    for qi in range(queries.shape[0]):
        scores, degenerate = candidate_scores(pred, queries[qi][subset])
        true_id = true_ids[qi] if true_ids is not None else None
        results.append(rank_from_scores(scores, candidate_ids, degenerate, true_id))
    return results


@dataclass
class RetrievalSummary:
    n_queries: int
    top1: float
    top5: float
    mrr: float
    per_roi: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"n_queries": self.n_queries, "top1": self.top1, "top5": self.top5, "mrr": self.mrr}
        if self.per_roi:
            out["per_roi"] = self.per_roi
        return out


def retrieval_metrics(results: list[RetrievalResult]) -> RetrievalSummary:
    """Top-1/top-5 accuracy and mean reciprocal rank over queries."""
    require(len(results) >= 1, "retrieval_metrics needs at least one query")
    ranks = np.array([r.true_rank for r in results], dtype=np.float64)
    if np.any(np.isnan(ranks.astype(float))):
        raise ValueError("all queries need a known true candidate for metrics")
    return RetrievalSummary(
        n_queries=len(results),
        top1=float((ranks == 1).mean()),
        top5=float((ranks <= 5).mean()),
        mrr=float((1.0 / ranks).mean()),
    )
