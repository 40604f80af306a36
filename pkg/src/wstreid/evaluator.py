"""Test-time similarity and single-query retrieval evaluation.

The similarity of two images is the mean over extractors of the cosine
similarity of that extractor's features for both images.  Evaluation ranks
the gallery per query by similarity (ties broken by ascending gallery
sample id), excluding gallery entries that share both person and camera
with the query, which is the standard cross-camera single-query protocol.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import Sample
from .errors import ContractError, EvaluationError
from .network import MutualModel, extract

RANK_KS = (1, 5, 10, 20)


@dataclass
class EvalResult:
    rank_accuracy: dict[int, float]
    mean_ap: float
    num_queries: int            # queries that produced a score
    num_skipped: int            # queries without any valid cross-camera match
    average_precisions: list[float]

    def as_rows(self) -> list[tuple[str, float]]:
        rows = [(f"rank_{k}", self.rank_accuracy[k]) for k in sorted(self.rank_accuracy)]
        rows.append(("mAP", self.mean_ap))
        rows.append(("num_queries", float(self.num_queries)))
        rows.append(("num_skipped", float(self.num_skipped)))
        return rows


def _normalized_features(model: MutualModel, inputs: np.ndarray) -> list[np.ndarray]:
    """Row-normalized eval-mode features, one matrix per extractor."""
    normalized = []
    for e in range(model.num_extractors):
        feats = extract(model, e, inputs, "eval").value
        norms = np.linalg.norm(feats, axis=1)
        if (norms == 0.0).any():
            raise ContractError("cosine similarity undefined for a zero-norm feature")
        normalized.append(feats / norms[:, None])
    return normalized


def similarity(model: MutualModel, x_i, x_j) -> float:
    """Mean over extractors of the per-extractor feature cosine."""
    pair = np.stack([np.asarray(x_i, dtype=np.float64),
                     np.asarray(x_j, dtype=np.float64)])
    cosines = [float(f[0] @ f[1]) for f in _normalized_features(model, pair)]
    return float(np.mean(cosines))


def score_matrix(model: MutualModel, query_inputs: np.ndarray,
                 gallery_inputs: np.ndarray) -> np.ndarray:
    """[num_queries, num_gallery] mean-cosine similarity matrix."""
    stacked = np.concatenate([query_inputs, gallery_inputs])
    n_q = query_inputs.shape[0]
    per_extractor = _normalized_features(model, stacked)
    return np.mean([f[:n_q] @ f[n_q:].T for f in per_extractor], axis=0)


def _vectors(samples: list[Sample], what: str) -> np.ndarray:
    rows = []
    for s in samples:
        if s.vector is None:
            raise ContractError(f"{what} sample {s.sample_id} has no input vector")
        rows.append(s.vector)
    return np.stack(rows).astype(np.float64)


def evaluate(model: MutualModel, query: list[Sample], gallery: list[Sample],
             rank_ks: tuple[int, ...] = RANK_KS) -> EvalResult:
    """Rank-k and mean average precision under the single-query protocol.

    Queries whose filtered gallery contains no correct cross-camera match
    are skipped and only counted in the report.
    """
    if not query or not gallery:
        raise EvaluationError("evaluation needs non-empty query and gallery sets")
    scores = score_matrix(model, _vectors(query, "query"), _vectors(gallery, "gallery"))

    gallery_pids = np.array([s.raw_person_id for s in gallery])
    gallery_cams = np.array([s.camera_id for s in gallery])
    gallery_ids = np.array([s.sample_id for s in gallery])

    aps: list[float] = []
    hits_at: dict[int, int] = {k: 0 for k in rank_ks}
    skipped = 0
    for qi, q in enumerate(query):
        keep = ~((gallery_pids == q.raw_person_id) & (gallery_cams == q.camera_id))
        if not keep.any():
            skipped += 1
            continue
        correct = gallery_pids[keep] == q.raw_person_id
        if not correct.any():
            skipped += 1
            continue
        # sort by descending score, then ascending sample id
        order = np.lexsort((gallery_ids[keep], -scores[qi, keep]))
        ranked_correct = correct[order]
        positions = np.flatnonzero(ranked_correct) + 1  # 1-based ranks
        for k in rank_ks:
            hits_at[k] += int(positions[0] <= k)
        precisions = np.arange(1, positions.size + 1) / positions
        aps.append(float(precisions.sum() / positions.size))

    if not aps:
        raise EvaluationError(
            "no query had a valid cross-camera match after exclusion"
        )
    evaluated = len(aps)
    return EvalResult(
        rank_accuracy={k: hits_at[k] / evaluated for k in rank_ks},
        mean_ap=float(np.mean(aps)),
        num_queries=evaluated,
        num_skipped=skipped,
        average_precisions=aps,
    )
