"""Pairwise distances, top-k neighbor retrieval, and retrieval metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

_BLOCK = 512  # probe rows per distance block


def pairwise_distance(probes: np.ndarray, candidates: np.ndarray,
                      metric: str = "euclidean") -> np.ndarray:
    """Dense (n_probes, n_candidates) distance matrix, float64.

    euclidean is the L2 distance; cosine is 1 - cosine similarity with rows
    normalized internally. Computed in row blocks so only the output matrix
    is materialized.
    """
    p = np.asarray(probes, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    if p.ndim != 2 or c.ndim != 2 or p.shape[1] != c.shape[1]:
        raise ConfigError(f"embedding dims disagree: {p.shape} vs {c.shape}")
    same = probes is candidates

    if metric == "cosine":
        p = _unit_rows(p)
        c = p if same else _unit_rows(c)
    elif metric != "euclidean":
        raise ConfigError(f"unknown metric {metric!r}")

    out = np.empty((p.shape[0], c.shape[0]), dtype=np.float64)
    c_sq = (c * c).sum(axis=1)
    for lo in range(0, p.shape[0], _BLOCK):
        hi = min(lo + _BLOCK, p.shape[0])
        dots = p[lo:hi] @ c.T
        if metric == "cosine":
            block = 1.0 - dots
        else:
            p_sq = (p[lo:hi] * p[lo:hi]).sum(axis=1)
            block = np.sqrt(np.maximum(p_sq[:, None] + c_sq[None, :] - 2.0 * dots, 0.0))
        np.maximum(block, 0.0, out=block)
        out[lo:hi] = block
    if same:
        np.fill_diagonal(out, 0.0)
    return out


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    norms[norms < 1e-12] = 1.0
    return m / norms


def topk_neighbors(dist: np.ndarray, k: int):
    """Per-probe indices and distances of the k nearest candidates.

    Selection uses a partial sort; ties are broken by ascending candidate
    index, including ties that straddle the selection boundary, so the
    result matches a full stable sort.
    """
    n = dist.shape[1]
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} out of range for {n} candidates")
    idx = np.empty((dist.shape[0], k), dtype=np.int64)
    for i, row in enumerate(dist):
        if k == n:
            take = np.lexsort((np.arange(n), row))
        else:
            part = np.argpartition(row, k - 1)[:k]
            kth = row[part].max()
            lower = np.flatnonzero(row < kth)
            ties = np.flatnonzero(row == kth)
            take = np.concatenate([lower, ties[:k - lower.size]])
            take = take[np.lexsort((take, row[take]))]
        idx[i] = take
    return idx, np.take_along_axis(dist, idx, axis=1)


def full_ranking(dist: np.ndarray):
    """Stable full ranking of every candidate per probe."""
    return topk_neighbors(dist, dist.shape[1])


@dataclass
class EvalReport:
    cmc: np.ndarray
    map: float
    per_query_ap: np.ndarray
    skipped_queries: int = 0
    num_queries: int = 0

    def cmc_at(self, k: int) -> float:
        return float(self.cmc[k - 1])

    def to_dict(self):
        return {
            "map": float(self.map),
            "cmc": [float(v) for v in self.cmc],
            "per_query_ap": [float(v) for v in self.per_query_ap],
            "skipped_queries": int(self.skipped_queries),
            "num_queries": int(self.num_queries),
        }


def evaluate(ranked_indices: np.ndarray, query_ids, query_cams,
             gallery_ids, gallery_cams, k_max: int = 50) -> EvalReport:
    """CMC@1..k_max and mAP under the cross-camera protocol.

    Gallery items sharing both identity and camera with the query are
    dropped from that query's ranking before scoring. AP is the mean of
    precision at each relevant rank. Queries left without any valid match
    are excluded and counted in ``skipped_queries``.
    """
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    n_q = ranked_indices.shape[0]

    cmc_acc = np.zeros(k_max, dtype=np.float64)
    aps = []
    skipped = 0
    for qi in range(n_q):
        order = ranked_indices[qi]
        junk = (gallery_ids[order] == query_ids[qi]) & (gallery_cams[order] == query_cams[qi])
        kept = order[~junk]
        matches = (gallery_ids[kept] == query_ids[qi]).astype(np.int64)
        n_rel = int(matches.sum())
        if n_rel == 0:
            skipped += 1
            continue
        hits = matches.cumsum()
        first = int(np.argmax(matches))  # rank (0-based) of first true match
        if first < k_max:
            cmc_acc[first:] += 1.0
        prec_at = hits / np.arange(1, len(kept) + 1)
        aps.append(float((prec_at * matches).sum() / n_rel))

    n_valid = n_q - skipped
    if n_valid == 0:
        raise ConfigError("no query has a valid cross-camera match")
    return EvalReport(
        cmc=cmc_acc / n_valid,
        map=float(np.mean(aps)),
        per_query_ap=np.asarray(aps),
        skipped_queries=skipped,
        num_queries=n_q,
    )


def rank_and_evaluate(dist: np.ndarray, query_ids, query_cams,
                      gallery_ids, gallery_cams, k_max: int = 50) -> EvalReport:
    indices, _ = full_ranking(dist)
    return evaluate(indices, query_ids, query_cams, gallery_ids, gallery_cams, k_max)
