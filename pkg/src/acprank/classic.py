"""Classical re-rankers: average / power-weighted query expansion and
k-reciprocal Jaccard re-ranking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ResourceBudgetError
from .ranking import pairwise_distance, topk_neighbors


@dataclass
class QEConfig:
    k: int = 10
    alpha: float = 3.0
    joint_pool: bool = True
    renormalize: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")


@dataclass
class KRConfig:
    k1: int = 20
    k2: int = 6
    lam: float = 0.3
    max_bytes: int | None = None  # memory budget for the Jaccard stage

    def __post_init__(self):
        if self.k1 < 1 or self.k2 < 1:
            raise ConfigError("k1 and k2 must be >= 1")
        if self.k2 > self.k1:
            raise ConfigError(f"k2={self.k2} must not exceed k1={self.k1}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")


def aqe(embeddings: np.ndarray, cfg: QEConfig) -> np.ndarray:
    """Replace each row by the mean of its k cosine-nearest rows in the pool,
    self included."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if not 1 <= cfg.k <= len(emb):
        raise ConfigError(f"k={cfg.k} out of range for pool of {len(emb)}")
    dist = pairwise_distance(emb, emb, "cosine")
    idx, _ = topk_neighbors(dist, cfg.k)
    return emb[idx].mean(axis=1)


def alpha_qe(embeddings: np.ndarray, cfg: QEConfig) -> np.ndarray:
    """Power-weighted expansion: rows are L2-normalized, each is replaced by
    the sum of its k nearest rows weighted by cosine-similarity**alpha
    (similarity clamped to [0, 1] before powering), then re-normalized."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if not 1 <= cfg.k <= len(emb):
        raise ConfigError(f"k={cfg.k} out of range for pool of {len(emb)}")
    unit = _unit_rows(emb)
    dist = pairwise_distance(unit, unit, "cosine")
    idx, _ = topk_neighbors(dist, cfg.k)
    sims = np.clip(np.einsum("nd,nkd->nk", unit, unit[idx]), 0.0, 1.0)
    out = np.einsum("nk,nkd->nd", sims ** cfg.alpha, unit[idx])
    if cfg.renormalize:
        out = _unit_rows(out)
    return out


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    norms[norms < 1e-12] = 1.0
    return m / norms


def estimate_kr_bytes(pool_size: int, query_size: int) -> int:
    """Peak allocation estimate for the Jaccard stage: the scaled pool
    distance matrix, the encoding matrix and its expanded copy, plus the
    query-row Jaccard output and the blend."""
    n, q = pool_size, query_size
    return 8 * (3 * n * n + 2 * q * n)


def k_reciprocal_rerank(query: np.ndarray, gallery: np.ndarray, cfg: KRConfig,
                        metric: str = "euclidean") -> np.ndarray:
    """Blend of original distances and reciprocal-set Jaccard distances over
    the joint query+gallery pool. Returns the (n_query, n_gallery) matrix."""
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if cfg.k1 >= len(gallery):
        raise ConfigError(f"k1={cfg.k1} must be smaller than the gallery ({len(gallery)})")
    pool = np.concatenate([query, gallery], axis=0)
    n, n_q = len(pool), len(query)
    estimate = estimate_kr_bytes(n, n_q)
    if cfg.max_bytes is not None and estimate > cfg.max_bytes:
        raise ResourceBudgetError(
            f"k-reciprocal on a {n}-item pool needs ~{estimate} bytes, "
            f"budget is {cfg.max_bytes}")

    scaled = _minmax_rows(pairwise_distance(pool, pool, metric))
    jaccard = k_reciprocal_jaccard(scaled, cfg.k1, cfg.k2, rows=n_q)
    final = cfg.lam * scaled[:n_q] + (1.0 - cfg.lam) * jaccard
    return final[:, n_q:]


def k_reciprocal_jaccard(pool_dist: np.ndarray, k1: int, k2: int,
                         rows: int | None = None) -> np.ndarray:
    """Jaccard distances from expanded reciprocal neighbor sets.

    Stages: reciprocal sets at k1 (top-k lists include the probe itself);
    each set grown by members whose half-size reciprocal set overlaps it in
    at least 2/3 of their elements; Gaussian-kernel encodings exp(-d)
    normalized per row; encodings averaged over the k2 nearest; Jaccard via
    1 - sum(min) / (2 - sum(min)), valid because rows sum to one.

    ``rows`` limits the output to the first that many probes (the encodings
    still cover the whole pool).
    """
    d = np.asarray(pool_dist, dtype=np.float64)
    n = d.shape[0]
    n_out = n if rows is None else rows
    rank, _ = topk_neighbors(d, min(max(k1, k2), n))

    recip_full = reciprocal_neighbor_sets(rank, k1)
    half = int(np.around(k1 / 2))
    recip_half = reciprocal_neighbor_sets(rank, max(half, 1))

    encodings = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        members = recip_full[i]
        grown = members
        for j in members:
            cand = recip_half[j]
            if np.intersect1d(cand, members, assume_unique=True).size >= (2.0 / 3.0) * cand.size:
                grown = np.append(grown, cand)
        grown = np.unique(grown)
        w = np.exp(-d[i, grown])
        encodings[i, grown] = w / w.sum()

    if k2 > 1:
        expanded = np.zeros_like(encodings)
        for i in range(n):
            expanded[i] = encodings[rank[i, :k2]].mean(axis=0)
        encodings = expanded

    # Inverted index over nonzero encoding columns keeps the min-sum sparse.
    columns = [np.flatnonzero(encodings[:, j]) for j in range(n)]
    jaccard = np.zeros((n_out, n), dtype=np.float64)
    for i in range(n_out):
        min_sum = np.zeros(n, dtype=np.float64)
        for j in np.flatnonzero(encodings[i]):
            cols = columns[j]
            min_sum[cols] += np.minimum(encodings[i, j], encodings[cols, j])
        jaccard[i] = 1.0 - min_sum / (2.0 - min_sum)
    return jaccard


def reciprocal_neighbor_sets(rank: np.ndarray, k: int) -> list:
    """Stage-one reciprocal sets: j is in R(i, k) iff each appears in the
    other's top-k list (lists include the probe itself at rank 1)."""
    top = rank[:, :k]
    sets = []
    for i in range(rank.shape[0]):
        forward = top[i]
        back = top[forward]
        sets.append(forward[np.any(back == i, axis=1)])
    return sets


def _minmax_rows(d: np.ndarray) -> np.ndarray:
    lo = d.min(axis=1, keepdims=True)
    span = d.max(axis=1, keepdims=True) - lo
    span[span < 1e-12] = 1.0
    return (d - lo) / span
