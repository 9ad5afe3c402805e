"""Feature expansion with predicted correlations, method runners, sweeps,
and benchmarking."""

from __future__ import annotations

import json
import resource
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .classic import KRConfig, QEConfig, alpha_qe, aqe, k_reciprocal_rerank
from .data import EmbeddingSet
from .errors import ConfigError
from .model import ACPModel
from .ranking import (EvalReport, pairwise_distance, rank_and_evaluate,
                      topk_neighbors)

METHODS = ("baseline", "aqe", "alphaqe", "kreciprocal", "acp")

_SCORE_CHUNK = 256  # sequences per forward pass when scoring the pool


@dataclass
class ExpansionConfig:
    k1: int = 25
    k2: int = 6
    renormalize: bool = True
    joint_pool: bool = True
    space: str = "fused"  # fused | raw

    def __post_init__(self):
        if self.k1 < 1 or self.k2 < 1:
            raise ConfigError("k1 and k2 must be >= 1")
        if self.k2 > self.k1:
            raise ConfigError(f"k2={self.k2} must not exceed k1={self.k1}")
        if self.space not in ("fused", "raw"):
            raise ConfigError(f"unknown expansion space {self.space!r}")


@dataclass
class RerankParams:
    """Bundle of per-method knobs, echoing the CLI flags."""
    metric: str = "cosine"
    k1: int = 25
    k2: int = 6
    alpha: float = 3.0
    lam: float = 0.3
    renormalize: bool = True
    space: str = "fused"
    threads: int = 1
    k_max: int = 50
    mem_budget: int | None = None
    model: ACPModel | None = None


def predict_pool_scores(model: ACPModel, sets, cfg: ExpansionConfig,
                        threads: int = 1):
    """Neighbor lists and correlation scores for every pool embedding.

    Neighbors come from the raw-embedding cosine ranking over the frozen
    joint pool (the initial ranking the re-ranker is refining); scoring is
    chunked and optionally threaded, results merged by position.
    """
    query, gallery = sets
    if not model.trained:
        raise ConfigError("refusing to expand with an untrained model")
    if tuple(model.config.block_dims) != tuple(query.block_dims):
        raise ConfigError(
            f"model expects blocks {model.config.block_dims}, "
            f"data has {query.block_dims}")
    records = list(query.records) + list(gallery.records)
    n = len(records)
    if cfg.k1 > n:
        raise ConfigError(f"k1={cfg.k1} exceeds pool size {n}")

    pool = EmbeddingSet(records, "gallery", query.block_dims)
    raw = pool.concat_normalized()
    dist = pairwise_distance(raw, raw, "cosine")
    neighbors, _ = topk_neighbors(dist, cfg.k1)

    block_mats = [pool.block_matrix(b) for b in range(len(pool.block_dims))]
    scores = np.empty((n, cfg.k1), dtype=np.float64)

    def score_chunk(lo):
        hi = min(lo + _SCORE_CHUNK, n)
        idx = neighbors[lo:hi]
        blocks = [m[idx] for m in block_mats]
        out = model.predict_correlations(blocks, cfg.k2, mode="eval")
        return lo, hi, out.data.astype(np.float64)

    starts = list(range(0, n, _SCORE_CHUNK))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool_exec:
            for lo, hi, val in pool_exec.map(score_chunk, starts):
                scores[lo:hi] = val
    else:
        for lo in starts:
            lo, hi, val = score_chunk(lo)
            scores[lo:hi] = val
    return neighbors, scores, block_mats, raw


def expand_features(sets, model: ACPModel, cfg: ExpansionConfig,
                    threads: int = 1, forced_scores: np.ndarray | None = None):
    """Expanded query and gallery matrices: every pool embedding becomes the
    score-weighted sum of its k1 nearest neighbors' vectors, taken from a
    frozen snapshot (no cascading).

    ``forced_scores`` substitutes the predicted weights (used to reduce the
    expansion to plain averaging for verification).
    """
    query, gallery = sets
    neighbors, scores, block_mats, raw = predict_pool_scores(model, sets, cfg, threads)
    if forced_scores is not None:
        scores = np.asarray(forced_scores, dtype=np.float64)
    if cfg.space == "fused":
        base = model.fuse_matrix(block_mats).astype(np.float64)
    else:
        base = raw.astype(np.float64)
    expanded = np.einsum("nk,nkd->nd", scores, base[neighbors])
    if cfg.renormalize:
        norms = np.linalg.norm(expanded, axis=1, keepdims=True)
        norms[norms < 1e-12] = 1.0
        expanded = expanded / norms
    n_q = len(query)
    return expanded[:n_q], expanded[n_q:]


@dataclass
class MethodResult:
    method: str
    before: EvalReport
    after: EvalReport
    wall_time_s: float
    peak_mem_bytes: int  # traced allocation peak of the re-ranking stage
    peak_rss_bytes: int = 0  # process resident high-water after the stage
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "method": self.method,
            "before": self.before.to_dict(),
            "after": self.after.to_dict(),
            "wall_time_s": self.wall_time_s,
            "peak_mem_bytes": self.peak_mem_bytes,
            "peak_rss_bytes": self.peak_rss_bytes,
            "params": self.params,
        }


def _method_distances(method: str, query: EmbeddingSet, gallery: EmbeddingSet,
                      p: RerankParams) -> np.ndarray:
    """The re-ranking stage proper: produce the new query->gallery distances."""
    q_raw = query.concat_normalized()
    g_raw = gallery.concat_normalized()
    if method == "baseline":
        return pairwise_distance(q_raw, g_raw, p.metric)
    if method in ("aqe", "alphaqe"):
        cfg = QEConfig(k=p.k1, alpha=p.alpha, renormalize=p.renormalize)
        pool = np.concatenate([q_raw, g_raw]) if cfg.joint_pool else g_raw
        fn = aqe if method == "aqe" else alpha_qe
        if cfg.joint_pool:
            expanded = fn(pool, cfg)
            return pairwise_distance(expanded[:len(q_raw)], expanded[len(q_raw):],
                                     p.metric)
        expanded_g = fn(pool, cfg)
        return pairwise_distance(q_raw, expanded_g, p.metric)
    if method == "kreciprocal":
        cfg = KRConfig(k1=p.k1, k2=p.k2, lam=p.lam, max_bytes=p.mem_budget)
        return k_reciprocal_rerank(q_raw, g_raw, cfg, metric=p.metric)
    if method == "acp":
        if p.model is None:
            raise ConfigError("method 'acp' needs a trained model/checkpoint")
        cfg = ExpansionConfig(k1=p.k1, k2=p.k2, renormalize=p.renormalize,
                              space=p.space)
        q_exp, g_exp = expand_features((query, gallery), p.model, cfg,
                                       threads=p.threads)
        return pairwise_distance(q_exp, g_exp, p.metric)
    raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")


def run_method(method: str, query: EmbeddingSet, gallery: EmbeddingSet,
               p: RerankParams, measure_memory: bool = False) -> MethodResult:
    """Before/after evaluation of one re-ranking method.

    Timing covers only the re-ranking stage. When ``measure_memory`` is on,
    the stage runs a second time under tracemalloc and reports its peak
    traced allocation (the timed run stays untraced).
    """
    q_ids, q_cams = query.identities(), query.cameras()
    g_ids, g_cams = gallery.identities(), gallery.cameras()
    k_max = min(p.k_max, len(gallery))
    before_dist = pairwise_distance(query.concat_normalized(),
                                    gallery.concat_normalized(), p.metric)
    before = rank_and_evaluate(before_dist, q_ids, q_cams, g_ids, g_cams, k_max)

    t0 = time.perf_counter()
    after_dist = _method_distances(method, query, gallery, p)
    wall = time.perf_counter() - t0

    peak = 0
    if measure_memory:
        tracemalloc.start(1)
        try:
            tracemalloc.reset_peak()
            _method_distances(method, query, gallery, p)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024

    after = rank_and_evaluate(after_dist, q_ids, q_cams, g_ids, g_cams, k_max)
    public = {k: v for k, v in vars(p).items() if k != "model"}
    return MethodResult(method, before, after, wall, int(peak), int(rss), public)


def sweep(parameter: str, values, method: str, query: EmbeddingSet,
          gallery: EmbeddingSet, p: RerankParams):
    """One run_method per parameter value; rows ready for CSV plotting."""
    if parameter not in ("k1", "k2"):
        raise ConfigError(f"sweep parameter must be k1 or k2, got {parameter!r}")
    rows = []
    for value in values:
        trial = RerankParams(**{**{k: v for k, v in vars(p).items()},
                                parameter: int(value)})
        if parameter == "k1" and trial.k2 > trial.k1:
            trial.k2 = trial.k1
        result = run_method(method, query, gallery, trial)
        rows.append({
            "parameter": parameter,
            "value": int(value),
            "method": method,
            "before_map": result.before.map,
            "after_map": result.after.map,
            "before_cmc1": result.before.cmc_at(1),
            "after_cmc1": result.after.cmc_at(1),
        })
    return rows


def sweep_csv(rows) -> str:
    header = ["parameter", "value", "method", "before_map", "after_map",
              "before_cmc1", "after_cmc1"]
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(
            f"{r[k]:.6f}" if isinstance(r[k], float) else str(r[k])
            for k in header))
    return "\n".join(lines) + "\n"


def bench(methods, query: EmbeddingSet, gallery: EmbeddingSet,
          p: RerankParams) -> dict:
    """Run each method with timing and peak-memory measurement; before
    metrics are computed identically for every row."""
    rows = []
    for method in methods:
        result = run_method(method, query, gallery, p, measure_memory=True)
        rows.append(result.to_dict())
    return {"threads": p.threads, "metric": p.metric, "rows": rows}


def bench_json(report: dict) -> str:
    return json.dumps(report, indent=2)
