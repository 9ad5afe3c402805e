"""Re-ranking engine for instance re-identification over precomputed embeddings.

Provides an attention-plus-memory correlation predictor for learned feature
expansion, the classical query-expansion and k-reciprocal baselines, retrieval
metrics, a synthetic embedding generator, and a benchmarking CLI.
"""

__version__ = "0.1.0"
