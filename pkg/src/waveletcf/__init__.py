"""Collaborative filtering with adaptive spectral graph wavelets.

Builds a user-item bipartite graph from implicit feedback, computes a
truncated eigendecomposition of its normalized Laplacian, stabilizes the
eigenvalue spread with a Box-Cox power transform, and trains a layered
embedding model with a pairwise ranking loss. Ships with top-k evaluation
(Recall@k / NDCG@k), a cold-start sparsification protocol, and a
reproducible command-line pipeline.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericalError

__all__ = ["ConfigError", "DataError", "NumericalError", "__version__"]
