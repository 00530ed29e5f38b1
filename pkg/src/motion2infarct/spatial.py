"""Nearest-neighbour search shared by scar projection, thickness and ASD.

The compiled kd-tree (``_kdtree``) is used when it was built; otherwise the
pure-Python version is selected. Set ``MOTION2INFARCT_PURE_PYTHON=1`` to force
the fallback.
"""

import os

import numpy as np

if os.environ.get("MOTION2INFARCT_PURE_PYTHON", "") not in ("", "0"):
    from ._kdtree_py import KDTree
    BACKEND = "python"
else:
    try:
        from ._kdtree import KDTree
        BACKEND = "compiled"
    except ImportError:  # extension not built
        from ._kdtree_py import KDTree
        BACKEND = "python"

__all__ = ["KDTree", "BACKEND", "knn", "nearest_distance"]


def knn(points, queries, k):
    """k nearest ``points`` for every query row.

    Returns ``(d2, idx)``, each ``(n_queries, min(k, n_points))``, sorted by
    squared distance with ties broken by lower point index.
    """
    return KDTree(points).query(queries, k)


def nearest_distance(points, queries):
    """Euclidean distance from each query to its closest point."""
    d2, _ = KDTree(points).query(queries, 1)
    return np.sqrt(d2[:, 0])
