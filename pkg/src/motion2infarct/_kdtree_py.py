"""Pure-Python fallback for the compiled kd-tree.

scipy's cKDTree proposes candidates; the final ranking is recomputed here
with the same squared-distance expression and tie rule as the compiled
kernel, so both backends return identical arrays.
"""

import numpy as np
from scipy.spatial import cKDTree

# relative slack on the candidate radius; cKDTree distances may differ by an ulp
_RADIUS_SLACK = 1e-9


def _sq_dist(points, query):
    d = points - query
    return d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]


class KDTree:
    """kd-tree over an ``(n, 3)`` float64 point array."""

    def __init__(self, points):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (n, 3) points, got shape {pts.shape}")
        self.data = pts
        self.n = pts.shape[0]
        self._tree = cKDTree(pts, balanced_tree=False, compact_nodes=False) if self.n else None

    def query(self, queries, k=1):
        """Return ``(d2, idx)`` of the ``min(k, n)`` nearest points per query.

        Rows are ordered by ascending squared distance, then index.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        kk = min(k, self.n)
        d2_out = np.empty((q.shape[0], kk), dtype=np.float64)
        idx_out = np.empty((q.shape[0], kk), dtype=np.intp)
        if kk == 0 or q.shape[0] == 0:
            return d2_out, idx_out
        dist, _ = self._tree.query(q, k=kk)
        dist = dist.reshape(q.shape[0], kk)
        radius = dist[:, -1] * (1.0 + _RADIUS_SLACK) + 1e-12
        candidates = self._tree.query_ball_point(q, radius)
        for r, cand in enumerate(candidates):
            cand = np.asarray(cand, dtype=np.intp)
            d2 = _sq_dist(self.data[cand], q[r])
            order = np.lexsort((cand, d2))[:kk]
            d2_out[r] = d2[order]
            idx_out[r] = cand[order]
        return d2_out, idx_out
