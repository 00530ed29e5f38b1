# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled 3-D kd-tree with exact, deterministic k-nearest-neighbour queries.

Squared distances are evaluated as ``dx*dx + dy*dy + dz*dz`` in that order
(build with ``-ffp-contract=off``) so results are bit-identical to the NumPy
fallback and to brute force. Ties on distance resolve to the lower index.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

cdef enum:
    LEAF_SIZE = 12


cdef inline bint _before(double da, Py_ssize_t ia, double db, Py_ssize_t ib) nogil:
    return da < db or (da == db and ia < ib)


cdef class KDTree:
    """kd-tree over an ``(n, 3)`` float64 point array."""

    cdef readonly object data
    cdef const double[:, ::1] _pts
    cdef Py_ssize_t[::1] _perm
    cdef Py_ssize_t[::1] _lo
    cdef Py_ssize_t[::1] _hi
    cdef Py_ssize_t[::1] _left
    cdef Py_ssize_t[::1] _right
    cdef double[:, ::1] _box
    cdef Py_ssize_t _n_nodes
    cdef readonly Py_ssize_t n

    def __init__(self, points):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (n, 3) points, got shape {pts.shape}")
        self.data = pts
        self._pts = pts
        self.n = pts.shape[0]
        cap = 2 * self.n + 1
        self._perm = np.arange(self.n, dtype=np.intp)
        self._lo = np.empty(cap, dtype=np.intp)
        self._hi = np.empty(cap, dtype=np.intp)
        self._left = np.empty(cap, dtype=np.intp)
        self._right = np.empty(cap, dtype=np.intp)
        self._box = np.empty((cap, 6), dtype=np.float64)
        self._n_nodes = 0
        if self.n > 0:
            with nogil:
                self._build(0, self.n)

    cdef Py_ssize_t _build(self, Py_ssize_t lo, Py_ssize_t hi) nogil:
        cdef Py_ssize_t node = self._n_nodes
        cdef Py_ssize_t i, p, ax, mid
        cdef int d
        cdef double v, spread, best_spread
        self._n_nodes += 1
        self._lo[node] = lo
        self._hi[node] = hi
        for d in range(3):
            self._box[node, d] = INFINITY
            self._box[node, 3 + d] = -INFINITY
        for i in range(lo, hi):
            p = self._perm[i]
            for d in range(3):
                v = self._pts[p, d]
                if v < self._box[node, d]:
                    self._box[node, d] = v
                if v > self._box[node, 3 + d]:
                    self._box[node, 3 + d] = v
        if hi - lo <= LEAF_SIZE:
            self._left[node] = -1
            self._right[node] = -1
            return node
        ax = 0
        best_spread = -1.0
        for d in range(3):
            spread = self._box[node, 3 + d] - self._box[node, d]
            if spread > best_spread:
                best_spread = spread
                ax = d
        mid = (lo + hi) // 2
        self._select(lo, hi - 1, mid, ax)
        self._left[node] = self._build(lo, mid)
        self._right[node] = self._build(mid, hi)
        return node

    cdef void _select(self, Py_ssize_t lo, Py_ssize_t hi, Py_ssize_t kth, Py_ssize_t ax) nogil:
        # in-place quickselect of self._perm[lo..hi] on coordinate ax
        cdef Py_ssize_t i, j, tmp
        cdef double pivot
        while lo < hi:
            pivot = self._pts[self._perm[(lo + hi) // 2], ax]
            i = lo
            j = hi
            while i <= j:
                while self._pts[self._perm[i], ax] < pivot:
                    i += 1
                while self._pts[self._perm[j], ax] > pivot:
                    j -= 1
                if i <= j:
                    tmp = self._perm[i]
                    self._perm[i] = self._perm[j]
                    self._perm[j] = tmp
                    i += 1
                    j -= 1
            if kth <= j:
                hi = j
            elif kth >= i:
                lo = i
            else:
                return

    cdef inline double _box_d2(self, Py_ssize_t node, double qx, double qy, double qz) nogil:
        cdef double g0 = 0.0, g1 = 0.0, g2 = 0.0
        if qx < self._box[node, 0]:
            g0 = self._box[node, 0] - qx
        elif qx > self._box[node, 3]:
            g0 = qx - self._box[node, 3]
        if qy < self._box[node, 1]:
            g1 = self._box[node, 1] - qy
        elif qy > self._box[node, 4]:
            g1 = qy - self._box[node, 4]
        if qz < self._box[node, 2]:
            g2 = self._box[node, 2] - qz
        elif qz > self._box[node, 5]:
            g2 = qz - self._box[node, 5]
        return g0 * g0 + g1 * g1 + g2 * g2

    cdef void _search(self, Py_ssize_t node, double qx, double qy, double qz,
                      Py_ssize_t k, double* bd, Py_ssize_t* bi, Py_ssize_t* nfound) nogil:
        cdef Py_ssize_t i, p, j, a, b
        cdef double dx, dy, dz, d2, da, db
        if self._left[node] < 0:
            for i in range(self._lo[node], self._hi[node]):
                p = self._perm[i]
                dx = self._pts[p, 0] - qx
                dy = self._pts[p, 1] - qy
                dz = self._pts[p, 2] - qz
                d2 = dx * dx + dy * dy + dz * dz
                if nfound[0] == k and not _before(d2, p, bd[k - 1], bi[k - 1]):
                    continue
                j = nfound[0] if nfound[0] < k else k - 1
                while j > 0 and _before(d2, p, bd[j - 1], bi[j - 1]):
                    bd[j] = bd[j - 1]
                    bi[j] = bi[j - 1]
                    j -= 1
                bd[j] = d2
                bi[j] = p
                if nfound[0] < k:
                    nfound[0] += 1
            return
        a = self._left[node]
        b = self._right[node]
        da = self._box_d2(a, qx, qy, qz)
        db = self._box_d2(b, qx, qy, qz)
        if db < da:
            a, b = b, a
            da, db = db, da
        # equal bounds are still visited: a tie may hold a lower index
        if nfound[0] < k or da <= bd[k - 1]:
            self._search(a, qx, qy, qz, k, bd, bi, nfound)
        if nfound[0] < k or db <= bd[k - 1]:
            self._search(b, qx, qy, qz, k, bd, bi, nfound)

    def query(self, queries, Py_ssize_t k=1):
        """Return ``(d2, idx)`` of the ``min(k, n)`` nearest points per query.

        Rows are ordered by ascending squared distance, then index.
        """
        q_arr = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        cdef const double[:, ::1] q = q_arr
        cdef Py_ssize_t nq = q.shape[0]
        cdef Py_ssize_t kk = min(k, self.n)
        if k < 1:
            raise ValueError("k must be >= 1")
        d2_arr = np.empty((nq, kk), dtype=np.float64)
        idx_arr = np.empty((nq, kk), dtype=np.intp)
        cdef double[:, ::1] d2 = d2_arr
        cdef Py_ssize_t[:, ::1] idx = idx_arr
        cdef Py_ssize_t r, nfound
        if kk == 0:
            return d2_arr, idx_arr
        with nogil:
            for r in range(nq):
                nfound = 0
                self._search(0, q[r, 0], q[r, 1], q[r, 2], kk, &d2[r, 0], &idx[r, 0], &nfound)
        return d2_arr, idx_arr
