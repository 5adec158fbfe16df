"""World-frame LiDAR point map: hashed voxel grid with exact k-NN.

Points are stored in flat arrays; a dict maps 0.5 m grid cells to the indices
they contain.  Insertion is downsampled on a 0.1 m occupancy lattice (first
point per voxel wins, ever).  k-NN searches expand cell rings outward until
the remaining ring lower bound exceeds the current k-th distance, so results
are exactly those of a linear scan.
"""

from __future__ import annotations

import numpy as np

CELL = 0.5
INSERT_VOXEL = 0.1


class LidarPointMap:
    def __init__(self, cell: float = CELL, insert_voxel: float = INSERT_VOXEL):
        self.cell = float(cell)
        self.insert_voxel = float(insert_voxel)
        self._pts: list[np.ndarray] = []
        self._consolidated = np.zeros((0, 3))
        self._n = 0
        self._cells: dict[tuple, list] = {}
        self._cell_arrays: dict[tuple, np.ndarray] = {}
        self._occupied: set[tuple] = set()

    def __len__(self) -> int:
        return self._n

    @property
    def points(self) -> np.ndarray:
        if self._pts:
            self._consolidated = np.concatenate([self._consolidated, *self._pts])
            self._pts.clear()
        return self._consolidated

    def insert(self, pts: np.ndarray) -> int:
        """Insert points, keeping at most one per 0.1 m voxel (ever). Returns
        the number actually added."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            return 0
        vox = np.floor(pts / self.insert_voxel).astype(np.int64)
        # first occurrence per in-batch voxel
        _, first = np.unique(vox, axis=0, return_index=True)
        first.sort()
        keep = []
        for i in first:
            key = (vox[i, 0], vox[i, 1], vox[i, 2])
            if key not in self._occupied:
                self._occupied.add(key)
                keep.append(i)
        if not keep:
            return 0
        added = pts[keep]
        base = self._n
        self._pts.append(added)
        self._n += len(added)
        cells = np.floor(added / self.cell).astype(np.int64)
        for row, (cx, cy, cz) in enumerate(map(tuple, cells)):
            key = (cx, cy, cz)
            lst = self._cells.get(key)
            if lst is None:
                self._cells[key] = [base + row]
            else:
                lst.append(base + row)
            self._cell_arrays.pop(key, None)
        return len(added)

    def _cell_indices(self, key) -> np.ndarray | None:
        arr = self._cell_arrays.get(key)
        if arr is None:
            lst = self._cells.get(key)
            if lst is None:
                return None
            arr = np.asarray(lst, dtype=np.int64)
            self._cell_arrays[key] = arr
        return arr

    def _ring_indices(self, center, r: int) -> np.ndarray:
        """Indices of points in cells at Chebyshev distance exactly r."""
        cx, cy, cz = center
        chunks = []
        if r == 0:
            arr = self._cell_indices((cx, cy, cz))
            return arr if arr is not None else np.empty(0, np.int64)
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                for dz in range(-r, r + 1):
                    if max(abs(dx), abs(dy), abs(dz)) != r:
                        continue
                    arr = self._cell_indices((cx + dx, cy + dy, cz + dz))
                    if arr is not None:
                        chunks.append(arr)
        if not chunks:
            return np.empty(0, np.int64)
        return np.concatenate(chunks)

    def knn(self, query: np.ndarray, k: int = 5) -> np.ndarray:
        """The k nearest stored points (fewer if the map is small), by distance.

        Ring expansion keeps this exact: a cell ring at Chebyshev distance r
        cannot contain a point closer than (r - 1) * cell, so the search stops
        once that bound passes the current k-th best distance.
        """
        if self._n == 0:
            return np.zeros((0, 3))
        pts = self.points
        q = np.asarray(query, dtype=np.float64)
        center = tuple(np.floor(q / self.cell).astype(np.int64))
        got_idx: list[np.ndarray] = []
        got_d2: list[np.ndarray] = []
        count = 0
        r = 0
        max_r = self._max_ring(center)
        while r <= max_r:
            idx = self._ring_indices(center, r)
            if idx.size:
                d2 = np.sum((pts[idx] - q) ** 2, axis=1)
                got_idx.append(idx)
                got_d2.append(d2)
                count += idx.size
            if count >= k:
                d2_all = np.concatenate(got_d2)
                kth = np.partition(d2_all, k - 1)[k - 1]
                if (r * self.cell) ** 2 >= kth:  # next ring bound is r*cell
                    break
            r += 1
        if count == 0:
            return np.zeros((0, 3))
        d2_all = np.concatenate(got_d2)
        idx_all = np.concatenate(got_idx)
        take = min(k, count)
        sel = np.argpartition(d2_all, take - 1)[:take]
        sel = sel[np.argsort(d2_all[sel], kind="stable")]
        return pts[idx_all[sel]]

    def _max_ring(self, center) -> int:
        if not self._cells:
            return 0
        keys = np.array(list(self._cells.keys()))
        return int(np.max(np.abs(keys - np.asarray(center)))) + 1

    def knn_batch(self, queries: np.ndarray, k: int = 5) -> tuple[np.ndarray, np.ndarray]:
        """k-NN for many queries: (M, k, 3) neighbor array plus found counts.

        Queries are grouped by grid cell and answered from the 27-neighborhood
        in one vectorized pass; queries whose k-th candidate is not provably
        inside the neighborhood fall back to the exact ring search.
        """
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        m = len(queries)
        out = np.zeros((m, k, 3))
        counts = np.zeros(m, np.int64)
        if self._n == 0 or m == 0:
            return out, counts
        pts = self.points
        cells = np.floor(queries / self.cell).astype(np.int64)
        order = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0]))
        exact_bound = self.cell ** 2
        start = 0
        while start < m:
            stop = start
            key = cells[order[start]]
            while stop < m and np.array_equal(cells[order[stop]], key):
                stop += 1
            rows = order[start:stop]
            start = stop
            chunks = []
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dz in (-1, 0, 1):
                        arr = self._cell_indices((key[0] + dx, key[1] + dy, key[2] + dz))
                        if arr is not None:
                            chunks.append(arr)
            cand = np.concatenate(chunks) if chunks else np.empty(0, np.int64)
            for row in rows:
                ok = False
                if cand.size >= k:
                    d2 = np.sum((pts[cand] - queries[row]) ** 2, axis=1)
                    sel = np.argpartition(d2, k - 1)[:k]
                    sel = sel[np.argsort(d2[sel], kind="stable")]
                    if d2[sel[-1]] < exact_bound:
                        out[row] = pts[cand[sel]]
                        counts[row] = k
                        ok = True
                if not ok:
                    nb = self.knn(queries[row], k)
                    counts[row] = len(nb)
                    out[row, : len(nb)] = nb
        return out, counts


def fit_plane(points: np.ndarray, gate: float = 0.05):
    """Least-squares plane through >= 3 points: returns (n, d) with |n| = 1 and
    n . p + d = 0, or None when the fit is degenerate (off-plane point beyond
    the gate, or a near-collinear point set)."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        return None
    centroid = pts.mean(axis=0)
    q = pts - centroid
    cov = q.T @ q
    w, v = np.linalg.eigh(cov)
    if w[1] <= max(1e-12, 1e-6 * w[2]):
        return None
    n = v[:, 0]
    d = -float(n @ centroid)
    if np.max(np.abs(pts @ n + d)) > gate:
        return None
    return n, d


def fit_planes_batch(neighbors: np.ndarray, counts: np.ndarray,
                     gate: float = 0.05, rms_gate: float | None = None):
    """Vectorized plane fits for (M, k, 3) neighbor sets.

    Returns (normals, ds, valid); rows with fewer than k neighbors, gate
    violations, or collinear sets are invalid.  ``rms_gate`` additionally
    bounds the rms cluster thickness: clusters straddling an edge can pass
    the max-residual gate with a skewed bisecting plane, but their thickness
    betrays them.
    """
    m, k, _ = neighbors.shape
    full = counts >= k
    centroid = neighbors.mean(axis=1)
    q = neighbors - centroid[:, None, :]
    cov = np.einsum("mki,mkj->mij", q, q)
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0]
    ds = -np.einsum("mi,mi->m", normals, centroid)
    dist = np.abs(np.einsum("mki,mi->mk", neighbors, normals) + ds[:, None])
    valid = full & (w[:, 1] > np.maximum(1e-12, 1e-6 * w[:, 2])) \
        & (dist.max(axis=1) <= gate)
    if rms_gate is not None:
        valid &= np.sqrt(np.maximum(w[:, 0], 0.0) / k) <= rms_gate
    return normals, ds, valid
