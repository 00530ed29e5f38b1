"""Ground-truth infarct labels from sparse scar points.

Each registered scar voxel is densified along Z with Gaussian draws, then
every point marks its ``k`` nearest LV endocardial vertices at end-diastole.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .mesh import HybridInput, MeshSequence, VertexLabels
from .spatial import KDTree


@dataclass(frozen=True, eq=False)
class ScarPointSet:
    """Scar sample points (mm) in the ED frame of the mesh."""

    points: np.ndarray
    source_slice: tuple | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pts).all():
            raise ValueError("scar points must be finite")
        if self.source_slice is not None and len(self.source_slice) != len(pts):
            raise ValueError("source_slice length must match the number of points")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class ProjectionConfig:
    sigma_z: float = 3.0
    samples_per_voxel: int = 10
    k_vertices: int = 5
    rng_seed: int = 0

    def __post_init__(self):
        if not self.sigma_z > 0:
            raise ValueError("sigma_z must be > 0")
        if self.samples_per_voxel < 0:
            raise ValueError("samples_per_voxel must be >= 0")
        if self.k_vertices < 1:
            raise ValueError("k_vertices must be >= 1")


def densify(points: ScarPointSet, cfg: ProjectionConfig) -> ScarPointSet:
    """Append ``samples_per_voxel`` copies of each point with Z ~ N(z, sigma_z^2).

    Output order is each original point followed by its own samples.
    """
    m = cfg.samples_per_voxel
    if m == 0 or len(points) == 0:
        return points
    rng = np.random.default_rng(cfg.rng_seed)
    orig = points.points
    z = rng.normal(orig[:, 2:3], cfg.sigma_z, size=(len(orig), m))
    out = np.repeat(orig[:, None, :], m + 1, axis=1)
    out[:, 1:, 2] = z
    slices = None
    if points.source_slice is not None:
        slices = tuple(s for s in points.source_slice for _ in range(m + 1))
    return ScarPointSet(out.reshape(-1, 3), slices)


def project_to_vertices(points: ScarPointSet, mesh: MeshSequence, hybrid: HybridInput,
                        cfg: ProjectionConfig) -> VertexLabels:
    """Label the ``k_vertices`` nearest ED endocardial vertices of every point.

    Points are used as given; call :func:`densify` first for Z augmentation.
    """
    if hybrid.n_endo == 0:
        raise ValueError("empty endocardium")
    labels = np.zeros(hybrid.n_endo, dtype=np.int8)
    if len(points):
        ed = mesh.positions[mesh.ed_phase, hybrid.endo_vertices]
        _, idx = KDTree(ed).query(points.points, cfg.k_vertices)
        labels[idx.ravel()] = 1
    return VertexLabels(labels)


def scar_labels(points, mesh, hybrid, cfg: ProjectionConfig) -> VertexLabels:
    """Densify then project: the full ground-truth generation step."""
    return project_to_vertices(densify(points, cfg), mesh, hybrid, cfg)


def label_fraction(labels: VertexLabels) -> float:
    if labels.domain_size == 0:
        return 0.0
    return float(np.count_nonzero(labels.labels)) / labels.domain_size


def load_scar_csv(path) -> ScarPointSet:
    """Read ``x_mm,y_mm,z_mm[,slice_id]`` rows."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if cols[:3] != ["x_mm", "y_mm", "z_mm"]:
            raise ValueError(f"{path}: expected header x_mm,y_mm,z_mm[,slice_id], got {cols}")
        pts, slices = [], []
        for lineno, row in enumerate(reader, 2):
            try:
                pts.append([float(row["x_mm"]), float(row["y_mm"]), float(row["z_mm"])])
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: malformed scar point {row}") from None
            slices.append(row.get("slice_id"))
    has_slice = "slice_id" in cols
    return ScarPointSet(np.array(pts).reshape(-1, 3), tuple(slices) if has_slice else None)


def save_scar_csv(points: ScarPointSet, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        has_slice = points.source_slice is not None
        w.writerow(["x_mm", "y_mm", "z_mm"] + (["slice_id"] if has_slice else []))
        for i, (x, y, z) in enumerate(points.points.tolist()):
            w.writerow([repr(x), repr(y), repr(z)] + ([points.source_slice[i]] if has_slice else []))
