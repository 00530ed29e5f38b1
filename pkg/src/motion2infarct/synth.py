"""Synthetic contracting two-shell LV meshes with hypokinetic infarct patches.

Every case is a pair of point-correspondent ellipsoidal shells (endocardium,
epicardium) built on a geodesic icosphere. Healthy tissue contracts radially
by ``ejection_amplitude`` at mid-cycle and thickens by ``wall_thickening``;
inside a breadth-first grown patch both are scaled down.
"""

from __future__ import annotations

import json
import math
import os
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .mesh import MeshSequence, VertexClass, VertexLabels, save_labels, save_mesh_sequence
from .scar import ScarPointSet, save_scar_csv


@dataclass(frozen=True)
class SynthConfig:
    n_cases: int = 52
    endo_resolution: int = 7  # geodesic frequency: 10 * f**2 + 2 vertices per shell
    n_phases: int = 25
    base_radii_mm: tuple = (25.0, 25.0, 40.0)
    wall_mm: float = 10.0
    ejection_amplitude: float = 0.25
    wall_thickening: float = 0.4
    infarct_patch_fraction: float = 0.083
    infarct_motion_scale: float = 0.15
    infarct_thickening_scale: float = 0.2
    noise_mm: float = 0.1
    scar_jitter_mm: float = 1.0
    size_jitter: float = 0.1
    center_jitter_mm: float = 5.0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 <= self.infarct_motion_scale < 1:
            raise ValueError("infarct_motion_scale must be in [0, 1)")
        if not 0 < self.infarct_patch_fraction < 0.5:
            raise ValueError("infarct_patch_fraction must be in (0, 0.5)")
        if self.n_phases < 2:
            raise ValueError("n_phases must be >= 2")
        if self.endo_resolution < 1 or self.n_cases < 1:
            raise ValueError("endo_resolution and n_cases must be >= 1")
        object.__setattr__(self, "base_radii_mm", tuple(float(r) for r in self.base_radii_mm))


@dataclass(frozen=True, eq=False)
class SynthCase:
    mesh: MeshSequence
    gt_labels: VertexLabels
    scar_points: ScarPointSet
    config: SynthConfig
    case_seed: int
    name: str = ""
    patch_seed_vertex: int = field(default=-1)


def _icosahedron():
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    return verts / np.linalg.norm(verts, axis=1, keepdims=True), faces


def icosphere(frequency: int):
    """Unit geodesic sphere with ``10 f^2 + 2`` vertices and ``20 f^2`` faces.

    Shared edge vertices are merged by their exact barycentric key, so the
    result is a closed manifold (Euler characteristic 2).
    """
    base, base_faces = _icosahedron()
    n = frequency
    keys: dict = {}
    coords = []

    def vid(weights):
        key = tuple(sorted((int(v), int(w)) for v, w in weights if w))
        if key not in keys:
            keys[key] = len(coords)
            coords.append(sum(w * base[v] for v, w in key) / n)
        return keys[key]

    faces = []
    for a, b, c in base_faces:
        grid = {}
        for i in range(n + 1):
            for j in range(n + 1 - i):
                grid[i, j] = vid(((a, n - i - j), (b, i), (c, j)))
        for i in range(n):
            for j in range(n - i):
                faces.append((grid[i, j], grid[i + 1, j], grid[i, j + 1]))
                if i + j < n - 1:
                    faces.append((grid[i + 1, j], grid[i + 1, j + 1], grid[i, j + 1]))
    pts = np.array(coords)
    return pts / np.linalg.norm(pts, axis=1, keepdims=True), np.array(faces, dtype=np.int64)


def contraction_profile(n_phases: int) -> np.ndarray:
    """Half-sine systolic profile: zero at phase 0 (ED), peak at mid-cycle."""
    return np.sin(np.pi * np.arange(n_phases) / n_phases)


def _neighbors(faces, n):
    nbrs = [set() for _ in range(n)]
    for a, b, c in faces.tolist():
        nbrs[a].update((b, c))
        nbrs[b].update((a, c))
        nbrs[c].update((a, b))
    return [sorted(s) for s in nbrs]


def grow_patch(faces, n_vertices, seed_vertex, count):
    """Breadth-first patch of exactly ``count`` vertices around ``seed_vertex``."""
    nbrs = _neighbors(faces, n_vertices)
    seen = {seed_vertex}
    order = []
    queue = deque([seed_vertex])
    while queue and len(order) < count:
        v = queue.popleft()
        order.append(v)
        for u in nbrs[v]:
            if u not in seen:
                seen.add(u)
                queue.append(u)
    if len(order) < count:
        raise ValueError(f"patch growth reached {len(order)} of {count} vertices; increase resolution")
    return np.array(sorted(order), dtype=np.int64)


def generate_case(cfg: SynthConfig, case_seed, sphere=None, name="") -> SynthCase:
    rng = np.random.default_rng(case_seed)
    unit, tri = sphere if sphere is not None else icosphere(cfg.endo_resolution)
    nv = len(unit)
    count = int(round(cfg.infarct_patch_fraction * nv))
    if count < 1:
        raise ValueError("patch growth cannot reach target fraction: resolution too low")

    scale = 1.0 + rng.uniform(-cfg.size_jitter, cfg.size_jitter)
    axes = np.asarray(cfg.base_radii_mm) * scale
    center = rng.normal(0.0, cfg.center_jitter_mm, size=3)
    seed_vertex = int(rng.integers(nv))
    patch = grow_patch(tri, nv, seed_vertex, count)
    in_patch = np.zeros(nv, dtype=bool)
    in_patch[patch] = True

    s = contraction_profile(cfg.n_phases)[:, None, None]
    amp = np.where(in_patch, cfg.ejection_amplitude * cfg.infarct_motion_scale, cfg.ejection_amplitude)
    thick = np.where(in_patch, cfg.wall_thickening * cfg.infarct_thickening_scale, cfg.wall_thickening)
    radial = unit * axes  # ED endocardium relative to centre
    endo = center + radial[None] * (1.0 - amp[None, :, None] * s)
    wall = cfg.wall_mm * (1.0 + thick[None, :, None] * s)
    epi = endo + unit[None] * wall
    positions = np.concatenate([endo, epi], axis=1)
    if cfg.noise_mm > 0:
        positions = positions + rng.normal(0.0, cfg.noise_mm, size=positions.shape)

    faces = np.concatenate([tri, tri + nv])
    classes = np.concatenate([np.full(nv, VertexClass.LV_ENDO), np.full(nv, VertexClass.LV_EPI)])
    mesh = MeshSequence(positions, faces, classes, ed_phase=0)

    picks = rng.choice(patch, size=count, replace=True)
    ed = positions[0, :nv]
    points = ed[picks] + rng.normal(0.0, cfg.scar_jitter_mm, size=(count, 3))
    return SynthCase(mesh, VertexLabels(in_patch.astype(np.int8)), ScarPointSet(points), cfg,
                     case_seed, name=name, patch_seed_vertex=seed_vertex)


def generate(cfg: SynthConfig) -> list[SynthCase]:
    """Generate ``cfg.n_cases`` cases; case ``i`` uses seed ``(rng_seed, i)``."""
    sphere = icosphere(cfg.endo_resolution)
    return [generate_case(cfg, [cfg.rng_seed, i], sphere, name=f"case_{i:03d}")
            for i in range(cfg.n_cases)]


def split(n_cases: int, fractions=(0.75, 0.05, 0.20), seed=0) -> dict:
    """Seeded train/val/test partition with largest-remainder rounding."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr < 0).any() or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    raw = fr * n_cases
    counts = np.floor(raw + 1e-9).astype(int)
    rem = raw - counts
    for i in np.argsort(-rem, kind="stable")[: n_cases - counts.sum()]:
        counts[i] += 1
    perm = np.random.default_rng(seed).permutation(n_cases)
    a, b = counts[0], counts[0] + counts[1]
    return {"train": sorted(perm[:a].tolist()),
            "val": sorted(perm[a:b].tolist()),
            "test": sorted(perm[b:].tolist())}


def endo_volume(positions, faces) -> float:
    """Enclosed volume of a closed, outward-oriented triangle surface."""
    a, b, c = positions[faces[:, 0]], positions[faces[:, 1]], positions[faces[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def write_dataset(cases, out_dir, splits=None):
    """Write cases as ``out_dir/<name>/{manifest.json, labels.json, scar.csv}``."""
    os.makedirs(out_dir, exist_ok=True)
    for case in cases:
        cdir = os.path.join(out_dir, case.name)
        save_mesh_sequence(case.mesh, cdir)
        nv = case.gt_labels.domain_size
        save_labels(case.gt_labels, os.path.join(cdir, "labels.json"), vertex_ids=np.arange(nv))
        save_scar_csv(case.scar_points, os.path.join(cdir, "scar.csv"))
    if splits is not None:
        names = [c.name for c in cases]
        doc = {k: [names[i] for i in v] for k, v in splits.items()}
        with open(os.path.join(out_dir, "split.json"), "w") as fh:
            json.dump(doc, fh, indent=1)
    with open(os.path.join(out_dir, "synth_config.json"), "w") as fh:
        json.dump(asdict(cases[0].config), fh, indent=1)
