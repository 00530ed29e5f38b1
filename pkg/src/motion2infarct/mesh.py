"""Point-correspondent 4D surface meshes, LV sub-surfaces and per-vertex labels.

On-disk layout (all paths in a manifest are relative to the manifest file)::

    manifest.json   {"n_phases": N, "ed_phase": 0,
                     "vertex_files": ["phase_00.txt", ...],
                     "face_file": "faces.txt", "class_file": "classes.txt"}
    phase_XX.txt    one vertex per line: ``x y z`` in millimetres
    faces.txt       one triangle per line: ``i j k`` (0-based)
    classes.txt     one tag per line: LV_ENDO, LV_EPI, RV or OTHER
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass

import numpy as np


class MeshFormatError(ValueError):
    """Raised when mesh or label files violate the documented format."""


class VertexClass(enum.IntEnum):
    LV_ENDO = 0
    LV_EPI = 1
    RV = 2
    OTHER = 3


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Surface:
    """One phase snapshot: vertex positions in mm."""

    positions: np.ndarray

    def __post_init__(self):
        pos = _frozen(self.positions, np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise MeshFormatError(f"positions must be (n, 3), got {pos.shape}")
        if not np.isfinite(pos).all():
            raise MeshFormatError("non-finite vertex coordinate")
        object.__setattr__(self, "positions", pos)


@dataclass(frozen=True, eq=False)
class MeshSequence:
    """Surface meshes over N cardiac phases sharing one triangulation.

    ``positions`` is stored as an ``(N, V, 3)`` array; :attr:`phases` gives the
    per-phase :class:`Surface` view.
    """

    positions: np.ndarray
    faces: np.ndarray
    vertex_class: np.ndarray
    ed_phase: int = 0

    def __post_init__(self):
        pos = _frozen(self.positions, np.float64)
        faces = _frozen(self.faces, np.int64).reshape(-1, 3)
        cls = _frozen(self.vertex_class, np.int8)
        if pos.ndim != 3 or pos.shape[2] != 3:
            raise MeshFormatError(f"positions must be (N, V, 3), got {pos.shape}")
        n, v = pos.shape[:2]
        if n < 2:
            raise MeshFormatError(f"N >= 2 required, got {n} phase(s)")
        if not np.isfinite(pos).all():
            t, i = np.argwhere(~np.isfinite(pos).all(axis=2))[0]
            raise MeshFormatError(f"phase {t}: non-finite coordinate at vertex {i}")
        if cls.shape != (v,):
            raise MeshFormatError(f"class list has {cls.size} entries for {v} vertices")
        bad = np.flatnonzero((cls < 0) | (cls > max(VertexClass)))
        if bad.size:
            raise MeshFormatError(f"unknown vertex class code {cls[bad[0]]} at vertex {bad[0]}")
        bad = np.flatnonzero(((faces < 0) | (faces >= v)).any(axis=1))
        if bad.size:
            raise MeshFormatError(
                f"face {bad[0]} {faces[bad[0]].tolist()} has index out of range [0, {v})")
        if not 0 <= self.ed_phase < n:
            raise MeshFormatError(f"ed_phase {self.ed_phase} out of range for {n} phases")
        endo = cls == VertexClass.LV_ENDO
        covered = np.zeros(v, dtype=bool)
        covered[faces[endo[faces].all(axis=1)].ravel()] = True
        orphan = np.flatnonzero(endo & ~covered)
        if orphan.size:
            raise MeshFormatError(f"LV_ENDO vertex {orphan[0]} belongs to no endocardial face")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "vertex_class", cls)
        object.__setattr__(self, "ed_phase", int(self.ed_phase))

    @property
    def n_phases(self) -> int:
        return self.positions.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.positions.shape[1]

    @property
    def phases(self) -> list[Surface]:
        return [Surface(p) for p in self.positions]


@dataclass(frozen=True, eq=False)
class HybridInput:
    """LV endocardial mesh plus the epicardium as a bare point cloud.

    ``endo_vertices`` and ``epi_points`` index into the global mesh;
    ``endo_faces`` index into ``endo_vertices``.
    """

    endo_vertices: np.ndarray
    endo_faces: np.ndarray
    epi_points: np.ndarray

    @property
    def n_endo(self) -> int:
        return self.endo_vertices.size


@dataclass(frozen=True, eq=False)
class VertexLabels:
    """Binary infarct label per endocardial vertex."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 1:
            raise ValueError("labels must be one-dimensional")
        if lab.size and not np.isin(lab, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "labels", _frozen(lab, np.int8))

    @property
    def domain_size(self) -> int:
        return self.labels.size

    def __eq__(self, other):
        return isinstance(other, VertexLabels) and np.array_equal(self.labels, other.labels)

    def __hash__(self):
        return hash(self.labels.tobytes())


def extract_hybrid_input(mesh: MeshSequence) -> HybridInput:
    """Split out the LV endocardial surface and the LV epicardial point cloud."""
    endo = np.flatnonzero(mesh.vertex_class == VertexClass.LV_ENDO)
    epi = np.flatnonzero(mesh.vertex_class == VertexClass.LV_EPI)
    if endo.size == 0:
        raise MeshFormatError("mesh has no LV_ENDO vertices")
    if epi.size == 0:
        raise MeshFormatError("mesh has no LV_EPI vertices")
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[endo] = np.arange(endo.size)
    keep = (remap[mesh.faces] >= 0).all(axis=1)
    return HybridInput(_frozen(endo, np.int64),
                       _frozen(remap[mesh.faces[keep]], np.int64),
                       _frozen(epi, np.int64))


# ---------------------------------------------------------------------------
# manifest I/O

def _read_rows(path, ncols, dtype, what):
    if not os.path.exists(path):
        raise MeshFormatError(f"missing {what} file: {path}")
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != ncols:
                raise MeshFormatError(f"{path}:{lineno}: expected {ncols} values, got {line!r}")
            try:
                rows.append([dtype(p) for p in parts])
            except ValueError:
                raise MeshFormatError(f"{path}:{lineno}: malformed record {line!r}") from None
    return rows


def load_mesh_sequence(manifest_path) -> MeshSequence:
    """Read and validate a mesh sequence from its JSON manifest."""
    if not os.path.exists(manifest_path):
        raise MeshFormatError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as fh:
        try:
            man = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MeshFormatError(f"{manifest_path}: invalid JSON ({exc})") from None
    for key in ("vertex_files", "face_file", "class_file"):
        if key not in man:
            raise MeshFormatError(f"{manifest_path}: missing key {key!r}")
    base = os.path.dirname(os.path.abspath(manifest_path))
    vfiles = man["vertex_files"]
    n = man.get("n_phases", len(vfiles))
    if n != len(vfiles):
        raise MeshFormatError(f"n_phases={n} but {len(vfiles)} vertex files listed")
    if n < 2:
        raise MeshFormatError(f"N >= 2 required, got {n} phase(s)")

    phases = []
    for t, rel in enumerate(vfiles):
        rows = _read_rows(os.path.join(base, rel), 3, float, f"phase {t} vertex")
        if phases and len(rows) != len(phases[0]):
            raise MeshFormatError(
                f"phase {t} has {len(rows)} vertices, phase 0 has {len(phases[0])}")
        phases.append(rows)
    faces = _read_rows(os.path.join(base, man["face_file"]), 3, int, "face")

    tags = []
    class_path = os.path.join(base, man["class_file"])
    if not os.path.exists(class_path):
        raise MeshFormatError(f"missing class file: {class_path}")
    with open(class_path) as fh:
        for lineno, line in enumerate(fh, 1):
            tag = line.strip()
            if not tag:
                continue
            try:
                tags.append(VertexClass[tag])
            except KeyError:
                raise MeshFormatError(f"{class_path}:{lineno}: unknown vertex class tag {tag!r}") from None

    return MeshSequence(np.array(phases, dtype=np.float64).reshape(n, -1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3),
                        np.array(tags, dtype=np.int8),
                        ed_phase=int(man.get("ed_phase", 0)))


def save_mesh_sequence(mesh: MeshSequence, out_dir, name="manifest.json") -> str:
    """Write ``mesh`` in the manifest layout; coordinates round-trip exactly."""
    os.makedirs(out_dir, exist_ok=True)
    width = len(str(mesh.n_phases - 1))
    vfiles = []
    for t, pos in enumerate(mesh.positions):
        fname = f"phase_{t:0{width}d}.txt"
        with open(os.path.join(out_dir, fname), "w") as fh:
            fh.writelines(f"{x!r} {y!r} {z!r}\n" for x, y, z in pos.tolist())
        vfiles.append(fname)
    np.savetxt(os.path.join(out_dir, "faces.txt"), mesh.faces, fmt="%d")
    with open(os.path.join(out_dir, "classes.txt"), "w") as fh:
        fh.writelines(VertexClass(c).name + "\n" for c in mesh.vertex_class)
    manifest = {"n_phases": mesh.n_phases, "ed_phase": mesh.ed_phase,
                "vertex_files": vfiles, "face_file": "faces.txt", "class_file": "classes.txt"}
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path


# ---------------------------------------------------------------------------
# labels

def save_labels(labels: VertexLabels, path, vertex_ids=None):
    doc = {"domain_size": labels.domain_size, "labels": labels.labels.tolist()}
    if vertex_ids is not None:
        doc["vertex_ids"] = np.asarray(vertex_ids).tolist()
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_labels(path) -> VertexLabels:
    with open(path) as fh:
        doc = json.load(fh)
    labels = VertexLabels(np.asarray(doc["labels"], dtype=np.int8))
    if labels.domain_size != doc.get("domain_size", labels.domain_size):
        raise MeshFormatError(f"{path}: domain_size {doc['domain_size']} != {labels.domain_size} labels")
    return labels


def save_labeled_surface(mesh: MeshSequence, phase: int, labels: VertexLabels, out_path,
                         hybrid: HybridInput | None = None):
    """Export the endocardial surface at ``phase`` as legacy-VTK ASCII polydata.

    Labels are attached as the integer point attribute ``infarct``.
    """
    if not 0 <= phase < mesh.n_phases:
        raise IndexError(f"phase {phase} out of range for {mesh.n_phases} phases")
    hybrid = hybrid or extract_hybrid_input(mesh)
    if labels.domain_size != hybrid.n_endo:
        raise ValueError(f"{labels.domain_size} labels for {hybrid.n_endo} endocardial vertices")
    pos = mesh.positions[phase, hybrid.endo_vertices]
    lines = ["# vtk DataFile Version 3.0", "infarct labels", "ASCII", "DATASET POLYDATA",
             f"POINTS {len(pos)} double"]
    lines += [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in pos.tolist()]
    faces = hybrid.endo_faces
    lines.append(f"POLYGONS {len(faces)} {4 * len(faces)}")
    lines += [f"3 {a} {b} {c}" for a, b, c in faces.tolist()]
    lines += [f"POINT_DATA {len(pos)}", "SCALARS infarct int 1", "LOOKUP_TABLE default"]
    lines += [str(int(v)) for v in labels.labels]
    with open(out_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_labeled_surface(path):
    """Read a file written by :func:`save_labeled_surface`.

    Returns ``(positions, faces, labels)``.
    """
    with open(path) as fh:
        tokens = fh.read().split("\n")
    it = iter(line.strip() for line in tokens)
    positions = faces = labels = None
    for line in it:
        if line.startswith("POINTS"):
            n = int(line.split()[1])
            positions = np.array([next(it).split() for _ in range(n)], dtype=np.float64).reshape(n, 3)
        elif line.startswith("POLYGONS"):
            n = int(line.split()[1])
            faces = np.array([next(it).split()[1:] for _ in range(n)], dtype=np.int64).reshape(n, 3)
        elif line.startswith("SCALARS infarct"):
            next(it)  # LOOKUP_TABLE
            labels = VertexLabels(np.array([int(next(it)) for _ in range(len(positions))]))
    if positions is None or labels is None:
        raise MeshFormatError(f"{path}: missing POINTS or infarct scalars")
    return positions, faces, labels
