"""Per-vertex, per-phase input features for the endocardial surface.

Channels, in fixed order: position (3), motion (3), thickness (1).
Motion is the cyclic first difference of positions between consecutive
phases; thickness is the distance to the nearest epicardial point of the
same phase.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .mesh import HybridInput, MeshSequence
from .spatial import KDTree

CHANNEL_WIDTHS = {"position": 3, "motion": 3, "thickness": 1}


@dataclass(frozen=True, eq=False)
class FeatureTensor:
    """Feature values shaped ``(n_phases, n_endo, n_channels)``."""

    values: np.ndarray
    channel_layout: tuple
    normalization: dict

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    def channel_slice(self, name: str) -> slice:
        start = 0
        for ch in self.channel_layout:
            if ch == name:
                return slice(start, start + CHANNEL_WIDTHS[ch])
            start += CHANNEL_WIDTHS[ch]
        raise KeyError(f"channel {name!r} not in layout {self.channel_layout}")


def compute_motion(mesh: MeshSequence, hybrid: HybridInput) -> np.ndarray:
    """``motion[t, v] = x[(t + 1) mod N, v] - x[t, v]`` in mm."""
    pos = mesh.positions[:, hybrid.endo_vertices]
    return np.roll(pos, -1, axis=0) - pos


def compute_thickness(mesh: MeshSequence, hybrid: HybridInput) -> np.ndarray:
    """Nearest-epicardial-point distance for every endo vertex and phase, ``(N, V)``."""
    if hybrid.epi_points.size == 0:
        raise ValueError("no epicardial points")
    out = np.empty((mesh.n_phases, hybrid.n_endo))
    for t in range(mesh.n_phases):
        d2, _ = KDTree(mesh.positions[t, hybrid.epi_points]).query(
            mesh.positions[t, hybrid.endo_vertices], 1)
        out[t] = np.sqrt(d2[:, 0])
    return out


def channel_layout(motion=True, thickness=True) -> tuple:
    return ("position",) + (("motion",) if motion else ()) + (("thickness",) if thickness else ())


def assemble_features(mesh: MeshSequence, hybrid: HybridInput, motion=True, thickness=True,
                      position=True) -> FeatureTensor:
    """Normalized feature tensor for the enabled channels.

    Positions are centred on the ED endocardial centroid and every channel is
    divided by the ED bounding-sphere radius (max distance to that centroid).
    """
    if not position:
        raise ValueError("the position channel cannot be disabled")
    pos = mesh.positions[:, hybrid.endo_vertices]
    ed = pos[mesh.ed_phase]
    centroid = ed.mean(axis=0)
    scale = float(np.sqrt(((ed - centroid) ** 2).sum(axis=1)).max())
    if not scale > 0:
        raise ValueError("degenerate endocardium: zero bounding radius")
    parts = [(pos - centroid) / scale]
    if motion:
        parts.append(compute_motion(mesh, hybrid) / scale)
    if thickness:
        parts.append(compute_thickness(mesh, hybrid)[..., None] / scale)
    values = np.concatenate(parts, axis=2)
    values.setflags(write=False)
    return FeatureTensor(values, channel_layout(motion, thickness),
                         {"centroid_mm": centroid.tolist(), "scale_mm": scale})


def save_features(ft: FeatureTensor, path_stem):
    """Dump ``<stem>.bin`` (little-endian float64, C order) plus ``<stem>.json``."""
    np.ascontiguousarray(ft.values, dtype="<f8").tofile(f"{path_stem}.bin")
    meta = {"shape": list(ft.shape), "dtype": "float64", "byte_order": "little",
            "axes": ["phase", "vertex", "channel"], "channel_layout": list(ft.channel_layout),
            "normalization": ft.normalization}
    with open(f"{path_stem}.json", "w") as fh:
        json.dump(meta, fh, indent=1)


def load_features(path_stem) -> FeatureTensor:
    with open(f"{path_stem}.json") as fh:
        meta = json.load(fh)
    values = np.fromfile(f"{path_stem}.bin", dtype="<f8").reshape(meta["shape"])
    values.setflags(write=False)
    return FeatureTensor(values, tuple(meta["channel_layout"]), meta["normalization"])
