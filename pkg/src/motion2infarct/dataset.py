"""Case directories on disk.

A dataset directory holds one sub-directory per case::

    <data>/<case>/manifest.json   mesh sequence (see :mod:`motion2infarct.mesh`)
    <data>/<case>/labels.json     ground-truth endocardial labels (optional)
    <data>/<case>/scar.csv        scar points (optional)
    <data>/split.json             {"train": [...], "val": [...], "test": [...]}
"""

import json
import os

from .mesh import load_labels, load_mesh_sequence


def case_names(data_dir):
    return sorted(d for d in os.listdir(data_dir)
                  if os.path.isfile(os.path.join(data_dir, d, "manifest.json")))


def load_split(path):
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("train", "val", "test"):
        doc.setdefault(key, [])
    return doc


def labels_path(root, name):
    """``<root>/<name>.json`` or ``<root>/<name>/labels.json``, whichever exists."""
    for cand in (os.path.join(root, f"{name}.json"), os.path.join(root, name, "labels.json")):
        if os.path.isfile(cand):
            return cand
    raise FileNotFoundError(f"no labels for case {name!r} under {root}")


def load_case(data_dir, name, with_labels=True):
    mesh = load_mesh_sequence(os.path.join(data_dir, name, "manifest.json"))
    labels = load_labels(labels_path(data_dir, name)) if with_labels else None
    return mesh, labels
