"""Checkpoint files: magic, JSON header, little-endian float64 blob.

Layout::

    b"M2ICKPT1" | uint64 LE header length | header (UTF-8 JSON) | tensor blob

The header holds the network config, init seed, channel layout and a table
of ``{name, shape, offset, nbytes}`` entries into the blob. Optimizer
moments are stored as extra tensors named ``adam.m/<param>`` and
``adam.v/<param>``.
"""

import json
import struct

import numpy as np

from .model import ModelState, NetworkConfig

MAGIC = b"M2ICKPT1"


def save_checkpoint(path, state: ModelState, moments=None, extra=None):
    tensors = list(state.params.items())
    if moments is not None:
        tensors += [(f"adam.m/{k}", a) for k, a in moments.m.items()]
        tensors += [(f"adam.v/{k}", a) for k, a in moments.v.items()]
    table, blobs, offset = [], [], 0
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": 1,
        "dtype": "<f8",
        "config": state.config.to_dict(),
        "seed": state.seed,
        "channel_layout": list(state.channel_layout),
        "adam_step": None if moments is None else moments.t,
        "tensors": table,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(hlen).decode("utf-8"))


def load_checkpoint(path):
    """Return ``(state, moments_or_None, header)``."""
    from ..training import AdamMoments

    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        blob = fh.read()
    arrays = {}
    for entry in header["tensors"]:
        chunk = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
    cfg = NetworkConfig(**header["config"])
    params = {k: a for k, a in arrays.items() if not k.startswith("adam.")}
    state = ModelState(params, cfg, header["seed"], tuple(header["channel_layout"]))
    moments = None
    if header.get("adam_step") is not None:
        m = {k[len("adam.m/"):]: a for k, a in arrays.items() if k.startswith("adam.m/")}
        v = {k[len("adam.v/"):]: a for k, a in arrays.items() if k.startswith("adam.v/")}
        moments = AdamMoments(m, v, header["adam_step"])
    return state, moments, header
