from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .model import (EndoGraph, ForwardCache, ModelState, NetworkConfig, backward, build_graph,
                    forward, glorot_bound, graph_from_faces, init_parameters, param_shapes, predict)

__all__ = [
    "EndoGraph", "ForwardCache", "ModelState", "NetworkConfig", "backward", "build_graph",
    "forward", "glorot_bound", "graph_from_faces", "init_parameters", "param_shapes", "predict",
    "load_checkpoint", "read_header", "save_checkpoint",
]
