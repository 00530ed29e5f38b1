"""Vertex-wise infarct segmentation network: GNN -> LSTM x2 -> temporal attention -> pooling -> MLP."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from ..mesh import HybridInput, VertexLabels
from . import layers as L


@dataclass(frozen=True)
class NetworkConfig:
    input_channels: int = 7
    gnn_layers: int = 2
    gnn_hidden: int = 32
    lstm_hidden: int = 32
    lstm_layers: int = 2
    attn_heads: int = 4
    attn_dim: int = 32
    ffn_hidden: int = 64
    mlp_hidden: int = 32
    use_temporal_attention: bool = True

    def __post_init__(self):
        if self.lstm_layers != 2:
            raise ValueError("lstm_layers is fixed at 2")
        if self.attn_heads != 4:
            raise ValueError("attn_heads is fixed at 4")
        if self.attn_dim % self.attn_heads:
            raise ValueError("attn_dim must be divisible by attn_heads")
        dims = (self.input_channels, self.gnn_layers, self.gnn_hidden, self.lstm_hidden,
                self.attn_dim, self.ffn_hidden, self.mlp_hidden)
        if min(dims) < 1:
            raise ValueError("all network dimensions must be >= 1")

    def to_dict(self):
        return asdict(self)


def param_shapes(cfg: NetworkConfig) -> dict:
    """Ordered ``name -> shape`` for every learnable tensor."""
    s = {}
    f = cfg.input_channels
    for i in range(cfg.gnn_layers):
        s[f"gnn{i}.W"] = (2 * f, cfg.gnn_hidden)
        s[f"gnn{i}.b"] = (cfg.gnn_hidden,)
        f = cfg.gnn_hidden
    h = cfg.lstm_hidden
    for i in range(cfg.lstm_layers):
        s[f"lstm{i}.Wx"] = (f, 4 * h)
        s[f"lstm{i}.Wh"] = (h, 4 * h)
        s[f"lstm{i}.b"] = (4 * h,)
        f = h
    d = cfg.attn_dim
    s["fc.W"] = (f, d)
    s["fc.b"] = (d,)
    if cfg.use_temporal_attention:
        s["attn.ln1.g"] = (d,)
        s["attn.ln1.b"] = (d,)
        for name in "qkvo":
            s[f"attn.W{name}"] = (d, d)
            s[f"attn.b{name}"] = (d,)
        s["attn.ln2.g"] = (d,)
        s["attn.ln2.b"] = (d,)
        s["attn.ff1.W"] = (d, cfg.ffn_hidden)
        s["attn.ff1.b"] = (cfg.ffn_hidden,)
        s["attn.ff2.W"] = (cfg.ffn_hidden, d)
        s["attn.ff2.b"] = (d,)
    s["mlp.W1"] = (3 * d, cfg.mlp_hidden)
    s["mlp.b1"] = (cfg.mlp_hidden,)
    s["mlp.W2"] = (cfg.mlp_hidden, 1)
    s["mlp.b2"] = (1,)
    return s


def glorot_bound(shape) -> float:
    return float(np.sqrt(6.0 / (shape[0] + shape[1])))


@dataclass(frozen=True, eq=False)
class ModelState:
    """Network parameters (read-only arrays) with the config and init seed."""

    params: dict
    config: NetworkConfig
    seed: int = 0
    channel_layout: tuple = ()

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if list(self.params) != list(shapes):
            raise ValueError("parameter names do not match the network config")
        frozen = {}
        for name, arr in self.params.items():
            a = np.array(arr, dtype=np.float64)
            if a.shape != tuple(shapes[name]):
                raise ValueError(f"{name}: shape {a.shape} != expected {shapes[name]}")
            if not np.isfinite(a).all():
                raise FloatingPointError(f"non-finite parameter {name}")
            a.setflags(write=False)
            frozen[name] = a
        object.__setattr__(self, "params", frozen)

    def replace(self, params) -> "ModelState":
        return ModelState(params, self.config, self.seed, self.channel_layout)

    @property
    def n_parameters(self) -> int:
        return sum(a.size for a in self.params.values())


def init_parameters(config: NetworkConfig, seed: int, channel_layout=()) -> ModelState:
    """Glorot-uniform weights, zero biases, unit layer-norm gains, forget bias +1.

    Every tensor draws from its own stream seeded by ``(seed, crc32(name))``,
    so toggling a block leaves the other tensors unchanged.
    """
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if len(shape) == 2:
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            bound = glorot_bound(shape)
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif leaf == "g":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
        if name.startswith("lstm") and leaf == "b":
            h = shape[0] // 4
            params[name][h:2 * h] = 1.0
    return ModelState(params, config, seed, tuple(channel_layout))


# -- graph ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EndoGraph:
    """1-ring adjacency of the endocardial triangulation."""

    adjacency: tuple
    degree: np.ndarray
    mean_op: sp.csr_matrix
    mean_op_t: sp.csr_matrix
    _blocks: dict = field(default_factory=dict, repr=False)

    def phase_operators(self, n_phases):
        """Neighbour-mean operator and its transpose on ``n_phases`` stacked copies."""
        if n_phases not in self._blocks:
            eye = sp.identity(n_phases, format="csr")
            op = sp.csr_matrix(sp.kron(eye, self.mean_op, format="csr"))
            op.sort_indices()
            op_t = sp.csr_matrix(op.T)
            op_t.sort_indices()
            self._blocks[n_phases] = (op, op_t)
        return self._blocks[n_phases]

    @property
    def n_vertices(self) -> int:
        return len(self.adjacency)

    @property
    def n_edges(self) -> int:
        return int(self.degree.sum()) // 2


def graph_from_faces(faces, n_vertices) -> EndoGraph:
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size == 0:
        raise ValueError("no endocardial faces")
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = e[e[:, 0] != e[:, 1]]
    e = np.concatenate([e, e[:, ::-1]])
    e = np.unique(e, axis=0)
    adj = sp.csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n_vertices, n_vertices))
    adj.sort_indices()
    degree = np.diff(adj.indptr)
    isolated = np.flatnonzero(degree == 0)
    if isolated.size:
        raise ValueError(f"isolated vertex {isolated[0]} in endocardial graph")
    mean_op = sp.diags(1.0 / degree) @ adj
    mean_op = sp.csr_matrix(mean_op)
    mean_op.sort_indices()
    neighbors = tuple(adj.indices[adj.indptr[i]:adj.indptr[i + 1]].copy() for i in range(n_vertices))
    return EndoGraph(neighbors, degree, mean_op, sp.csr_matrix(mean_op.T))


def build_graph(hybrid: HybridInput) -> EndoGraph:
    return graph_from_faces(hybrid.endo_faces, hybrid.n_endo)


# -- forward / backward -----------------------------------------------------

def _check(name, arr):
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite activation in {name}")


def _sub(params, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


@dataclass(eq=False)
class ForwardCache:
    state: ModelState
    graph: EndoGraph
    shape: tuple
    stages: dict = field(default_factory=dict)

    @property
    def attention(self):
        """Attention weights ``(V, heads, N, N)``, or None when disabled."""
        if "attn" not in self.stages:
            return None
        return self.stages["attn"][1][4]


def forward(features, graph: EndoGraph, state: ModelState):
    """Per-vertex logits for a ``(N, V, C)`` feature tensor.

    Returns ``(logits, cache)``; the cache feeds :func:`backward`.
    """
    cfg = state.config
    p = state.params
    values = getattr(features, "values", features)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3:
        raise ValueError(f"features must be (N, V, C), got {values.shape}")
    n, v, c = values.shape
    if c != cfg.input_channels:
        raise ValueError(f"feature tensor has {c} channels, network expects {cfg.input_channels}")
    if v != graph.n_vertices:
        raise ValueError(f"feature tensor has {v} vertices, graph has {graph.n_vertices}")
    layout = getattr(features, "channel_layout", None)
    if layout is not None and state.channel_layout and tuple(layout) != tuple(state.channel_layout):
        raise ValueError(f"channel layout {tuple(layout)} != model layout {state.channel_layout}")

    cache = ForwardCache(state, graph, (n, v, c))
    st = cache.stages
    x = np.ascontiguousarray(values)
    op, _ = graph.phase_operators(n)
    for i in range(cfg.gnn_layers):
        x, st[f"gnn{i}"] = L.gnn_forward(x, op, p[f"gnn{i}.W"], p[f"gnn{i}.b"])
        _check(f"gnn{i}", x)
    for i in range(cfg.lstm_layers):
        x, st[f"lstm{i}"] = L.lstm_forward(x, p[f"lstm{i}.Wx"], p[f"lstm{i}.Wh"], p[f"lstm{i}.b"])
        _check(f"lstm{i}", x)
    x, st["fc"] = L.linear_forward(x, p["fc.W"], p["fc.b"])
    _check("fc", x)
    if cfg.use_temporal_attention:
        x, st["attn"] = L.transformer_forward(x, _sub(p, "attn."), cfg.attn_heads)
        _check("attn", x)
    desc = x.mean(axis=0)
    pooled, st["pool"] = L.pool_concat_forward(desc)
    logits, st["mlp"] = L.mlp_forward(pooled, p["mlp.W1"], p["mlp.b1"], p["mlp.W2"], p["mlp.b2"])
    _check("mlp", logits)
    return logits, cache


def backward(cache: ForwardCache, grad_logits, state: ModelState | None = None):
    """Gradients of ``sum(logits * grad_logits)``.

    Returns ``(param_grads, feature_grads)`` with feature grads shaped like
    the forward input ``(N, V, C)``.
    """
    if state is not None and state is not cache.state:
        raise ValueError("cache was produced by a different model state")
    n, v, c = cache.shape
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.shape != (v,):
        raise ValueError(f"grad_logits shape {g.shape} != ({v},)")
    cfg = cache.state.config
    p = cache.state.params
    st = cache.stages
    grads = {}

    dpool, gm = L.mlp_backward(g, st["mlp"], p["mlp.W1"], p["mlp.W2"])
    grads.update({f"mlp.{k}": val for k, val in gm.items()})
    ddesc = L.pool_concat_backward(dpool, st["pool"])
    dx = np.broadcast_to(ddesc[None] / n, (n, v, ddesc.shape[1]))
    if cfg.use_temporal_attention:
        dx, ga = L.transformer_backward(dx, st["attn"], _sub(p, "attn."), cfg.attn_heads)
        grads.update({f"attn.{k}": val for k, val in ga.items()})
    dx, gf = L.linear_backward(dx, st["fc"], p["fc.W"])
    grads.update({f"fc.{k}": val for k, val in gf.items()})
    for i in reversed(range(cfg.lstm_layers)):
        dx, gl = L.lstm_backward(dx, st[f"lstm{i}"], p[f"lstm{i}.Wx"], p[f"lstm{i}.Wh"])
        grads.update({f"lstm{i}.{k}": val for k, val in gl.items()})
    _, op_t = cache.graph.phase_operators(n)
    for i in reversed(range(cfg.gnn_layers)):
        dx, gg = L.gnn_backward(dx, st[f"gnn{i}"], op_t, p[f"gnn{i}.W"])
        grads.update({f"gnn{i}.{k}": val for k, val in gg.items()})
    ordered = {name: grads[name].reshape(p[name].shape) for name in p}
    return ordered, np.ascontiguousarray(dx)


def predict(logits, threshold=0.5) -> VertexLabels:
    """Label 1 where ``sigmoid(logit) >= threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    return VertexLabels((expit(np.asarray(logits)) >= threshold).astype(np.int8))
