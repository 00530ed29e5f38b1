import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motion2infarct.features import assemble_features
from motion2infarct.network import (ModelState, NetworkConfig, backward, build_graph, forward,
                                    glorot_bound, graph_from_faces, init_parameters, param_shapes,
                                    predict)
from motion2infarct.network import layers as L
from motion2infarct.synth import icosphere
from motion2infarct.training import LossConfig, total_loss
from tests.conftest import two_shell_mesh
from tests.gradcheck import TOL, check_layer, numeric_grad, rel_error

TINY = NetworkConfig(input_channels=7, gnn_layers=2, gnn_hidden=5, lstm_hidden=4, attn_dim=8,
                     ffn_hidden=6, mlp_hidden=5)


def random_graph(v, seed):
    rng = np.random.default_rng(seed)
    unit, tri = icosphere(1)
    perm = rng.permutation(12)
    inv = np.argsort(perm)
    return graph_from_faces(inv[tri], 12)


# -- graph -------------------------------------------------------------------

def test_graph_single_triangle():
    g = graph_from_faces([[0, 1, 2]], 3)
    assert g.degree.tolist() == [2, 2, 2]
    assert g.n_edges == 3


def test_graph_split_square():
    g = graph_from_faces([[0, 1, 2], [0, 2, 3]], 4)
    assert g.degree.tolist() == [3, 2, 3, 2]
    assert g.adjacency[1].tolist() == [0, 2]


def test_graph_closed_sphere_edges():
    for f in (1, 3):
        unit, tri = icosphere(f)
        g = graph_from_faces(tri, len(unit))
        assert g.n_edges == 3 * len(unit) - 6


def test_graph_isolated_vertex():
    with pytest.raises(ValueError, match="isolated vertex 3"):
        graph_from_faces([[0, 1, 2]], 4)


def test_mean_operator_rows_sum_to_one():
    unit, tri = icosphere(2)
    g = graph_from_faces(tri, len(unit))
    np.testing.assert_allclose(np.asarray(g.mean_op.sum(axis=1)).ravel(), 1.0)


# -- per-layer gradients -------------------------------------------------------

def test_grad_linear():
    rng = np.random.default_rng(0)
    x, W, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 6)), rng.normal(size=6)

    def bwd(R):
        dx, g = L.linear_backward(R, x, W)
        return {"x": dx, "W": g["W"], "b": g["b"]}
    worst, _ = check_layer(lambda: L.linear_forward(x, W, b)[0], bwd, {"x": x, "W": W, "b": b})
    assert worst < TOL


def test_grad_gnn():
    rng = np.random.default_rng(1)
    g = random_graph(12, 0)
    n = 3
    op, op_t = g.phase_operators(n)
    x, W, b = rng.normal(size=(n, 12, 4)), rng.normal(size=(8, 5)), rng.normal(size=5)

    def bwd(R):
        _, cache = L.gnn_forward(x, op, W, b)
        dx, gr = L.gnn_backward(R, cache, op_t, W)
        return {"x": dx, "W": gr["W"], "b": gr["b"]}
    worst, errs = check_layer(lambda: L.gnn_forward(x, op, W, b)[0], bwd, {"x": x, "W": W, "b": b})
    assert worst < TOL, errs


def test_grad_lstm():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 6, 3))
    Wx, Wh, b = rng.normal(size=(3, 16)) * 0.7, rng.normal(size=(4, 16)) * 0.7, rng.normal(size=16)

    def bwd(R):
        _, cache = L.lstm_forward(x, Wx, Wh, b)
        dx, gr = L.lstm_backward(R, cache, Wx, Wh)
        return {"x": dx, **gr}
    worst, errs = check_layer(lambda: L.lstm_forward(x, Wx, Wh, b)[0], bwd,
                              {"x": x, "Wx": Wx, "Wh": Wh, "b": b})
    assert worst < TOL, errs


def test_lstm_matches_reference_step():
    # one vertex, two steps, against the textbook gate equations
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 1, 2))
    Wx, Wh, b = rng.normal(size=(2, 12)), rng.normal(size=(3, 12)), rng.normal(size=12)
    sig = lambda a: 1 / (1 + np.exp(-a))
    h = c = np.zeros(3)
    for t in range(2):
        a = x[t, 0] @ Wx + h @ Wh + b
        i, f, g, o = sig(a[:3]), sig(a[3:6]), np.tanh(a[6:9]), sig(a[9:])
        c = f * c + i * g
        h = o * np.tanh(c)
    out, _ = L.lstm_forward(x, Wx, Wh, b)
    np.testing.assert_allclose(out[-1, 0], h, atol=1e-14)


def test_grad_layernorm():
    rng = np.random.default_rng(4)
    x, g, b = rng.normal(size=(3, 4, 6)), rng.normal(size=6), rng.normal(size=6)

    def bwd(R):
        _, cache = L.layernorm_forward(x, g, b)
        dx, gr = L.layernorm_backward(R, cache, g)
        return {"x": dx, "g": gr["g"], "b": gr["b"]}
    worst, errs = check_layer(lambda: L.layernorm_forward(x, g, b)[0], bwd, {"x": x, "g": g, "b": b})
    assert worst < TOL, errs


def attn_params(d, f, rng):
    p = {"ln1.g": 1 + 0.1 * rng.normal(size=d), "ln1.b": 0.1 * rng.normal(size=d),
         "ln2.g": 1 + 0.1 * rng.normal(size=d), "ln2.b": 0.1 * rng.normal(size=d),
         "ff1.W": rng.normal(size=(d, f)) * 0.5, "ff1.b": rng.normal(size=f) * 0.1,
         "ff2.W": rng.normal(size=(f, d)) * 0.5, "ff2.b": rng.normal(size=d) * 0.1}
    for k in "qkvo":
        p["W" + k] = rng.normal(size=(d, d)) * 0.5
        p["b" + k] = rng.normal(size=d) * 0.1
    return p


def test_grad_attention_block():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(4, 3, 8))
    p = attn_params(8, 6, rng)

    def bwd(R):
        _, cache = L.transformer_forward(z, p, 4)
        dz, gr = L.transformer_backward(R, cache, p, 4)
        return {"z": dz, **gr}
    worst, errs = check_layer(lambda: L.transformer_forward(z, p, 4)[0], bwd, {"z": z, **p})
    assert worst < TOL, errs
    # softmax ignores a per-query constant, so the key bias gradient vanishes
    assert np.abs(bwd(rng.normal(size=z.shape))["bk"]).max() < 1e-12


def test_grad_pool_concat():
    rng = np.random.default_rng(6)
    d = rng.normal(size=(7, 4))

    def bwd(R):
        _, arg = L.pool_concat_forward(d)
        return {"d": L.pool_concat_backward(R, arg)}
    worst, errs = check_layer(lambda: L.pool_concat_forward(d)[0], bwd, {"d": d})
    assert worst < TOL, errs


def test_grad_mlp():
    rng = np.random.default_rng(7)
    x, W1, b1 = rng.normal(size=(6, 9)), rng.normal(size=(9, 5)), rng.normal(size=5)
    W2, b2 = rng.normal(size=(5, 1)), rng.normal(size=1)

    def bwd(R):
        _, cache = L.mlp_forward(x, W1, b1, W2, b2)
        dx, gr = L.mlp_backward(R, cache, W1, W2)
        return {"x": dx, **gr}
    worst, errs = check_layer(lambda: L.mlp_forward(x, W1, b1, W2, b2)[0], bwd,
                              {"x": x, "W1": W1, "b1": b1, "W2": W2, "b2": b2})
    assert worst < TOL, errs


# -- end to end ----------------------------------------------------------------

def tiny_problem(attention=True, seed=0, n_phases=4):
    mesh, hyb = two_shell_mesh(n_phases=n_phases, resolution=1, seed=seed)
    feats = assemble_features(mesh, hyb)
    cfg = NetworkConfig(**{**TINY.to_dict(), "use_temporal_attention": attention})
    state = init_parameters(cfg, seed, feats.channel_layout)
    # perturb biases away from zero so no ReLU sits exactly on its kink
    rng = np.random.default_rng(seed + 100)
    params = {k: (a + 0.05 * rng.normal(size=a.shape) if a.ndim == 1 else a.copy())
              for k, a in state.params.items()}
    labels = (np.arange(hyb.n_endo) % 4 == 0).astype(float)
    return feats, build_graph(hyb), ModelState(params, cfg, seed, feats.channel_layout), labels


@pytest.mark.parametrize("attention", [True, False])
def test_end_to_end_loss_gradient(attention):
    feats, graph, state, labels = tiny_problem(attention)
    loss_cfg = LossConfig()
    params = {k: a.copy() for k, a in state.params.items()}
    x = np.array(feats.values)

    def loss():
        st_ = ModelState(params, state.config, state.seed)
        return total_loss(forward(x, graph, st_)[0], labels, loss_cfg)[0]

    logits, cache = forward(x, graph, state)
    _, g_logits, _ = total_loss(logits, labels, loss_cfg)
    grads, dx = backward(cache, g_logits)
    errs = {name: rel_error(grads[name], numeric_grad(loss, params[name])) for name in params}
    errs["features"] = rel_error(dx, numeric_grad(loss, x))
    assert max(errs.values()) < TOL, errs


def test_backward_rejects_foreign_state():
    feats, graph, state, _ = tiny_problem()
    _, cache = forward(feats, graph, state)
    other = init_parameters(state.config, 1)
    with pytest.raises(ValueError):
        backward(cache, np.zeros(graph.n_vertices), other)
    with pytest.raises(ValueError):
        backward(cache, np.zeros(3))


def test_forward_shape_checks():
    feats, graph, state, _ = tiny_problem()
    with pytest.raises(ValueError, match="channels"):
        forward(feats.values[..., :4], graph, state)
    with pytest.raises(ValueError, match="vertices"):
        forward(feats.values[:, :5], graph, state)
    bad = init_parameters(state.config, 0, ("position", "thickness", "motion"))
    with pytest.raises(ValueError, match="layout"):
        forward(feats, graph, bad)


def test_attention_rows_are_distributions():
    feats, graph, state, _ = tiny_problem(n_phases=5)
    _, cache = forward(feats, graph, state)
    attn = cache.attention
    assert attn.shape == (graph.n_vertices, 4, 5, 5)
    np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)
    _, cache = forward(feats, graph, tiny_problem(attention=False)[2])
    assert cache.attention is None


def test_permutation_equivariance():
    for seed in range(20):
        feats, graph, state, _ = tiny_problem(seed=seed)
        rng = np.random.default_rng(seed)
        perm = rng.permutation(graph.n_vertices)
        inv = np.argsort(perm)
        mesh, hyb = two_shell_mesh(n_phases=4, resolution=1, seed=seed)
        g2 = graph_from_faces(inv[hyb.endo_faces], graph.n_vertices)
        a, _ = forward(feats.values, graph, state)
        b, _ = forward(feats.values[:, perm], g2, state)
        np.testing.assert_allclose(b, a[perm], atol=1e-6)


# -- init / predict ------------------------------------------------------------

def test_init_bounds_and_determinism():
    cfg = NetworkConfig()
    a, b = init_parameters(cfg, 7), init_parameters(cfg, 7)
    c = init_parameters(cfg, 8)
    for name, shape in param_shapes(cfg).items():
        np.testing.assert_array_equal(a.params[name], b.params[name])
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            assert glorot_bound(shape) == bound
            assert np.abs(a.params[name]).max() <= bound
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)
    h = cfg.lstm_hidden
    for i in range(2):
        bias = a.params[f"lstm{i}.b"]
        assert bias[h:2 * h].tolist() == [1.0] * h
        assert not bias[:h].any() and not bias[2 * h:].any()
    assert not a.params["gnn0.b"].any() and not a.params["mlp.b2"].any()
    with pytest.raises(ValueError):
        a.params["gnn0.W"][0, 0] = 1.0


def test_ablation_isolation():
    full = init_parameters(NetworkConfig(), 3)
    lite = init_parameters(NetworkConfig(use_temporal_attention=False), 3)
    assert set(full.params) - set(lite.params) == {k for k in full.params if k.startswith("attn.")}
    for k, arr in lite.params.items():
        np.testing.assert_array_equal(arr, full.params[k])


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(lstm_layers=3)
    with pytest.raises(ValueError):
        NetworkConfig(attn_heads=2)
    with pytest.raises(ValueError):
        NetworkConfig(attn_dim=10)


def test_predict_rules():
    assert predict(np.array([0.0])).labels.tolist() == [1]
    assert predict(np.full(5, -10.0)).labels.sum() == 0
    with pytest.raises(ValueError):
        predict(np.zeros(2), threshold=1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 0.98), st.floats(0.001, 0.5))
def test_property_threshold_monotone(seed, t, dt):
    logits = np.random.default_rng(seed).normal(size=50) * 3
    lo = predict(logits, t).labels
    hi = predict(logits, min(t + dt, 0.99)).labels
    assert np.all(hi <= lo)
