"""Layer kernels with explicit reverse-mode gradients.

Activations are laid out time-major, ``(phase, vertex, channel)``, so every
per-phase slice is contiguous. Every ``*_forward`` returns
``(output, cache)``; the matching ``*_backward`` takes the upstream gradient
and the cache and returns ``(input_grad, param_grads)``.
"""

import numpy as np


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def sigmoid(x):
    # np.exp is vectorized; scipy's expit and np.tanh are several times slower here
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def tanh(x):
    return 2.0 * sigmoid(2.0 * x) - 1.0


# -- dense ------------------------------------------------------------------

def linear_forward(x, W, b):
    return x @ W + b, x


def linear_backward(dy, x, W):
    dW = _flat(x).T @ _flat(dy)
    db = _flat(dy).sum(axis=0)
    return dy @ W.T, {"W": dW, "b": db}


# -- graph convolution --------------------------------------------------------

def gnn_forward(x, mean_op, W, b):
    """``relu([mean_nbr(x) | x] @ W + b)`` for every phase.

    ``mean_op`` acts on the flattened ``(phase * vertex)`` axis (block diagonal).
    """
    n, v, f = x.shape
    agg = (mean_op @ x.reshape(n * v, f)).reshape(n, v, f)
    cat = np.concatenate([agg, x], axis=2)
    z = cat @ W + b
    return np.maximum(z, 0.0), (cat, z)


def gnn_backward(dy, cache, mean_op_t, W):
    cat, z = cache
    dz = np.where(z > 0.0, dy, 0.0)
    dW = _flat(cat).T @ _flat(dz)
    db = _flat(dz).sum(axis=0)
    n, v, f2 = cat.shape
    f = f2 // 2
    dagg = dz @ W[:f].T
    dx = dz @ W[f:].T + (mean_op_t @ dagg.reshape(n * v, f)).reshape(n, v, f)
    return dx, {"W": dW, "b": db}


# -- recurrent ----------------------------------------------------------------

def lstm_forward(x, Wx, Wh, b):
    """Single LSTM layer over the phase axis, gates ordered (i, f, g, o)."""
    n, v, _ = x.shape
    hd = Wh.shape[0]
    xw = x @ Wx + b
    # g-gate pre-activations doubled so one sigmoid yields tanh via 2*s(2a) - 1
    gscale = np.ones(4 * hd)
    gscale[2 * hd:3 * hd] = 2.0
    gates = np.empty((n, v, 4 * hd))
    cs = np.empty((n, v, hd))
    tcs = np.empty((n, v, hd))
    hs = np.empty((n, v, hd))
    h = np.zeros((v, hd))
    c = np.zeros((v, hd))
    for t in range(n):
        a = xw[t]
        if t:
            a = a + h @ Wh
        gt = gates[t]
        gt[:] = sigmoid(a * gscale)
        g = gt[:, 2 * hd:3 * hd]
        g *= 2.0
        g -= 1.0
        c = gt[:, :hd] * g if t == 0 else gt[:, hd:2 * hd] * c + gt[:, :hd] * g
        tc = tanh(c)
        h = gt[:, 3 * hd:] * tc
        cs[t] = c
        tcs[t] = tc
        hs[t] = h
    return hs, (x, gates, cs, tcs, hs)


def lstm_backward(dhs, cache, Wx, Wh):
    x, gates, cs, tcs, hs = cache
    n, v, hd = hs.shape
    da_all = np.empty_like(gates)
    dh_next = None
    dc_next = None
    for t in range(n - 1, -1, -1):
        gt = gates[t]
        i, f, g, o = gt[:, :hd], gt[:, hd:2 * hd], gt[:, 2 * hd:3 * hd], gt[:, 3 * hd:]
        tc = tcs[t]
        dh = dhs[t] if dh_next is None else dhs[t] + dh_next
        dc = dh * o * (1.0 - tc * tc)
        if dc_next is not None:
            dc += dc_next
        da = da_all[t]
        da[:, :hd] = dc * g * i * (1.0 - i)
        if t:
            da[:, hd:2 * hd] = dc * cs[t - 1] * f * (1.0 - f)
        else:
            da[:, hd:2 * hd] = 0.0
        da[:, 2 * hd:3 * hd] = dc * i * (1.0 - g * g)
        da[:, 3 * hd:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        if t:
            dh_next = da @ Wh.T
    dWh = _flat(hs[:-1]).T @ _flat(da_all[1:])
    dWx = _flat(x).T @ _flat(da_all)
    db = _flat(da_all).sum(axis=0)
    return da_all @ Wx.T, {"Wx": dWx, "Wh": dWh, "b": db}


# -- normalization / attention ------------------------------------------------

LN_EPS = 1e-5


def layernorm_forward(x, g, b):
    d = x.shape[-1]
    avg = np.full((d, 1), 1.0 / d)
    xc = x - x @ avg
    rstd = 1.0 / np.sqrt((xc * xc) @ avg + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def layernorm_backward(dy, cache, g):
    xhat, rstd = cache
    d = xhat.shape[-1]
    avg = np.full((d, 1), 1.0 / d)
    dg = _flat(dy * xhat).sum(axis=0)
    db = _flat(dy).sum(axis=0)
    dxh = dy * g
    dx = rstd * (dxh - dxh @ avg - xhat * ((dxh * xhat) @ avg))
    return dx, {"g": dg, "b": db}


def positional_encoding(n, d):
    """Sinusoidal encoding over phase index, ``(n, 1, d)``."""
    pos = np.arange(n)[:, None]
    rate = 1.0 / 10000.0 ** (2 * (np.arange(d) // 2) / d)
    ang = pos * rate[None, :]
    return np.where(np.arange(d) % 2 == 0, np.sin(ang), np.cos(ang))[:, None, :]


def _heads(t, heads):
    # (N, V, D) -> (V, heads, N, dh)
    n, v, d = t.shape
    return np.ascontiguousarray(t.reshape(n, v, heads, d // heads).transpose(1, 2, 0, 3))


def _merge(t):
    # (V, heads, N, dh) -> (N, V, D)
    v, h, n, dh = t.shape
    return t.transpose(2, 0, 1, 3).reshape(n, v, h * dh)


def mha_forward(x, p, heads):
    """Multi-head self-attention across phases, independently per vertex.

    ``p`` maps Wq, bq, Wk, bk, Wv, bv, Wo, bo to arrays.
    """
    d = x.shape[2]
    scale = 1.0 / np.sqrt(d // heads)
    q = _heads(x @ p["Wq"] + p["bq"], heads)
    k = _heads(x @ p["Wk"] + p["bk"], heads)
    val = _heads(x @ p["Wv"] + p["bv"], heads)
    s = q @ k.transpose(0, 1, 3, 2)
    s *= scale
    s -= s.max(axis=-1, keepdims=True)
    attn = np.exp(s)
    attn /= attn.sum(axis=-1, keepdims=True)
    o = _merge(attn @ val)
    y = o @ p["Wo"] + p["bo"]
    return y, (x, q, k, val, attn, o, scale)


def mha_backward(dy, cache, p, heads):
    x, q, k, val, attn, o, scale = cache
    grads = {"Wo": _flat(o).T @ _flat(dy), "bo": _flat(dy).sum(axis=0)}
    do = _heads(dy @ p["Wo"].T, heads)
    dattn = do @ val.transpose(0, 1, 3, 2)
    dval = attn.transpose(0, 1, 3, 2) @ do
    dattn -= (dattn * attn).sum(axis=-1, keepdims=True)
    dattn *= attn
    dattn *= scale
    dq = _merge(dattn @ k)
    dk = _merge(dattn.transpose(0, 1, 3, 2) @ q)
    dv = _merge(dval)
    dx = None
    for name, dt in (("q", dq), ("k", dk), ("v", dv)):
        grads["W" + name] = _flat(x).T @ _flat(dt)
        grads["b" + name] = _flat(dt).sum(axis=0)
        term = dt @ p["W" + name].T
        dx = term if dx is None else dx + term
    return dx, grads


def transformer_forward(z, p, heads):
    """Pre-norm block: ``u = x + MHA(LN(x)); y = u + FFN(LN(u))`` with ``x = z + PE``."""
    x0 = z + positional_encoding(z.shape[0], z.shape[2])
    y1, c_ln1 = layernorm_forward(x0, p["ln1.g"], p["ln1.b"])
    a, c_att = mha_forward(y1, p, heads)
    u = x0 + a
    y2, c_ln2 = layernorm_forward(u, p["ln2.g"], p["ln2.b"])
    f1 = y2 @ p["ff1.W"] + p["ff1.b"]
    r = np.maximum(f1, 0.0)
    out = u + r @ p["ff2.W"] + p["ff2.b"]
    return out, (c_ln1, c_att, c_ln2, y2, f1, r)


def transformer_backward(dout, cache, p, heads):
    c_ln1, c_att, c_ln2, y2, f1, r = cache
    grads = {"ff2.W": _flat(r).T @ _flat(dout), "ff2.b": _flat(dout).sum(axis=0)}
    df1 = np.where(f1 > 0.0, dout @ p["ff2.W"].T, 0.0)
    grads["ff1.W"] = _flat(y2).T @ _flat(df1)
    grads["ff1.b"] = _flat(df1).sum(axis=0)
    du, g_ln2 = layernorm_backward(df1 @ p["ff1.W"].T, c_ln2, p["ln2.g"])
    du += dout
    dy1, g_att = mha_backward(du, c_att, p, heads)
    dx0, g_ln1 = layernorm_backward(dy1, c_ln1, p["ln1.g"])
    dx0 += du
    grads.update(g_att)
    grads.update({"ln1.g": g_ln1["g"], "ln1.b": g_ln1["b"], "ln2.g": g_ln2["g"], "ln2.b": g_ln2["b"]})
    return dx0, grads


# -- pooling / head -----------------------------------------------------------

def pool_concat_forward(desc):
    """``[desc | max_v desc | mean_v desc]`` broadcast to every vertex."""
    arg = desc.argmax(axis=0)
    gmax = desc.max(axis=0)
    gmean = desc.mean(axis=0)
    out = np.concatenate([desc, np.broadcast_to(gmax, desc.shape),
                          np.broadcast_to(gmean, desc.shape)], axis=1)
    return out, arg


def pool_concat_backward(dout, arg):
    v, d3 = dout.shape
    d = d3 // 3
    ddesc = dout[:, :d] + dout[:, 2 * d:].sum(axis=0) / v
    np.add.at(ddesc, (arg, np.arange(d)), dout[:, d:2 * d].sum(axis=0))
    return ddesc


def mlp_forward(x, W1, b1, W2, b2):
    z = x @ W1 + b1
    h = np.maximum(z, 0.0)
    return (h @ W2 + b2)[:, 0], (x, z, h)


def mlp_backward(dlogit, cache, W1, W2):
    x, z, h = cache
    dl = dlogit[:, None]
    grads = {"W2": h.T @ dl, "b2": dl.sum(axis=0)}
    dz = np.where(z > 0.0, dl @ W2.T, 0.0)
    grads["W1"] = x.T @ dz
    grads["b1"] = dz.sum(axis=0)
    return dz @ W1.T, grads
