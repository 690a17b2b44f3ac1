"""Fixed layer set with hand-written backward passes.

Every ``*_forward`` returns ``(output, backward)`` where ``backward`` maps the
output gradient to ``(input gradient(s), {param_name: gradient})``.
Arrays are float64 throughout.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


def _expect(cond: bool, layer: str, msg: str):
    if not cond:
        raise ShapeError(f"{layer}: {msg}")


# -- activations ------------------------------------------------------------

def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_rows(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def activation_forward(kind: str, x):
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        y = np.maximum(x, 0.0)
        return y, lambda dy: dy * (x > 0)
    if kind == "tanh":
        y = np.tanh(x)
        return y, lambda dy: dy * (1.0 - y * y)
    if kind == "sigmoid":
        y = sigmoid(x)
        return y, lambda dy: dy * y * (1.0 - y)
    if kind == "softmax_rows":
        y = softmax_rows(x)
        return y, lambda dy: y * (dy - (dy * y).sum(axis=-1, keepdims=True))
    raise ValueError(f"unknown activation {kind!r}")


def activation(kind: str, x):
    return activation_forward(kind, x)[0]


# -- dense ------------------------------------------------------------------

def dense_forward(x, W, b):
    """``y = x @ W + b`` for x of shape [..., I], W [I, O]."""
    _expect(x.shape[-1] == W.shape[0], "dense",
            f"input has {x.shape[-1]} features, weight expects {W.shape[0]}")
    _expect(b.shape == (W.shape[1],), "dense", f"bias shape {b.shape} != ({W.shape[1]},)")
    y = x @ W + b

    def backward(dy):
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        return dy @ W.T, {"W": x2.T @ dy2, "b": dy2.sum(axis=0)}

    return y, backward


# -- GRU --------------------------------------------------------------------

def gru_step(gx, h, Wh, bh):
    """One GRU update given the precomputed input projection ``gx = x @ Wx + bx``.

    Gate order in the 3H axis is (reset, update, candidate)::

        r = sigmoid(gx_r + h Wh_r + bh_r)
        z = sigmoid(gx_z + h Wh_z + bh_z)
        n = tanh(gx_n + r * (h Wh_n + bh_n))
        h' = (1 - z) * n + z * h
    """
    H = h.shape[-1]
    gh = h @ Wh + bh
    rz = sigmoid(gx[:, :2 * H] + gh[:, :2 * H])
    r, z = rz[:, :H], rz[:, H:]
    hn = gh[:, 2 * H:]
    n = np.tanh(gx[:, 2 * H:] + r * hn)
    h_new = (1.0 - z) * n + z * h

    def backward(dh_new):
        dz = dh_new * (h - n)
        dn = dh_new * (1.0 - z)
        dh = dh_new * z
        dn_pre = dn * (1.0 - n * n)
        dr = dn_pre * hn
        dgh = np.empty_like(gh)
        dgh[:, :H] = dr * r * (1.0 - r)
        dgh[:, H:2 * H] = dz * z * (1.0 - z)
        dgh[:, 2 * H:] = dn_pre * r
        dgx = dgh.copy()
        dgx[:, 2 * H:] = dn_pre
        dh = dh + dgh @ Wh.T
        return dgx, dh, h.T @ dgh, dgh.sum(axis=0)

    return h_new, backward


def gru_cell_forward(x, h, Wx, Wh, bx, bh):
    """Single GRU cell: ([B, I], [B, H]) -> [B, H]."""
    H = h.shape[-1]
    _expect(x.ndim == 2 and h.ndim == 2 and x.shape[0] == h.shape[0], "gru_cell",
            f"expected x [B,I] and h [B,H] with equal B, got {x.shape} and {h.shape}")
    _expect(Wx.shape == (x.shape[1], 3 * H), "gru_cell",
            f"Wx shape {Wx.shape} != ({x.shape[1]}, {3 * H})")
    _expect(Wh.shape == (H, 3 * H), "gru_cell", f"Wh shape {Wh.shape} != ({H}, {3 * H})")
    gx = x @ Wx + bx
    h_new, step_back = gru_step(gx, h, Wh, bh)

    def backward(dh_new):
        dgx, dh, dWh, dbh = step_back(dh_new)
        return (dgx @ Wx.T, dh), {"Wx": x.T @ dgx, "Wh": dWh, "bx": dgx.sum(axis=0), "bh": dbh}

    return h_new, backward


def gru_sequence_forward(x, h0, Wx, Wh, bx, bh, reverse=False):
    """Run a GRU over x [B, T, I]; returns all states [B, T, H].

    Input projections for all steps are done in one matmul.
    """
    B, T, _ = x.shape
    H = h0.shape[-1]
    _expect(Wx.shape == (x.shape[2], 3 * H), "gru", f"Wx shape {Wx.shape} vs input {x.shape}")
    gx = x @ Wx + bx
    hs = np.empty((B, T, H))
    backs = [None] * T
    h = h0
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        h, backs[t] = gru_step(gx[:, t], h, Wh, bh)
        hs[:, t] = h

    def backward(dhs, dh_last=None):
        dgx = np.empty_like(gx)
        dWh = np.zeros_like(Wh)
        dbh = np.zeros_like(bh)
        dh = np.zeros((B, H)) if dh_last is None else dh_last.copy()
        rev = range(T) if reverse else range(T - 1, -1, -1)
        for t in rev:
            dgx_t, dh, dWh_t, dbh_t = backs[t](dh + dhs[:, t])
            dgx[:, t] = dgx_t
            dWh += dWh_t
            dbh += dbh_t
        x2 = x.reshape(B * T, -1)
        dgx2 = dgx.reshape(B * T, -1)
        grads = {"Wx": x2.T @ dgx2, "Wh": dWh, "bx": dgx2.sum(axis=0), "bh": dbh}
        return (dgx @ Wx.T, dh), grads

    return hs, backward


# -- causal dilated convolution --------------------------------------------

def causal_conv1d_forward(x, W, b, dilation=1):
    """Left-padded dilated conv: x [B, T, C], W [K, C, F] -> [B, T, F].

    Tap k reads ``x[t - (K - 1 - k) * dilation]``; out-of-range reads are zero.
    """
    _expect(x.ndim == 3, "causal_conv1d", f"expected [B,T,C], got {x.shape}")
    K, C, F = W.shape
    _expect(x.shape[2] == C, "causal_conv1d", f"input has {x.shape[2]} channels, weight expects {C}")
    B, T, _ = x.shape
    pad = (K - 1) * dilation
    xp = np.concatenate([np.zeros((B, pad, C)), x], axis=1)
    taps = [xp[:, k * dilation:k * dilation + T] for k in range(K)]
    y = sum(taps[k] @ W[k] for k in range(K)) + b

    def backward(dy):
        dxp = np.zeros_like(xp)
        dW = np.empty_like(W)
        dy2 = dy.reshape(B * T, F)
        for k in range(K):
            dW[k] = taps[k].reshape(B * T, C).T @ dy2
            dxp[:, k * dilation:k * dilation + T] += dy @ W[k].T
        return dxp[:, pad:], {"W": dW, "b": dy2.sum(axis=0)}

    return y, backward


# -- embedding ----------------------------------------------------------------

def embedding_forward(ids, table):
    ids = np.asarray(ids, dtype=np.int64)
    _expect(ids.size == 0 or (ids.min() >= 0 and ids.max() < table.shape[0]), "embedding_lookup",
            f"ids must lie in [0, {table.shape[0]}), got range "
            f"[{ids.min() if ids.size else 0}, {ids.max() if ids.size else 0}]")
    y = table[ids]

    def backward(dy):
        g = np.zeros_like(table)
        np.add.at(g, ids.ravel(), dy.reshape(-1, table.shape[1]))
        return None, {"table": g}

    return y, backward


def layer_forward_backward(layer: str, inputs, params: dict, **kw):
    """Uniform entry point over the layer set; returns ``(outputs, backward)``."""
    if layer == "dense":
        return dense_forward(inputs, params["W"], params["b"])
    if layer == "gru_cell":
        x, h = inputs
        return gru_cell_forward(x, h, params["Wx"], params["Wh"], params["bx"], params["bh"])
    if layer == "causal_conv1d":
        return causal_conv1d_forward(inputs, params["W"], params["b"], kw.get("dilation", 1))
    if layer == "embedding_lookup":
        return embedding_forward(inputs, params["table"])
    raise ValueError(f"unknown layer kind {layer!r}")
