"""Recurrent building blocks on top of the autodiff Tensors.

LSTM weights per direction are packed as Wx (input, 4H), Wh (H, 4H), b (4H,)
with gate order input, forget, output, candidate. Sequences are processed in
batch-major per-timestep matrices; a per-timestep validity gate carries the
previous state through padded frames so each utterance's states are exactly
what a lone forward pass would produce.
"""

import numpy as np

from . import autodiff as ad
from .errors import ContractError


def glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def lstm_init(rng, input_dim, hidden, prefix):
    """Fresh LSTM parameter dict with forget-gate bias at 1."""
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    return {
        prefix + ".Wx": ad.Tensor(glorot(rng, input_dim, hidden, (input_dim, 4 * hidden)),
                                  requires_grad=True),
        prefix + ".Wh": ad.Tensor(glorot(rng, hidden, hidden, (hidden, 4 * hidden)),
                                  requires_grad=True),
        prefix + ".b": ad.Tensor(b, requires_grad=True),
    }


def linear_init(rng, input_dim, output_dim, prefix):
    return {
        prefix + ".W": ad.Tensor(glorot(rng, input_dim, output_dim, (input_dim, output_dim)),
                                 requires_grad=True),
        prefix + ".b": ad.Tensor(np.zeros(output_dim), requires_grad=True),
    }


def linear(x, params, prefix):
    return ad.add(ad.matmul(x, params[prefix + ".W"]), params[prefix + ".b"])


def lstm_step(x, h, c, Wx, Wh, b, hidden):
    z = ad.add(ad.add(ad.matmul(x, Wx), ad.matmul(h, Wh)), b)
    i = ad.sigmoid(z[:, 0 * hidden:1 * hidden])
    f = ad.sigmoid(z[:, 1 * hidden:2 * hidden])
    o = ad.sigmoid(z[:, 2 * hidden:3 * hidden])
    g = ad.tanh(z[:, 3 * hidden:4 * hidden])
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def lstm_run(xs, valid, params, prefix, hidden, reverse=False):
    """Run one direction over per-timestep (B, I) Tensors.

    valid is a list of (B, 1) float arrays (1 inside the utterance, 0 in
    padding); invalid steps carry the previous state through unchanged.
    Returns per-timestep (B, hidden) Tensors in original time order.
    """
    Wx = params[prefix + ".Wx"]
    Wh = params[prefix + ".Wh"]
    b = params[prefix + ".b"]
    batch = xs[0].data.shape[0]
    h = ad.Tensor(np.zeros((batch, hidden)))
    c = ad.Tensor(np.zeros((batch, hidden)))
    steps = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    out = [None] * len(xs)
    for t in steps:
        h_new, c_new = lstm_step(xs[t], h, c, Wx, Wh, b, hidden)
        v = valid[t]
        if v.min() < 1.0:
            keep = ad.Tensor(np.broadcast_to(v, (batch, hidden)).copy())
            drop = ad.Tensor(np.broadcast_to(1.0 - v, (batch, hidden)).copy())
            h = ad.add(ad.mul(h_new, keep), ad.mul(h, drop))
            c = ad.add(ad.mul(c_new, keep), ad.mul(c, drop))
        else:
            h, c = h_new, c_new
        out[t] = h
    return out


def bilstm_stack(xs, valid, params, prefix, hidden, layers):
    """Stacked bidirectional LSTM; each layer outputs per-timestep (B, 2H)."""
    if layers < 1:
        raise ContractError("bilstm_stack: need at least one layer")
    current = xs
    for layer in range(layers):
        fwd = lstm_run(current, valid, params, "%s.l%d.fwd" % (prefix, layer), hidden)
        bwd = lstm_run(current, valid, params, "%s.l%d.bwd" % (prefix, layer),
                       hidden, reverse=True)
        current = [ad.concat([f, b], axis=1) for f, b in zip(fwd, bwd)]
    return current


def bilstm_init(rng, input_dim, hidden, layers, prefix):
    params = {}
    dim = input_dim
    for layer in range(layers):
        params.update(lstm_init(rng, dim, hidden, "%s.l%d.fwd" % (prefix, layer)))
        params.update(lstm_init(rng, dim, hidden, "%s.l%d.bwd" % (prefix, layer)))
        dim = 2 * hidden
    return params
