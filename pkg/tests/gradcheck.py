"""Central finite differences for MLP parameters, with an independent forward pass.

The reference forward is written from the parameter layout alone (W stored
(fan_in, fan_out) row-major, then b, per layer). For a perturbation in layer L it
reuses the unperturbed activations below L and recomputes everything above, in
batches of perturbed copies, so every coordinate of a 256x256 net is cheap.
"""

import numpy as np


def unpack(params, sizes):
    layers, off = [], 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = params[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = params[off:off + fan_out]
        off += fan_out
        layers.append((W, b))
    assert off == len(params)
    return layers


def _finish(z, layers, start):
    """Run pre-activations ``z`` of layer ``start`` through the rest of the net."""
    h = z
    for W, b in layers[start + 1:]:
        h = np.maximum(h, 0.0) @ W + b
    return h[..., 0]


def fd_gradient(params, sizes, x, h=1e-5, chunk=8192):
    """Central differences of the scalar output at input features ``x`` (1-D)."""
    layers = unpack(params, sizes)
    # unperturbed activations entering each layer
    inputs = [x]
    z = x @ layers[0][0] + layers[0][1]
    pres = [z]
    for W, b in layers[1:]:
        inputs.append(np.maximum(pres[-1], 0.0))
        pres.append(inputs[-1] @ W + b)
    grad = []
    for li, (W, b) in enumerate(layers):
        fan_in, fan_out = W.shape
        a = inputs[li]
        n_w = fan_in * fan_out
        # coordinate c of W perturbs output unit j = c % fan_out by h * a[c // fan_out]
        coords = np.arange(n_w + fan_out)
        unit = np.where(coords < n_w, coords % fan_out, coords - n_w)
        scale = np.where(coords < n_w, a[np.minimum(coords, n_w - 1) // fan_out], 1.0)
        g = np.empty(len(coords))
        for lo in range(0, len(coords), chunk):
            sl = slice(lo, lo + chunk)
            u, s = unit[sl], scale[sl]
            zp = np.repeat(pres[li][None, :], len(u), axis=0)
            zm = zp.copy()
            rows = np.arange(len(u))
            zp[rows, u] += h * s
            zm[rows, u] -= h * s
            g[sl] = (_finish(zp, layers, li) - _finish(zm, layers, li)) / (2 * h)
        grad.append(g)
    return np.concatenate(grad)


def relative_errors(analytic, numeric):
    a, n = np.abs(analytic), np.abs(numeric)
    denom = np.maximum(a, n)
    err = np.abs(analytic - numeric)
    return np.divide(err, denom, out=np.zeros_like(err), where=denom > 0)
