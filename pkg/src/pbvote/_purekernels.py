"""Numpy implementation of the dense-chain kernels.

Same contract as the compiled module ``pbvote._kernels``: a stack of dense
layers with leaky-ReLU hidden activations and a tanh scalar output.  Weights
live in one flat float64 vector, layer after layer as (W row-major, b).

``fwd`` returns the scores plus the post-activation hidden matrices needed by
``bwd``; leaky-ReLU derivative is recovered from the sign of the stored
activations (slope > 0 preserves sign).
"""

import numpy as np


def fwd(w, dims, X, slope):
    """Forward pass. Returns (scores (B,), hidden list of (B, h_l) arrays).

    Non-finite values propagate silently; callers check the scores and
    report the offending layer themselves.
    """
    a = X
    hidden = []
    off = 0
    n_layers = len(dims) - 1
    with np.errstate(invalid="ignore", over="ignore"):
        for layer in range(n_layers):
            fan_in, fan_out = int(dims[layer]), int(dims[layer + 1])
            W = w[off:off + fan_in * fan_out].reshape(fan_out, fan_in)
            off += fan_in * fan_out
            b = w[off:off + fan_out]
            off += fan_out
            z = a @ W.T + b
            if layer == n_layers - 1:
                scores = np.tanh(z[:, 0])
            else:
                a = np.where(z >= 0.0, z, slope * z)
                hidden.append(a)
    return scores, hidden


def bwd(w, dims, X, hidden, scores, dscore, slope, need_wgrad, need_xgrad):
    """Backward pass from per-example score gradients.

    Weight gradients are summed over the batch (callers fold any 1/B factor
    into ``dscore``).  Returns (gw flat or None, gX (B, d) or None).
    """
    n_layers = len(dims) - 1
    offsets = []
    off = 0
    for layer in range(n_layers):
        fan_in, fan_out = int(dims[layer]), int(dims[layer + 1])
        offsets.append((off, off + fan_in * fan_out, fan_in, fan_out))
        off += fan_in * fan_out + fan_out
    gw = np.zeros_like(w) if need_wgrad else None

    # Output layer: d/dz tanh(z) = 1 - tanh(z)^2.
    dz = (dscore * (1.0 - scores * scores))[:, None]
    for layer in range(n_layers - 1, -1, -1):
        w_start, b_start, fan_in, fan_out = offsets[layer]
        W = w[w_start:b_start].reshape(fan_out, fan_in)
        a_in = hidden[layer - 1] if layer > 0 else X
        if need_wgrad:
            gw[w_start:b_start] = (dz.T @ a_in).ravel()
            gw[b_start:b_start + fan_out] = dz.sum(axis=0)
        if layer == 0 and not need_xgrad:
            return gw, None
        da = dz @ W
        if layer > 0:
            dz = da * np.where(hidden[layer - 1] >= 0.0, 1.0, slope)
    return gw, da
