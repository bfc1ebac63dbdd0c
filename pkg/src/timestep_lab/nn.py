"""Dense MLP forward/backward in plain numpy.

Layers are ``(W, b)`` pairs with ``W`` shaped ``[fan_in, fan_out]``. The
activation is applied after every layer except the last.
"""

from __future__ import annotations

import numpy as np

ACTIVATIONS = ("relu", "silu")


def init_layers(sizes, rng, zero_last=False):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, the torch.nn.Linear default."""
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append((W, b))
    if zero_last:
        W, b = layers[-1]
        layers[-1] = (np.zeros_like(W), np.zeros_like(b))
    return layers


def sigmoid(z):
    # exp overflow for very negative z gives 1/inf = 0, which is the right limit
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def _act(z, kind):
    """Activation value and the quantity its derivative needs (sigmoid for silu, mask for relu)."""
    if kind == "relu":
        mask = z > 0
        return z * mask, mask
    s = sigmoid(z)
    return z * s, s


def _act_grad(z, aux, kind):
    if kind == "relu":
        return aux
    return aux * (1.0 + z * (1.0 - aux))


def mlp_forward(layers, x, activation="silu"):
    """Return ``(output, cache)``; ``cache`` holds layer inputs, pre-activations and activation state."""
    inputs, pre, aux = [], [], []
    h = x
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W
        z += b
        if i == last:
            h = z
        else:
            pre.append(z)
            h, a = _act(z, activation)
            aux.append(a)
    return h, (inputs, pre, aux)


def mlp_backward(layers, cache, dout, activation="silu", per_sample=False):
    """Backpropagate ``dout`` (dL/doutput) through the network.

    Returns ``(grads, dx)`` where ``grads`` mirrors ``layers``. With
    ``per_sample=True`` each gradient carries a leading batch axis holding the
    contribution of every row separately (their sum is the batch gradient).
    """
    inputs, pre, aux = cache
    grads = [None] * len(layers)
    delta = dout
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        a = inputs[i]
        if per_sample:
            grads[i] = (np.einsum("ni,no->nio", a, delta), delta.copy())
        else:
            grads[i] = (a.T @ delta, delta.sum(axis=0))
        delta = delta @ W.T
        if i > 0:
            delta = delta * _act_grad(pre[i - 1], aux[i - 1], activation)
    return grads, delta


def flatten(layers):
    return np.concatenate([a.ravel() for W, b in layers for a in (W, b)])


def unflatten(vec, like):
    """Split ``vec`` into layers shaped like ``like``; the pieces are views into ``vec``."""
    out, pos = [], 0
    for W, b in like:
        w = vec[pos : pos + W.size].reshape(W.shape)
        pos += W.size
        bb = vec[pos : pos + b.size].reshape(b.shape)
        pos += b.size
        out.append((w, bb))
    if pos != vec.size:
        raise ValueError(f"vector length {vec.size} does not match parameter count {pos}")
    return out


def flatten_per_sample(grads):
    """[n, P] matrix from per-sample grads produced with ``per_sample=True``."""
    n = grads[0][1].shape[0]
    parts = []
    for dW, db in grads:
        parts.append(dW.reshape(n, -1))
        parts.append(db.reshape(n, -1))
    return np.concatenate(parts, axis=1)


def copy_layers(layers):
    return [(W.copy(), b.copy()) for W, b in layers]


def clip_by_global_norm(g, max_norm):
    """Scale the flat gradient ``g`` in place so its L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(g @ g))
    if max_norm is not None and norm > max_norm:
        g *= max_norm / norm
    return g, norm
