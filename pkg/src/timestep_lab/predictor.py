"""The noise-prediction network eps_theta(x_t, t): an MLP on [x_t, emb(t)].

Gradients are exact reverse-mode accumulations written out by hand; there
is no autodiff dependency.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import nn

CHECKPOINT_FORMAT = "timestep_lab.ckpt/1"


class PredictorError(RuntimeError):
    pass


@dataclass
class PredictorParams:
    """MLP weights; ``layers`` are views into the contiguous vector ``buf``."""

    layers: list
    dim: int
    T: int
    time_embed_dim: int = 64
    hidden_dims: tuple = (128, 128)
    activation: str = "silu"

    def __post_init__(self):
        self.buf = nn.flatten(self.layers)
        self.layers = nn.unflatten(self.buf, self.layers)

    def copy(self):
        return PredictorParams(
            nn.copy_layers(self.layers), self.dim, self.T, self.time_embed_dim, tuple(self.hidden_dims), self.activation
        )

    def flat(self):
        return self.buf.copy()

    def with_flat(self, vec):
        layers = nn.unflatten(np.asarray(vec, dtype=np.float64), self.layers)
        return PredictorParams(layers, self.dim, self.T, self.time_embed_dim, tuple(self.hidden_dims), self.activation)

    @property
    def n_params(self):
        return self.buf.size


@dataclass
class ForwardCounter:
    """Tallies predictor evaluations.

    A *pass* is the loss of one timestep evaluated over one set of inputs;
    ``rows`` counts individual network rows, so ``rows / batch_size`` gives
    cost in units of one full-batch forward.
    """

    passes: int = 0
    rows: int = 0

    def record(self, passes, rows):
        self.passes += int(passes)
        self.rows += int(rows)

    def reset(self):
        self.passes = 0
        self.rows = 0


@dataclass
class AdamState:
    """Moment accumulators as flat vectors in :func:`nn.flatten` order."""

    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    def copy(self):
        return AdamState(self.m.copy(), self.v.copy(), self.step_count, self.lr, self.beta1, self.beta2, self.eps_hat)


def init_predictor(dim, T, rng, hidden_dims=(128, 128), time_embed_dim=64, activation="silu"):
    if time_embed_dim % 2:
        raise PredictorError(f"time_embed_dim must be even, got {time_embed_dim}")
    if activation not in nn.ACTIVATIONS:
        raise PredictorError(f"unknown activation {activation!r}")
    sizes = [dim + time_embed_dim, *hidden_dims, dim]
    return PredictorParams(nn.init_layers(sizes, rng), dim, T, time_embed_dim, tuple(hidden_dims), activation)


def time_embedding(t, T, d):
    """Sinusoidal features of t/T: ``[sin(w_k t'), cos(w_k t')]`` with t' = 1000 t/T.

    Frequencies are geometric, w_k = 10000^(-k/(d/2)). Accepts a scalar or a
    vector of timesteps.
    """
    if d % 2:
        raise PredictorError(f"embedding dimension must be even, got {d}")
    half = d // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    arg = np.multiply.outer(np.asarray(t, dtype=np.float64) * (1000.0 / T), freqs)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


@lru_cache(maxsize=16)
def _embedding_table(T, d):
    table = time_embedding(np.arange(T + 1), T, d)
    table.setflags(write=False)
    return table


def _inputs(theta, xt, t):
    xt = np.asarray(xt, dtype=np.float64)
    t = np.asarray(t)
    if xt.ndim != 2 or xt.shape[1] != theta.dim:
        raise PredictorError(f"xt must be [batch, {theta.dim}], got {xt.shape}")
    if t.shape != (xt.shape[0],):
        raise PredictorError(f"t must be a vector of length {xt.shape[0]}, got shape {t.shape}")
    emb = _embedding_table(theta.T, theta.time_embed_dim)[t]
    return np.concatenate([xt, emb], axis=1)


def predict_eps(theta, xt, t, counter=None, passes=1):
    """eps_theta(x_t, t) for a batch; ``t`` holds one timestep per row."""
    out, _ = nn.mlp_forward(theta.layers, _inputs(theta, xt, t), theta.activation)
    if counter is not None:
        counter.record(passes, out.shape[0])
    return out


def _noised(s, x0, eps, t):
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise PredictorError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    t = np.asarray(t)
    ab = s.alpha_bar[t - 1][:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def loss_and_grad(theta, s, x0, eps, t, weights=None, counter=None, k=None):
    """Mean over the batch of ``w_i * ||eps_i - eps_theta(x_t_i, t_i)||^2`` and its gradient.

    ``weights`` defaults to 1 (the plain noise-prediction loss). The gradient
    mirrors ``theta.layers``.
    """
    t = np.asarray(t)
    xt = _noised(s, x0, eps, t)
    out, cache = nn.mlp_forward(theta.layers, _inputs(theta, xt, t), theta.activation)
    if counter is not None:
        counter.record(1, out.shape[0])
    resid = out - eps
    per_row = np.sum(resid * resid, axis=1)
    n = out.shape[0]
    if weights is None:
        loss = float(per_row.mean())
        dout = resid * (2.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        loss = float(np.mean(w * per_row))
        dout = resid * (2.0 * w / n)[:, None]
    if not np.isfinite(loss):
        where = f" at iteration {k}" if k is not None else ""
        raise PredictorError(f"non-finite loss {loss}{where}")
    grads, _ = nn.mlp_backward(theta.layers, cache, dout, theta.activation)
    return loss, grads


def per_sample_grads(theta, s, x0, eps, t, weights=None, as_matrix=False):
    """Exact gradient of each sample's own loss term ``w_i ||eps_i - eps_hat_i||^2``.

    Returns a list of gradients (one per sample), or an ``[n, n_params]``
    matrix in :func:`nn.flatten` order with ``as_matrix=True``. The mean over
    samples equals the batch gradient of :func:`loss_and_grad`.
    """
    t = np.asarray(t)
    xt = _noised(s, x0, eps, t)
    out, cache = nn.mlp_forward(theta.layers, _inputs(theta, xt, t), theta.activation)
    resid = out - eps
    dout = 2.0 * resid
    if weights is not None:
        dout = dout * np.asarray(weights, dtype=np.float64)[:, None]
    grads, _ = nn.mlp_backward(theta.layers, cache, dout, theta.activation, per_sample=True)
    if as_matrix:
        return nn.flatten_per_sample(grads)
    n = out.shape[0]
    return [[(dW[i], db[i]) for dW, db in grads] for i in range(n)]


def init_adam(n_params, lr=2e-4, beta1=0.9, beta2=0.999, eps_hat=1e-8):
    return AdamState(np.zeros(n_params), np.zeros(n_params), 0, lr, beta1, beta2, eps_hat)


def adam_update(params, g, state):
    """Bias-corrected Adam step on the flat vector ``params``, in place."""
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    m, v = state.m, state.v
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    m_hat = m / (1.0 - b1**state.step_count)
    v_hat = v / (1.0 - b2**state.step_count)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps_hat)
    return params, state


def adam_step(theta, grad, state):
    """One Adam update of ``theta`` (mutated and returned together with ``state``).

    ``grad`` may be layer-shaped or already flat.
    """
    g = grad if isinstance(grad, np.ndarray) else nn.flatten(grad)
    adam_update(theta.buf, g, state)
    return theta, state


def train_step(theta, adam, s, x0, eps, t, clip=1.0, weights=None, counter=None, k=None):
    """Loss, gradient clipped to global norm ``clip``, and an Adam update in place. Returns the loss."""
    loss, grads = loss_and_grad(theta, s, x0, eps, t, weights=weights, counter=counter, k=k)
    g, _ = nn.clip_by_global_norm(nn.flatten(grads), clip)
    adam_update(theta.buf, g, adam)
    return loss


def ema_update(ema, params, decay):
    """ema <- decay * ema + (1 - decay) * params, on flat vectors in place."""
    ema *= decay
    ema += (1.0 - decay) * params
    return ema


# Checkpoints ---------------------------------------------------------------


def _pack_layers(prefix, layers, out):
    for i, (W, b) in enumerate(layers):
        out[f"{prefix}/{i}/W"] = W
        out[f"{prefix}/{i}/b"] = b


def _unpack_layers(prefix, data):
    layers, i = [], 0
    while f"{prefix}/{i}/W" in data:
        layers.append((np.array(data[f"{prefix}/{i}/W"]), np.array(data[f"{prefix}/{i}/b"])))
        i += 1
    return layers


def save_checkpoint(path, theta, adam=None, ema=None, policy=None, meta=None):
    """Write an ``.npz`` checkpoint. See README for the key layout."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "predictor": {
            "dim": theta.dim,
            "T": theta.T,
            "time_embed_dim": theta.time_embed_dim,
            "hidden_dims": list(theta.hidden_dims),
            "activation": theta.activation,
        },
        "meta": meta or {},
    }
    arrays = {}
    _pack_layers("theta", theta.layers, arrays)
    if adam is not None:
        arrays["adam/m"] = adam.m
        arrays["adam/v"] = adam.v
        header["adam"] = {
            "step_count": adam.step_count,
            "lr": adam.lr,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps_hat": adam.eps_hat,
        }
    if ema is not None:
        arrays["ema"] = np.asarray(ema)
    if policy is not None:
        _pack_layers("phi", policy.layers, arrays)
        header["policy"] = {"dim": policy.dim, "hidden_dims": list(policy.hidden_dims), "a_floor": policy.a_floor}
    arrays["__header__"] = np.array(json.dumps(header, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Return a dict with ``theta`` and, when present, ``adam``, ``ema``, ``policy``, ``meta``."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise PredictorError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        p = header["predictor"]
        theta = PredictorParams(
            _unpack_layers("theta", data), p["dim"], p["T"], p["time_embed_dim"], tuple(p["hidden_dims"]), p["activation"]
        )
        out = {"theta": theta, "meta": header.get("meta", {})}
        if "adam" in header:
            a = header["adam"]
            out["adam"] = AdamState(
                np.array(data["adam/m"]), np.array(data["adam/v"]), a["step_count"], a["lr"], a["beta1"], a["beta2"], a["eps_hat"]
            )
        if "ema" in data:
            out["ema"] = np.array(data["ema"])
        if "policy" in header:
            from .policy import PolicyParams

            pol = header["policy"]
            out["policy"] = PolicyParams(_unpack_layers("phi", data), pol["dim"], tuple(pol["hidden_dims"]), pol["a_floor"])
    return out
