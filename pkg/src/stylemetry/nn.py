"""Small float64 numpy layers with explicit forward/backward passes.

Layers are plain functions: ``forward`` returns ``(output, cache)`` and
``backward`` takes the upstream gradient and the cache, accumulates into the
``grad`` of the parameters it touched and returns the input gradient. No
state is kept on the parameter objects besides values, gradients and the
ADADELTA accumulators, so forwards on frozen parameters can run
concurrently.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh")


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    acc_grad_sq: np.ndarray = field(init=False)
    acc_update_sq: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.acc_grad_sq = np.zeros_like(self.value)
        self.acc_update_sq = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- dense -----------------------------------------------------------------


@dataclass
class DenseParams:
    W: Param  # (out, in)
    b: Param  # (out,)

    @classmethod
    def init(cls, name: str, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        w = glorot(rng, n_out, n_in) if rng is not None else np.zeros((n_out, n_in))
        return cls(Param(f"{name}.W", w), Param(f"{name}.b", np.zeros(n_out)))

    def params(self) -> list[Param]:
        return [self.W, self.b]

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]


def dense_forward(x: np.ndarray, p: DenseParams, activation: str = "identity"):
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if x.ndim != 2 or x.shape[1] != p.n_in:
        raise ValueError(f"dense input shape {x.shape} does not match weight shape {p.W.shape}")
    z = x @ p.W.value.T + p.b.value
    if activation == "relu":
        y = np.maximum(z, 0.0)
    elif activation == "tanh":
        y = np.tanh(z)
    else:
        y = z
    return y, (x, z, y, activation)


def dense_backward(dy: np.ndarray, cache, p: DenseParams) -> np.ndarray:
    x, z, y, activation = cache
    if activation == "relu":
        dz = dy * (z > 0)
    elif activation == "tanh":
        dz = dy * (1.0 - y * y)
    else:
        dz = dy
    p.W.grad += dz.T @ x
    p.b.grad += dz.sum(axis=0)
    return dz @ p.W.value


# -- GRU -------------------------------------------------------------------

_GATES = ("z", "r", "h")


@dataclass
class GruParams:
    W_z: Param
    W_r: Param
    W_h: Param
    U_z: Param
    U_r: Param
    U_h: Param
    b_z: Param
    b_r: Param
    b_h: Param

    @classmethod
    def init(cls, name: str, n_in: int, n_hidden: int, rng: np.random.Generator | None = None):
        kw = {}
        for g in _GATES:
            kw[f"W_{g}"] = Param(
                f"{name}.W_{g}", glorot(rng, n_hidden, n_in) if rng is not None else np.zeros((n_hidden, n_in))
            )
        for g in _GATES:
            kw[f"U_{g}"] = Param(
                f"{name}.U_{g}",
                glorot(rng, n_hidden, n_hidden) if rng is not None else np.zeros((n_hidden, n_hidden)),
            )
        for g in _GATES:
            kw[f"b_{g}"] = Param(f"{name}.b_{g}", np.zeros(n_hidden))
        return cls(**kw)

    def params(self) -> list[Param]:
        return [self.W_z, self.W_r, self.W_h, self.U_z, self.U_r, self.U_h, self.b_z, self.b_r, self.b_h]

    @property
    def n_in(self) -> int:
        return self.W_z.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.W_z.shape[0]

    def check(self) -> None:
        h, i = self.n_hidden, self.n_in
        for g in _GATES:
            if getattr(self, f"W_{g}").shape != (h, i):
                raise ValueError(f"W_{g} has shape {getattr(self, f'W_{g}').shape}, expected {(h, i)}")
            if getattr(self, f"U_{g}").shape != (h, h):
                raise ValueError(f"U_{g} has shape {getattr(self, f'U_{g}').shape}, expected {(h, h)}")
            if getattr(self, f"b_{g}").shape != (h,):
                raise ValueError(f"b_{g} has shape {getattr(self, f'b_{g}').shape}, expected {(h,)}")


def gru_cell(x_t: np.ndarray, h_prev: np.ndarray, p: GruParams):
    """One GRU step, h_t = (1 - z) * h_prev + z * h_cand.

    Works on single vectors or (batch, features) arrays.
    """
    if x_t.shape[-1] != p.n_in or h_prev.shape[-1] != p.n_hidden:
        raise ValueError(
            f"gru_cell got x {x_t.shape} and h {h_prev.shape} for W {p.W_z.shape} and U {p.U_z.shape}"
        )
    z = sigmoid(x_t @ p.W_z.value.T + h_prev @ p.U_z.value.T + p.b_z.value)
    r = sigmoid(x_t @ p.W_r.value.T + h_prev @ p.U_r.value.T + p.b_r.value)
    rh = r * h_prev
    cand = np.tanh(x_t @ p.W_h.value.T + rh @ p.U_h.value.T + p.b_h.value)
    h = (1.0 - z) * h_prev + z * cand
    return h, (x_t, h_prev, z, r, rh, cand)


def gru_forward(xs: np.ndarray, p: GruParams, return_sequence: bool = True):
    """Run a GRU over ``xs`` of shape (T, batch, n_in) from h_0 = 0.

    Returns (T, batch, hidden) or the final (batch, hidden) state.
    """
    if xs.ndim != 3:
        raise ValueError(f"expected (T, batch, features) input, got shape {xs.shape}")
    T, B, n_in = xs.shape
    if T == 0:
        raise ValueError("GRU needs at least one time step")
    if n_in != p.n_in:
        raise ValueError(f"GRU input width {n_in} does not match W shape {p.W_z.shape}")
    H = p.n_hidden
    # input projections for all steps at once
    W = np.concatenate([p.W_z.value, p.W_r.value, p.W_h.value], axis=0)
    bias = np.concatenate([p.b_z.value, p.b_r.value, p.b_h.value])
    xproj = xs @ W.T + bias  # (T, B, 3H)
    U_zr = np.concatenate([p.U_z.value, p.U_r.value], axis=0)
    U_h = p.U_h.value

    hs = np.empty((T + 1, B, H))
    hs[0] = 0.0
    zs = np.empty((T, B, H))
    rs = np.empty((T, B, H))
    cands = np.empty((T, B, H))
    for t in range(T):
        h_prev = hs[t]
        zr = sigmoid(xproj[t, :, : 2 * H] + h_prev @ U_zr.T)
        z, r = zr[:, :H], zr[:, H:]
        cand = np.tanh(xproj[t, :, 2 * H:] + (r * h_prev) @ U_h.T)
        hs[t + 1] = (1.0 - z) * h_prev + z * cand
        zs[t], rs[t], cands[t] = z, r, cand
    cache = (xs, hs, zs, rs, cands, return_sequence)
    out = hs[1:] if return_sequence else hs[-1]
    return out, cache


def gru_backward(dout: np.ndarray, cache, p: GruParams) -> np.ndarray:
    """Full backpropagation through time; returns dL/dxs."""
    xs, hs, zs, rs, cands, return_sequence = cache
    T, B, _ = xs.shape
    H = p.n_hidden
    U_z, U_r, U_h = p.U_z.value, p.U_r.value, p.U_h.value

    da = np.empty((T, B, 3 * H))  # preactivation grads for z, r, h
    dU_z = np.zeros_like(U_z)
    dU_r = np.zeros_like(U_r)
    dU_h = np.zeros_like(U_h)
    dh = np.zeros((B, H))
    if not return_sequence:
        dh = dh + dout
    for t in range(T - 1, -1, -1):
        if return_sequence:
            dh = dh + dout[t]
        h_prev, z, r, cand = hs[t], zs[t], rs[t], cands[t]
        da_h = dh * z * (1.0 - cand * cand)
        da_z = dh * (cand - h_prev) * z * (1.0 - z)
        rh = r * h_prev
        d_rh = da_h @ U_h
        da_r = d_rh * h_prev * r * (1.0 - r)
        dU_h += da_h.T @ rh
        dU_z += da_z.T @ h_prev
        dU_r += da_r.T @ h_prev
        dh = dh * (1.0 - z) + d_rh * r + da_z @ U_z + da_r @ U_r
        da[t, :, :H] = da_z
        da[t, :, H:2 * H] = da_r
        da[t, :, 2 * H:] = da_h

    flat_da = da.reshape(T * B, 3 * H)
    dW = flat_da.T @ xs.reshape(T * B, -1)
    db = flat_da.sum(axis=0)
    for i, g in enumerate(_GATES):
        getattr(p, f"W_{g}").grad += dW[i * H:(i + 1) * H]
        getattr(p, f"b_{g}").grad += db[i * H:(i + 1) * H]
    p.U_z.grad += dU_z
    p.U_r.grad += dU_r
    p.U_h.grad += dU_h
    W = np.concatenate([p.W_z.value, p.W_r.value, p.W_h.value], axis=0)
    return da @ W


# -- dropout ---------------------------------------------------------------


def dropout_forward(x: np.ndarray, p_drop: float, train: bool, rng: np.random.Generator | None = None):
    """Inverted dropout; returns (y, mask) with mask already scaled by 1/(1-p)."""
    if not 0.0 <= p_drop < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p_drop}")
    if not train or p_drop == 0.0:
        return x, np.ones_like(x)
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= p_drop
    mask = keep / (1.0 - p_drop)
    return x * mask, mask


def dropout_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


# -- losses ----------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient on the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"{labels.shape[0]} labels for {n} rows of logits")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(n), labels] - log_norm
    loss = -float(log_p.mean())
    grad = np.exp(shifted - log_norm[:, None])
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def mse_l1(recon: np.ndarray, target: np.ndarray, code: np.ndarray, lam: float):
    """Per-sample mean of ||recon - target||^2 + lam * ||code||_1.

    Returns (loss, d_recon, d_target, d_code).
    """
    if lam < 0:
        raise ValueError(f"l1 weight must be nonnegative, got {lam}")
    recon = np.atleast_2d(recon)
    target = np.atleast_2d(target)
    code = np.atleast_2d(code)
    if recon.shape != target.shape or code.shape[0] != recon.shape[0]:
        raise ValueError(f"shape mismatch: recon {recon.shape}, target {target.shape}, code {code.shape}")
    n = recon.shape[0]
    resid = recon - target
    loss = (float(np.sum(resid * resid)) + lam * float(np.sum(np.abs(code)))) / n
    d_recon = 2.0 * resid / n
    return loss, d_recon, -d_recon, lam * np.sign(code) / n


# -- optimizer -------------------------------------------------------------


def adadelta_step(p: Param, rho: float = 0.95, eps: float = 1e-8, lr: float = 1.0) -> None:
    g = p.grad
    p.acc_grad_sq *= rho
    p.acc_grad_sq += (1.0 - rho) * g * g
    delta = -np.sqrt(p.acc_update_sq + eps) / np.sqrt(p.acc_grad_sq + eps) * g
    p.acc_update_sq *= rho
    p.acc_update_sq += (1.0 - rho) * delta * delta
    p.value += lr * delta
    p.zero_grad()


# -- gradient checking -----------------------------------------------------


def gradient_check(
    loss_fn: Callable[[], float],
    params: Sequence[Param],
    n_probes: int | None = 20,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must compute the loss and accumulate gradients into the
    params deterministically. ``n_probes=None`` checks every coordinate.
    """
    for p in params:
        p.zero_grad()
    loss_fn()
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.value.size)]
    if n_probes is not None and n_probes < len(coords):
        picks = rng.choice(len(coords), size=n_probes, replace=False)
        coords = [coords[k] for k in sorted(picks)]

    worst = 0.0
    for i, j in coords:
        flat = params[i].value.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        f_plus = loss_fn()
        flat[j] = orig - h
        f_minus = loss_fn()
        flat[j] = orig
        numeric = (f_plus - f_minus) / (2 * h)
        a = analytic[i].reshape(-1)[j]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    for p, g in zip(params, analytic):
        p.grad[...] = g
    return worst
