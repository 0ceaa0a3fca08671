"""Coupled two-layer LSTM with decoders, exact BPTT gradients and Adam training.

Both cells advance in lockstep.  At step ``t`` each gate of the action cell
reads ``[h_{t-1}, g_{t-1}, f_t]`` and each gate of the audience cell reads
``[h_{t-1}, g_{t-1}, a_t]``.  The action decoder is an affine map followed by
a softmax so its output is always a probability vector; the audience decoder
is a plain affine map.

Parameters live in a flat ``dict`` keyed in checkpoint order::

    I.W_i I.W_f I.W_c I.W_o I.b_i I.b_f I.b_c I.b_o
    A.W_i A.W_f A.W_c A.W_o A.b_i A.b_f A.b_c A.b_o
    dec_I.W dec_I.b dec_A.W dec_A.b
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .scoring import js_divergence
from .stream import SequenceWindow, stack_windows

GATES = ("i", "f", "c", "o")
COUPLINGS = ("full", "single", "none")
LOSSES = ("js", "l2", "kl")


@dataclass(frozen=True)
class ModelConfig:
    d1: int
    d2: int
    q: int = 9
    h1: int = 16
    h2: int = 16
    omega: float = 0.8
    lr: float = 0.001
    max_epoch: int = 1000
    checkpoint_every: int = 50
    seed: int = 0
    coupling: str = "full"
    loss: str = "js"
    batch_size: int | None = None
    val_fraction: float = 0.25

    def validate(self) -> None:
        if min(self.d1, self.d2, self.q, self.h1, self.h2) < 1:
            raise ConfigError("d1, d2, q, h1, h2 must all be >= 1")
        if not 0.0 <= self.omega <= 1.0:
            raise ConfigError(f"omega {self.omega} outside [0, 1]")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.coupling not in COUPLINGS:
            raise ConfigError(f"coupling must be one of {COUPLINGS}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if self.checkpoint_every < 1 or self.max_epoch < 0:
            raise ConfigError("checkpoint_every must be >= 1 and max_epoch >= 0")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        cols = self.h1 + self.h2
        out = {}
        for layer, hid, inp in (("I", self.h1, self.d1), ("A", self.h2, self.d2)):
            for g in GATES:
                out[f"{layer}.W_{g}"] = (hid, cols + inp)
            for g in GATES:
                out[f"{layer}.b_{g}"] = (hid,)
        out["dec_I.W"] = (self.d1, self.h1)
        out["dec_I.b"] = (self.d1,)
        out["dec_A.W"] = (self.d2, self.h2)
        out["dec_A.b"] = (self.d2,)
        return out

    def masks(self) -> dict[str, np.ndarray]:
        """Column masks removing cross-layer reads for the ablation variants."""
        out = {}
        if self.coupling in ("single", "none"):
            m = np.ones(self.h1 + self.h2 + self.d1)
            m[self.h1 : self.h1 + self.h2] = 0.0
            out["I"] = m
        if self.coupling == "none":
            m = np.ones(self.h1 + self.h2 + self.d2)
            m[: self.h1] = 0.0
            out["A"] = m
        return out


@dataclass
class ClstmParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def copy(self) -> "ClstmParams":
        return ClstmParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in self.config.shapes()])

    def with_flat(self, vec: np.ndarray) -> "ClstmParams":
        out, pos = {}, 0
        for k, shp in self.config.shapes().items():
            n = math.prod(shp)
            out[k] = np.asarray(vec[pos : pos + n], dtype=float).reshape(shp).copy()
            pos += n
        if pos != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, expected {pos}")
        return ClstmParams(self.config, out)

    def stacked(self, layer: str) -> tuple[np.ndarray, np.ndarray]:
        a = self.arrays
        W = np.concatenate([a[f"{layer}.W_{g}"] for g in GATES], axis=0)
        b = np.concatenate([a[f"{layer}.b_{g}"] for g in GATES])
        return W, b


def init_params(cfg: ModelConfig) -> ClstmParams:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    arrays = {}
    shapes = cfg.shapes()
    for name, shp in shapes.items():
        # biases share the fan-in of their weight matrix
        weight = name if len(shp) == 2 else name.replace(".b", ".W")
        bound = 1.0 / math.sqrt(shapes[weight][1])
        arrays[name] = rng.uniform(-bound, bound, size=shp)
    for layer, m in cfg.masks().items():
        for g in GATES:
            arrays[f"{layer}.W_{g}"] = arrays[f"{layer}.W_{g}"] * m
    return ClstmParams(cfg, arrays)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _cell(W, b, h_prev, g_prev, x, C_prev):
    xin = np.concatenate([h_prev, g_prev, x], axis=-1)
    z = xin @ W.T + b
    H = b.shape[0] // 4
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H : 2 * H])
    c_hat = np.tanh(z[..., 2 * H : 3 * H])
    o = sigmoid(z[..., 3 * H :])
    C = i * c_hat + f * C_prev
    tC = np.tanh(C)
    return o * tC, C, (xin, i, f, c_hat, o, C_prev, tC)


def _check_dims(params, h_prev, g_prev, C_prev, x, layer):
    cfg = params.config
    want_x = cfg.d1 if layer == "I" else cfg.d2
    want_c = cfg.h1 if layer == "I" else cfg.h2
    got = (np.shape(h_prev)[-1], np.shape(g_prev)[-1], np.shape(C_prev)[-1], np.shape(x)[-1])
    if got != (cfg.h1, cfg.h2, want_c, want_x):
        raise ShapeError(f"layer {layer}: got dims {got}, expected {(cfg.h1, cfg.h2, want_c, want_x)}")


def lstm_i_step(params: ClstmParams, h_prev, g_prev, C_prev, f_t):
    """One action-cell step; returns ``(h_t, C_t)``."""
    _check_dims(params, h_prev, g_prev, C_prev, f_t, "I")
    W, b = params.stacked("I")
    h, C, _ = _cell(W, b, np.asarray(h_prev, float), np.asarray(g_prev, float), np.asarray(f_t, float), np.asarray(C_prev, float))
    return h, C


def lstm_a_step(params: ClstmParams, h_prev, g_prev, C_A_prev, a_t):
    """One audience-cell step; returns ``(g_t, C_A_t)``."""
    _check_dims(params, h_prev, g_prev, C_A_prev, a_t, "A")
    W, b = params.stacked("A")
    g, C, _ = _cell(W, b, np.asarray(h_prev, float), np.asarray(g_prev, float), np.asarray(a_t, float), np.asarray(C_A_prev, float))
    return g, C


def forward_batch(params: ClstmParams, Xf: np.ndarray, Xa: np.ndarray, keep_cache: bool = False):
    """Unroll both cells over ``(B, q, d)`` inputs from zero state.

    Returns ``(f_hat, a_hat, h_q, g_q, cache)``; ``cache`` is ``None`` unless
    requested.
    """
    cfg = params.config
    if Xf.ndim != 3 or Xf.shape[2] != cfg.d1 or Xa.shape[:2] != Xf.shape[:2] or Xa.shape[2] != cfg.d2:
        raise ShapeError(f"inputs {Xf.shape}/{Xa.shape} do not match d1={cfg.d1}, d2={cfg.d2}")
    B, q, _ = Xf.shape
    WI, bI = params.stacked("I")
    WA, bA = params.stacked("A")
    h = np.zeros((B, cfg.h1))
    g = np.zeros((B, cfg.h2))
    CI = np.zeros((B, cfg.h1))
    CA = np.zeros((B, cfg.h2))
    steps = []
    for t in range(q):
        h_new, CI, ci = _cell(WI, bI, h, g, Xf[:, t], CI)
        g_new, CA, ca = _cell(WA, bA, h, g, Xa[:, t], CA)
        h, g = h_new, g_new
        if keep_cache:
            steps.append((ci, ca))
    a = params.arrays
    logits = h @ a["dec_I.W"].T + a["dec_I.b"]
    f_hat = softmax(logits)
    a_hat = g @ a["dec_A.W"].T + a["dec_A.b"]
    cache = (steps, h, g, f_hat) if keep_cache else None
    return f_hat, a_hat, h, g, cache


def clstm_forward(params: ClstmParams, window: SequenceWindow):
    """Reconstruct the window target: ``(f_hat, a_hat, h_q, g_q)``."""
    if window.actions.shape[0] != window.interactions.shape[0]:
        raise ShapeError("action and interaction sequences differ in length")
    fh, ah, h, g, _ = forward_batch(params, window.actions[None], window.interactions[None])
    return fh[0], ah[0], h[0], g[0]


def loss(f_hat, f, a_hat, a, omega: float) -> float:
    """``omega * JS(f_hat, f) + (1 - omega) * MSE(a_hat, a)`` for one target."""
    f_hat = np.asarray(f_hat, float)
    f = np.asarray(f, float)
    for name, v in (("f_hat", f_hat), ("f", f)):
        if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-6:
            raise ValidationError(f"{name} is not a probability vector")
    a_hat = np.asarray(a_hat, float)
    a = np.asarray(a, float)
    return float(omega * js_divergence(f_hat, f) + (1.0 - omega) * np.mean((a_hat - a) ** 2))


def _action_loss(kind, fh, Yf):
    if kind == "js":
        return js_divergence(fh, Yf)
    if kind == "l2":
        return np.mean((fh - Yf) ** 2, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(Yf > 0, Yf * np.log((Yf + 1e-12) / fh), 0.0)
    return t.sum(axis=-1)


def _action_logit_grad(kind, fh, Yf):
    """d(action loss)/d(logits) per row, through the softmax."""
    if kind == "kl":
        return fh * Yf.sum(axis=-1, keepdims=True) - Yf
    if kind == "js":
        m = 0.5 * (fh + Yf)
        dq = 0.5 * np.log(fh / m)
    else:
        dq = 2.0 * (fh - Yf) / fh.shape[-1]
    return fh * (dq - (fh * dq).sum(axis=-1, keepdims=True))


def batch_loss(params: ClstmParams, Xf, Xa, Yf, Ya) -> float:
    cfg = params.config
    fh, ah, *_ = forward_batch(params, Xf, Xa)
    per = cfg.omega * _action_loss(cfg.loss, fh, Yf) + (1.0 - cfg.omega) * np.mean((ah - Ya) ** 2, axis=-1)
    return float(per.mean())


def _cell_backward(dh, dC, cache, W):
    xin, i, f, c_hat, o, C_prev, tC = cache
    do = dh * tC
    dC = dC + dh * o * (1.0 - tC * tC)
    di = dC * c_hat
    df = dC * C_prev
    dc_hat = dC * i
    dz = np.concatenate(
        [di * i * (1.0 - i), df * f * (1.0 - f), dc_hat * (1.0 - c_hat * c_hat), do * o * (1.0 - o)], axis=-1
    )
    dW = dz.T @ xin
    db = dz.sum(axis=0)
    dxin = dz @ W
    return dW, db, dxin, dC * f


def loss_and_grad(params: ClstmParams, Xf, Xa, Yf, Ya):
    """Mean batch loss and its exact gradient, keyed like ``params.arrays``."""
    cfg = params.config
    B = Xf.shape[0]
    if B == 0:
        raise ValidationError("empty batch")
    fh, ah, h, g, (steps, _, _, _) = forward_batch(params, Xf, Xa, keep_cache=True)
    w = cfg.omega
    per = w * _action_loss(cfg.loss, fh, Yf) + (1.0 - w) * np.mean((ah - Ya) ** 2, axis=-1)
    a = params.arrays

    dlogits = (w / B) * _action_logit_grad(cfg.loss, fh, Yf)
    dah = ((1.0 - w) / B) * 2.0 * (ah - Ya) / cfg.d2
    grads = {
        "dec_I.W": dlogits.T @ h,
        "dec_I.b": dlogits.sum(axis=0),
        "dec_A.W": dah.T @ g,
        "dec_A.b": dah.sum(axis=0),
    }
    dh = dlogits @ a["dec_I.W"]
    dg = dah @ a["dec_A.W"]
    WI, _ = params.stacked("I")
    WA, _ = params.stacked("A")
    dWI = np.zeros_like(WI)
    dWA = np.zeros_like(WA)
    dbI = np.zeros(WI.shape[0])
    dbA = np.zeros(WA.shape[0])
    dCI = np.zeros((B, cfg.h1))
    dCA = np.zeros((B, cfg.h2))
    h1, h2 = cfg.h1, cfg.h2
    for ci, ca in reversed(steps):
        dW, db, dxI, dCI = _cell_backward(dh, dCI, ci, WI)
        dWI += dW
        dbI += db
        dW, db, dxA, dCA = _cell_backward(dg, dCA, ca, WA)
        dWA += dW
        dbA += db
        dh = dxI[:, :h1] + dxA[:, :h1]
        dg = dxI[:, h1 : h1 + h2] + dxA[:, h1 : h1 + h2]

    masks = cfg.masks()
    for layer, dW, db, H in (("I", dWI, dbI, h1), ("A", dWA, dbA, h2)):
        if layer in masks:
            dW = dW * masks[layer]
        for j, gname in enumerate(GATES):
            grads[f"{layer}.W_{gname}"] = dW[j * H : (j + 1) * H]
            grads[f"{layer}.b_{gname}"] = db[j * H : (j + 1) * H]
    return float(per.mean()), {k: grads[k] for k in cfg.shapes()}


def grad(params: ClstmParams, windows: Sequence[SequenceWindow], omega: float | None = None):
    """Exact gradient of the mean loss over ``windows``."""
    if omega is not None and omega != params.config.omega:
        params = ClstmParams(replace(params.config, omega=omega), params.arrays)
    Xf, Xa, Yf, Ya = stack_windows(windows)
    return loss_and_grad(params, Xf, Xa, Yf, Ya)[1]


# -- Adam -------------------------------------------------------------------

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ClstmParams, grads: dict, state: AdamState, lr: float) -> tuple[ClstmParams, AdamState]:
    """Bias-corrected Adam update; returns new params and state (inputs untouched)."""
    t = state.t + 1
    bc1 = 1.0 - BETA1**t
    bc2 = 1.0 - BETA2**t
    new_arrays, m_out, v_out = {}, {}, {}
    for k, p in params.arrays.items():
        g = grads[k]
        m = BETA1 * state.m.get(k, 0.0) + (1.0 - BETA1) * g
        v = BETA2 * state.v.get(k, 0.0) + (1.0 - BETA2) * g * g
        new_arrays[k] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        m_out[k], v_out[k] = m, v
    return ClstmParams(params.config, new_arrays), AdamState(m_out, v_out, t)


# -- training ---------------------------------------------------------------


@dataclass
class TrainReport:
    train_loss: list[float]
    val_loss: dict[int, float]
    selected_epoch: int

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_loss": {str(k): v for k, v in self.val_loss.items()},
            "selected_epoch": self.selected_epoch,
        }


def split_windows(windows: Sequence[SequenceWindow], val_fraction: float, seed: int):
    n = len(windows)
    perm = np.random.default_rng([seed, 1]).permutation(n)
    n_val = int(round(val_fraction * n)) if n > 1 else 0
    val_idx = np.sort(perm[:n_val])
    tr_idx = np.sort(perm[n_val:])
    return [windows[j] for j in tr_idx], [windows[j] for j in val_idx]


def train(
    windows: Sequence[SequenceWindow],
    cfg: ModelConfig,
    init: ClstmParams | None = None,
) -> tuple[ClstmParams, TrainReport]:
    """Adam training with checkpoint selection on a held-out split.

    Every ``checkpoint_every`` epochs (and after the last epoch) the current
    parameters are scored on the validation windows; the best checkpoint is
    returned.  ``init`` warm-starts from existing parameters.
    """
    cfg.validate()
    if not windows:
        raise ValidationError("empty training set")
    tr, va = split_windows(windows, cfg.val_fraction, cfg.seed)
    if not tr:
        tr, va = list(windows), []
    data = stack_windows(tr)
    val_data = stack_windows(va) if va else data
    params = init.copy() if init is not None else init_params(cfg)
    if init is not None:
        params = ClstmParams(cfg, params.arrays)
    state = AdamState()
    rng = np.random.default_rng([cfg.seed, 2])
    n = data[0].shape[0]
    bs = cfg.batch_size or n

    train_loss: list[float] = []
    val_loss: dict[int, float] = {}
    best = (math.inf, 0, params)
    for epoch in range(cfg.max_epoch):
        if bs >= n:
            batches = [np.arange(n)]
        else:
            perm = rng.permutation(n)
            batches = [perm[j : j + bs] for j in range(0, n, bs)]
        ep_loss = 0.0
        for idx in batches:
            L, gr = loss_and_grad(params, *(x[idx] for x in data))
            ep_loss += L * len(idx) / n
            params, state = adam_step(params, gr, state, cfg.lr)
        train_loss.append(ep_loss)
        done = epoch + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.max_epoch:
            vl = batch_loss(params, *val_data)
            val_loss[done] = vl
            if vl < best[0]:
                best = (vl, done, params)
    if cfg.max_epoch == 0:
        val_loss[0] = batch_loss(params, *val_data)
    return best[2], TrainReport(train_loss, val_loss, best[1])


def merge_models(old: ClstmParams, new: ClstmParams, lam: float) -> ClstmParams:
    """Parameter-wise ``(1 - lam) * old + lam * new``."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"merge coefficient {lam} outside [0, 1]")
    if old.config.shapes() != new.config.shapes():
        raise ConfigError("cannot merge models with different shapes")
    if lam == 0.0:
        return old.copy()
    if lam == 1.0:
        return new.copy()
    return ClstmParams(old.config, {k: (1.0 - lam) * old.arrays[k] + lam * new.arrays[k] for k in old.arrays})
