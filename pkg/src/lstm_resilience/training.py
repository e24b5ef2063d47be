"""Resilience-penalised training of single-layer LSTMs.

The loss is ``MAE + lambda * sum_l max(rho(A_s^(l)(k)) - 1 + eps, 0)``.
Both parts have hand-written gradients: full backpropagation through time
for the MAE, and reverse-mode differentiation through the invariant-set
recursion, the induced 2-norms and the 2x2 spectral radius for the penalty.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .invariant_set import DEGENERATE_FORGET_TOL, DegenerateForgetGate, g_cell, g_gate
from .lstm_core import GATES, LstmLayerParams, LstmParams, sigmoid
from .stability_cert import LayerNorms, delta_iss_entries, spectral_radius_2x2, top_singular

log = logging.getLogger(__name__)

# -- flat parameter vectors ----------------------------------------------------


def _field_names(params: LstmParams):
    names = []
    for l, layer in enumerate(params.layers):
        for g in GATES:
            names += [(l, f"W_{g}"), (l, f"U_{g}"), (l, f"b_{g}")]
    return names + [(None, "U_y"), (None, "b_y")]


def flatten(params: LstmParams) -> np.ndarray:
    parts = []
    for l, name in _field_names(params):
        src = params if l is None else params.layers[l]
        parts.append(np.ravel(getattr(src, name)))
    return np.concatenate(parts)


def unflatten(template: LstmParams, theta: np.ndarray) -> LstmParams:
    """Inverse of :func:`flatten` using ``template`` for shapes and ``x_max``."""
    pos = 0
    layer_kw = [dict() for _ in template.layers]
    top = {}
    for l, name in _field_names(template):
        src = template if l is None else template.layers[l]
        shape = getattr(src, name).shape
        n = int(np.prod(shape))
        arr = np.asarray(theta[pos : pos + n]).reshape(shape)
        pos += n
        (top if l is None else layer_kw[l])[name] = arr
    layers = tuple(LstmLayerParams(**kw) for kw in layer_kw)
    return LstmParams(layers, top["U_y"], top["b_y"], template.x_max)


def zeros_like(params: LstmParams) -> dict:
    """Mutable gradient accumulator keyed like :func:`_field_names`."""
    out = {}
    for l, name in _field_names(params):
        src = params if l is None else params.layers[l]
        out[(l, name)] = np.zeros_like(getattr(src, name))
    return out


def grad_to_params(params: LstmParams, grads: dict) -> LstmParams:
    theta = np.concatenate([np.ravel(grads[key]) for key in _field_names(params)])
    return unflatten(params, theta)


# -- penalty -------------------------------------------------------------------


def layer_rho(layer: LstmLayerParams, x_max_layer: float, k: int) -> float:
    return _layer_forward(layer, x_max_layer, k)[0]


def penalty(params: LstmParams, k: int = 0, epsilon: float = 0.0) -> float:
    """Sum over layers of the hinge ``max(rho - 1 + eps, 0)``."""
    if not 0.0 <= epsilon <= 0.5:
        raise ValueError(f"epsilon must lie in [0, 0.5], got {epsilon}")
    return sum(
        max(layer_rho(layer, params.layer_x_max(l), k) - 1.0 + epsilon, 0.0)
        for l, layer in enumerate(params.layers)
    )


def _active_row(layer, gate, eta_prev, xm):
    """Row achieving the gate bound and the bound itself (None if clamped to 0)."""
    if gate == "c":
        v = xm * np.abs(layer.W_c).sum(1) + eta_prev * np.abs(layer.U_c).sum(1) + np.abs(layer.b_c)
        r = int(np.argmax(v))
        return r, float(v[r])
    v = xm * np.abs(layer.W(gate)).sum(1) + eta_prev * np.abs(layer.U(gate)).sum(1) + layer.b(gate)
    r = int(np.argmax(v))
    if v[r] <= 0.0:
        return None, 0.0
    return r, float(v[r])


def _layer_forward(layer: LstmLayerParams, xm: float, k: int):
    tape = []
    eta_prev = 1.0
    for _ in range(k + 1):
        rows = {g: _active_row(layer, g, eta_prev, xm) for g in GATES}
        sf, si, so = (float(sigmoid(np.array([rows[g][1]]))[0]) for g in ("f", "i", "o"))
        pc = math.tanh(rows["c"][1])
        if 1.0 - sf < DEGENERATE_FORGET_TOL:
            raise DegenerateForgetGate("degenerate forget gate during penalty evaluation")
        c_bar = si * pc / (1.0 - sf)
        eta = math.tanh(c_bar) * so
        tape.append((eta_prev, rows, sf, si, so, pc, c_bar, eta))
        eta_prev = eta
    svd = {g: top_singular(layer.U(g)) for g in GATES}
    norms = LayerNorms(
        U_f=svd["f"][0], U_i=svd["i"][0], U_c=svd["c"][0], U_o=svd["o"][0],
        W_f=0.0, W_i=0.0, W_c=0.0, W_o=0.0,
    )
    _, _, so, pc, c_bar, _ = tape[-1][2:]
    sf, si = tape[-1][2], tape[-1][3]
    A, _ = delta_iss_entries(sf, si, so, pc, c_bar, norms)
    return spectral_radius_2x2(A), A, tape, svd, norms


def _rho_partials(A):
    """Partial derivatives of the dominant eigenvalue w.r.t. (a11, a12, a21, a22)."""
    D = A.discriminant
    if D <= 0.0:
        # repeated eigenvalue: take the symmetric one-sided branch
        return 0.5, 0.0, 0.0, 0.5
    sD = math.sqrt(D)
    d = A.a11 - A.a22
    return 0.5 * (1.0 + d / sD), A.a21 / sD, A.a12 / sD, 0.5 * (1.0 - d / sD)


def layer_rho_gradient(layer: LstmLayerParams, xm: float, k: int):
    """``(rho, grads)`` with ``grads`` a dict of arrays shaped like the layer fields."""
    rho, A, tape, svd, norms = _layer_forward(layer, xm, k)
    grads = {name: np.zeros_like(getattr(layer, name)) for name in
             [f"{p}_{g}" for g in GATES for p in ("W", "U", "b")]}
    r11, r12, r21, r22 = _rho_partials(A)
    _, _, sf, si, so, pc, c_bar, _ = tape[-1]
    alpha = A.alpha_s
    tc = math.tanh(c_bar)
    d_alpha = r12 + r22 * so
    d_sf = r11 + r21 * so
    d_so = r21 * sf + r22 * alpha
    d_cbar = d_alpha * 0.25 * norms.U_f + r22 * 0.25 * (1.0 - tc * tc) * norms.U_o
    d_si = d_alpha * norms.U_c
    d_pc = d_alpha * 0.25 * norms.U_i
    d_norm = {
        "f": d_alpha * 0.25 * c_bar,
        "c": d_alpha * si,
        "i": d_alpha * 0.25 * pc,
        "o": r22 * 0.25 * tc,
    }
    for g, dn in d_norm.items():
        _, u, v = svd[g]
        if dn and u.size:
            grads[f"U_{g}"] += dn * np.outer(u, v)

    d_eta = 0.0
    for j in range(len(tape) - 1, -1, -1):
        eta_prev, rows, sf, si, so, pc, c_bar, eta = tape[j]
        tc = math.tanh(c_bar)
        # eta = tanh(c_bar) * so
        d_cbar += d_eta * (1.0 - tc * tc) * so
        d_so += d_eta * tc
        # c_bar = si * pc / (1 - sf)
        inv = 1.0 / (1.0 - sf)
        d_si += d_cbar * pc * inv
        d_pc += d_cbar * si * inv
        d_sf += d_cbar * si * pc * inv * inv
        d_G = {
            "f": d_sf * sf * (1.0 - sf),
            "i": d_si * si * (1.0 - si),
            "o": d_so * so * (1.0 - so),
            "c": d_pc * (1.0 - pc * pc),
        }
        d_eta_prev = 0.0
        for g, dG in d_G.items():
            r, _ = rows[g]
            if r is None or dG == 0.0:
                continue
            W, U = layer.W(g), layer.U(g)
            grads[f"W_{g}"][r] += dG * xm * np.sign(W[r])
            grads[f"U_{g}"][r] += dG * eta_prev * np.sign(U[r])
            grads[f"b_{g}"][r] += dG * (np.sign(layer.b_c[r]) if g == "c" else 1.0)
            d_eta_prev += dG * float(np.abs(U[r]).sum())
        d_eta = d_eta_prev
        d_sf = d_si = d_so = d_pc = d_cbar = 0.0
    return rho, grads


def penalty_gradient(params: LstmParams, k: int = 0, epsilon: float = 0.0):
    """``(penalty, gradient)``; the gradient is an :class:`LstmParams` of partials."""
    if not 0.0 <= epsilon <= 0.5:
        raise ValueError(f"epsilon must lie in [0, 0.5], got {epsilon}")
    grads = zeros_like(params)
    total = 0.0
    for l, layer in enumerate(params.layers):
        rho, g = layer_rho_gradient(layer, params.layer_x_max(l), k)
        excess = rho - 1.0 + epsilon
        if excess > 0.0:
            total += excess
            for name, arr in g.items():
                grads[(l, name)] += arr
    return total, grad_to_params(params, grads)


# -- task loss -------------------------------------------------------------------


class NonFiniteForward(FloatingPointError):
    pass


def mae(pred, target, discard: int = 0) -> float:
    """Mean absolute error over steps ``t >= discard`` (axis -2 is time)."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.ndim == 1:
        pred, target = pred[:, None], target[:, None]
    return float(np.mean(np.abs(pred[..., discard:, :] - target[..., discard:, :])))


def _stack(layer: LstmLayerParams):
    W = np.concatenate([layer.W(g) for g in GATES])
    U = np.concatenate([layer.U(g) for g in GATES])
    b = np.concatenate([layer.b(g) for g in GATES])
    return W, U, b


def forward_batch(params: LstmParams, xs: np.ndarray, keep: bool = False):
    """Batched forward pass of a single-layer model; ``xs`` has shape (B, T, n_x)."""
    layer = params.layers[0]
    W, U, b = _stack(layer)
    n = layer.n_c
    B, T, _ = xs.shape
    pre_x = xs @ W.T + b
    h = np.zeros((B, n))
    c = np.zeros((B, n))
    hs = np.empty((B, T, n))
    cache = [] if keep else None
    UT = U.T
    for t in range(T):
        z = pre_x[:, t] + h @ UT
        # logistic via tanh: overflow-free and one vectorised call for all gates
        s = 0.5 + 0.5 * np.tanh(0.5 * z)
        f = s[:, :n]
        i = s[:, n : 2 * n]
        g = np.tanh(z[:, 2 * n : 3 * n])
        o = s[:, 3 * n :]
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        if keep:
            cache.append((f, i, g, o, c, tc, h))
        c, h = c_new, h_new
        hs[:, t] = h
    ys = hs @ params.U_y.T + params.b_y
    if not np.all(np.isfinite(ys)):
        bad = int(np.argmax(~np.all(np.isfinite(ys), axis=(0, 2))))
        raise NonFiniteForward(f"non-finite output at step {bad}")
    return ys, hs, cache


def bptt_gradient(params: LstmParams, xs, ys_target, warmup_discard: int = 10):
    """Exact MAE gradient by backpropagation through time (single layer).

    Returns ``(gradient as LstmParams, mae)``.
    """
    if params.n_layers != 1:
        raise ValueError("bptt_gradient supports single-layer models only")
    xs = np.asarray(xs, dtype=float)
    ys_target = np.asarray(ys_target, dtype=float)
    if xs.ndim == 2:
        xs, ys_target = xs[None], ys_target[None]
    B, T, _ = xs.shape
    if ys_target.shape != (B, T, params.n_y):
        raise ValueError(f"targets shape {ys_target.shape} does not match {(B, T, params.n_y)}")
    if not 0 <= warmup_discard < T:
        raise ValueError("warmup_discard must be smaller than the window length")
    layer = params.layers[0]
    n = layer.n_c
    W, U, b = _stack(layer)
    ys, hs, cache = forward_batch(params, xs, keep=True)
    diff = ys[:, warmup_discard:] - ys_target[:, warmup_discard:]
    loss = float(np.mean(np.abs(diff)))
    dy = np.zeros_like(ys)
    dy[:, warmup_discard:] = np.sign(diff) / diff.size

    dUy = np.einsum("bty,btn->yn", dy, hs)
    dby = dy.sum(axis=(0, 1))
    dh_out = dy @ params.U_y
    dW = np.zeros_like(W)
    dU = np.zeros_like(U)
    db = np.zeros_like(b)
    dh = np.zeros((B, n))
    dc = np.zeros((B, n))
    dz = np.empty((B, 4 * n))
    for t in range(T - 1, -1, -1):
        f, i, g, o, c_prev, tc, h_prev = cache[t]
        dh_t = dh_out[:, t] + dh
        dct = dc + dh_t * o * (1.0 - tc * tc)
        dz[:, :n] = dct * c_prev * f * (1.0 - f)
        dz[:, n : 2 * n] = dct * g * i * (1.0 - i)
        dz[:, 2 * n : 3 * n] = dct * i * (1.0 - g * g)
        dz[:, 3 * n :] = dh_t * tc * o * (1.0 - o)
        dW += dz.T @ xs[:, t]
        dU += dz.T @ h_prev
        db += dz.sum(axis=0)
        dh = dz @ U
        dc = dct * f
    grads = {}
    for j, gname in enumerate(GATES):
        sl = slice(j * n, (j + 1) * n)
        grads[(0, f"W_{gname}")] = dW[sl]
        grads[(0, f"U_{gname}")] = dU[sl]
        grads[(0, f"b_{gname}")] = db[sl]
    grads[(None, "U_y")] = dUy
    grads[(None, "b_y")] = dby
    return grad_to_params(params, grads), loss


# -- optimisation ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    epsilon: float = 0.1
    k: int = 0
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    window_length: int = 100
    window_step: int = 1
    warmup_discard: int = 10
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    n_c: int = 22

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.epsilon <= 0.5:
            raise ValueError("epsilon must lie in [0, 0.5]")
        if not 0 <= self.warmup_discard < self.window_length:
            raise ValueError("warmup_discard must be smaller than window_length")
        if self.batch_size < 1 or self.epochs < 0 or self.window_step < 1:
            raise ValueError("batch_size, window_step must be >= 1 and epochs >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    task_loss: float
    penalty: float
    lam: float

    @property
    def total(self) -> float:
        return self.task_loss + self.lam * self.penalty


@dataclass
class EpochRecord:
    epoch: int
    train: LossBreakdown
    val_mae: float
    lr: float
    rho: float


@dataclass
class TrainResult:
    params: LstmParams
    history: list = field(default_factory=list)
    diverged: bool = False
    message: str = ""


class Adam:
    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, theta, grad):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class ReduceLROnPlateau:
    """Multiply the rate by ``factor`` once the metric fails to improve for ``patience`` epochs."""

    def __init__(self, optimizer: Adam, factor=0.1, patience=10, threshold=1e-4):
        self.opt = optimizer
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.bad = 0

    def step(self, metric: float) -> None:
        if metric < self.best * (1.0 - self.threshold):
            self.best = metric
            self.bad = 0
        else:
            self.bad += 1
        if self.bad > self.patience:
            self.opt.lr *= self.factor
            self.bad = 0


def init_params(n_x: int, n_c: int, n_y: int, rng: np.random.Generator, x_max: float = 1.0) -> LstmParams:
    """Every weight and bias uniform in (-1/sqrt(n_c), 1/sqrt(n_c))."""
    a = 1.0 / math.sqrt(n_c)
    kw = {}
    for g in GATES:
        kw[f"W_{g}"] = rng.uniform(-a, a, size=(n_c, n_x))
        kw[f"U_{g}"] = rng.uniform(-a, a, size=(n_c, n_c))
        kw[f"b_{g}"] = rng.uniform(-a, a, size=n_c)
    return LstmParams(
        (LstmLayerParams(**kw),), rng.uniform(-a, a, size=(n_y, n_c)), rng.uniform(-a, a, size=n_y), x_max
    )


def windows(x: np.ndarray, y: np.ndarray, length: int, step: int):
    starts = np.arange(0, x.shape[0] - length + 1, step)
    idx = starts[:, None] + np.arange(length)
    return x[idx], y[idx]


def evaluate_mae(params: LstmParams, xs, ys, discard: int, y_lo=None, y_hi=None, chunk: int = 256) -> float:
    """MAE over windows, optionally on the de-normalised output scale."""
    from .twotank_bench import denormalize

    total, count = 0.0, 0
    for s in range(0, xs.shape[0], chunk):
        pred, _, _ = forward_batch(params, xs[s : s + chunk])
        tgt = ys[s : s + chunk]
        if y_lo is not None:
            pred, tgt = denormalize(pred, y_lo, y_hi), denormalize(tgt, y_lo, y_hi)
        err = np.abs(pred[:, discard:] - tgt[:, discard:])
        total += err.sum()
        count += err.size
    return float(total / count)


def train(params0: LstmParams, train_xy, val_xy, cfg: TrainConfig, callback=None) -> TrainResult:
    """Adam on ``MAE + lam * penalty`` over sliding windows of the training series.

    ``train_xy`` and ``val_xy`` are ``(x, y)`` pairs of normalised series with
    shapes ``(T, n_x)`` and ``(T, n_y)``.
    """
    from .twotank_bench import stream

    xw, yw = windows(*train_xy, cfg.window_length, cfg.window_step)
    xv, yv = windows(*val_xy, cfg.window_length, cfg.window_length)
    rng = stream(cfg.seed, "shuffle")
    theta = flatten(params0)
    params = params0
    opt = Adam(cfg.learning_rate, cfg.betas, cfg.adam_eps)
    sched = ReduceLROnPlateau(opt, cfg.plateau_factor, cfg.plateau_patience)
    result = TrainResult(params=params0)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(xw.shape[0])
        task_sum = pen_sum = 0.0
        n_batches = 0
        try:
            for s in range(0, len(order), cfg.batch_size):
                batch = order[s : s + cfg.batch_size]
                g_task, task = bptt_gradient(params, xw[batch], yw[batch], cfg.warmup_discard)
                grad = flatten(g_task)
                pen = 0.0
                if cfg.lam > 0:
                    pen, g_pen = penalty_gradient(params, cfg.k, cfg.epsilon)
                    grad = grad + cfg.lam * flatten(g_pen)
                theta = opt.step(theta, grad)
                if not np.all(np.isfinite(theta)):
                    raise NonFiniteForward("parameters became non-finite")
                params = unflatten(params0, theta)
                task_sum += task
                pen_sum += pen
                n_batches += 1
        except (NonFiniteForward, DegenerateForgetGate, FloatingPointError) as exc:
            result.diverged = True
            result.message = f"epoch {epoch}: {exc}"
            log.warning("training aborted: %s", result.message)
            return result
        val = evaluate_mae(params, xv, yv, cfg.warmup_discard)
        pen_end = penalty(params, cfg.k, cfg.epsilon)
        sched.step(val + cfg.lam * pen_end)
        rho = layer_rho(params.layers[0], params.x_max, cfg.k)
        rec = EpochRecord(
            epoch=epoch,
            train=LossBreakdown(task_sum / max(n_batches, 1), pen_end, cfg.lam),
            val_mae=val,
            lr=opt.lr,
            rho=rho,
        )
        result.history.append(rec)
        result.params = params
        log.info("epoch %d task %.5f pen %.5f val %.5f rho %.4f lr %.1e",
                 epoch, rec.train.task_loss, pen_end, val, rho, opt.lr)
        if callback is not None:
            callback(rec)
    result.params = params
    return result
