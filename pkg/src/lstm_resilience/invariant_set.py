"""Invariant boxes for the LSTM state and their refinement sequences.

For each layer we iterate, starting from ``eta(-1) = 1``::

    sigma_*(k) = sigmoid(G_*(eta(k-1)))        * in {f, i, o}
    phi_c(k)   = tanh(G_c(eta(k-1)))
    c_bar(k)   = sigma_i(k) * phi_c(k) / (1 - sigma_f(k))
    eta(k)     = tanh(c_bar(k)) * sigma_o(k)

with ``G_*(eta) = ||(x_max |W_*| 1 + eta |U_*| 1 + b_*)_+||_inf`` and
``G_c(eta) = ||x_max |W_c| 1 + eta |U_c| 1 + |b_c|||_inf``.  The box
``{||c||_inf <= c_bar(k), ||h||_inf <= eta(k)}`` is forward invariant for
every ``k`` and shrinks as ``k`` grows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lstm_core import LstmLayerParams, LstmParams, LstmState, sigmoid

DEGENERATE_FORGET_TOL = 1e-12
MEMBERSHIP_TOL = 1e-9


class DegenerateForgetGate(ArithmeticError):
    pass


def _sig(z: float) -> float:
    return float(sigmoid(np.array([z]))[0])


def _row_drive(layer: LstmLayerParams, gate: str, eta_prev: float, x_max_layer: float) -> np.ndarray:
    return x_max_layer * np.abs(layer.W(gate)).sum(axis=1) + eta_prev * np.abs(layer.U(gate)).sum(axis=1)


def g_gate(layer: LstmLayerParams, gate: str, eta_prev: float, x_max_layer: float) -> float:
    """Worst-case pre-activation of a sigmoid gate (``gate`` in f, i, o)."""
    if gate not in ("f", "i", "o"):
        raise ValueError(f"g_gate handles sigmoid gates f/i/o, got {gate!r}")
    v = _row_drive(layer, gate, eta_prev, x_max_layer) + layer.b(gate)
    return float(np.max(np.maximum(v, 0.0), initial=0.0))


def g_cell(layer: LstmLayerParams, eta_prev: float, x_max_layer: float) -> float:
    """Worst-case magnitude of the candidate-cell pre-activation."""
    v = _row_drive(layer, "c", eta_prev, x_max_layer) + np.abs(layer.b_c)
    return float(np.max(v, initial=0.0))


@dataclass(frozen=True)
class GammaSequences:
    """Bound sequences, arrays of shape ``(n_layers, k_max + 1)`` indexed by k."""

    sigma_f: np.ndarray
    sigma_i: np.ndarray
    sigma_o: np.ndarray
    phi_c: np.ndarray
    eta: np.ndarray
    c_bar: np.ndarray

    @property
    def k_max(self) -> int:
        return self.eta.shape[1] - 1

    @property
    def n_layers(self) -> int:
        return self.eta.shape[0]

    def eta_prev(self, l: int, k: int) -> float:
        return 1.0 if k == 0 else float(self.eta[l, k - 1])

    def effective_k_inf(self, l: int, tol: float = 1e-12):
        """First k with ``|eta(k) - eta(k-1)| < tol`` or None (informational only)."""
        e = np.concatenate([[1.0], self.eta[l]])
        hits = np.nonzero(np.abs(np.diff(e)) < tol)[0]
        return int(hits[0]) if hits.size else None

    def rows(self):
        """(layer, k, sigma_f, sigma_i, sigma_o, phi_c, eta, c_bar) with 1-based layers."""
        for l in range(self.n_layers):
            for k in range(self.k_max + 1):
                yield (
                    l + 1,
                    k,
                    float(self.sigma_f[l, k]),
                    float(self.sigma_i[l, k]),
                    float(self.sigma_o[l, k]),
                    float(self.phi_c[l, k]),
                    float(self.eta[l, k]),
                    float(self.c_bar[l, k]),
                )


def layer_sequence_step(layer: LstmLayerParams, eta_prev: float, x_max_layer: float):
    """One step of the recursion: ``eta(k-1) -> (sf, si, so, phic, c_bar, eta)``."""
    sf = _sig(g_gate(layer, "f", eta_prev, x_max_layer))
    si = _sig(g_gate(layer, "i", eta_prev, x_max_layer))
    so = _sig(g_gate(layer, "o", eta_prev, x_max_layer))
    pc = float(np.tanh(g_cell(layer, eta_prev, x_max_layer)))
    denom = 1.0 - sf
    if denom < DEGENERATE_FORGET_TOL:
        raise DegenerateForgetGate(
            f"degenerate forget gate: 1 - sigma_f = {denom:.3g} (forget-gate drive saturates)"
        )
    c_bar = si * pc / denom
    eta = float(np.tanh(c_bar)) * so
    return sf, si, so, pc, c_bar, eta


def compute_sequences(params: LstmParams, k_max: int) -> GammaSequences:
    if k_max < 0:
        raise ValueError("k_max must be >= 0")
    L, K = params.n_layers, k_max + 1
    out = {name: np.empty((L, K)) for name in ("sigma_f", "sigma_i", "sigma_o", "phi_c", "eta", "c_bar")}
    for l, layer in enumerate(params.layers):
        xm = params.layer_x_max(l)
        eta_prev = 1.0
        for k in range(K):
            sf, si, so, pc, cb, eta = layer_sequence_step(layer, eta_prev, xm)
            out["sigma_f"][l, k] = sf
            out["sigma_i"][l, k] = si
            out["sigma_o"][l, k] = so
            out["phi_c"][l, k] = pc
            out["c_bar"][l, k] = cb
            out["eta"][l, k] = eta
            eta_prev = eta
    for arr in out.values():
        arr.setflags(write=False)
    return GammaSequences(**out)


@dataclass(frozen=True)
class SetBounds:
    c_bound: float
    h_bound: float
    k: int


def bounds(seq: GammaSequences, l: int, k: int) -> SetBounds:
    """Radii of the invariant box of layer ``l`` (0-based) at refinement ``k``."""
    if not 0 <= k <= seq.k_max:
        raise IndexError(f"k={k} outside computed range 0..{seq.k_max}")
    c_bar = float(seq.c_bar[l, k])
    return SetBounds(c_bound=c_bar, h_bound=float(np.tanh(c_bar)) * float(seq.sigma_o[l, k]), k=k)


def all_bounds(seq: GammaSequences, k: int) -> list:
    return [bounds(seq, l, k) for l in range(seq.n_layers)]


def membership(state: LstmState, layer_bounds, tol: float = MEMBERSHIP_TOL) -> bool:
    """True when every layer's (c, h) lies in its closed box, up to ``tol``."""
    for c, h, b in zip(state.c, state.h, layer_bounds):
        if np.max(np.abs(c), initial=0.0) > b.c_bound + tol:
            return False
        if np.max(np.abs(h), initial=0.0) > b.h_bound + tol:
            return False
    return True


def sample_in_set(rng: np.random.Generator, params: LstmParams, layer_bounds, n: int | None = None):
    """Uniform draws from the product of boxes (one LstmState, or a list of ``n``)."""

    def one():
        cs, hs = [], []
        for layer, b in zip(params.layers, layer_bounds):
            cs.append(rng.uniform(-b.c_bound, b.c_bound, size=layer.n_c))
            hs.append(rng.uniform(-b.h_bound, b.h_bound, size=layer.n_c))
        return LstmState(tuple(cs), tuple(hs))

    return one() if n is None else [one() for _ in range(n)]


# -- fixed-point approximation of eta(infinity) ---------------------------------


def _tangent_sigmoid(w: float, w0: float) -> float:
    s = _sig(w0)
    return s + s * (1.0 - s) * (w - w0)


def _tangent_tanh(w: float, w0: float) -> float:
    p = float(np.tanh(w0))
    return p + (1.0 - p * p) * (w - w0)


def _gates(layer: LstmLayerParams, w: float, xm: float):
    return (
        g_gate(layer, "f", w, xm),
        g_gate(layer, "i", w, xm),
        g_gate(layer, "o", w, xm),
        g_cell(layer, w, xm),
    )


def g_bar(layer: LstmLayerParams, w: float, xm: float) -> float:
    """The recursion map ``eta(k-1) -> eta(k)``."""
    Gf, Gi, Go, Gc = _gates(layer, w, xm)
    return _sig(Go) * float(np.tanh(_sig(Gi) * np.tanh(Gc) / (1.0 - _sig(Gf))))


def g_check(layer: LstmLayerParams, w: float, w0: float, xm: float) -> float:
    """Convex majorant of :func:`g_bar` built from tangents at ``w0``."""
    Gf, Gi, Go, Gc = _gates(layer, w, xm)
    Gf0, Gi0, Go0, Gc0 = _gates(layer, w0, xm)
    inner0 = _sig(Gi0) * np.tanh(Gc0) / (1.0 - _sig(Gf0))
    inner = _tangent_sigmoid(Gi, Gi0) * _tangent_tanh(Gc, Gc0) / (1.0 - _sig(Gf))
    return _tangent_sigmoid(Go, Go0) * _tangent_tanh(inner, inner0)


@dataclass(frozen=True)
class EtaApprox:
    value: float
    lower: float
    iterations: int
    stalled: bool

    def __float__(self) -> float:
        return float(self.value)


def eta_infinity_approx(params: LstmParams, l: int, tol: float = 1e-12, max_iter: int = 1000) -> EtaApprox:
    """Upper bound on the limit of ``eta(k)`` for layer ``l`` (0-based).

    Starts from ``kappa = g_bar(0)`` and ``eta = g_bar(1)`` and repeats the
    chord update ``eta <- (eta*g_check(kappa; eta) - kappa*g_bar(eta)) /
    (eta - kappa - g_bar(eta) + g_check(kappa; eta))``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    layer, xm = params.layers[l], params.layer_x_max(l)
    kappa = g_bar(layer, 0.0, xm)
    eta = g_bar(layer, 1.0, xm)
    for it in range(1, max_iter + 1):
        gb = g_bar(layer, eta, xm)
        gc = g_check(layer, kappa, eta, xm)
        denom = eta - kappa - gb + gc
        if abs(denom) < 1e-14:
            return EtaApprox(eta, kappa, it - 1, True)
        new = (eta * gc - kappa * gb) / denom
        # rounding can push the chord a hair outside the bracket
        new = min(max(new, kappa), eta)
        if abs(new - eta) < tol:
            return EtaApprox(new, kappa, it, False)
        eta = new
    return EtaApprox(eta, kappa, max_iter, False)
