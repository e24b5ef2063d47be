"""δISS / ISS certification of stacked LSTMs.

For every layer a nonnegative 2x2 matrix ``A(k)`` bounds how the pair
``(||Δc||, ||Δh||)`` propagates from one step to the next.  If its spectral
radius is below one on every layer the network is incrementally ISS, and a
real Schur factorisation of ``A(k)`` gives the explicit decay bound used by
the recovery-time estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .invariant_set import GammaSequences, compute_sequences
from .lstm_core import LstmParams

DELTA_ISS = "dISS"
ISS = "ISS"

POWER_TOL = 1e-10
POWER_MAX_ITER = 10000
POWER_SQUARINGS = 6


class PowerIterationError(ArithmeticError):
    def __init__(self, message, last_iterate=None, residual=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


def _start_vector(n: int) -> np.ndarray:
    # all-ones with a small deterministic tilt, so the start is not orthogonal
    # to the dominant direction for symmetric sign patterns
    v = np.ones(n) + 1e-3 * np.arange(1, n + 1) / n
    return v / np.linalg.norm(v)


def _accelerated(G: np.ndarray, squarings: int) -> np.ndarray:
    # G^(2^squarings), rescaled each time; same dominant eigenvector, much
    # wider relative gap when the top singular values nearly coincide
    B = G / np.max(np.abs(G))
    for _ in range(squarings):
        B = B @ B
        peak = np.max(np.abs(B))
        if peak == 0.0:
            return G
        B /= peak
    return B


def top_singular(M, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER, squarings: int = POWER_SQUARINGS):
    """Largest singular value and its singular pair ``(sigma, u, v)`` of ``M``.

    Power iteration on ``(M^T M)^(2^squarings)``; stops when the Rayleigh
    quotient of ``M^T M`` changes by less than ``tol`` relatively and the
    iterate itself has stopped moving.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {M.shape}")
    m, n = M.shape
    if m == 0 or n == 0 or not np.any(M):
        return 0.0, np.zeros(m), np.zeros(n)
    G = M.T @ M
    B = _accelerated(G, squarings)
    v = _start_vector(n)
    w = B @ v
    if not np.any(w):
        v = np.arange(1.0, n + 1.0) ** 2
        v = (v / np.linalg.norm(v))[::-1].copy()
        w = B @ v
    lam = float(v @ G @ v)
    settled = 0
    for _ in range(max_iter):
        nw = np.linalg.norm(w)
        if nw == 0.0:
            break
        step = np.linalg.norm(w / nw - v)
        v = w / nw
        w = B @ v
        lam_new = float(v @ G @ v)
        # the direction feeds gradients, so wait for it to settle as well;
        # with a (near) repeated top value it may drift forever inside the
        # top subspace, and any direction there is acceptable
        settled = settled + 1 if abs(lam_new - lam) <= tol * abs(lam_new) else 0
        if settled and (step <= math.sqrt(tol) * 1e-3 or settled >= 100):
            lam = lam_new
            break
        lam = lam_new
    else:
        raise PowerIterationError(
            f"power iteration did not converge in {max_iter} iterations",
            last_iterate=v,
            residual=float(np.linalg.norm(G @ v - lam * v)),
        )
    sigma = math.sqrt(max(lam, 0.0))
    if sigma == 0.0:
        return 0.0, np.zeros(m), v
    u = M @ v / sigma
    return sigma, u, v


def induced_2norm(M) -> float:
    return top_singular(M)[0]


@dataclass(frozen=True)
class CertMatrix:
    a11: float
    a12: float
    a21: float
    a22: float
    kind: str = DELTA_ISS
    alpha_s: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    @property
    def trace(self) -> float:
        return self.a11 + self.a22

    @property
    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    @property
    def discriminant(self) -> float:
        """``trace^2 - 4 det`` written as a sum of nonnegative terms."""
        return (self.a11 - self.a22) ** 2 + 4.0 * self.a12 * self.a21


@dataclass(frozen=True)
class GainVectors:
    a_x: tuple
    alpha_x: float
    a_b: tuple = (0.0, 0.0)

    @property
    def a_x_norm(self) -> float:
        return math.hypot(*self.a_x)


@dataclass(frozen=True)
class LayerNorms:
    """Induced 2-norms of a layer's weight matrices."""

    U_f: float
    U_i: float
    U_c: float
    U_o: float
    W_f: float
    W_i: float
    W_c: float
    W_o: float

    @classmethod
    def of(cls, layer) -> "LayerNorms":
        return cls(**{name: induced_2norm(getattr(layer, name)) for name in cls.__dataclass_fields__})


def delta_iss_entries(sf, si, so, pc, c_bar, norms: LayerNorms):
    """Raw formulas shared by :func:`delta_iss_matrix` and the training penalty."""
    alpha_s = 0.25 * norms.U_f * c_bar + si * norms.U_c + 0.25 * norms.U_i * pc
    alpha_x = 0.25 * norms.W_f * c_bar + si * norms.W_c + 0.25 * norms.W_i * pc
    tc = math.tanh(c_bar)
    A = CertMatrix(
        a11=sf,
        a12=alpha_s,
        a21=so * sf,
        a22=alpha_s * so + 0.25 * tc * norms.U_o,
        kind=DELTA_ISS,
        alpha_s=alpha_s,
    )
    gains = GainVectors(a_x=(alpha_x, alpha_x * so + 0.25 * tc * norms.W_o), alpha_x=alpha_x)
    return A, gains


def _seq_values(seq: GammaSequences, l: int, k: int):
    if not 0 <= k <= seq.k_max:
        raise IndexError(f"k={k} outside computed range 0..{seq.k_max}")
    return (
        float(seq.sigma_f[l, k]),
        float(seq.sigma_i[l, k]),
        float(seq.sigma_o[l, k]),
        float(seq.phi_c[l, k]),
        float(seq.c_bar[l, k]),
    )


def delta_iss_matrix(params: LstmParams, seq: GammaSequences, l: int, k: int, norms: LayerNorms | None = None):
    """``(A_s(k), gains)`` for layer ``l`` (0-based)."""
    norms = norms or LayerNorms.of(params.layers[l])
    return delta_iss_entries(*_seq_values(seq, l, k), norms)


def iss_matrix(params: LstmParams, seq: GammaSequences, l: int, k: int, norms: LayerNorms | None = None):
    """ISS variant; the bias gain ``a_b`` is nonzero on the last layer only."""
    norms = norms or LayerNorms.of(params.layers[l])
    sf, si, so, _, _ = _seq_values(seq, l, k)
    A = CertMatrix(
        a11=sf,
        a12=si * norms.U_c,
        a21=so * sf,
        a22=so * si * norms.U_c,
        kind=ISS,
    )
    a_b = (si, so * si) if l == params.n_layers - 1 else (0.0, 0.0)
    gains = GainVectors(a_x=(si * norms.W_c, so * si * norms.W_c), alpha_x=si * norms.W_c, a_b=a_b)
    return A, gains


def _check_nonneg(A: CertMatrix) -> None:
    for name in ("a11", "a12", "a21", "a22"):
        if getattr(A, name) < 0:
            raise ValueError(f"certification matrix entry {name} = {getattr(A, name)} is negative")


def spectral_radius_2x2(A: CertMatrix) -> float:
    _check_nonneg(A)
    return 0.5 * (A.trace + math.sqrt(A.discriminant))


@dataclass(frozen=True)
class SchurFactors:
    lambda1: float
    lambda2: float
    nu: float
    r: float
    U: tuple = ((1.0, 0.0), (0.0, 1.0))

    def T(self) -> np.ndarray:
        return np.array([[self.lambda1, self.nu], [0.0, self.lambda2]])

    def reconstruct(self) -> np.ndarray:
        U = np.array(self.U)
        return U @ self.T() @ U.T


def schur_2x2(A: CertMatrix) -> SchurFactors:
    """Real Schur form ``A = U T U^T`` with the dominant eigenvalue first."""
    _check_nonneg(A)
    lam1 = spectral_radius_2x2(A)
    lam2 = A.trace - lam1
    # eigenvector of lam1: two candidate null vectors of A - lam1 I
    c1 = np.array([A.a12, lam1 - A.a11])
    c2 = np.array([lam1 - A.a22, A.a21])
    v = c1 if np.linalg.norm(c1) >= np.linalg.norm(c2) else c2
    nv = np.linalg.norm(v)
    v = np.array([1.0, 0.0]) if nv == 0.0 else v / nv
    if v[0] < 0 or (v[0] == 0 and v[1] < 0):
        v = -v
    w = np.array([-v[1], v[0]])
    M = A.as_array()
    nu = float(v @ M @ w)
    r = 0.0 if lam1 == 0.0 else abs(lam2) / abs(lam1)
    U = ((float(v[0]), float(w[0])), (float(v[1]), float(w[1])))
    return SchurFactors(lambda1=lam1, lambda2=lam2, nu=nu, r=min(r, 1.0), U=U)


def mu(f: SchurFactors, t: int) -> float:
    """Transient factor with ``||A^t||_2 <= mu(t) * rho^t``.

    For a nilpotent matrix (``lambda1 == 0``) the value returned is the
    bound on ``||A^t||_2`` itself: 1 at t=0, ``|nu|`` at t=1, 0 afterwards.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    if f.lambda1 == 0.0:
        return 1.0 if t == 0 else (abs(f.nu) if t == 1 else 0.0)
    r = f.r
    rt = r**t
    if abs(1.0 - r) < 1e-12:
        geom = float(t)
    else:
        geom = (1.0 - rt) / (1.0 - r)
    ratio = f.nu / f.lambda1
    return math.sqrt(1.0 + rt * rt + ratio * ratio * geom * geom)


def decay_bound(f: SchurFactors, t: int) -> float:
    """Upper bound on ``||A^t||_2``."""
    if f.lambda1 == 0.0:
        return mu(f, t)
    return mu(f, t) * abs(f.lambda1) ** t


@dataclass(frozen=True)
class LayerCertificate:
    matrix: CertMatrix
    rho: float
    gains: GainVectors
    schur: SchurFactors

    def to_dict(self) -> dict:
        A = self.matrix
        return {
            "rho": self.rho,
            "A": [[A.a11, A.a12], [A.a21, A.a22]],
            "alpha_s": A.alpha_s,
            "a_x": list(self.gains.a_x),
            "alpha_x": self.gains.alpha_x,
            "a_b": list(self.gains.a_b),
            "schur": {
                "lambda1": self.schur.lambda1,
                "lambda2": self.schur.lambda2,
                "nu": self.schur.nu,
                "r": self.schur.r,
            },
        }


@dataclass(frozen=True)
class Certificate:
    k: int
    kind: str
    layers: tuple
    seq: GammaSequences

    @property
    def rhos(self) -> list:
        return [lc.rho for lc in self.layers]

    @property
    def verdict(self) -> bool:
        return all(rho < 1.0 for rho in self.rhos)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "k": self.k,
            "verdict": "pass" if self.verdict else "fail",
            "per_layer": [lc.to_dict() for lc in self.layers],
        }


def certify(params: LstmParams, k: int = 0, kind: str = DELTA_ISS, seq: GammaSequences | None = None) -> Certificate:
    if seq is None or seq.k_max < k:
        seq = compute_sequences(params, k)
    build = delta_iss_matrix if kind == DELTA_ISS else iss_matrix
    if kind not in (DELTA_ISS, ISS):
        raise ValueError(f"unknown certificate kind {kind!r}")
    layers = []
    for l, layer in enumerate(params.layers):
        A, gains = build(params, seq, l, k, LayerNorms.of(layer))
        layers.append(LayerCertificate(A, spectral_radius_2x2(A), gains, schur_2x2(A)))
    return Certificate(k=k, kind=kind, layers=tuple(layers), seq=seq)


def certify_range(params: LstmParams, ks: Sequence[int], kind: str = DELTA_ISS) -> list:
    """Certificates for several ``k`` sharing one sequence computation."""
    seq = compute_sequences(params, max(ks))
    return [certify(params, k, kind, seq) for k in ks]


def beta_tilde(s_norms: Sequence[float], t: int, cert: Certificate) -> float:
    """Explicit decay bound on the top-layer state difference after ``t`` steps.

    ``s_norms[l]`` is the initial state-difference norm of layer ``l``.
    """
    L = len(cert.layers)
    if len(s_norms) != L:
        raise ValueError(f"need {L} per-layer norms, got {len(s_norms)}")
    if t < 0:
        raise ValueError("t must be >= 0")
    top = cert.layers[-1]
    total = decay_bound(top.schur, t) * s_norms[-1]
    if L == 1:
        return total
    rhos = cert.rhos
    for l in range(L - 1):
        if s_norms[l] == 0.0:
            continue
        mu_prod = 1.0
        for i in range(l, L):
            mu_prod *= mu(cert.layers[i].schur, t)
        gain = 1.0
        for i in range(l + 1, L):
            gain *= cert.layers[i].gains.a_x_norm
        if mu_prod == 0.0 or gain == 0.0:
            continue
        rho_max = max(rhos[l:])
        if rho_max == 0.0 and t:
            continue
        depth = L - (l + 1)  # layers stacked above this one
        log_binom = math.lgamma(t + depth + 1) - math.lgamma(t + 1) - math.lgamma(depth + 1)
        log_rho = t * math.log(rho_max) if t else 0.0
        log_term = math.log(mu_prod) + log_binom + log_rho + math.log(gain) + math.log(s_norms[l])
        total += math.exp(log_term)
    return total
