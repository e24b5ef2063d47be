"""Recovery time: measured from traces, and bounded from the weights alone."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .invariant_set import bounds
from .lstm_core import LstmParams
from .stability_cert import Certificate, beta_tilde, certify, induced_2norm

EMPIRICAL = "empirical"
BOUND = "bound"


@dataclass(frozen=True)
class RecoveryConfig:
    e: float
    t0: int = 0
    cap: int = 100
    k: int = 0
    output_range: Optional[Sequence[tuple]] = None

    def __post_init__(self):
        if not self.e > 0:
            raise ValueError(f"tolerance e must be positive, got {self.e}")
        if self.cap < 1:
            raise ValueError(f"cap must be >= 1, got {self.cap}")
        if self.t0 < 0:
            raise ValueError(f"t0 must be >= 0, got {self.t0}")


@dataclass(frozen=True)
class RecoveryResult:
    """``value`` is None when the outputs never settle ("unrecovered")."""

    value: Optional[int]
    kind: str
    first_satisfied: Optional[int] = None
    final_deviation: float = math.nan
    note: str = ""
    curve: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def recovered(self) -> bool:
        return self.value is not None

    def finite(self, cap: int) -> int:
        """Value with the unrecovered sentinel replaced by ``cap``."""
        return cap if self.value is None else self.value

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "value": "unrecovered" if self.value is None else self.value,
            "first_satisfied": self.first_satisfied,
            "final_deviation": self.final_deviation,
            "note": self.note,
        }


def _settle_index(violations: np.ndarray) -> Optional[int]:
    """Index after the last ``True``; None if the final entry is a violation."""
    if violations.size == 0:
        return 0
    if violations[-1]:
        return None
    bad = np.nonzero(violations)[0]
    return int(bad[-1]) + 1 if bad.size else 0


def empirical_recovery_time(y_nominal, y_perturbed, cfg: RecoveryConfig) -> RecoveryResult:
    """Steps after ``t0`` until ``||y - y_hat||_2 <= e`` holds for the rest of the trace."""
    y1 = np.asarray(y_nominal, dtype=float)
    y2 = np.asarray(y_perturbed, dtype=float)
    if y1.ndim == 1:
        y1, y2 = y1[:, None], y2.reshape(len(y2), -1)
    if y1.shape != y2.shape:
        raise ValueError(f"output traces differ in shape: {y1.shape} vs {y2.shape}")
    if not 0 <= cfg.t0 < y1.shape[0]:
        raise ValueError(f"t0={cfg.t0} outside trace of length {y1.shape[0]}")
    dev = np.linalg.norm(y1 - y2, axis=1)
    idx = _settle_index(dev[cfg.t0 :] > cfg.e)
    final = float(dev[-1])
    if idx is None:
        return RecoveryResult(None, EMPIRICAL, None, final, "deviation exceeds e at the end of the trace", curve=dev)
    return RecoveryResult(idx, EMPIRICAL, cfg.t0 + idx, final, curve=dev)


def rescale_tolerance(e: float, output_range) -> float:
    """Express ``e`` on the normalised output scale: divide by the widest range."""
    widths = []
    for lo, hi in output_range:
        if not hi > lo:
            raise ValueError(f"output range ({lo}, {hi}) is empty")
        widths.append(hi - lo)
    return e / max(widths)


def state_diameters(cert: Certificate, params: LstmParams) -> list:
    """``2 sqrt(n_c) * ||(c_bar, tanh(c_bar) sigma_o)||`` per layer."""
    out = []
    for l, layer in enumerate(params.layers):
        b = bounds(cert.seq, l, cert.k)
        out.append(2.0 * math.sqrt(layer.n_c) * math.hypot(b.c_bound, b.h_bound))
    return out


def beta_curve(params: LstmParams, cert: Certificate, horizon: int) -> np.ndarray:
    """``beta_tilde(diameters, t)`` for ``t = 0..horizon``."""
    s = state_diameters(cert, params)
    return np.array([beta_tilde(s, t, cert) for t in range(horizon + 1)])


def bound_recovery_time(params: LstmParams, cert: Certificate | None, cfg: RecoveryConfig) -> RecoveryResult:
    """Weight-only upper bound on the recovery time, searched over ``t <= cap``."""
    if cert is None or cert.k != cfg.k:
        cert = certify(params, cfg.k)
    if not cert.verdict:
        return RecoveryResult(None, BOUND, note=f"rho >= 1 (max rho = {max(cert.rhos):.6g})")
    e_eff = cfg.e if cfg.output_range is None else rescale_tolerance(cfg.e, cfg.output_range)
    norm_y = induced_2norm(params.U_y)
    if norm_y == 0.0:
        return RecoveryResult(0, BOUND, 0, 0.0, "||U_y|| = 0: output is constant")
    threshold = e_eff / norm_y
    curve = beta_curve(params, cert, cfg.cap)
    idx = _settle_index(curve > threshold)
    if idx is None:
        return RecoveryResult(
            None, BOUND, None, float(curve[-1]), f"bound still above e/||U_y|| at cap={cfg.cap}", curve=curve
        )
    return RecoveryResult(idx, BOUND, idx, float(curve[-1]), curve=curve)
