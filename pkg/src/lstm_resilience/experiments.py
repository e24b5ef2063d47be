"""Experiment harnesses: random scalar models, two-tank trade-off, pulse comparison.

Every cell is a pure function of its configuration and seed, so grids can be
farmed out to worker processes and reassembled by cell id.  The worker count
is capped by the ``LSTM_RESILIENCE_THREADS`` environment variable.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .lstm_core import LstmParams, random_params, simulate, zero_state
from .recovery_time import RecoveryConfig, bound_recovery_time, empirical_recovery_time
from .stability_cert import certify, certify_range
from .training import TrainConfig, forward_batch, init_params, penalty, train
from .twotank_bench import (
    Y_MAX,
    Y_MIN,
    DatasetSpec,
    PulseSpec,
    TankParams,
    denormalize,
    generate_dataset,
    inject_pulses,
    make_perturbed_input,
    normalize,
    recovery_input,
    stream,
    X_MAX,
    X_MIN,
)


def max_workers() -> int:
    env = os.environ.get("LSTM_RESILIENCE_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = min(cap, max(1, int(env)))
        except ValueError:
            raise ValueError(f"LSTM_RESILIENCE_THREADS must be an integer, got {env!r}") from None
    return cap


def run_cells(fn, cells: Sequence, workers: Optional[int] = None) -> list:
    """``[fn(c) for c in cells]``, possibly in worker processes; order is preserved."""
    workers = max_workers() if workers is None else workers
    if workers <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
        return list(pool.map(fn, cells))


# -- Experiment I: random scalar models -------------------------------------------

SIMPLIFIED_RANGES = {
    "W_range": (0.0, 0.1),
    "U_range": (0.0, 1.0),
    "b_range": (0.0, 0.0),
    "Uy_range": (0.0, 1.0),
    "by_range": (0.0, 0.0),
}


@dataclass(frozen=True)
class ExperimentOneConfig:
    n_models: int = 20
    seed: int = 1234
    e: float = 1e-3
    horizon: int = 100
    cap: int = 100
    k_max: int = 20
    base_input: float = 0.5
    spike_value: float = 1.0
    spike_time: int = 20


@dataclass
class ExperimentOneRow:
    model: int
    rho: list            # rho(A_s(k)) for k = 0..k_max
    t_r: int             # empirical recovery time (cap substituted)
    t_bar: list          # bound per k (cap substituted)
    certified: list      # certificate verdict per k
    t_r_raw: Optional[int] = None


@dataclass
class ExperimentOneResult:
    config: ExperimentOneConfig
    rows: list

    def t_bar_matrix(self) -> np.ndarray:
        return np.array([r.t_bar for r in self.rows], dtype=float)

    def t_r_vector(self) -> np.ndarray:
        return np.array([r.t_r for r in self.rows], dtype=float)

    def rho_matrix(self) -> np.ndarray:
        return np.array([r.rho for r in self.rows])

    def estimation_error(self) -> np.ndarray:
        """Mean of ``T_bar_R(k) - T_R`` over models, per k."""
        return (self.t_bar_matrix() - self.t_r_vector()[:, None]).mean(axis=0)

    def correlation(self) -> np.ndarray:
        """Pearson correlation between ``T_R`` and ``T_bar_R(k)`` per k (nan if degenerate)."""
        tr = self.t_r_vector()
        out = []
        for col in self.t_bar_matrix().T:
            if np.std(col) == 0 or np.std(tr) == 0:
                out.append(math.nan)
            else:
                out.append(float(np.corrcoef(tr, col)[0, 1]))
        return np.array(out)

    def mean_rho_reduction(self) -> float:
        rho = self.rho_matrix()
        return float(np.mean((rho[:, 0] - rho[:, -1]) / rho[:, 0]))

    def soundness_violations(self) -> list:
        """(model, k) pairs where a certified bound undercuts the measured time."""
        bad = []
        for r in self.rows:
            for k, (tb, ok) in enumerate(zip(r.t_bar, r.certified)):
                if ok and r.t_r > tb:
                    bad.append((r.model, k))
        return bad

    def header(self) -> list:
        K = self.config.k_max
        return ["model", "rho_k0", f"rho_k{K}", "T_R"] + [f"Tbar_R_k{k}" for k in range(K + 1)]

    def table(self) -> list:
        return [[r.model, r.rho[0], r.rho[-1], r.t_r] + list(r.t_bar) for r in self.rows]

    def summary_rows(self) -> list:
        err, corr = self.estimation_error(), self.correlation()
        return [[k, float(err[k]), float(corr[k])] for k in range(self.config.k_max + 1)]


def spike_inputs(cfg: ExperimentOneConfig):
    x = np.full((cfg.horizon, 1), cfg.base_input)
    x_hat = x.copy()
    x_hat[cfg.spike_time] = cfg.spike_value
    return x, x_hat


def run_experiment_one(n_models: int = 20, seed: int = 1234, cfg: Optional[ExperimentOneConfig] = None) -> ExperimentOneResult:
    """Random scalar LSTMs under a one-step input spike.

    The inputs coincide again from ``spike_time + 1`` on, and the output at
    index ``t`` already reflects input ``t``, so deviations are measured from
    ``t0 = spike_time``.  Unrecovered cases count as ``cap`` in all statistics.
    """
    cfg = cfg or ExperimentOneConfig(n_models=n_models, seed=seed)
    cfg = replace(cfg, n_models=n_models, seed=seed)
    rng = stream(cfg.seed, "models")
    x, x_hat = spike_inputs(cfg)
    ks = list(range(cfg.k_max + 1))
    rows = []
    for m in range(cfg.n_models):
        params = random_params(rng, 1, 1, 1, x_max=1.0, **SIMPLIFIED_RANGES)
        s0 = zero_state(params)
        y = simulate(params, s0, x).outputs
        y_hat = simulate(params, s0, x_hat).outputs
        rc = RecoveryConfig(e=cfg.e, t0=cfg.spike_time, cap=cfg.cap)
        tr = empirical_recovery_time(y, y_hat, rc)
        certs = certify_range(params, ks)
        t_bar = [
            bound_recovery_time(params, c, replace(rc, k=c.k)).finite(cfg.cap) for c in certs
        ]
        rows.append(
            ExperimentOneRow(
                model=m,
                rho=[max(c.rhos) for c in certs],
                t_r=tr.finite(cfg.cap),
                t_bar=t_bar,
                certified=[c.verdict for c in certs],
                t_r_raw=tr.value,
            )
        )
    return ExperimentOneResult(cfg, rows)


# -- Experiment II: two-tank trade-off ---------------------------------------------


@dataclass(frozen=True)
class TwoTankConfig:
    train_length: int = 10_000
    test_length: int = 10_000
    # 25 control segments per series, as at full scale (100 000 steps / 4000)
    switch_interval: int = 400
    train_noise: float = 0.1
    test_noise: float = 0.01
    train_data_seed: int = 0
    test_data_seed: int = 1
    n_c: int = 22
    epochs: int = 30
    window_length: int = 100
    window_step: int = 1
    batch_size: int = 32
    learning_rate: float = 1e-3
    plateau_patience: int = 10
    penalty_k: int = 0
    e: float = 0.05
    offset: float = 1.0
    recovery_length: int = 3500
    recovery_u: float = 1.0
    cap: int = 1000
    k_report: int = 20

    def train_config(self, lam: float, epsilon: float, seed: int) -> TrainConfig:
        return TrainConfig(
            lam=lam,
            epsilon=epsilon,
            k=self.penalty_k,
            learning_rate=self.learning_rate,
            plateau_patience=self.plateau_patience,
            epochs=self.epochs,
            batch_size=self.batch_size,
            window_length=self.window_length,
            window_step=self.window_step,
            seed=seed,
            n_c=self.n_c,
        )


@dataclass
class TwoTankCell:
    label: str
    lam: float
    epsilon: float
    seed: int
    test_mae: float = math.nan
    rho_k0: float = math.nan
    rho_kr: float = math.nan
    final_penalty: float = math.nan
    certified: bool = False
    t_r: Optional[int] = None
    t_bar_k0: Optional[int] = None
    t_bar_kr: Optional[int] = None
    diverged: bool = False
    message: str = ""
    params: Optional[LstmParams] = field(default=None, repr=False)

    HEADER = ("label", "lambda", "epsilon", "seed", "test_mae", "rho_k0", "rho_kr",
              "final_penalty", "certified", "T_R", "Tbar_R_k0", "Tbar_R_kr", "diverged", "message")

    def row(self) -> list:
        def fmt(v):
            return "unrecovered" if v is None else v

        return [self.label, self.lam, self.epsilon, self.seed, self.test_mae, self.rho_k0,
                self.rho_kr, self.final_penalty, int(self.certified), fmt(self.t_r),
                fmt(self.t_bar_k0), fmt(self.t_bar_kr), int(self.diverged), self.message]


def _train_val(ds):
    x, y = ds.x, ds.y
    n = len(x) // 2
    return (x[:n], y[:n]), (x[n:], y[n:])


def tank_test_mae(params: LstmParams, ds, discard: int = 10) -> float:
    """MAE of a single full-length run over the test series, in tank-level units."""
    pred, _, _ = forward_batch(params, ds.x[None])
    pred = denormalize(pred[0], Y_MIN, Y_MAX)
    return float(np.mean(np.abs(pred[discard:] - ds.y_raw[discard:])))


def recovery_times(params: LstmParams, cfg: TwoTankConfig, offset: float, ks=(0,)):
    """Empirical T_R (tank units) and the weight-only bounds for each k in ``ks``."""
    x_raw = recovery_input(TankParams(), cfg.recovery_length, cfg.recovery_u)
    x_hat_raw, t0 = make_perturbed_input(x_raw, offset)
    xs = normalize(np.stack([x_raw, x_hat_raw]), X_MIN, X_MAX)
    ys, _, _ = forward_batch(params, xs)
    ys = denormalize(ys, Y_MIN, Y_MAX)
    rc = RecoveryConfig(e=cfg.e, t0=t0, cap=cfg.cap, output_range=list(zip(Y_MIN, Y_MAX)))
    tr = empirical_recovery_time(ys[0], ys[1], rc)
    bounds = [bound_recovery_time(params, None, replace(rc, k=k)) for k in ks]
    return tr, bounds


def _two_tank_cell(args) -> TwoTankCell:
    cfg, label, lam, epsilon, seed, pulse = args
    train_ds = generate_dataset(DatasetSpec(cfg.train_length, cfg.switch_interval, cfg.train_noise, cfg.train_data_seed))
    test_ds = generate_dataset(DatasetSpec(cfg.test_length, cfg.switch_interval, cfg.test_noise, cfg.test_data_seed))
    (xt, yt), (xv, yv) = _train_val(train_ds)
    if pulse is not None:
        raw = inject_pulses(train_ds.x_raw, pulse)
        xp = normalize(raw, train_ds.spec.x_min, train_ds.spec.x_max)
        n = len(xp) // 2
        xt, xv = xp[:n], xp[n:]
    tcfg = cfg.train_config(lam, epsilon, seed)
    p0 = init_params(3, cfg.n_c, 2, stream(seed, "init"))
    res = train(p0, (xt, yt), (xv, yv), tcfg)
    cell = TwoTankCell(label, lam, epsilon, seed, diverged=res.diverged, message=res.message)
    if res.diverged:
        return cell
    p = res.params
    cell.params = p
    cell.test_mae = tank_test_mae(p, test_ds)
    c0 = certify(p, 0)
    cell.rho_k0 = max(c0.rhos)
    cell.rho_kr = max(certify(p, cfg.k_report).rhos)
    cell.certified = c0.verdict
    cell.final_penalty = penalty(p, tcfg.k, epsilon) if lam > 0 else math.nan
    tr, (b0, br) = recovery_times(p, cfg, cfg.offset, ks=(0, cfg.k_report))
    cell.t_r, cell.t_bar_k0, cell.t_bar_kr = tr.value, b0.value, br.value
    return cell


def run_experiment_two(epsilons: Sequence[float] = (0.1, 0.3, 0.5), seeds: Sequence[int] = (0, 1, 2),
                       cfg: TwoTankConfig = TwoTankConfig(), workers: Optional[int] = None) -> list:
    """Baseline (lambda = 0) plus one penalised model per epsilon, for every seed."""
    cells = [(cfg, "baseline", 0.0, 0.0, s, None) for s in seeds]
    cells += [(cfg, f"eps={e:g}", 1.0, float(e), s, None) for e in epsilons for s in seeds]
    return run_cells(_two_tank_cell, cells, workers)


def median_by_label(cells: Sequence[TwoTankCell], attr: str, cap: Optional[int] = None) -> dict:
    """Median of ``attr`` per label; unrecovered entries count as ``cap`` (or inf)."""
    groups: dict = {}
    for c in cells:
        v = getattr(c, attr)
        if v is None:
            v = math.inf if cap is None else cap
        groups.setdefault(c.label, []).append(float(v))
    return {k: float(np.median(v)) for k, v in groups.items()}


# -- pulse comparison ------------------------------------------------------------

PULSE_OFFSETS = (1.0, 5.0, 9.0)


@dataclass
class PulseRow:
    label: str
    seed: int
    test_mae: float
    rho_k0: float
    t_bar_k0: Optional[int]
    t_r: dict            # offset -> empirical recovery time (None if unrecovered)
    max_dev: dict        # offset -> max_t ||y - y_hat|| in tank units

    def row(self, offsets) -> list:
        fmt = lambda v: "unrecovered" if v is None else v  # noqa: E731
        return ([self.label, self.seed, self.test_mae, self.rho_k0, fmt(self.t_bar_k0)]
                + [fmt(self.t_r[p]) for p in offsets] + [self.max_dev[p] for p in offsets])


def pulse_header(offsets) -> list:
    return (["label", "seed", "test_mae", "rho_k0", "Tbar_R_k0"]
            + [f"T_R_p{p:g}" for p in offsets] + [f"max_dev_p{p:g}" for p in offsets])


def run_pulse_compare(seeds: Sequence[int] = (0,), epsilon: float = 0.05, dd_amplitudes: Sequence[float] = (),
                      offsets: Sequence[float] = PULSE_OFFSETS, cfg: TwoTankConfig = TwoTankConfig(),
                      workers: Optional[int] = None) -> list:
    """Baseline vs penalised model (and optional pulse-augmented baselines)."""
    cells = []
    for s in seeds:
        cells.append((cfg, "baseline", 0.0, 0.0, s, None))
        cells.append((cfg, f"eps={epsilon:g}", 1.0, float(epsilon), s, None))
        for M in dd_amplitudes:
            cells.append((cfg, f"dd_pulse_{M:g}", 0.0, 0.0, s, PulseSpec(max_amplitude=M, seed=s)))
    trained = run_cells(_two_tank_cell, cells, workers)
    rows = []
    for c in trained:
        if c.diverged:
            rows.append(PulseRow(c.label, c.seed, math.nan, math.nan, None,
                                 {p: None for p in offsets}, {p: math.nan for p in offsets}))
            continue
        t_r, dev = {}, {}
        for p in offsets:
            tr, _ = recovery_times(c.params, cfg, p, ks=())
            t_r[p] = tr.value
            dev[p] = float(np.max(tr.curve))
        rows.append(PulseRow(c.label, c.seed, c.test_mae, c.rho_k0, c.t_bar_k0, t_r, dev))
    return rows


def config_dict(cfg) -> dict:
    return asdict(cfg)
