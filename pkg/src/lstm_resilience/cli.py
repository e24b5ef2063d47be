"""Command-line entry point.

Exit codes: 0 on success, 1 for invalid input or configuration, 2 for a
numerical failure (non-convergent power iteration, degenerate forget gate,
non-finite forward pass).  Output files are written atomically and carry the
resolved configuration, so identical invocations give identical bytes.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .invariant_set import compute_sequences, eta_infinity_approx
from .io_utils import atomic_write_text, csv_text
from .lstm_core import ShapeError, load_params, save_params, simulate, zero_state
from .recovery_time import RecoveryConfig, beta_curve, bound_recovery_time, empirical_recovery_time
from .stability_cert import DELTA_ISS, ISS, certify

log = logging.getLogger("lstm_resilience")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class CliError(ValueError):
    pass


def _config_line(cfg: dict) -> str:
    return "config " + json.dumps(cfg, sort_keys=True)


def _emit(text: str, out) -> None:
    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


def _read_matrix(path, name: str) -> np.ndarray:
    """Numeric CSV with an optional header row and ``#`` comments."""
    path = Path(path)
    if not path.exists():
        raise CliError(f"{name}: file not found: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if lines:
        try:
            [float(v) for v in lines[0].split(",")]
        except ValueError:
            lines = lines[1:]
    try:
        rows = [[float(v) for v in ln.split(",")] for ln in lines]
    except ValueError as exc:
        raise CliError(f"{name}: {path}: non-numeric entry ({exc})") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise CliError(f"{name}: {path}: expected a non-empty rectangular table")
    return np.array(rows)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _dumps(d) -> str:
    return json.dumps(d, indent=1, sort_keys=True, default=_json_default) + "\n"


# -- subcommands ---------------------------------------------------------------


def cmd_certify(args) -> int:
    params = load_params(args.model)
    cfg = {"model": str(args.model), "k": args.k, "kind": args.kind}
    cert = certify(params, args.k, args.kind)
    if args.sequences:
        header = ["layer", "k", "sigma_f", "sigma_i", "sigma_o", "phi_c", "eta", "c_bar"]
        atomic_write_text(args.sequences, csv_text(header, cert.seq.rows(), [_config_line(cfg)]))
    if args.json or args.out:
        d = cert.to_dict()
        d["config"] = cfg
        if args.eta_inf:
            d["eta_infinity"] = [float(eta_infinity_approx(params, l)) for l in range(params.n_layers)]
        _emit(_dumps(d), args.out)
    else:
        print(f"{args.kind} certificate at k={args.k}: {'pass' if cert.verdict else 'fail'}")
        for l, lc in enumerate(cert.layers):
            A = lc.matrix
            print(f"  layer {l + 1}: rho={lc.rho:.6g}  A=[[{A.a11:.6g}, {A.a12:.6g}], [{A.a21:.6g}, {A.a22:.6g}]]")
    return EXIT_OK if cert.verdict or not args.strict else EXIT_NUMERIC


def cmd_bounds(args) -> int:
    params = load_params(args.model)
    cfg = {"model": str(args.model), "k": args.k, "horizon": args.horizon}
    cert = certify(params, args.k)
    if not cert.verdict:
        raise CliError(f"model is not certified at k={args.k} (max rho = {max(cert.rhos):.6g})")
    curve = beta_curve(params, cert, args.horizon)
    rows = [(t, float(v)) for t, v in enumerate(curve)]
    if args.json:
        _emit(_dumps({"config": cfg, "t": list(range(len(curve))), "beta": curve.tolist()}), args.out)
    else:
        _emit(csv_text(["t", "beta_tilde"], rows, [_config_line(cfg)]), args.out)
    return EXIT_OK


def cmd_recover(args) -> int:
    params = load_params(args.model)
    x = _read_matrix(args.nominal, "nominal")
    x_hat = _read_matrix(args.perturbed, "perturbed")
    if x.shape != x_hat.shape:
        raise CliError(f"nominal and perturbed traces differ in shape: {x.shape} vs {x_hat.shape}")
    output_range = None
    if args.output_range:
        vals = args.output_range
        if len(vals) % 2:
            raise CliError("--output-range takes (min, max) pairs")
        output_range = list(zip(vals[::2], vals[1::2]))
    rc = RecoveryConfig(e=args.e, t0=args.t0, cap=args.cap, k=args.k, output_range=output_range)
    s0 = zero_state(params)
    y = simulate(params, s0, x).outputs
    y_hat = simulate(params, s0, x_hat).outputs
    if output_range is not None:
        lo = np.array([r[0] for r in output_range])
        hi = np.array([r[1] for r in output_range])
        y, y_hat = (v + 1.0) * (hi - lo) / 2.0 + lo, (y_hat + 1.0) * (hi - lo) / 2.0 + lo
    emp = empirical_recovery_time(y, y_hat, rc)
    cert = certify(params, args.k)
    bnd = bound_recovery_time(params, cert, rc)
    if args.beta_csv:
        if not cert.verdict:
            raise CliError(f"no decay curve: model is not certified at k={args.k}")
        curve = beta_curve(params, cert, args.cap)
        atomic_write_text(args.beta_csv, csv_text(["t", "beta_tilde"], [(t, float(v)) for t, v in enumerate(curve)],
                                                  [_config_line({"model": str(args.model), "k": args.k})]))
    cfg = {"model": str(args.model), "nominal": str(args.nominal), "perturbed": str(args.perturbed),
           "e": args.e, "t0": args.t0, "cap": args.cap, "k": args.k, "output_range": output_range}
    d = {"config": cfg, "empirical": emp.to_dict(), "bound": bnd.to_dict()}
    if args.json or args.out:
        _emit(_dumps(d), args.out)
    else:
        fmt = lambda r: "unrecovered" if r.value is None else str(r.value)  # noqa: E731
        print(f"T_R = {fmt(emp)}   T_bar_R(k={args.k}) = {fmt(bnd)}")
        if bnd.note:
            print(f"  note: {bnd.note}")
    return EXIT_OK


def cmd_datagen(args) -> int:
    from .twotank_bench import DatasetSpec, PulseSpec, TankDataset, generate_dataset, inject_pulses

    spec = DatasetSpec(length=args.length, switch_interval=args.switch_interval,
                       noise_std=args.noise_std, seed=args.seed)
    ds = generate_dataset(spec)
    if args.pulse_amplitude > 0:
        pulse = PulseSpec(rate=args.pulse_rate, duration=args.pulse_duration,
                          max_amplitude=args.pulse_amplitude, seed=args.seed)
        noisy = inject_pulses(ds.x_raw, pulse)[:, 1:]
        ds = TankDataset(ds.u, noisy, ds.h_next, ds.spec, ds.h_clean)
    ds.save(args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainConfig, init_params, train
    from .twotank_bench import TankDataset, stream

    if not Path(args.dataset).exists():
        raise CliError(f"dataset not found: {args.dataset}")
    ds = TankDataset.load(args.dataset)
    cfg = TrainConfig(lam=args.lam, epsilon=args.epsilon, k=args.k, learning_rate=args.lr,
                      epochs=args.epochs, batch_size=args.batch_size, window_length=args.window_length,
                      window_step=args.window_step, warmup_discard=args.warmup_discard, seed=args.seed,
                      n_c=args.n_c)
    x, y = ds.x, ds.y
    n = len(x) // 2
    p0 = init_params(x.shape[1], cfg.n_c, y.shape[1], stream(cfg.seed, "init"))
    res = train(p0, (x[:n], y[:n]), (x[n:], y[n:]), cfg)
    meta = {"train_config": asdict(cfg), "dataset": str(args.dataset), "diverged": res.diverged}
    save_params(res.params, args.out, meta=json.loads(_dumps(meta)))
    if args.history:
        rows = [(r.epoch, r.train.task_loss, r.train.penalty, r.val_mae, r.lr, r.rho) for r in res.history]
        atomic_write_text(args.history, csv_text(["epoch", "task_loss", "penalty", "val_mae", "lr", "rho"],
                                                 rows, [_config_line(meta)]))
    if res.diverged:
        log.error("training diverged: %s", res.message)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_simulate(args) -> int:
    params = load_params(args.model)
    x = _read_matrix(args.inputs, "inputs")
    tr = simulate(params, zero_state(params), x)
    header = ["t"] + [f"y{j}" for j in range(params.n_y)]
    rows = [[t] + [float(v) for v in tr.outputs[t]] for t in range(len(tr))]
    cfg = {"model": str(args.model), "inputs": str(args.inputs)}
    _emit(csv_text(header, rows, [_config_line(cfg)]), args.out)
    return EXIT_OK


def cmd_experiment(args) -> int:
    from . import experiments as ex

    if args.which == "simplified":
        cfg = ex.ExperimentOneConfig(n_models=args.models, seed=args.seed, e=args.e)
        res = ex.run_experiment_one(args.models, args.seed, cfg)
        comments = [_config_line(asdict(cfg)),
                    f"mean rho reduction k=0->k={cfg.k_max}: {res.mean_rho_reduction():.6f}",
                    f"unrecovered and uncertified entries are reported as cap={cfg.cap}"]
        _emit(csv_text(res.header(), res.table(), comments), args.out)
        if args.summary:
            atomic_write_text(args.summary, csv_text(["k", "mean_estimation_error", "correlation"],
                                                     res.summary_rows(), [_config_line(asdict(cfg))]))
        return EXIT_OK
    base = ex.TwoTankConfig()
    overrides = {"epochs": args.epochs, "e": args.e_tank, "window_step": args.window_step,
                 "window_length": args.window_length, "train_length": args.length}
    cfg = ex.TwoTankConfig(**{**asdict(base), **{k: v for k, v in overrides.items() if v is not None}})
    seeds = list(range(args.seed, args.seed + args.seeds))
    if args.which == "twotank":
        cells = ex.run_experiment_two(args.epsilons, seeds, cfg)
        meta = {"two_tank": asdict(cfg), "epsilons": args.epsilons, "seeds": seeds}
        _emit(csv_text(list(ex.TwoTankCell.HEADER), [c.row() for c in cells], [_config_line(meta)]), args.out)
        return EXIT_NUMERIC if any(c.diverged for c in cells) else EXIT_OK
    rows = ex.run_pulse_compare(seeds, args.epsilon, args.dd, cfg=cfg)
    meta = {"two_tank": asdict(cfg), "epsilon": args.epsilon, "dd_amplitudes": args.dd, "seeds": seeds}
    offsets = ex.PULSE_OFFSETS
    _emit(csv_text(ex.pulse_header(offsets), [r.row(offsets) for r in rows], [_config_line(meta)]), args.out)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lstm-resilience", description="Stability certificates and recovery-time bounds for LSTMs.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("certify", help="delta-ISS / ISS certificate of a model")
    c.add_argument("model")
    c.add_argument("--k", type=int, default=0)
    c.add_argument("--kind", choices=[DELTA_ISS, ISS], default=DELTA_ISS)
    c.add_argument("--sequences", help="write the bound sequences for k = 0..K to this CSV")
    c.add_argument("--eta-inf", action="store_true", help="include the eta(infinity) approximation")
    c.add_argument("--strict", action="store_true", help="exit 2 when the certificate fails")
    c.add_argument("--json", action="store_true")
    c.add_argument("--out")
    c.set_defaults(func=cmd_certify)

    b = sub.add_parser("bounds", help="export the beta-tilde decay curve")
    b.add_argument("model")
    b.add_argument("--k", type=int, default=0)
    b.add_argument("--horizon", type=int, default=100)
    b.add_argument("--json", action="store_true")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bounds)

    r = sub.add_parser("recover", help="measured and bounded recovery time for two input traces")
    r.add_argument("model")
    r.add_argument("--nominal", required=True, help="CSV of nominal inputs, one row per step")
    r.add_argument("--perturbed", required=True, help="CSV of perturbed inputs")
    r.add_argument("--e", type=float, required=True)
    r.add_argument("--t0", type=int, default=0)
    r.add_argument("--cap", type=int, default=100)
    r.add_argument("--k", type=int, default=0)
    r.add_argument("--output-range", type=float, nargs="+", metavar="LO HI",
                   help="de-normalise outputs from [-1, 1] to these (min, max) pairs before comparing")
    r.add_argument("--beta-csv", help="also write the beta-tilde curve up to --cap to this CSV")
    r.add_argument("--json", action="store_true")
    r.add_argument("--out")
    r.set_defaults(func=cmd_recover)

    t = sub.add_parser("train", help="train a single-layer model on a two-tank dataset")
    t.add_argument("dataset")
    t.add_argument("--out", required=True)
    t.add_argument("--history")
    t.add_argument("--lambda", dest="lam", type=float, default=1.0)
    t.add_argument("--epsilon", type=float, default=0.1)
    t.add_argument("--k", type=int, default=0)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--window-length", type=int, default=100)
    t.add_argument("--window-step", type=int, default=1)
    t.add_argument("--warmup-discard", type=int, default=10)
    t.add_argument("--n-c", type=int, default=22)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("datagen", help="generate a two-tank dataset (CSV plus JSON sidecar)")
    d.add_argument("--out", required=True)
    d.add_argument("--length", type=int, default=10_000)
    d.add_argument("--switch-interval", type=int, default=4000)
    d.add_argument("--noise-std", type=float, default=0.1)
    d.add_argument("--pulse-amplitude", type=float, default=0.0, help="add random pulses up to this size")
    d.add_argument("--pulse-rate", type=float, default=0.001)
    d.add_argument("--pulse-duration", type=int, default=10)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_datagen)

    s = sub.add_parser("simulate", help="run a model over an input CSV")
    s.add_argument("model")
    s.add_argument("--inputs", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("experiment", help="run an experiment grid")
    e.add_argument("which", choices=["simplified", "twotank", "pulse-compare"])
    e.add_argument("--out")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--models", type=int, default=20, help="simplified: number of random models")
    e.add_argument("--e", type=float, default=1e-3, help="simplified: output tolerance")
    e.add_argument("--summary", help="simplified: per-k estimation error and correlation CSV")
    e.add_argument("--seeds", type=int, default=3, help="two-tank: number of consecutive seeds")
    e.add_argument("--epsilons", type=float, nargs="+", default=[0.1, 0.3, 0.5])
    e.add_argument("--epsilon", type=float, default=0.05, help="pulse-compare: epsilon of the penalised model")
    e.add_argument("--dd", type=float, nargs="*", default=[], help="pulse-compare: pulse amplitudes for data-driven models")
    e.add_argument("--e-tank", type=float, default=None, help="two-tank: tolerance in tank-level units")
    e.add_argument("--epochs", type=int, default=None)
    e.add_argument("--window-step", type=int, default=None)
    e.add_argument("--window-length", type=int, default=None)
    e.add_argument("--length", type=int, default=None, help="two-tank: training series length")
    e.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    if args.command == "experiment" and args.seed is None:
        args.seed = 1234 if args.which == "simplified" else 0
    try:
        return args.func(args)
    except ArithmeticError as exc:  # includes FloatingPointError and power-iteration failures
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ShapeError, CliError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
