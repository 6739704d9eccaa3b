"""Batch command-line surface: simulate | analytic | estimate | fit | plot.

All numerics go through files (traces as raw float64 + JSON sidecar,
spectra as JSON + CSV, fits as JSON, plots as SVG); identical inputs and
seeds give byte-identical outputs.  Exit codes: 0 success, 2 configuration
error, 3 numerical failure.  POLYSPEC_THREADS caps ensemble parallelism.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analytic, estimation, fitting, models, trajectory
from .liouville import LiouvilleError

SUPPORTED_ORDERS = (2, 3, 4)


class ConfigError(ValueError):
    """Bad command-line or file configuration (exit code 2)."""


def _parse_sets(pairs: list[str] | None) -> dict:
    overrides = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _resolve_spec(args) -> "models.LiouvillianSpec":
    source = args.preset or args.model
    if not source:
        raise ConfigError("either --preset or --model is required")
    try:
        return models.resolve_model(source, _parse_sets(args.set))
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_orders(text: str) -> list[int]:
    try:
        orders = sorted({int(tok) for tok in text.split(",") if tok.strip()})
    except ValueError as exc:
        raise ConfigError(f"--orders expects integers, got '{text}'") from exc
    bad = [o for o in orders if o not in SUPPORTED_ORDERS]
    if bad or not orders:
        raise ConfigError(f"supported spectral orders are 2,3,4; got '{text}'")
    return orders


def cmd_simulate(args) -> int:
    spec = _resolve_spec(args)
    dt = args.dt if args.dt else trajectory.default_dt(spec)
    if args.minutes is not None:
        n_steps = int(round(args.minutes * 60_000.0 / dt))
    elif args.n_steps is not None:
        n_steps = args.n_steps
    else:
        raise ConfigError("either --minutes or --n-steps is required")
    cfg = trajectory.SimConfig(spec=spec, dt=dt, n_steps=n_steps, seed=args.seed,
                               record_latent=args.latent)
    path = trajectory.simulate_to_file(cfg, args.out)
    print(f"wrote {path} ({n_steps} samples, dt={dt:g} ms, seed={args.seed})")
    return 0


def cmd_analytic(args) -> int:
    spec = _resolve_spec(args)
    orders = _parse_orders(args.orders)
    grid = analytic.default_omega_grid(args.fmax, args.points)
    modes = analytic.liouvillian_modes(spec)
    out = Path(args.out)
    for order in orders:
        if order == 2:
            sg = analytic.s2_analytic(spec, grid, modes=modes)
        elif order == 3:
            sg = analytic.s3_analytic(spec, grid, grid, modes=modes)
        else:
            sg = analytic.s4_analytic(spec, grid, grid, modes=modes)
        path = analytic.spectrum_to_files(sg, out.parent / f"{out.name}_s{order}")
        print(f"wrote {path}")
    return 0


def cmd_estimate(args) -> int:
    try:
        trace = trajectory.read_trace(args.trace, mmap=True)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc
    if trace.samples.size == 0:
        raise ConfigError(f"trace {args.trace} is empty")
    orders = _parse_orders(args.orders)
    t_frame = args.frame_len * trace.dt
    if args.fmax is not None:
        kmax = int(np.floor(args.fmax * t_frame))
    else:
        kmax = min(64, args.frame_len // 4 - 1)
    kmax = max(1, min(kmax, args.frame_len // 4 - 1))
    cfg = estimation.EstimatorConfig(frame_length=args.frame_len,
                                     window_s=args.window_s,
                                     max_freq_index=kmax)
    out = Path(args.out)
    for order in orders:
        if order == 2:
            sg = estimation.estimate_s2(trace, cfg, kmax=min(2 * kmax, args.frame_len // 2 - 1))
        elif order == 3:
            sg = estimation.estimate_s3(trace, cfg)
        else:
            sg = estimation.estimate_s4(trace, cfg)
        path = analytic.spectrum_to_files(sg, out.parent / f"{out.name}_s{order}")
        print(f"wrote {path}")
    return 0


def _load_fit_config(path: Path) -> tuple[fitting.FitProblem, dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"fit config {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"fit config {path} is not valid JSON: {exc}") from exc
    try:
        spectra = {}
        for key, spath in doc["spectra"].items():
            spath = Path(spath)
            if not spath.is_absolute():
                spath = path.parent / spath
            if not spath.exists():
                raise ConfigError(f"spectrum file {spath} not found")
            spectra[int(key)] = analytic.spectrum_from_files(spath)
        problem = fitting.FitProblem(
            model=doc["model"],
            free={k: (float(lo), float(hi)) for k, (lo, hi) in doc["free"].items()},
            fixed={k: float(v) for k, v in doc.get("fixed", {}).items()},
            spectra=spectra,
            weighting=doc.get("weighting", "jackknife"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"malformed fit config: {exc}") from exc
    extras = {"budget": int(doc.get("budget", 4000)),
              "x0": doc.get("x0")}
    return problem, extras


def cmd_fit(args) -> int:
    problem, extras = _load_fit_config(Path(args.config))
    result = fitting.fit(problem, x0=extras["x0"], budget=extras["budget"])
    doc = {
        "model": problem.model,
        "params": result.params,
        "param_names": result.param_names,
        "chi2_per_order": {str(k): v for k, v in result.chi2_per_order.items()},
        "n_points_per_order": {str(k): v for k, v in result.n_points_per_order.items()},
        "covariance": None if result.covariance is None else result.covariance.tolist(),
        "converged": result.converged,
        "degenerate": result.degenerate,
        "n_evals": result.n_evals,
        "objective_trace": result.objective_trace,
        "message": result.message,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {out} (chi2={result.chi2:.6g}, converged={result.converged})")
    return 0


def _plot_one(sg: "analytic.SpectrumGrid", out_path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "polyspec"
    fig, ax = plt.subplots(figsize=(5.2, 4.0), constrained_layout=True)
    if sg.order == 2:
        f = sg.freq1_khz
        ax.plot(f, sg.values, color="tab:blue", lw=1.2)
        if sg.errors is not None:
            ax.fill_between(f, sg.values - sg.errors, sg.values + sg.errors,
                            color="tab:blue", alpha=0.3, lw=0)
        ax.set_xlabel("f [kHz]")
        ax.set_ylabel(f"S(2) [{sg.units}]")
        ax.set_title("power spectrum")
    else:
        f1, f2 = sg.freq1_khz, sg.freq2_khz
        vmax = float(np.max(np.abs(sg.values))) or 1.0
        mesh = ax.pcolormesh(f1, f2, sg.values.T, cmap="RdBu_r",
                             vmin=-vmax, vmax=vmax, shading="nearest")
        fig.colorbar(mesh, ax=ax, label=f"S({sg.order}) [{sg.units}]")
        ax.set_xlabel("f1 [kHz]")
        ax.set_ylabel("f2 [kHz]")
        ax.set_title("bispectrum" if sg.order == 3 else "trispectrum cut")
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_plot(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for spath in args.spectrum:
        spath = Path(spath)
        if not spath.exists():
            raise ConfigError(f"spectrum file {spath} not found")
        sg = analytic.spectrum_from_files(spath)
        out_path = out_dir / (spath.stem + ".svg")
        _plot_one(sg, out_path)
        print(f"wrote {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polyspec",
        description="Quantum polyspectra workflows: simulate detector traces, "
                    "compute exact spectra, estimate spectra from traces, fit "
                    "rates, and plot.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_model_args(p):
        p.add_argument("--preset", help="model preset: sqd | spin3 | doubledot")
        p.add_argument("--model", help="path to a JSON model file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a preset parameter (repeatable)")

    p = sub.add_parser("simulate", help="integrate the SME and write a trace")
    add_model_args(p)
    p.add_argument("--minutes", type=float, help="trace duration in minutes")
    p.add_argument("--n-steps", type=int, help="trace length in steps")
    p.add_argument("--dt", type=float, help="step size in ms (default: stability-guarded)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--latent", action="store_true", help="record the latent occupation")
    p.add_argument("--out", required=True, help="output stem for .f64/.json")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analytic", help="evaluate exact polyspectra on a grid")
    add_model_args(p)
    p.add_argument("--orders", default="2,3,4")
    p.add_argument("--fmax", type=float, default=5.0, help="max |f| in kHz")
    p.add_argument("--points", type=int, default=101, help="grid points per axis (odd)")
    p.add_argument("--out", required=True, help="output stem; writes <stem>_sN.json/.csv")
    p.set_defaults(func=cmd_analytic)

    p = sub.add_parser("estimate", help="estimate polyspectra from a trace file")
    p.add_argument("--trace", required=True, help="trace .f64 path or stem")
    p.add_argument("--orders", default="2,3,4")
    p.add_argument("--frame-len", type=int, default=1024)
    p.add_argument("--window-s", type=float, default=0.14)
    p.add_argument("--fmax", type=float, help="max f in kHz for the 2-d grids")
    p.add_argument("--out", required=True, help="output stem; writes <stem>_sN.json/.csv")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("fit", help="fit model rates to measured spectra")
    p.add_argument("--config", required=True, help="fit configuration JSON")
    p.add_argument("--out", required=True, help="fit result JSON path")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("plot", help="render spectra to SVG files")
    p.add_argument("--spectrum", action="append", required=True,
                   help="spectrum JSON path (repeatable)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, models.ModelError, LiouvilleError,
            estimation.EstimationError, fitting.FitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (trajectory.SimulationError, analytic.AnalyticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
