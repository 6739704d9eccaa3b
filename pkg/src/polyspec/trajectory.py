"""Stochastic-master-equation integration producing detector time traces.

Euler-Maruyama steps of the Ito equation

    rho <- rho + L(rho) dt + beta S[A](rho) dW,   dW ~ Normal(0, dt)

with per-step trace renormalization (the nonlinear backaction term preserves
the trace only to first order in dt).  The detector sample over a step is

    z_k = beta^2 Tr[rho_k (A + A^dag)/2] + beta dW_k / (2 dt)

so that the discrete trace carries the beta^2/4 white-noise floor in
spectral units.  Times in ms, rates in kHz.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .liouville import (
    LiouvilleError,
    LiouvillianSpec,
    StateVector,
    build_liouvillian,
    left_right_product,
    spec_to_dict,
    steady_state,
)

STABILITY_LIMIT = 0.1
TRACE_DRIFT_LIMIT = 1e-3
_CHUNK = 1 << 20


class SimulationError(RuntimeError):
    """Numerical failure during SME integration."""


def thread_cap() -> int:
    """Worker cap for ensembles, honoring the POLYSPEC_THREADS env var."""
    env = os.environ.get("POLYSPEC_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return max(1, os.cpu_count() or 1)


def model_hash(spec: LiouvillianSpec) -> str:
    """Short stable hash of the full model document."""
    blob = json.dumps(spec_to_dict(spec), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class SimConfig:
    """One trajectory integration setup.

    dt must satisfy dt * max|eigenvalue(L)| < 0.1; the default from
    default_dt() respects this guard.  initial defaults to the steady state.
    """

    spec: LiouvillianSpec
    dt: float
    n_steps: int
    seed: int = 0
    initial: StateVector | None = None
    record_latent: bool = False

    def __post_init__(self):
        if self.dt <= 0:
            raise LiouvilleError(f"dt must be > 0, got {self.dt}")
        if self.n_steps < 1:
            raise LiouvilleError(f"n_steps must be >= 1, got {self.n_steps}")


@dataclass
class TimeTrace:
    """Uniformly sampled detector record with optional latent occupation."""

    dt: float
    samples: np.ndarray
    latent: np.ndarray | None = None
    units: str = "kHz"
    seed: str = ""
    model_hash: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if not np.all(np.isfinite(self.samples)):
            raise SimulationError("trace contains non-finite samples")
        if self.latent is not None:
            self.latent = np.asarray(self.latent, dtype=float)
            if self.latent.shape != self.samples.shape:
                raise SimulationError("latent record length differs from samples")

    @property
    def duration(self) -> float:
        return self.dt * self.samples.size


def default_dt(spec: LiouvillianSpec) -> float:
    """Step size 0.01 / max(rates, beta^2, coherent frequency scale) in ms,
    halved if needed until the stability guard holds."""
    scales = [rate for _, rate in spec.channels] + [spec.beta_sq]
    h = spec.hamiltonian.matrix
    if np.max(np.abs(h)) > 0:
        scales.append(float(np.max(np.abs(np.linalg.eigvalsh(h)))) / np.pi)
    scale = max(max(scales), 1e-6)
    dt = 0.01 / scale
    lam_max = _max_eigenvalue(spec)
    while dt * lam_max >= STABILITY_LIMIT:
        dt /= 2
    return dt


def _max_eigenvalue(spec: LiouvillianSpec) -> float:
    liou = build_liouvillian(spec)
    return float(np.max(np.abs(liou.eigensystem().eigenvalues)))


@njit(cache=True, nogil=True)
def _em_chunk(rho, liou, backaction, weight, beta, dt, dw, z_out, x_out):
    """Advance one chunk of Euler-Maruyama steps in place.

    Returns (status, index): status 0 ok, 1 non-finite state, 2 trace drift
    beyond limit before renormalization.
    """
    n = rho.shape[0]
    d = int(np.sqrt(n))
    inv2dt = 1.0 / (2.0 * dt)
    for i in range(dw.shape[0]):
        expect = 0.0
        for j in range(n):
            expect += (weight[j] * rho[j]).real
        if not np.isfinite(expect):
            return 1, i
        drift = liou @ rho
        kick = backaction @ rho
        w_i = dw[i]
        for j in range(n):
            rho[j] += drift[j] * dt + beta * (kick[j] - expect * rho[j]) * w_i
        tr = 0.0
        for j in range(d):
            tr += rho[j * (d + 1)].real
        if np.abs(tr - 1.0) > TRACE_DRIFT_LIMIT:
            return 2, i
        inv_tr = 1.0 / tr
        for j in range(n):
            rho[j] *= inv_tr
        z_out[i] = beta * beta * expect * 0.5 + beta * w_i * inv2dt
        x_out[i] = expect * 0.5
    return 0, -1


def _prepare(cfg: SimConfig):
    spec = cfg.spec
    liou = build_liouvillian(spec)
    lam_max = float(np.max(np.abs(liou.eigensystem().eigenvalues)))
    if cfg.dt * lam_max >= STABILITY_LIMIT:
        raise SimulationError(
            f"stability guard violated: dt*max|lambda| = {cfg.dt * lam_max:.3g} >= 0.1")
    a = spec.measurement_op.matrix
    eye = np.eye(spec.dim, dtype=complex)
    backaction = left_right_product(a, eye) + left_right_product(eye, a.conj().T)
    weight = ((a + a.conj().T).T).reshape(-1).astype(complex)
    if cfg.initial is None:
        rho = steady_state(liou).values.copy()
    else:
        if cfg.initial.dim != spec.dim:
            raise LiouvilleError("initial state dimension mismatch")
        cfg.initial.validate()
        rho = cfg.initial.values.astype(complex).copy()
    return liou.matrix.copy(), backaction, weight, rho


def _run(cfg: SimConfig, rng: np.random.Generator, sink, latent_sink) -> None:
    liou, backaction, weight, rho = _prepare(cfg)
    beta = float(np.sqrt(cfg.spec.beta_sq))
    sqrt_dt = float(np.sqrt(cfg.dt))
    z_buf = np.empty(_CHUNK)
    x_buf = np.empty(_CHUNK)
    done = 0
    while done < cfg.n_steps:
        n = min(_CHUNK, cfg.n_steps - done)
        dw = rng.normal(0.0, sqrt_dt, n)
        status, idx = _em_chunk(rho, liou, backaction, weight, beta, cfg.dt,
                                dw, z_buf[:n], x_buf[:n])
        if status == 1:
            raise SimulationError(f"non-finite state at step {done + idx}; reduce dt")
        if status == 2:
            raise SimulationError(
                f"trace drift beyond {TRACE_DRIFT_LIMIT:g} at step {done + idx}; "
                "step size too large")
        sink(z_buf[:n])
        if latent_sink is not None:
            latent_sink(x_buf[:n])
        done += n


def simulate(cfg: SimConfig, _rng: np.random.Generator | None = None,
             _seed_label: str | None = None) -> TimeTrace:
    """Integrate the SME and return the detector trace (deterministic per seed)."""
    rng = np.random.default_rng(cfg.seed) if _rng is None else _rng
    z = np.empty(cfg.n_steps)
    x = np.empty(cfg.n_steps) if cfg.record_latent else None
    pos = [0]

    def sink(chunk):
        z[pos[0]:pos[0] + chunk.size] = chunk
        pos[0] += chunk.size

    lpos = [0]

    def latent_sink(chunk):
        x[lpos[0]:lpos[0] + chunk.size] = chunk
        lpos[0] += chunk.size

    _run(cfg, rng, sink, latent_sink if cfg.record_latent else None)
    return TimeTrace(dt=cfg.dt, samples=z, latent=x,
                     seed=_seed_label if _seed_label is not None else str(cfg.seed),
                     model_hash=model_hash(cfg.spec))


def ensemble(cfg: SimConfig, n_traces: int) -> list[TimeTrace]:
    """Independent trajectories with child seeds derived from cfg.seed."""
    if n_traces < 1:
        raise LiouvilleError(f"n_traces must be >= 1, got {n_traces}")
    children = np.random.SeedSequence(cfg.seed).spawn(n_traces)

    def one(i: int) -> TimeTrace:
        rng = np.random.default_rng(children[i])
        return simulate(cfg, _rng=rng, _seed_label=f"{cfg.seed}:{i}")

    workers = min(thread_cap(), n_traces)
    if workers == 1:
        return [one(i) for i in range(n_traces)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(n_traces)))


# ---------------------------------------------------------------------------
# trace files: raw little-endian float64 block plus JSON sidecar

def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def write_trace(trace: TimeTrace, stem: str | Path) -> Path:
    """Write <stem>.f64 (raw samples) and <stem>.json sidecar; returns the
    data path.  A latent record, when present, goes to <stem>_latent.f64."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    data_path = stem.with_suffix(".f64")
    trace.samples.astype("<f8").tofile(data_path)
    latent_file = None
    if trace.latent is not None:
        latent_file = stem.parent / (stem.name + "_latent.f64")
        trace.latent.astype("<f8").tofile(latent_file)
    sidecar = {
        "dt_ms": trace.dt,
        "n_samples": int(trace.samples.size),
        "units": trace.units,
        "seed": trace.seed,
        "model_hash": trace.model_hash,
        "latent_file": None if latent_file is None else latent_file.name,
    }
    with open(_sidecar_path(data_path), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return data_path


def read_trace(path: str | Path, mmap: bool = False) -> TimeTrace:
    """Load a trace from its .f64 path (or stem); mmap avoids copying long
    records into memory."""
    path = Path(path)
    if path.suffix != ".f64":
        path = path.with_suffix(".f64")
    if not path.exists():
        raise FileNotFoundError(f"trace file {path} not found")
    with open(_sidecar_path(path), encoding="utf-8") as fh:
        sidecar = json.load(fh)
    n = int(sidecar["n_samples"])
    if mmap:
        samples = np.memmap(path, dtype="<f8", mode="r", shape=(n,))
    else:
        samples = np.fromfile(path, dtype="<f8", count=n)
    if samples.size != n:
        raise SimulationError(f"trace file {path} shorter than sidecar n_samples={n}")
    latent = None
    if sidecar.get("latent_file"):
        latent = np.fromfile(path.parent / sidecar["latent_file"], dtype="<f8")
    return TimeTrace(dt=float(sidecar["dt_ms"]), samples=samples, latent=latent,
                     units=sidecar.get("units", "kHz"), seed=str(sidecar.get("seed", "")),
                     model_hash=sidecar.get("model_hash", ""))


def simulate_to_file(cfg: SimConfig, stem: str | Path) -> Path:
    """Stream a (possibly very long) trajectory straight to disk.

    Writes the same file pair as write_trace without holding the full trace
    in memory; returns the data path.
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    data_path = stem.with_suffix(".f64")
    rng = np.random.default_rng(cfg.seed)
    latent_file = stem.parent / (stem.name + "_latent.f64") if cfg.record_latent else None
    with open(data_path, "wb") as zfh:
        if latent_file is not None:
            lfh = open(latent_file, "wb")
        else:
            lfh = None
        try:
            _run(cfg, rng,
                 sink=lambda c: c.astype("<f8").tofile(zfh),
                 latent_sink=None if lfh is None else (lambda c: c.astype("<f8").tofile(lfh)))
        finally:
            if lfh is not None:
                lfh.close()
    sidecar = {
        "dt_ms": cfg.dt,
        "n_samples": int(cfg.n_steps),
        "units": "kHz",
        "seed": str(cfg.seed),
        "model_hash": model_hash(cfg.spec),
        "latent_file": None if latent_file is None else latent_file.name,
    }
    with open(_sidecar_path(data_path), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return data_path
