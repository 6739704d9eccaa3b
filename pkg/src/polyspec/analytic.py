"""Exact polyspectra and multi-time cumulants of monitored systems.

All frequency-domain results come from one eigenmode expansion of the
Liouvillian: with nonzero modes lam_j, right/left vectors r_j / l_j, the
projector-free propagator and its Fourier transform act mode-wise, so every
trace in the spectra reduces to small sums over modes.  The two frequency
integrals in the fourth-order spectrum have simple poles only and are done
in closed form by residues.

Values are raw detector-output spectra in kHz (beta prefactors included;
S2 carries the beta^2/4 shot-noise floor).  Dividing order n by beta^(2n)
gives the beta-normalized convention with units kHz^(1-n).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path

import numpy as np

from .liouville import (
    LiouvilleError,
    LiouvillianSpec,
    SuperOperator,
    build_liouvillian,
    meas_superop,
    meas_superop_prime,
    steady_state,
    trace_vector,
)

IMAG_REL_TOL = 1e-9
CLAMP_REL = 1e-14


class AnalyticError(ValueError):
    """Numerical inconsistency in an exact-spectrum evaluation."""


@dataclass
class SpectrumGrid:
    """Evaluated polyspectrum on a frequency grid.

    axis1/axis2 are angular frequencies in rad*kHz; axis2 is None for the
    power spectrum.  values is real with shape (len(axis1),) for order 2
    and (len(axis1), len(axis2)) otherwise.  errors, when present, holds
    per-point standard errors of the same shape.
    """

    order: int
    axis1: np.ndarray
    axis2: np.ndarray | None
    values: np.ndarray
    units: str = "kHz"
    metadata: dict = field(default_factory=dict)
    errors: np.ndarray | None = None

    def __post_init__(self):
        if self.order not in (2, 3, 4):
            raise AnalyticError(f"order must be 2, 3 or 4, got {self.order}")
        self.axis1 = np.asarray(self.axis1, dtype=float)
        self.axis2 = None if self.axis2 is None else np.asarray(self.axis2, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        expected = (self.axis1.size,) if self.axis2 is None else (self.axis1.size, self.axis2.size)
        if self.values.shape != expected:
            raise AnalyticError(f"values shape {self.values.shape} != grid shape {expected}")
        if not np.all(np.isfinite(self.values)):
            raise AnalyticError("spectrum contains non-finite values")
        if self.order == 2:
            floor = -1e-12 * max(np.max(np.abs(self.values)), 1.0)
            if np.min(self.values) < floor:
                raise AnalyticError("power spectrum has significantly negative values")
            self.values = np.maximum(self.values, 0.0)
        if self.errors is not None:
            self.errors = np.asarray(self.errors, dtype=float)
            if self.errors.shape != self.values.shape:
                raise AnalyticError("errors shape does not match values")

    @property
    def freq1_khz(self) -> np.ndarray:
        return self.axis1 / (2 * np.pi)

    @property
    def freq2_khz(self) -> np.ndarray | None:
        return None if self.axis2 is None else self.axis2 / (2 * np.pi)


@dataclass(frozen=True)
class CumulantValue:
    """Multi-time cumulant at ordered positive time differences.

    delta_weight reports the coefficient of the delta(t2 - t1) term of the
    second-order cumulant separately; it is zero for orders 3 and 4.
    """

    order: int
    taus: tuple[float, ...]
    value: float
    delta_weight: float = 0.0


@dataclass
class ModeData:
    """Eigenmode expansion shared by all spectral formulas.

    For nonzero Liouvillian modes j: lam[j] eigenvalue, u[j] = Tr[A' r_j],
    v[j] = l_j (A' rho0), M[j, k] = l_j A' r_k, s = u * v.  Passing a
    precomputed instance to the spectra operations skips the (cheap)
    rebuild; the data is read-only and safe to share.
    """

    lam: np.ndarray
    u: np.ndarray
    v: np.ndarray
    M: np.ndarray
    beta_sq: float
    s: np.ndarray = field(init=False)

    def __post_init__(self):
        self.s = self.u * self.v


def liouvillian_modes(spec: LiouvillianSpec) -> ModeData:
    """Eigenmode expansion of a spec's Liouvillian around its steady state."""
    liou = build_liouvillian(spec)
    rho0 = steady_state(liou)
    eig = liou.eigensystem()
    aprime = meas_superop_prime(spec.measurement_op, rho0).matrix
    d = spec.dim
    tr = trace_vector(d)
    keep = np.arange(d * d) != eig.zero_index
    lam = eig.eigenvalues[keep]
    scale = np.max(np.abs(eig.eigenvalues)) or 1.0
    if np.any(np.abs(lam.real) < 1e-12 * scale):
        raise AnalyticError("nonzero eigenvalue on the imaginary axis; spectra undefined")
    right = eig.right[:, keep]
    left = eig.left[keep, :]
    u = tr @ (aprime @ right)
    v = left @ (aprime @ rho0.values)
    m = left @ aprime @ right
    return ModeData(lam=lam, u=u, v=v, M=m, beta_sq=spec.beta_sq)


# ---------------------------------------------------------------------------
# time domain

def multi_time_moment(spec: LiouvillianSpec, times) -> float:
    """Steady-state moment <z(t_n) ... z(t_1)> for strictly ascending times.

    Evaluates beta^(2n) Tr[A G(t_n - t_{n-1}) A ... G(t_2 - t_1) A rho0]
    through matrix exponentials of the Liouvillian, with A the (unprimed)
    measurement superoperator.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise AnalyticError("times must be a non-empty 1-d sequence")
    if times.size > 1 and np.min(np.diff(times)) <= 0:
        raise AnalyticError("times must be strictly ascending")
    liou = build_liouvillian(spec)
    rho0 = steady_state(liou)
    eig = liou.eigensystem()
    cal_a = meas_superop(spec.measurement_op).matrix
    tr = trace_vector(spec.dim)
    vec = cal_a @ rho0.values
    for gap in np.diff(times):
        vec = eig.right @ (np.exp(eig.eigenvalues * gap) * (eig.left @ vec))
        vec = cal_a @ vec
    raw = complex(tr @ vec)
    value = spec.beta_sq ** times.size * raw
    if abs(value.imag) > IMAG_REL_TOL * max(abs(value.real), 1e-12):
        raise AnalyticError(f"moment has spurious imaginary part {value.imag:g}")
    return float(value.real)


def cumulant_time(spec: LiouvillianSpec, order: int, taus,
                  modes: ModeData | None = None) -> CumulantValue:
    """Ordered-time multi-time cumulant C_order at positive gaps taus.

    Returns the single ordered-permutation term of the primed-operator
    expressions; the delta-function part of C2 is reported via the
    delta_weight field rather than folded into the value.
    """
    if order not in (2, 3, 4):
        raise AnalyticError(f"cumulant order must be 2, 3 or 4, got {order}")
    taus = tuple(float(t) for t in np.atleast_1d(taus))
    if len(taus) != order - 1:
        raise AnalyticError(f"order {order} needs {order - 1} time differences, got {len(taus)}")
    if min(taus) <= 0:
        raise AnalyticError("time differences must be > 0")
    md = liouvillian_modes(spec) if modes is None else modes
    b2 = md.beta_sq
    lam, u, v, M, s = md.lam, md.u, md.v, md.M, md.s
    delta_weight = 0.0
    if order == 2:
        value = b2 ** 2 * np.sum(s * np.exp(lam * taus[0]))
        delta_weight = b2 / 4.0
    elif order == 3:
        e2 = u * np.exp(lam * taus[1])
        e1 = v * np.exp(lam * taus[0])
        value = b2 ** 3 * (e2 @ M @ e1)
    else:
        t1, t2, t3 = taus
        main = (u * np.exp(lam * t3)) @ M @ (np.exp(lam * t2) * (M @ (v * np.exp(lam * t1))))
        pair1 = np.sum(s * np.exp(lam * (t3 + t2))) * np.sum(s * np.exp(lam * (t2 + t1)))
        pair2 = np.sum(s * np.exp(lam * (t1 + t2 + t3))) * np.sum(s * np.exp(lam * t2))
        value = b2 ** 4 * (main - pair1 - pair2)
    value = complex(value)
    if abs(value.imag) > IMAG_REL_TOL * max(abs(value.real), 1e-12):
        raise AnalyticError(f"cumulant has spurious imaginary part {value.imag:g}")
    return CumulantValue(order=order, taus=taus, value=float(value.real),
                         delta_weight=delta_weight)


# ---------------------------------------------------------------------------
# frequency domain

def default_omega_grid(fmax_khz: float, points: int = 101) -> np.ndarray:
    """Symmetric angular-frequency grid with omega = 0 on-grid (odd points)."""
    if points < 3 or points % 2 == 0:
        raise AnalyticError("grid needs an odd number of points >= 3 so omega=0 is included")
    return 2 * np.pi * np.linspace(-fmax_khz, fmax_khz, points)


def _finalize(raw: np.ndarray, order: int, axis1, axis2, beta_sq: float,
              extra_meta: dict | None = None) -> SpectrumGrid:
    scale = float(np.max(np.abs(raw.real))) if raw.size else 0.0
    imag_max = float(np.max(np.abs(raw.imag))) if raw.size else 0.0
    if imag_max > max(IMAG_REL_TOL * scale, 1e-12):
        raise AnalyticError(
            f"imaginary residue {imag_max:g} exceeds tolerance (scale {scale:g})")
    values = raw.real.copy()
    values[np.abs(values) < CLAMP_REL * scale] = 0.0
    meta = {
        "source": "analytic",
        "beta_sq_khz": beta_sq,
        "beta_normalized_units": f"kHz^{1 - order}",
        "imag_residue_max": imag_max,
    }
    if extra_meta:
        meta.update(extra_meta)
    return SpectrumGrid(order=order, axis1=np.asarray(axis1, dtype=float),
                        axis2=None if axis2 is None else np.asarray(axis2, dtype=float),
                        values=values, units="kHz", metadata=meta)


def s2_analytic(spec: LiouvillianSpec, omega_grid,
                modes: ModeData | None = None) -> SpectrumGrid:
    """Exact power spectrum including the beta^2/4 white-noise floor."""
    md = liouvillian_modes(spec) if modes is None else modes
    w = np.asarray(omega_grid, dtype=float)
    raw = (-md.s / (md.lam + 1j * w[:, None])
           - md.s / (md.lam - 1j * w[:, None])).sum(axis=1)
    raw = md.beta_sq ** 2 * raw + md.beta_sq / 4.0
    return _finalize(raw, 2, w, None, md.beta_sq)


def s3_analytic(spec: LiouvillianSpec, omega1_grid, omega2_grid,
                modes: ModeData | None = None) -> SpectrumGrid:
    """Exact bispectrum on a rectangular grid, summed over all 3! frequency
    permutations of (w1, w2, -w1-w2)."""
    md = liouvillian_modes(spec) if modes is None else modes
    w1 = np.asarray(omega1_grid, dtype=float)
    w2 = np.asarray(omega2_grid, dtype=float)
    g1 = np.broadcast_to(w1[:, None], (w1.size, w2.size))
    g2 = np.broadcast_to(w2[None, :], (w1.size, w2.size))
    g3 = -g1 - g2
    raw = np.zeros(g1.shape, dtype=complex)
    for a, b, c in permutations((g1, g2, g3)):
        left = -1.0 / (md.lam + 1j * c[..., None])              # mode j
        inner = -1.0 / (md.lam + 1j * (c + b)[..., None])       # mode k
        raw += ((md.v * inner) @ md.M.T * left) @ md.u
    raw *= md.beta_sq ** 3
    return _finalize(raw, 3, w1, w2, md.beta_sq)


def _s4_corrections(md: ModeData, nu1, nu2, nu3) -> np.ndarray:
    """Residue-summed value of the two omega-integral terms of the
    fourth-order spectrum (sign such that the result is *added*).

    nu1 = w1+w2+w3, nu2 = w2+w3, nu3 = w3 of one frequency permutation;
    broadcasting over grid-shaped nu arrays.
    """
    lam, s = md.lam, md.s
    nu1 = np.asarray(nu1, dtype=float)
    nu2 = np.asarray(nu2, dtype=float)
    nu3 = np.asarray(nu3, dtype=float)
    s_nu3 = s / (lam + 1j * nu3[..., None])     # (..., j): s_j / (lam_j + i nu1...3)
    s_nu1 = s / (lam + 1j * nu1[..., None])     # (..., k)
    out = np.zeros(np.broadcast(nu1, nu2, nu3).shape, dtype=complex)
    for j in range(lam.size):
        pair_pole = 1.0 / (lam[j] + lam + 1j * nu2[..., None])   # (..., k)
        # poles on distinct modes (j, k) and both single poles on mode j
        out += s_nu3[..., j] * np.sum(s_nu1 * pair_pole, axis=-1)
        out += (s_nu3[..., j] / (lam[j] + 1j * nu1)) * np.sum(s * pair_pole, axis=-1)
    return out


def s4_analytic(spec: LiouvillianSpec, omega1_grid, omega2_grid,
                modes: ModeData | None = None) -> SpectrumGrid:
    """Exact trispectrum cut S4(w1, -w1, w2) on a rectangular grid.

    Sums the three-resolvent trace and the residue-evaluated integral
    corrections over all 4! permutations of (w1, -w1, w2, -w2); requires a
    semisimple Liouvillian spectrum (eigenvalue collisions are rejected at
    mode construction).
    """
    md = liouvillian_modes(spec) if modes is None else modes
    w1 = np.asarray(omega1_grid, dtype=float)
    w2 = np.asarray(omega2_grid, dtype=float)
    g1 = np.broadcast_to(w1[:, None], (w1.size, w2.size))
    g2 = np.broadcast_to(w2[None, :], (w1.size, w2.size))
    raw = np.zeros(g1.shape, dtype=complex)
    for p0, p1, p2, p3 in permutations((g1, -g1, g2, -g2)):
        nu1 = p1 + p2 + p3
        nu2 = p2 + p3
        nu3 = p3
        right = -1.0 / (md.lam + 1j * nu1[..., None])
        mid = -1.0 / (md.lam + 1j * nu2[..., None])
        left = -1.0 / (md.lam + 1j * nu3[..., None])
        t = (md.v * right) @ md.M.T * mid
        t = (t @ md.M.T) * left
        raw += t @ md.u
        raw += _s4_corrections(md, nu1, nu2, nu3)
    raw *= md.beta_sq ** 4
    return _finalize(raw, 4, w1, w2, md.beta_sq)


# ---------------------------------------------------------------------------
# single-dot closed forms (oracles for the general machinery)

def sqd_s2_closed(gamma_in: float, gamma_out: float, beta_sq: float, omega) -> np.ndarray:
    """Closed-form single-dot power spectrum (Lorentzian + beta^2/4)."""
    w = np.asarray(omega, dtype=float)
    g = gamma_in + gamma_out
    return beta_sq ** 2 * 2 * gamma_in * gamma_out / (g * (g * g + w * w)) + beta_sq / 4.0


def sqd_s3_closed(gamma_in: float, gamma_out: float, beta_sq: float,
                  omega1, omega2) -> np.ndarray:
    """Closed-form single-dot bispectrum; sign follows gamma_out - gamma_in.

    Broadcasts omega1 against omega2 (pass w1[:, None], w2[None, :] for a grid).
    """
    w1 = np.asarray(omega1, dtype=float)
    w2 = np.asarray(omega2, dtype=float)
    g = gamma_in + gamma_out
    num = (2 * gamma_in * gamma_out * (gamma_out - gamma_in)
           * (3 * g * g + w1 * w1 + w2 * w2 + w1 * w2))
    den = (g * (g * g + w1 * w1) * (g * g + w2 * w2) * (g * g + (w1 + w2) ** 2))
    return beta_sq ** 3 * num / den


def sqd_s4_closed(gamma_in: float, gamma_out: float, beta_sq: float,
                  omega1, omega2) -> np.ndarray:
    """Closed-form single-dot trispectrum cut; symmetric under rate exchange.

    Broadcasts omega1 against omega2 like sqd_s3_closed.
    """
    w1 = np.asarray(omega1, dtype=float)
    w2 = np.asarray(omega2, dtype=float)
    g = gamma_in + gamma_out
    g2 = g * g
    p1 = g2 + w1 * w1
    p2 = g2 + w2 * w2
    rm = g2 + (w1 - w2) ** 2
    rp = g2 + (w1 + w2) ** 2
    q = 3 * g2 * (2 * g2 + w1 * w1 + w2 * w2) + (w1 * w1 - w2 * w2) ** 2
    num = 4 * gamma_in * gamma_out * (
        (gamma_in - gamma_out) ** 2 * p1 * p2 * q
        + 2 * gamma_in * gamma_out * rm * rp
        * (w1 * w1 * w2 * w2 - g2 * (3 * g2 + w1 * w1 + w2 * w2))
    )
    den = g ** 3 * p1 ** 2 * rm * p2 ** 2 * rp
    return beta_sq ** 4 * num / den


# ---------------------------------------------------------------------------
# serialization: JSON metadata + CSV value blocks

def _write_matrix_csv(path: Path, values: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in np.atleast_2d(values):
            writer.writerow([f"{x:.17g}" for x in row])


def _read_matrix_csv(path: Path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        return np.array([[float(x) for x in row] for row in csv.reader(fh)], dtype=float)


def spectrum_to_files(grid: SpectrumGrid, stem: str | Path) -> Path:
    """Write a spectrum as <stem>.json plus <stem>.csv (and <stem>_err.csv).

    The JSON document carries order, axes, units and metadata; the CSV holds
    the value matrix row-major (one row per axis1 point).  Returns the JSON
    path.
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    values_csv = stem.with_suffix(".csv")
    _write_matrix_csv(values_csv, grid.values)
    errors_csv = None
    if grid.errors is not None:
        errors_csv = stem.parent / (stem.name + "_err.csv")
        _write_matrix_csv(errors_csv, grid.errors)
    doc = {
        "order": grid.order,
        "axis1_rad_khz": [float(x) for x in grid.axis1],
        "axis2_rad_khz": None if grid.axis2 is None else [float(x) for x in grid.axis2],
        "units": grid.units,
        "metadata": grid.metadata,
        "values_csv": values_csv.name,
        "errors_csv": None if errors_csv is None else errors_csv.name,
    }
    json_path = stem.with_suffix(".json")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return json_path


def spectrum_from_files(json_path: str | Path) -> SpectrumGrid:
    json_path = Path(json_path)
    with open(json_path, encoding="utf-8") as fh:
        doc = json.load(fh)
    values = _read_matrix_csv(json_path.parent / doc["values_csv"])
    axis2 = doc["axis2_rad_khz"]
    if axis2 is None:
        values = values.reshape(-1)
    errors = None
    if doc.get("errors_csv"):
        errors = _read_matrix_csv(json_path.parent / doc["errors_csv"])
        if axis2 is None:
            errors = errors.reshape(-1)
    return SpectrumGrid(
        order=int(doc["order"]),
        axis1=np.array(doc["axis1_rad_khz"], dtype=float),
        axis2=None if axis2 is None else np.array(axis2, dtype=float),
        values=values,
        units=doc.get("units", "kHz"),
        metadata=doc.get("metadata", {}),
        errors=errors,
    )
