"""The three monitored quantum-dot systems, built from physical parameters.

Basis orderings are fixed for reproducibility:

* single dot:  (|0>, |1>)
* three-level: (|0>, |up>, |down>)
* double dot:  (|00>, |10>, |01>, |11>), index = n1 + 2*n2

Rates in kHz, energies in meV, coherent coupling g in rad*kHz.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .liouville import (
    HilbertSpec,
    LiouvilleError,
    LiouvillianSpec,
    OperatorMatrix,
    spec_from_dict,
)

KB_MEV_PER_K = 0.08617


class ModelError(LiouvilleError):
    """Invalid model parameters or unknown preset."""


@dataclass(frozen=True)
class SqdParams:
    """Single quantum dot monitored for its occupation."""

    gamma_in: float = 1.0
    gamma_out: float = 0.5
    beta_sq: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ModelError(f"{f.name} must be >= 0")


@dataclass(frozen=True)
class Spin3Params:
    """Spin-resolved dot with Zeeman-split levels and one-way spin relaxation.

    The four tunneling rates follow from the tunnel coupling Gamma, the dot
    level epsilon (relative to the reservoir chemical potential), the Zeeman
    splitting Delta, and the reservoir temperature through the Fermi function;
    the in-tunneling rates carry the exciton blocking factor d_factor.
    """

    Gamma: float = 6.0          # kHz
    epsilon: float = 0.1        # meV
    Delta: float = 1.0          # meV
    temperature: float = 10.0   # K
    d_factor: float = 10.0 / 11.0
    gamma_updown: float = 0.0   # kHz
    beta_sq: float = 1.0        # kHz

    def __post_init__(self):
        if self.temperature <= 0:
            raise ModelError("temperature must be > 0")
        if not 0 < self.d_factor <= 1:
            raise ModelError("d_factor must lie in (0, 1]")
        if self.Gamma < 0 or self.gamma_updown < 0 or self.beta_sq < 0:
            raise ModelError("rates and beta_sq must be >= 0")


@dataclass(frozen=True)
class DoubleDotParams:
    """Two coherently coupled dots, fed through dot 1 and drained from dot 2."""

    g: float = np.pi / 2        # rad*kHz
    gamma_in: float = 0.071     # kHz
    gamma_out: float = 0.069    # kHz
    beta_sq: float = 0.1        # kHz

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ModelError(f"{f.name} must be >= 0")


_LOWER2 = np.array([[0, 1], [0, 0]], dtype=complex)   # |1> -> |0>
_NUM2 = np.diag([0.0, 1.0]).astype(complex)


def sqd_model(p: SqdParams) -> LiouvillianSpec:
    """d=2 spec: channels (a^dag, gamma_in), (a, gamma_out), measurement n."""
    return LiouvillianSpec(
        hilbert=HilbertSpec(2, ("0", "1")),
        hamiltonian=OperatorMatrix(np.zeros((2, 2)), "H"),
        channels=(
            (OperatorMatrix(_LOWER2.conj().T, "a_dag"), p.gamma_in),
            (OperatorMatrix(_LOWER2, "a"), p.gamma_out),
        ),
        measurement_op=OperatorMatrix(_NUM2, "n"),
        beta_sq=p.beta_sq,
    )


def fermi(x_mev: float | np.ndarray, temperature_k: float) -> float | np.ndarray:
    """Fermi function 1/(exp(x/kT) + 1), overflow-safe for any argument."""
    return expit(-np.asarray(x_mev) / (KB_MEV_PER_K * temperature_k))


def spin3_rates(p: Spin3Params) -> tuple[float, float, float, float]:
    """Tunneling rates (gamma_0up, gamma_0down, gamma_up0, gamma_down0) in kHz."""
    f_up = fermi(p.epsilon + p.Delta / 2, p.temperature)
    f_down = fermi(p.epsilon - p.Delta / 2, p.temperature)
    return (
        float(p.d_factor * p.Gamma * f_up),
        float(p.d_factor * p.Gamma * f_down),
        float(p.Gamma * (1.0 - f_up)),
        float(p.Gamma * (1.0 - f_down)),
    )


def spin3_model(p: Spin3Params) -> LiouvillianSpec:
    """d=3 spec in basis (empty, up, down) with five incoherent channels.

    Tunneling in/out of each spin level plus the spin-flip channel
    |up> -> |down> at gamma_updown; the detector sees n_up + n_down only.
    """
    g0u, g0d, gu0, gd0 = spin3_rates(p)

    def ket_bra(i: int, j: int) -> np.ndarray:
        m = np.zeros((3, 3), dtype=complex)
        m[i, j] = 1.0
        return m

    n_tot = np.diag([0.0, 1.0, 1.0]).astype(complex)
    return LiouvillianSpec(
        hilbert=HilbertSpec(3, ("0", "up", "down")),
        hamiltonian=OperatorMatrix(np.zeros((3, 3)), "H"),
        channels=(
            (OperatorMatrix(ket_bra(1, 0), "a_up_dag a_0"), g0u),
            (OperatorMatrix(ket_bra(2, 0), "a_down_dag a_0"), g0d),
            (OperatorMatrix(ket_bra(0, 1), "a_0_dag a_up"), gu0),
            (OperatorMatrix(ket_bra(0, 2), "a_0_dag a_down"), gd0),
            (OperatorMatrix(ket_bra(2, 1), "a_down_dag a_up"), p.gamma_updown),
        ),
        measurement_op=OperatorMatrix(n_tot, "n_up+n_down"),
        beta_sq=p.beta_sq,
    )


def doubledot_model(p: DoubleDotParams) -> LiouvillianSpec:
    """d=4 spec with hopping H = g (a1^dag a2 + a2^dag a1), drain on dot 2.

    Occupation basis (|00>, |10>, |01>, |11>); electrons enter dot 1
    incoherently at gamma_in, leave dot 2 at gamma_out, and the detector
    monitors n2.
    """
    eye2 = np.eye(2, dtype=complex)
    a1 = np.kron(eye2, _LOWER2)      # dot 1 is the fast index
    a2 = np.kron(_LOWER2, eye2)
    n2 = a2.conj().T @ a2
    h = p.g * (a1.conj().T @ a2 + a2.conj().T @ a1)
    return LiouvillianSpec(
        hilbert=HilbertSpec(4, ("00", "10", "01", "11")),
        hamiltonian=OperatorMatrix(h, "H"),
        channels=(
            (OperatorMatrix(a1.conj().T, "a1_dag"), p.gamma_in),
            (OperatorMatrix(a2, "a2"), p.gamma_out),
        ),
        measurement_op=OperatorMatrix(n2, "n2"),
        beta_sq=p.beta_sq,
    )


PRESETS = {
    "sqd": (SqdParams, sqd_model),
    "spin3": (Spin3Params, spin3_model),
    "doubledot": (DoubleDotParams, doubledot_model),
}


def preset_params(name: str, overrides: dict | None = None):
    """Parameter object for a named preset with type-checked overrides."""
    if name not in PRESETS:
        raise ModelError(f"unknown preset '{name}' (have: {', '.join(sorted(PRESETS))})")
    cls, _ = PRESETS[name]
    params = cls()
    if overrides:
        valid = {f.name: f for f in fields(cls)}
        clean = {}
        for key, value in overrides.items():
            if key not in valid:
                raise ModelError(
                    f"preset '{name}' has no parameter '{key}' (have: {', '.join(valid)})")
            try:
                clean[key] = float(value)
            except (TypeError, ValueError) as exc:
                raise ModelError(f"parameter '{key}' must be a number, got {value!r}") from exc
        params = replace(params, **clean)
    return params


def build_preset(name: str, overrides: dict | None = None) -> LiouvillianSpec:
    """Expand a named preset (plus overrides) into a full LiouvillianSpec."""
    params = preset_params(name, overrides)
    _, builder = PRESETS[name]
    return builder(params)


def resolve_model(source: str, overrides: dict | None = None) -> LiouvillianSpec:
    """Resolve a preset name or a JSON model file into a LiouvillianSpec.

    Overrides are only meaningful for presets; raw JSON files describe the
    full system already.
    """
    if source in PRESETS:
        return build_preset(source, overrides)
    path = Path(source)
    if not path.exists():
        raise ModelError(f"'{source}' is neither a preset nor an existing model file")
    if overrides:
        raise ModelError("parameter overrides require a preset, not a raw model file")
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if isinstance(doc, dict) and "preset" in doc:
        return build_preset(doc["preset"], doc.get("parameters"))
    return spec_from_dict(doc)
