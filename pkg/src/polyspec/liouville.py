"""Superoperator algebra for continuously monitored open quantum systems.

Everything acts on row-major vectorized density matrices: a d x d matrix
rho becomes a length d^2 vector with vec(rho)[i*d + j] = rho[i, j], so a
two-sided product A rho B turns into kron(A, B.T) acting on vec(rho).

Units: rates and beta^2 in kHz, Hamiltonians in rad*kHz (hbar = 1),
times in ms, angular frequencies in rad*kHz.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

HERMITICITY_TOL = 1e-12
STEADY_RESIDUAL_TOL = 1e-9
NULL_MODE_REL_TOL = 1e-8
DEGENERACY_TOL = 1e-10


class LiouvilleError(ValueError):
    """Invalid system specification or superoperator operation."""


class DegenerateSteadyStateError(LiouvilleError):
    """Liouvillian null space has dimension > 1."""

    def __init__(self, multiplicity: int):
        self.multiplicity = multiplicity
        super().__init__(f"steady state is not unique: null-space multiplicity {multiplicity}")


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class HilbertSpec:
    """Finite Hilbert space with named basis states."""

    dimension: int
    labels: tuple[str, ...]

    def __post_init__(self):
        if self.dimension < 2:
            raise LiouvilleError(f"dimension must be >= 2, got {self.dimension}")
        if len(self.labels) != self.dimension:
            raise LiouvilleError("number of basis labels must equal the dimension")
        if len(set(self.labels)) != self.dimension:
            raise LiouvilleError("basis labels must be unique")


@dataclass(frozen=True)
class OperatorMatrix:
    """A d x d complex operator together with a human-readable label."""

    matrix: np.ndarray
    label: str = ""

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise LiouvilleError(f"operator '{self.label}' must be square, got shape {m.shape}")
        object.__setattr__(self, "matrix", _freeze(m))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def dagger(self) -> np.ndarray:
        return self.matrix.conj().T


@dataclass(frozen=True)
class LiouvillianSpec:
    """One open system under continuous monitoring.

    The generator assembled from this spec reads

        L(rho) = i [rho, H] + sum_c gamma_c D[c](rho) + beta_sq D[A](rho)

    with D[c](rho) = c rho c^dag - (c^dag c rho + rho c^dag c)/2.  Channel
    rates multiply the dissipator directly (no extra factor 1/2), which
    calibrates the population dynamics to d p_occ/dt = gamma_in p_empty -
    gamma_out p_occ and makes the closed-form single-dot cumulants hold
    verbatim.
    """

    hilbert: HilbertSpec
    hamiltonian: OperatorMatrix
    channels: tuple[tuple[OperatorMatrix, float], ...]
    measurement_op: OperatorMatrix
    beta_sq: float

    def __post_init__(self):
        d = self.hilbert.dimension
        h = self.hamiltonian.matrix
        if h.shape != (d, d):
            raise LiouvilleError("Hamiltonian dimension does not match Hilbert space")
        if np.max(np.abs(h - h.conj().T)) > HERMITICITY_TOL:
            raise LiouvilleError("Hamiltonian is not Hermitian within 1e-12")
        object.__setattr__(self, "channels", tuple((op, float(rate)) for op, rate in self.channels))
        for op, rate in self.channels:
            if op.dim != d:
                raise LiouvilleError(f"channel operator '{op.label}' dimension mismatch")
            if rate < 0:
                raise LiouvilleError(f"channel rate for '{op.label}' must be >= 0, got {rate}")
        if self.measurement_op.dim != d:
            raise LiouvilleError("measurement operator dimension mismatch")
        if self.beta_sq < 0:
            raise LiouvilleError(f"beta_sq must be >= 0, got {self.beta_sq}")

    @property
    def dim(self) -> int:
        return self.hilbert.dimension


@dataclass
class EigenSystem:
    """Spectral data of a superoperator, lam[j], right vectors R[:, j],
    left rows Linv[j, :] with Linv @ R = 1."""

    eigenvalues: np.ndarray
    right: np.ndarray
    left: np.ndarray
    zero_index: int
    degenerate_pairs: tuple[tuple[int, int], ...] = ()


@dataclass
class SuperOperator:
    """Linear map on vectorized density matrices with cached spectral data."""

    matrix: np.ndarray
    _eig: EigenSystem | None = field(default=None, repr=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        n = m.shape[0]
        if m.ndim != 2 or m.shape[1] != n or int(round(np.sqrt(n))) ** 2 != n:
            raise LiouvilleError(f"superoperator must be d^2 x d^2, got shape {m.shape}")
        self.matrix = _freeze(m)

    @property
    def dim(self) -> int:
        return int(round(np.sqrt(self.matrix.shape[0])))

    def apply(self, vec: np.ndarray) -> np.ndarray:
        return self.matrix @ vec

    def eigensystem(self) -> EigenSystem:
        if self._eig is None:
            lam, right = np.linalg.eig(self.matrix)
            left = np.linalg.inv(right)
            zero = int(np.argmin(np.abs(lam)))
            scale = np.max(np.abs(lam)) or 1.0
            nz = [j for j in range(len(lam)) if j != zero]
            pairs = tuple(
                (j, k)
                for i, j in enumerate(nz)
                for k in nz[i + 1:]
                if abs(lam[j] - lam[k]) < DEGENERACY_TOL * scale
            )
            self._eig = EigenSystem(lam, right, left, zero, pairs)
        return self._eig

    def reconstruction_residual(self) -> float:
        """Relative error of R diag(lam) R^-1 against the stored matrix."""
        eig = self.eigensystem()
        rebuilt = (eig.right * eig.eigenvalues) @ eig.left
        scale = np.max(np.abs(self.matrix)) or 1.0
        return float(np.max(np.abs(rebuilt - self.matrix)) / scale)

    def propagator(self, t: float) -> np.ndarray:
        """Matrix of exp(L t) from the eigendecomposition."""
        eig = self.eigensystem()
        return (eig.right * np.exp(eig.eigenvalues * t)) @ eig.left


@dataclass(frozen=True)
class StateVector:
    """Row-major vectorized density matrix."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        d = int(round(np.sqrt(v.size)))
        if d * d != v.size:
            raise LiouvilleError("state vector length must be a perfect square")
        object.__setattr__(self, "values", _freeze(v))

    @property
    def dim(self) -> int:
        return int(round(np.sqrt(self.values.size)))

    def as_matrix(self) -> np.ndarray:
        d = self.dim
        return self.values.reshape(d, d)

    def trace(self) -> complex:
        return complex(np.trace(self.as_matrix()))

    def validate(self, herm_tol: float = 1e-10, trace_tol: float = 1e-10,
                 eig_floor: float = -1e-9) -> None:
        rho = self.as_matrix()
        if np.max(np.abs(rho - rho.conj().T)) > herm_tol:
            raise LiouvilleError("state is not Hermitian within tolerance")
        if abs(np.trace(rho) - 1.0) > trace_tol:
            raise LiouvilleError("state trace differs from 1 beyond tolerance")
        if np.min(np.linalg.eigvalsh((rho + rho.conj().T) / 2)) < eig_floor:
            raise LiouvilleError("state has a negative eigenvalue beyond tolerance")


# ---------------------------------------------------------------------------
# elementary superoperator blocks

def vectorize(rho: np.ndarray) -> np.ndarray:
    return np.asarray(rho, dtype=complex).reshape(-1)


def unvectorize(vec: np.ndarray) -> np.ndarray:
    d = int(round(np.sqrt(np.size(vec))))
    return np.asarray(vec, dtype=complex).reshape(d, d)


def trace_vector(d: int) -> np.ndarray:
    """Row vector t with t @ vec(rho) = Tr rho."""
    t = np.zeros(d * d, dtype=complex)
    t[:: d + 1] = 1.0
    return t


def left_right_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix of rho -> a rho b."""
    return np.kron(a, b.T)


def dissipator_matrix(c: np.ndarray) -> np.ndarray:
    """Matrix of D[c](rho) = c rho c^dag - (c^dag c rho + rho c^dag c)/2."""
    c = np.asarray(c, dtype=complex)
    cd = c.conj().T
    cdc = cd @ c
    eye = np.eye(c.shape[0], dtype=complex)
    return (left_right_product(c, cd)
            - 0.5 * (left_right_product(cdc, eye) + left_right_product(eye, cdc)))


def hamiltonian_matrix(h: np.ndarray) -> np.ndarray:
    """Matrix of rho -> i [rho, H]."""
    eye = np.eye(h.shape[0], dtype=complex)
    return 1j * (left_right_product(eye, h) - left_right_product(h, eye))


def meas_superop(a: OperatorMatrix | np.ndarray) -> SuperOperator:
    """Measurement superoperator, rho -> (A rho + rho A^dag)/2."""
    m = a.matrix if isinstance(a, OperatorMatrix) else np.asarray(a, dtype=complex)
    eye = np.eye(m.shape[0], dtype=complex)
    return SuperOperator(0.5 * (left_right_product(m, eye) + left_right_product(eye, m.conj().T)))


# ---------------------------------------------------------------------------
# spec-level operations

def build_liouvillian(spec: LiouvillianSpec) -> SuperOperator:
    """Assemble the Liouvillian of a monitored system, eigendecomposed eagerly.

    Includes the coherent part i [rho, H], every incoherent channel as
    gamma * D[c], and the measurement-induced damping beta_sq * D[A].
    """
    mat = hamiltonian_matrix(spec.hamiltonian.matrix)
    for op, rate in spec.channels:
        if rate > 0:
            mat = mat + rate * dissipator_matrix(op.matrix)
    if spec.beta_sq > 0:
        mat = mat + spec.beta_sq * dissipator_matrix(spec.measurement_op.matrix)
    sup = SuperOperator(mat)
    sup.eigensystem()
    return sup


def steady_state(liouvillian: SuperOperator) -> StateVector:
    """Trace-one null vector of the Liouvillian.

    The null mode is taken from the eigendecomposition (smallest modulus
    eigenvalue); if its residual is poor, falls back to a least-squares
    solve of L rho = 0 with the trace condition appended.

    Raises
    ------
    DegenerateSteadyStateError
        If more than one eigenvalue lies within the null tolerance.
    LiouvilleError
        If no eigenvalue is close enough to zero.
    """
    eig = liouvillian.eigensystem()
    lam = eig.eigenvalues
    scale = np.max(np.abs(lam)) or 1.0
    near_null = np.flatnonzero(np.abs(lam) < NULL_MODE_REL_TOL * scale)
    if near_null.size == 0:
        raise LiouvilleError("no eigenvalue near zero: system has no steady state")
    if near_null.size > 1:
        raise DegenerateSteadyStateError(int(near_null.size))

    d = liouvillian.dim
    vec = eig.right[:, eig.zero_index].copy()
    tr = vec[:: d + 1].sum()
    if abs(tr) < 1e-14:
        raise LiouvilleError("null vector has zero trace; cannot normalize")
    vec = vec / tr

    if np.linalg.norm(liouvillian.matrix @ vec) > STEADY_RESIDUAL_TOL:
        # rank-revealing fallback: [L; tr] x = [0; 1]
        aug = np.vstack([liouvillian.matrix, trace_vector(d)])
        rhs = np.zeros(d * d + 1, dtype=complex)
        rhs[-1] = 1.0
        vec, *_ = np.linalg.lstsq(aug, rhs, rcond=None)
        if np.linalg.norm(liouvillian.matrix @ vec) > STEADY_RESIDUAL_TOL:
            raise LiouvilleError("steady-state residual exceeds tolerance")

    # scrub numerical anti-Hermitian noise
    rho = unvectorize(vec)
    rho = (rho + rho.conj().T) / 2
    state = StateVector(vectorize(rho))
    state.validate()
    return state


def resolvent_gprime(liouvillian: SuperOperator, omega: float) -> SuperOperator:
    """Fourier transform of the steady-projector-free propagator.

    Returns sum_{lam_j != 0} r_j l_j^dag * (-1)/(lam_j + i omega), i.e.
    integral_0^inf (exp(L tau) - P0) exp(+i omega tau) d tau.

    Raises if any nonzero eigenvalue sits on the imaginary axis, since the
    integral would not converge.
    """
    eig = liouvillian.eigensystem()
    lam = eig.eigenvalues
    scale = np.max(np.abs(lam)) or 1.0
    nonzero = np.arange(lam.size) != eig.zero_index
    if np.any(nonzero & (np.abs(lam.real) < 1e-12 * scale)):
        raise LiouvilleError("nonzero eigenvalue on the imaginary axis: resolvent undefined")
    weights = np.zeros_like(lam)
    weights[nonzero] = -1.0 / (lam[nonzero] + 1j * omega)
    return SuperOperator((eig.right * weights) @ eig.left)


def meas_superop_prime(a: OperatorMatrix | np.ndarray, rho0: StateVector) -> SuperOperator:
    """Mean-subtracted measurement superoperator A' x = A x - Tr(A rho0) x."""
    if abs(rho0.trace() - 1.0) > 1e-9:
        raise LiouvilleError("rho0 must have unit trace")
    calA = meas_superop(a)
    d = rho0.dim
    expval = (calA.matrix @ rho0.values)[:: d + 1].sum()
    return SuperOperator(calA.matrix - expval * np.eye(d * d, dtype=complex))


# ---------------------------------------------------------------------------
# JSON model interface (raw form; named presets live in polyspec.models)

def _complex_pairs(m: np.ndarray) -> list[list[float]]:
    return [[float(z.real), float(z.imag)] for z in np.asarray(m, dtype=complex).reshape(-1)]


def _from_pairs(pairs: Sequence[Sequence[float]], d: int, what: str) -> np.ndarray:
    flat = np.array([complex(re, im) for re, im in pairs], dtype=complex)
    if flat.size != d * d:
        raise LiouvilleError(f"{what}: expected {d * d} complex pairs, got {flat.size}")
    return flat.reshape(d, d)


def spec_to_dict(spec: LiouvillianSpec) -> dict:
    """JSON-ready dictionary with row-major [re, im] operator entries."""
    return {
        "dimension": spec.dim,
        "basis_labels": list(spec.hilbert.labels),
        "hamiltonian": _complex_pairs(spec.hamiltonian.matrix),
        "channels": [
            {"op": _complex_pairs(op.matrix), "label": op.label, "rate_khz": rate}
            for op, rate in spec.channels
        ],
        "measurement_op": _complex_pairs(spec.measurement_op.matrix),
        "measurement_label": spec.measurement_op.label,
        "beta_sq_khz": spec.beta_sq,
    }


def spec_from_dict(doc: dict) -> LiouvillianSpec:
    try:
        d = int(doc["dimension"])
        labels = tuple(doc.get("basis_labels", [str(i) for i in range(d)]))
        ham = _from_pairs(doc["hamiltonian"], d, "hamiltonian")
        channels = tuple(
            (OperatorMatrix(_from_pairs(ch["op"], d, "channel op"), ch.get("label", "")),
             float(ch["rate_khz"]))
            for ch in doc["channels"]
        )
        meas = OperatorMatrix(_from_pairs(doc["measurement_op"], d, "measurement op"),
                              doc.get("measurement_label", "A"))
        beta_sq = float(doc["beta_sq_khz"])
    except (KeyError, TypeError, ValueError) as exc:
        raise LiouvilleError(f"malformed model document: {exc}") from exc
    return LiouvillianSpec(
        hilbert=HilbertSpec(d, labels),
        hamiltonian=OperatorMatrix(ham, "H"),
        channels=channels,
        measurement_op=meas,
        beta_sq=beta_sq,
    )
