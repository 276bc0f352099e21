"""Driven-dissipative dynamics of a four-level emitter.

Three ground levels couple to a single excited level through three optical
fields. The rotating-frame Hamiltonian is held together with a relaxation
superoperator (population decay out of the excited level plus decay of every
off-diagonal density-matrix element) in a 16x16 generator acting on the
column-stacked density matrix. The stationary state is obtained by a
rank-checked linear solve; time evolution through the matrix exponential
serves as an independent cross-check.

All rates, detunings and Rabi frequencies in this module are angular
frequencies (rad/s). Conversion from ordinary frequency happens at the I/O
boundary, never here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import (
    DegenerateSteadyStateError,
    InvalidParameterError,
    NumericalFailureError,
)

DIM = 4

# Solver and invariant tolerances. Null-space dimension is judged on singular
# values relative to the largest one; degeneracy is a physical configuration
# (undriven trap states), not numerical noise, so the cutoff can sit far below
# any physical rate ratio.
NULLSPACE_RTOL = 1e-9
RESIDUAL_RTOL = 1e-10
RHO_HERMITICITY_ATOL = 1e-12
RHO_TRACE_ATOL = 1e-10
RHO_EIGENVALUE_ATOL = 1e-10

# Position of the excited-excited element in the column-stacked layout.
_EE_INDEX = DIM * DIM - 1
# Row vector representing Tr(rho) in the column-stacked layout.
_TRACE_ROW = np.eye(DIM, dtype=complex).reshape(-1, order="F")

# Ordering convention for the six coherence decay rates.
COHERENCE_PAIRS = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))


def vec(mat: np.ndarray) -> np.ndarray:
    """Column-stack a matrix into a vector."""
    return np.asarray(mat, dtype=complex).reshape(-1, order="F")


def unvec(v: np.ndarray, n: int = DIM) -> np.ndarray:
    """Inverse of :func:`vec`."""
    return np.asarray(v, dtype=complex).reshape((n, n), order="F")


def _require_finite(name: str, value) -> None:
    if not np.all(np.isfinite(np.atleast_1d(value))):
        raise InvalidParameterError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class DriveParams:
    """Optical drive: three complex Rabi frequencies and three detunings.

    ``delta1`` and ``delta2`` are the detunings of the fields addressing the
    first and second ground level; ``delta23`` is the splitting between the
    second and third ground level. All in rad/s.
    """

    omega1: complex = 0.0
    omega2: complex = 0.0
    omega3: complex = 0.0
    delta1: float = 0.0
    delta2: float = 0.0
    delta23: float = 0.0

    def __post_init__(self):
        for name in ("omega1", "omega2", "omega3"):
            _require_finite(name, getattr(self, name))
        for name in ("delta1", "delta2", "delta23"):
            val = getattr(self, name)
            _require_finite(name, val)
            if np.iscomplexobj(val) and np.imag(val) != 0.0:
                raise InvalidParameterError(f"{name} must be real, got {val!r}")

    @property
    def omegas(self) -> np.ndarray:
        return np.array([self.omega1, self.omega2, self.omega3], dtype=complex)

    @property
    def ground_detunings(self) -> np.ndarray:
        """Diagonal of the ground block: (delta1, delta2, delta2 + delta23)."""
        return np.array(
            [self.delta1, self.delta2, self.delta2 + self.delta23], dtype=float
        )


@dataclass(frozen=True)
class RelaxationParams:
    """Population decay out of the excited level and coherence decay rates.

    ``gamma_pop[i]`` is the decay rate from the excited level into ground
    level ``i``; ``gamma_coh`` holds the six off-diagonal decay rates in the
    order (12, 13, 23, 14, 24, 34). All in rad/s, all nonnegative. There is
    no ground-state population relaxation.
    """

    gamma_pop: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gamma_coh: tuple[float, float, float, float, float, float] = (
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
    )

    def __post_init__(self):
        if len(self.gamma_pop) != 3 or len(self.gamma_coh) != 6:
            raise InvalidParameterError(
                "gamma_pop needs 3 rates and gamma_coh 6 rates"
            )
        for name, rates in (("gamma_pop", self.gamma_pop),
                            ("gamma_coh", self.gamma_coh)):
            _require_finite(name, rates)
            if min(rates) < 0.0:
                raise InvalidParameterError(f"{name} rates must be >= 0")

    @property
    def gamma_total(self) -> float:
        """Total decay rate of the excited level."""
        return float(sum(self.gamma_pop))

    def coherence_rate(self, i: int, j: int) -> float:
        """Decay rate of the (i, j) off-diagonal element, 0-based indices."""
        pair = (min(i, j), max(i, j))
        return float(self.gamma_coh[COHERENCE_PAIRS.index(pair)])

    @classmethod
    def from_constraints(
        cls,
        gamma_total: float,
        frac1: float,
        strength_ratio: float,
        gamma4: float,
        gamma1: float,
    ) -> "RelaxationParams":
        """Build the full rate set from the reduced parametrization.

        The excited level decays at ``gamma_total``; a fraction ``frac1``
        goes to ground level 1 and the remainder splits between levels 2 and
        3 in proportion ``strength_ratio`` = s3/s2 (branching follows the
        squared Rabi-frequency ratio of the two weak transitions). Optical
        coherences decay at gamma_total/2 + ``gamma4``; all three ground
        coherences decay at ``gamma1``.
        """
        if not 0.0 <= frac1 <= 1.0:
            raise InvalidParameterError(f"frac1 must be in [0, 1], got {frac1}")
        if min(gamma_total, strength_ratio, gamma4, gamma1) < 0.0:
            raise InvalidParameterError("rates and ratios must be >= 0")
        g1 = frac1 * gamma_total
        g2 = (gamma_total - g1) / (1.0 + strength_ratio)
        g3 = g2 * strength_ratio
        opt = gamma_total / 2.0 + gamma4
        return cls(
            gamma_pop=(g1, g2, g3),
            gamma_coh=(gamma1, gamma1, gamma1, opt, opt, opt),
        )


@dataclass(frozen=True)
class DensityMatrix:
    """A 4x4 density matrix, validated on construction.

    Hermitian to 1e-12 (max norm), unit trace to 1e-10, positive
    semidefinite down to an eigenvalue floor of -1e-10.
    """

    rho: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=complex)
        if rho.shape != (DIM, DIM):
            raise InvalidParameterError(f"rho must be 4x4, got {rho.shape}")
        _require_finite("rho", rho)
        herm = np.max(np.abs(rho - rho.conj().T))
        if herm > RHO_HERMITICITY_ATOL:
            raise InvalidParameterError(f"rho not Hermitian (deviation {herm:.3e})")
        tr = np.trace(rho)
        if abs(tr - 1.0) > RHO_TRACE_ATOL:
            raise InvalidParameterError(f"rho trace {tr:.12g} != 1")
        lo = float(np.linalg.eigvalsh(rho)[0])
        if lo < -RHO_EIGENVALUE_ATOL:
            raise InvalidParameterError(f"rho not positive (min eigenvalue {lo:.3e})")
        object.__setattr__(self, "rho", rho)

    def population(self, i: int) -> float:
        return float(self.rho[i, i].real)

    def coherence(self, i: int, j: int) -> complex:
        return complex(self.rho[i, j])

    @property
    def excited_population(self) -> float:
        return self.population(DIM - 1)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.rho)[0])


@dataclass(frozen=True)
class Liouvillian:
    """16x16 generator of density-matrix evolution, column-stacked layout."""

    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=complex)
        if mat.shape != (DIM * DIM, DIM * DIM):
            raise InvalidParameterError(f"Liouvillian must be 16x16, got {mat.shape}")
        object.__setattr__(self, "matrix", mat)

    def apply(self, rho: np.ndarray) -> np.ndarray:
        """Evaluate d(rho)/dt for a matrix-valued argument."""
        return unvec(self.matrix @ vec(rho))

    def trace_defect(self) -> float:
        """Max-norm of Tr(L[rho]) as a functional; zero for a valid generator."""
        return float(np.max(np.abs(_TRACE_ROW @ self.matrix)))


def build_hamiltonian(p: DriveParams) -> np.ndarray:
    """Rotating-frame Hamiltonian (divided by hbar) of the four-level system.

    Diagonal (delta1, delta2, delta2 + delta23, 0); ground level i couples to
    the excited level with matrix element conj(omega_i)/2 above the diagonal
    and omega_i/2 below it. Hermitian by construction.
    """
    h = np.zeros((DIM, DIM), dtype=complex)
    h[0, 0] = p.delta1
    h[1, 1] = p.delta2
    h[2, 2] = p.delta2 + p.delta23
    for i, om in enumerate(p.omegas):
        h[i, 3] = np.conj(om) / 2.0
        h[3, i] = om / 2.0
    return h


def build_liouvillian(h: np.ndarray, r: RelaxationParams) -> Liouvillian:
    """Combine coherent evolution under ``h`` with the relaxation terms.

    The relaxation acts element-wise: the excited population decays at the
    total rate and feeds the three ground populations according to the
    branching rates; every off-diagonal element decays at its own rate.
    """
    h = np.asarray(h, dtype=complex)
    if h.shape != (DIM, DIM):
        raise InvalidParameterError(f"Hamiltonian must be 4x4, got {h.shape}")
    _require_finite("h", h)
    scale = max(1.0, float(np.max(np.abs(h))))
    if np.max(np.abs(h - h.conj().T)) > 1e-10 * scale:
        raise InvalidParameterError("Hamiltonian is not Hermitian")

    eye = np.eye(DIM, dtype=complex)
    lmat = -1j * (np.kron(eye, h) - np.kron(h.T, eye))

    def idx(i: int, j: int) -> int:
        return i + DIM * j

    gamma = r.gamma_total
    lmat[idx(3, 3), idx(3, 3)] += -gamma
    for i in range(3):
        lmat[idx(i, i), idx(3, 3)] += r.gamma_pop[i]
    for (i, j), rate in zip(COHERENCE_PAIRS, r.gamma_coh):
        lmat[idx(i, j), idx(i, j)] += -rate
        lmat[idx(j, i), idx(j, i)] += -rate
    return Liouvillian(lmat)


def _steady_state_from_stack(lstack: np.ndarray) -> np.ndarray:
    """Stationary density matrices for a stack of generators.

    Shared by the scalar solver and the spectrum sweep so both follow the
    same math: an SVD rank check establishes that the null space is
    one-dimensional, then the redundant excited-population row is replaced
    with the unit-trace constraint and the square system solved directly.

    Returns an (n, 4, 4) array; raises on degeneracy or solver failure with
    the offending stack index attached where relevant.
    """
    lstack = np.asarray(lstack, dtype=complex)
    svals = np.linalg.svd(lstack, compute_uv=False)
    smax = svals[:, 0]
    null_dims = np.sum(svals <= NULLSPACE_RTOL * smax[:, None], axis=1)

    if np.any(smax == 0.0):
        err = DegenerateSteadyStateError(dimension=DIM * DIM)
        err.stack_index = int(np.argmax(smax == 0.0))
        raise err
    if np.any(null_dims > 1):
        k = int(np.argmax(null_dims > 1))
        err = DegenerateSteadyStateError(dimension=int(null_dims[k]))
        err.stack_index = k
        raise err
    if np.any(null_dims < 1):
        k = int(np.argmax(null_dims < 1))
        raise NumericalFailureError(
            f"no null vector at tolerance {NULLSPACE_RTOL:g} "
            f"(smallest relative singular value {svals[k, -1] / smax[k]:.3e})"
        )

    # The DIM diagonal rows of a trace-preserving generator sum to zero, so
    # replacing the excited-population row keeps full row space and pinning
    # the trace there makes the system square and nonsingular.
    mstack = lstack.copy()
    mstack[:, _EE_INDEX, :] = _TRACE_ROW[None, :] * smax[:, None]
    rhs = np.zeros((lstack.shape[0], DIM * DIM), dtype=complex)
    rhs[:, _EE_INDEX] = smax
    try:
        x = np.linalg.solve(mstack, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError(f"trace-constrained solve failed: {exc}") from exc

    resid = np.max(np.abs(np.einsum("nij,nj->ni", lstack, x)), axis=1)
    bound = RESIDUAL_RTOL * smax * np.maximum(
        1.0, np.max(np.abs(x), axis=1)
    )
    if np.any(resid > bound):
        k = int(np.argmax(resid > bound))
        raise NumericalFailureError(
            f"stationary residual {resid[k]:.3e} exceeds {bound[k]:.3e}"
        )

    rhos = x.reshape(-1, DIM, DIM).transpose(0, 2, 1)  # undo column stacking
    rhos = 0.5 * (rhos + rhos.conj().transpose(0, 2, 1))
    traces = np.trace(rhos, axis1=1, axis2=2).real
    return rhos / traces[:, None, None]


def steady_state(L: Liouvillian) -> DensityMatrix:
    """Unique stationary state of the generator.

    Raises :class:`DegenerateSteadyStateError` when the null space has more
    than one dimension (relative singular-value cutoff 1e-9) and
    :class:`NumericalFailureError` when no null vector exists at tolerance
    or the solve misses the residual bound.
    """
    rho = _steady_state_from_stack(L.matrix[None, :, :])[0]
    return DensityMatrix(rho)


def evolve(rho0: DensityMatrix, L: Liouvillian, t: float) -> DensityMatrix:
    """Propagate ``rho0`` for duration ``t`` (seconds) under the generator.

    Uses the scaling-and-squaring matrix exponential; trace is preserved
    exactly by the generator structure, up to roundoff.
    """
    _require_finite("t", t)
    if t < 0.0:
        raise InvalidParameterError(f"evolution time must be >= 0, got {t}")
    if t == 0.0:
        return rho0
    prop = expm(L.matrix * t)
    rho = unvec(prop @ vec(rho0.rho))
    rho = 0.5 * (rho + rho.conj().T)
    rho /= np.trace(rho).real
    return DensityMatrix(rho)


def fluorescence_rate(rho: DensityMatrix, r: RelaxationParams) -> float:
    """Photon emission rate: total decay rate times excited population.

    Clamped at zero so eigenvalue-level noise in the excited population
    cannot produce a negative rate.
    """
    p_e = rho.excited_population
    return r.gamma_total * max(p_e, 0.0)
