"""Dark-state and resonance analysis.

Identifies the ground-manifold subspace that is decoupled from the excited
level for a given drive, predicts where the fluorescence dips sit as a
function of magnetic field, and scores how close the ground-state coherences
of a density matrix come to their Cauchy-Schwarz maximum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space
from scipy.signal import find_peaks

from .dynamics import DensityMatrix, DriveParams, build_hamiltonian
from .errors import InvalidParameterError, UndefinedFractionError

# Standard electron Zeeman coefficient per sublevel for this defect, Hz/gauss.
DEFAULT_GYROMAGNETIC_HZ_PER_GAUSS = 2.80e6


@dataclass(frozen=True)
class LevelStructure:
    """Ground-level energies in Hz relative to level 1.

    ``d_gs`` is the zero-field splitting between level 1 and the upper pair;
    ``delta_pm`` the residual zero-field splitting of that pair; a magnetic
    field of ``b_field`` gauss splits the pair further by twice the
    gyromagnetic coefficient per gauss. The two contributions combine in
    quadrature by default (level repulsion); ``combine="linear"`` adds them
    instead, appropriate when the field term dominates.
    """

    d_gs: float = 2.88e9
    delta_pm: float = 0.0
    b_field: float = 0.0
    gyromag: float = DEFAULT_GYROMAGNETIC_HZ_PER_GAUSS
    combine: str = "quadrature"

    def __post_init__(self):
        if not np.all(np.isfinite([self.d_gs, self.delta_pm, self.b_field,
                                   self.gyromag])):
            raise InvalidParameterError("level-structure fields must be finite")
        if self.d_gs <= 0.0:
            raise InvalidParameterError("d_gs must be > 0")
        if self.delta_pm < 0.0 or self.b_field < 0.0:
            raise InvalidParameterError("delta_pm and b_field must be >= 0")
        if self.gyromag <= 0.0:
            raise InvalidParameterError("gyromag must be > 0")
        if self.combine not in ("quadrature", "linear"):
            raise InvalidParameterError(
                f"combine must be 'quadrature' or 'linear', got {self.combine!r}"
            )

    @property
    def pair_splitting(self) -> float:
        """Splitting of the upper level pair, Hz."""
        zeeman = 2.0 * self.gyromag * self.b_field
        if self.combine == "linear":
            return self.delta_pm + zeeman
        return float(np.hypot(self.delta_pm, zeeman))

    @property
    def e2(self) -> float:
        """Energy of level 2 relative to level 1, Hz."""
        return self.d_gs - self.pair_splitting / 2.0

    @property
    def e3(self) -> float:
        """Energy of level 3 relative to level 1, Hz."""
        return self.d_gs + self.pair_splitting / 2.0


@dataclass(frozen=True)
class DarkReport:
    """Result of a dark-subspace search.

    ``basis`` holds orthonormal ground-manifold amplitude vectors (length-3,
    complex); ``residual`` is the largest excited-level amplitude obtained by
    applying the Hamiltonian to any basis vector.
    """

    dimension: int
    basis: tuple[tuple[complex, ...], ...]
    residual: float

    def basis_array(self) -> np.ndarray:
        return np.array(self.basis, dtype=complex).reshape(self.dimension, 3)


def dark_subspace(p: DriveParams, tol: float = 1e-9) -> DarkReport:
    """Ground-manifold subspace that is both uncoupled and stationary.

    A ground superposition survives when it carries no amplitude into the
    excited level (sum of omega_i * c_i vanishes) and is an eigenvector of
    the ground-block diagonal, i.e. it lives inside one degenerate-detuning
    group. ``tol`` sets the relative scale below which detunings are grouped
    and Rabi amplitudes count as zero.
    """
    if tol <= 0.0:
        raise InvalidParameterError(f"tol must be > 0, got {tol}")
    omegas = p.omegas
    om_max = float(np.max(np.abs(omegas)))
    if om_max == 0.0:
        raise InvalidParameterError(
            "all Rabi frequencies vanish; the whole ground manifold is "
            "trivially dark"
        )
    # Amplitudes below tolerance count as exactly zero so an effectively
    # undriven level shows up as a dark basis vector of its own.
    omegas = np.where(np.abs(omegas) <= tol * om_max, 0.0, omegas)
    detunings = p.ground_detunings
    scale = max(float(np.max(np.abs(detunings))), om_max)

    # Group levels whose diagonal entries coincide within tolerance.
    groups: list[list[int]] = []
    for i in range(3):
        for grp in groups:
            if abs(detunings[i] - detunings[grp[0]]) <= tol * scale:
                grp.append(i)
                break
        else:
            groups.append([i])

    vectors: list[np.ndarray] = []
    for grp in groups:
        row = omegas[np.array(grp)][None, :]
        kernel = null_space(row, rcond=tol)
        for k in range(kernel.shape[1]):
            v = np.zeros(3, dtype=complex)
            v[np.array(grp)] = kernel[:, k]
            vectors.append(v)

    h = build_hamiltonian(p)
    residual = 0.0
    for v in vectors:
        full = np.concatenate([v, [0.0]])
        residual = max(residual, float(np.abs((h @ full)[3])))

    return DarkReport(
        dimension=len(vectors),
        basis=tuple(tuple(v) for v in vectors),
        residual=residual,
    )


def predict_dip_frequencies(levels: LevelStructure) -> tuple[float, float]:
    """Modulation frequencies of the two-photon resonances, Hz.

    These track the bare level energies; power broadening and light shifts
    are deliberately ignored, making this a seed and diagnostic for the full
    spectrum sweep rather than a replacement for it.
    """
    return levels.e2, levels.e3


def coherence_quality(rho: DensityMatrix) -> tuple[float, float]:
    """Ground coherences relative to their Cauchy-Schwarz maximum.

    Returns (|rho_12| / sqrt(rho_11 rho_22), |rho_13| / sqrt(rho_11 rho_33)),
    each clamped to [0, 1]. Raises when a participating population is below
    1e-14, naming the undefined component(s).
    """
    mat = rho.rho
    pops = mat.diagonal().real
    undefined = []
    if pops[0] < 1e-14 or pops[1] < 1e-14:
        undefined.append("rho12")
    if pops[0] < 1e-14 or pops[2] < 1e-14:
        undefined.append("rho13")
    if undefined:
        raise UndefinedFractionError(tuple(undefined))
    f12 = abs(mat[0, 1]) / np.sqrt(pops[0] * pops[1])
    f13 = abs(mat[0, 2]) / np.sqrt(pops[0] * pops[2])
    return min(float(f12), 1.0), min(float(f13), 1.0)


def dip_minima(
    f_mod: np.ndarray,
    intensity: np.ndarray,
    min_prominence_frac: float = 0.02,
) -> np.ndarray:
    """Frequencies of local intensity minima, most prominent first capped off.

    Works on the sampled trace only; prominence is measured relative to the
    full intensity span so shallow ripples are ignored.
    """
    f_mod = np.asarray(f_mod, dtype=float)
    intensity = np.asarray(intensity, dtype=float)
    span = float(np.max(intensity) - np.min(intensity))
    if span == 0.0:
        return np.array([])
    idx, _ = find_peaks(-intensity, prominence=min_prominence_frac * span)
    return f_mod[idx]
