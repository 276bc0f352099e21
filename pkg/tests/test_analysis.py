import numpy as np
import pytest

from nvcpt import (
    DensityMatrix,
    DriveParams,
    InvalidParameterError,
    RelaxationParams,
    UndefinedFractionError,
    build_hamiltonian,
    build_liouvillian,
    steady_state,
)
from nvcpt.analysis import (
    LevelStructure,
    coherence_quality,
    dark_subspace,
    dip_minima,
    predict_dip_frequencies,
)

from _support import GAMMA_TOTAL, TWO_PI, random_drive


class TestDarkSubspace:
    def test_single_two_photon_resonance(self):
        g = TWO_PI * 10e6
        p = DriveParams(omega1=0.8 * g, omega2=0.5 * g, delta1=0.1 * g,
                        delta2=0.1 * g, delta23=0.7 * g, omega3=0.3 * g)
        report = dark_subspace(p)
        assert report.dimension == 1
        v = report.basis_array()[0]
        expect = np.array([p.omega2, -p.omega1, 0.0], dtype=complex)
        expect /= np.linalg.norm(expect)
        phase = v @ expect.conj()
        assert np.max(np.abs(v - phase * expect)) <= 1e-12
        assert report.residual <= 1e-9 * g

    def test_degenerate_pair_gives_two_dimensional_subspace(self):
        g = TWO_PI * 10e6
        p = DriveParams(omega1=g, omega2=0.4 * g, omega3=0.2 * g,
                        delta1=0.3 * g, delta2=0.3 * g, delta23=0.0)
        report = dark_subspace(p)
        assert report.dimension == 2
        basis = report.basis_array()
        gram = basis @ basis.conj().T
        assert np.max(np.abs(gram - np.eye(2))) <= 1e-12

    def test_no_resonance_gives_empty_subspace(self):
        g = TWO_PI * 10e6
        p = DriveParams(omega1=g, omega2=g, omega3=g,
                        delta1=0.1 * g, delta2=0.5 * g, delta23=0.2 * g)
        report = dark_subspace(p)
        assert report.dimension == 0
        assert report.basis == ()

    def test_undriven_level_is_dark(self):
        g = TWO_PI * 10e6
        p = DriveParams(omega1=g, omega2=g, omega3=0.0,
                        delta1=0.1 * g, delta2=0.5 * g, delta23=0.2 * g)
        report = dark_subspace(p)
        assert report.dimension == 1
        v = report.basis_array()[0]
        assert abs(abs(v[2]) - 1.0) <= 1e-12

    def test_all_zero_drive_rejected(self):
        with pytest.raises(InvalidParameterError):
            dark_subspace(DriveParams(delta1=1.0))

    def test_residual_bound_over_random_resonant_draws(self):
        rng = np.random.default_rng(31)
        tol = 1e-9
        for _ in range(100):
            p0 = random_drive(rng)
            p = DriveParams(p0.omega1, p0.omega2, p0.omega3,
                            p0.delta2, p0.delta2, p0.delta23)
            report = dark_subspace(p, tol=tol)
            assert report.dimension >= 1
            om = p.omegas
            om_max = float(np.max(np.abs(om)))
            for v in report.basis_array():
                assert abs(om @ v) <= tol * om_max
            # reported residual is the excited amplitude under H, i.e. half
            # the coupling sum
            assert report.residual <= 0.5 * tol * om_max

    def test_dark_dimension_implies_no_steady_fluorescence(self):
        # Cross-module property: a reported dark direction plus zero ground
        # dephasing forces the stationary excited population to zero.
        rng = np.random.default_rng(43)
        g = GAMMA_TOTAL
        for _ in range(25):
            p0 = random_drive(rng)
            p = DriveParams(p0.omega1, p0.omega2, p0.omega3,
                            p0.delta2 + p0.delta23, p0.delta2, p0.delta23)
            if abs(p.delta23) < 0.05 * g:
                continue
            assert dark_subspace(p).dimension == 1
            r = RelaxationParams(gamma_pop=(0.4 * g, 0.3 * g, 0.3 * g),
                                 gamma_coh=(0, 0, 0, g / 2, g / 2, g / 2))
            rho = steady_state(build_liouvillian(build_hamiltonian(p), r))
            assert rho.excited_population <= 1e-10


class TestPredictDipFrequencies:
    def test_degenerate_zero_field(self):
        levels = LevelStructure(d_gs=2.88e9, delta_pm=0.0, b_field=0.0)
        assert predict_dip_frequencies(levels) == (2.88e9, 2.88e9)

    def test_strain_only_splitting(self):
        levels = LevelStructure(d_gs=2.88e9, delta_pm=5e6)
        e2, e3 = predict_dip_frequencies(levels)
        assert e2 == pytest.approx(2.8775e9, abs=1.0)
        assert e3 == pytest.approx(2.8825e9, abs=1.0)

    def test_zeeman_splitting_at_17_gauss(self):
        levels = LevelStructure(d_gs=2.88e9, delta_pm=0.0, b_field=17.0,
                                gyromag=2.80e6)
        e2, e3 = predict_dip_frequencies(levels)
        assert e2 == pytest.approx(2.8324e9, abs=1.0)
        assert e3 == pytest.approx(2.9276e9, abs=1.0)
        assert e3 - e2 == pytest.approx(95.2e6, abs=1.0)

    def test_monotone_in_field(self):
        prev_sep, prev_e3 = -1.0, 0.0
        for b in np.linspace(0.0, 50.0, 11):
            levels = LevelStructure(d_gs=2.88e9, delta_pm=3e6, b_field=b)
            e2, e3 = predict_dip_frequencies(levels)
            assert e3 - e2 > prev_sep
            assert e3 > prev_e3
            prev_sep, prev_e3 = e3 - e2, e3

    def test_linear_combination_mode(self):
        levels = LevelStructure(d_gs=2.88e9, delta_pm=5e6, b_field=10.0,
                                combine="linear")
        assert levels.pair_splitting == pytest.approx(5e6 + 2 * 2.8e6 * 10.0)

    def test_invalid_fields_rejected(self):
        with pytest.raises(InvalidParameterError):
            LevelStructure(d_gs=-1.0)
        with pytest.raises(InvalidParameterError):
            LevelStructure(b_field=-2.0)
        with pytest.raises(InvalidParameterError):
            LevelStructure(combine="sum")


class TestCoherenceQuality:
    def test_pure_dark_state_saturates_bound(self):
        v = np.array([0.5, -0.8, 0.2, 0.0], dtype=complex)
        v /= np.linalg.norm(v)
        rho = DensityMatrix(np.outer(v, v.conj()))
        f12, f13 = coherence_quality(rho)
        assert f12 == pytest.approx(1.0, abs=1e-12)
        assert f13 == pytest.approx(1.0, abs=1e-12)

    def test_fully_mixed_has_no_coherence(self):
        rho = DensityMatrix(np.diag([1, 1, 1, 0]).astype(complex) / 3.0)
        assert coherence_quality(rho) == (0.0, 0.0)

    def test_vanishing_population_raises(self):
        rho = DensityMatrix(np.diag([0.0, 0.5, 0.5, 0.0]).astype(complex))
        with pytest.raises(UndefinedFractionError) as exc:
            coherence_quality(rho)
        assert set(exc.value.components) == {"rho12", "rho13"}

    def test_single_undefined_component_is_named(self):
        rho = DensityMatrix(np.diag([0.5, 0.5, 0.0, 0.0]).astype(complex))
        with pytest.raises(UndefinedFractionError) as exc:
            coherence_quality(rho)
        assert exc.value.components == ("rho13",)

    def test_fractions_within_unit_interval_for_random_states(self):
        rng = np.random.default_rng(13)
        for _ in range(200):
            a = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
            rho = a @ a.conj().T
            rho /= np.trace(rho).real
            f12, f13 = coherence_quality(DensityMatrix(rho))
            assert 0.0 <= f12 <= 1.0
            assert 0.0 <= f13 <= 1.0


class TestDipMinima:
    def test_finds_two_lorentzian_dips(self):
        f = np.linspace(2.80e9, 2.96e9, 801)
        y = 1.0 - 0.6 / (1 + ((f - 2.85e9) / 2e6) ** 2) \
                - 0.5 / (1 + ((f - 2.91e9) / 2e6) ** 2)
        dips = dip_minima(f, y)
        assert len(dips) == 2
        assert dips[0] == pytest.approx(2.85e9, abs=3e5)
        assert dips[1] == pytest.approx(2.91e9, abs=3e5)

    def test_flat_trace_has_no_dips(self):
        f = np.linspace(0.0, 1.0, 11)
        assert dip_minima(f, np.ones(11)).size == 0
