"""Spectrum synthesis: from experiment configuration to fluorescence traces.

A modulated laser addresses the three optical transitions: the carrier sits
on one transition class and one modulation sideband on the other, so the
two-photon detuning scans with the modulation frequency. Each grid point is
an independent stationary-state solve; sweeps therefore vectorize over the
grid and may fan out to threads without changing the result.

Frequencies at this interface are ordinary frequencies in Hz; conversion to
angular units happens when drive parameters are built.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .analysis import LevelStructure
from .dynamics import (
    DriveParams,
    RelaxationParams,
    build_hamiltonian,
    build_liouvillian,
    _steady_state_from_stack,
)
from .errors import (
    DegenerateSteadyStateError,
    EmptySelectionError,
    InvalidParameterError,
)

TWO_PI = 2.0 * np.pi


class LaserOn(Enum):
    """Which transition class the carrier addresses.

    MS0: carrier on the level-1 transition, lower sideband on levels 2/3.
    MS1: carrier on the level-2/3 transitions (referenced to their
    midpoint), upper sideband on level 1.
    """

    MS0 = "ms0"
    MS1 = "ms1"


@dataclass(frozen=True)
class ExperimentConfig:
    """Laser placement, powers, transition strengths and relaxation rates.

    ``strengths`` are relative transition strengths with the first entry
    fixed at 1 as reference; ``rabi_scale`` (rad/s per sqrt(W)) converts
    sqrt(power x strength x sideband fraction) into a Rabi frequency.
    """

    levels: LevelStructure
    relax: RelaxationParams
    laser_on: LaserOn = LaserOn.MS0
    carrier_detune: float = 0.0
    power: float = 1e-6
    sideband_rel: float = 0.5
    strengths: tuple[float, float, float] = (1.0, 1.0, 1.0)
    rabi_scale: float = 0.0

    def __post_init__(self):
        if isinstance(self.laser_on, str):
            object.__setattr__(self, "laser_on", LaserOn(self.laser_on))
        vals = [self.carrier_detune, self.power, self.sideband_rel,
                self.rabi_scale, *self.strengths]
        if not np.all(np.isfinite(vals)):
            raise InvalidParameterError("configuration fields must be finite")
        if self.power < 0.0 or self.sideband_rel < 0.0 or self.rabi_scale < 0.0:
            raise InvalidParameterError(
                "power, sideband_rel and rabi_scale must be >= 0"
            )
        if len(self.strengths) != 3 or min(self.strengths) < 0.0:
            raise InvalidParameterError("strengths must be 3 values >= 0")
        if self.strengths[0] != 1.0:
            raise InvalidParameterError(
                "strengths are relative; the first entry is the reference "
                "and must equal 1"
            )

    def replace(self, **kwargs) -> "ExperimentConfig":
        from dataclasses import replace as _replace
        return _replace(self, **kwargs)


@dataclass(frozen=True)
class NoiseModel:
    """Scan-to-scan noise: blinking, shot noise and carrier jitter.

    ``dwell`` (seconds per frequency bin) and the implicit unit detection
    efficiency are instrument placeholders; they set the count scale only.
    ``spectral_diffusion`` is the per-scan rms carrier-detuning jitter in Hz.
    """

    active_prob: float = 1.0
    dwell: float = 1.0
    spectral_diffusion: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.active_prob <= 1.0:
            raise InvalidParameterError("active_prob must be in [0, 1]")
        if self.dwell <= 0.0:
            raise InvalidParameterError("dwell must be > 0")
        if self.spectral_diffusion < 0.0:
            raise InvalidParameterError("spectral_diffusion must be >= 0")


@dataclass(frozen=True)
class Spectrum:
    """Sampled fluorescence trace over modulation frequency."""

    f_mod: np.ndarray
    intensity: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.asarray(self.f_mod, dtype=float)
        y = np.asarray(self.intensity, dtype=float)
        if f.ndim != 1 or f.shape != y.shape or f.size == 0:
            raise InvalidParameterError("f_mod and intensity must be matching 1-D arrays")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(y))):
            raise InvalidParameterError("spectrum values must be finite")
        if np.any(np.diff(f) <= 0.0):
            raise InvalidParameterError("f_mod must be strictly increasing")
        if np.any(y < 0.0):
            raise InvalidParameterError("intensities must be >= 0")
        object.__setattr__(self, "f_mod", f)
        object.__setattr__(self, "intensity", y)


@dataclass(frozen=True)
class ScanSeries:
    """Repeated scans with integer photon counts on a common grid.

    ``active`` records which scans had the emitter in its optically active
    state; the threshold procedure never reads it, it exists for validation.
    """

    f_mod: np.ndarray
    counts: np.ndarray
    active: np.ndarray
    seed: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.asarray(self.f_mod, dtype=float)
        c = np.asarray(self.counts)
        a = np.asarray(self.active, dtype=bool)
        if c.ndim != 2 or c.shape[1] != f.size or a.size != c.shape[0]:
            raise InvalidParameterError("counts must be (n_scans, n_bins)")
        if not np.issubdtype(c.dtype, np.integer) or np.any(c < 0):
            raise InvalidParameterError("counts must be nonnegative integers")
        if np.any(np.diff(f) <= 0.0):
            raise InvalidParameterError("f_mod must be strictly increasing")
        object.__setattr__(self, "f_mod", f)
        object.__setattr__(self, "counts", c)
        object.__setattr__(self, "active", a)

    @property
    def n_scans(self) -> int:
        return self.counts.shape[0]


def detunings_from_config(cfg: ExperimentConfig, f_mod: float) -> DriveParams:
    """Drive parameters for one modulation frequency.

    In both carrier placements the two-photon detunings obey
    delta1 - delta2 = 2*pi*(f_mod - E2) and
    delta1 - (delta2 + delta23) = 2*pi*(f_mod - E3), while the carrier-driven
    transition keeps its single-photon detuning at ``carrier_detune``
    (midpoint-referenced when the carrier drives the level-2/3 pair).
    """
    if f_mod <= 0.0:
        raise InvalidParameterError(f"f_mod must be > 0, got {f_mod}")
    e2, e3 = cfg.levels.e2, cfg.levels.e3
    cd = TWO_PI * cfg.carrier_detune
    delta23 = TWO_PI * (e3 - e2)
    s1, s2, s3 = cfg.strengths
    om_unit = cfg.rabi_scale * np.sqrt(cfg.power)
    if cfg.laser_on is LaserOn.MS0:
        delta1 = cd
        delta2 = cd + TWO_PI * (e2 - f_mod)
        om1 = om_unit * np.sqrt(s1)
        om2 = om_unit * np.sqrt(cfg.sideband_rel * s2)
        om3 = om_unit * np.sqrt(cfg.sideband_rel * s3)
    else:
        delta1 = cd + TWO_PI * (f_mod - 0.5 * (e2 + e3))
        delta2 = cd - TWO_PI * 0.5 * (e3 - e2)
        om1 = om_unit * np.sqrt(cfg.sideband_rel * s1)
        om2 = om_unit * np.sqrt(s2)
        om3 = om_unit * np.sqrt(s3)
    return DriveParams(om1, om2, om3, delta1, delta2, delta23)


def _detuning_direction(cfg: ExperimentConfig) -> np.ndarray:
    """d(H)/d(2*pi*f_mod): which diagonal entries move with the sideband."""
    if cfg.laser_on is LaserOn.MS0:
        return np.diag([0.0, -1.0, -1.0, 0.0]).astype(complex)
    return np.diag([1.0, 0.0, 0.0, 0.0]).astype(complex)


def model_component(
    cfg: ExperimentConfig,
    grid: np.ndarray,
    workers: int = 1,
) -> np.ndarray:
    """Background-free model fluorescence rate at each grid frequency.

    The drive depends on frequency only through diagonal detunings, so the
    generator stack is the base generator plus a frequency-proportional
    diagonal direction; every point is then an independent rank-checked
    solve. Evaluation order and thread count do not affect the result.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise InvalidParameterError("grid must be a non-empty 1-D array")
    if np.any(np.diff(grid) <= 0.0):
        raise InvalidParameterError("grid must be strictly increasing")

    f_ref = float(grid[0])
    base = build_liouvillian(
        build_hamiltonian(detunings_from_config(cfg, f_ref)), cfg.relax
    ).matrix
    ddir = _detuning_direction(cfg)
    eye = np.eye(4, dtype=complex)
    ldir = -1j * (np.kron(eye, ddir) - np.kron(ddir.T, eye))
    shifts = TWO_PI * (grid - f_ref)
    stack = base[None, :, :] + shifts[:, None, None] * ldir[None, :, :]

    n = grid.size
    workers = max(1, int(workers))
    chunks = [(k * n) // workers for k in range(workers + 1)]
    bounds = [(a, b) for a, b in zip(chunks[:-1], chunks[1:]) if b > a]

    def solve_chunk(bound):
        a, b = bound
        try:
            rhos = _steady_state_from_stack(stack[a:b])
        except DegenerateSteadyStateError as err:
            offset = getattr(err, "stack_index", 0)
            raise DegenerateSteadyStateError(
                dimension=err.dimension, f_mod=float(grid[a + offset])
            ) from None
        return a, rhos[:, 3, 3].real

    results = {}
    if len(bounds) == 1:
        a, vals = solve_chunk(bounds[0])
        results[a] = vals
    else:
        with ThreadPoolExecutor(max_workers=len(bounds)) as pool:
            futures = [pool.submit(solve_chunk, bd) for bd in bounds]
            errors = []
            for fut in futures:
                try:
                    a, vals = fut.result()
                    results[a] = vals
                except DegenerateSteadyStateError as err:
                    errors.append(err)
            if errors:
                raise min(errors, key=lambda e: e.f_mod)

    p_exc = np.concatenate([results[a] for a in sorted(results)])
    return cfg.relax.gamma_total * np.clip(p_exc, 0.0, None)


def sweep(
    cfg: ExperimentConfig,
    grid: np.ndarray,
    background: tuple[float, float] = (0.0, 0.0),
    scale: float = 1.0,
    workers: int = 1,
) -> Spectrum:
    """Synthesize one fluorescence trace over the modulation-frequency grid.

    intensity(f) = scale * model(f) + b0 + b1 * (f - f_center) with f_center
    the midpoint of the grid endpoints.
    """
    grid = np.asarray(grid, dtype=float)
    model = model_component(cfg, grid, workers=workers)
    b0, b1 = background
    f_center = 0.5 * (grid[0] + grid[-1])
    intensity = scale * model + b0 + b1 * (grid - f_center)
    meta = {
        "config": config_to_dict(cfg),
        "background": [float(b0), float(b1)],
        "scale": float(scale),
        "f_center_hz": float(f_center),
    }
    return Spectrum(grid, intensity, metadata=meta)


def simulate_scans(
    cfg: ExperimentConfig,
    grid: np.ndarray,
    n_scans: int,
    noise: NoiseModel,
    seed: int,
    background: tuple[float, float] = (0.0, 0.0),
    scale: float = 1.0,
) -> ScanSeries:
    """Repeated photon-counting scans with blinking and optional jitter.

    Each scan draws its active state, then a carrier-detuning jitter, then
    Poisson counts, from its own child stream of ``seed``; scans are
    therefore reproducible individually and the series bit-reproducible as
    a whole regardless of evaluation order.
    """
    if n_scans < 1:
        raise InvalidParameterError(f"n_scans must be >= 1, got {n_scans}")
    grid = np.asarray(grid, dtype=float)
    b0, b1 = background
    f_center = 0.5 * (grid[0] + grid[-1])
    bg = b0 + b1 * (grid - f_center)
    if np.any(bg < 0.0):
        raise InvalidParameterError("background must stay >= 0 over the grid")

    shared_model = None
    if noise.spectral_diffusion == 0.0:
        shared_model = model_component(cfg, grid)

    counts = np.zeros((n_scans, grid.size), dtype=np.int64)
    active = np.zeros(n_scans, dtype=bool)
    for k, child in enumerate(np.random.SeedSequence(seed).spawn(n_scans)):
        rng = np.random.default_rng(child)
        is_active = rng.random() < noise.active_prob
        jitter = rng.normal(0.0, noise.spectral_diffusion)
        if is_active:
            if shared_model is None:
                jittered = cfg.replace(carrier_detune=cfg.carrier_detune + jitter)
                model = model_component(jittered, grid)
            else:
                model = shared_model
            expected = noise.dwell * (scale * model + bg)
        else:
            expected = noise.dwell * bg
        counts[k] = rng.poisson(expected)
        active[k] = is_active

    meta = {
        "config": config_to_dict(cfg),
        "noise": {
            "active_prob": noise.active_prob,
            "dwell_s": noise.dwell,
            "spectral_diffusion_hz": noise.spectral_diffusion,
        },
        "background": [float(b0), float(b1)],
        "scale": float(scale),
    }
    return ScanSeries(grid, counts, active, seed=int(seed), metadata=meta)


def threshold_sum(series: ScanSeries, threshold: float) -> Spectrum:
    """Bin-wise sum of the scans whose total counts exceed the threshold.

    Suppresses the inactive-scan background while leaving the curve shape
    intact. The returned metadata records how many and which scans were
    kept. Raises when nothing passes.
    """
    totals = series.counts.sum(axis=1)
    keep = totals > threshold
    if not np.any(keep):
        raise EmptySelectionError(
            f"threshold {threshold} rejected all {series.n_scans} scans"
        )
    summed = series.counts[keep].sum(axis=0)
    meta = dict(series.metadata)
    meta.update({
        "threshold": float(threshold),
        "n_kept": int(keep.sum()),
        "n_scans": int(series.n_scans),
        "kept_indices": [int(i) for i in np.flatnonzero(keep)],
    })
    return Spectrum(series.f_mod, summed.astype(float), metadata=meta)


def dip_centered_grid(levels: LevelStructure, span: float = 100e6,
                      n: int = 401) -> np.ndarray:
    """Grid of n points spanning +-span/2 around the lower resonance."""
    return np.linspace(levels.e2 - span / 2.0, levels.e2 + span / 2.0, n)


def full_scan_grid(start: float = 2.80e9, stop: float = 2.96e9,
                   n: int = 401) -> np.ndarray:
    """Wide grid covering the full ground-splitting scan range."""
    return np.linspace(start, stop, n)


# ---------------------------------------------------------------------------
# Serialization. JSON/CSV carry ordinary frequencies (Hz); rad/s is internal.


def relaxation_to_dict(r: RelaxationParams) -> dict:
    return {
        "gamma_pop_hz": [g / TWO_PI for g in r.gamma_pop],
        "gamma_coh_hz": [g / TWO_PI for g in r.gamma_coh],
    }


def relaxation_from_dict(d: dict, strengths=None) -> RelaxationParams:
    """Accepts explicit rates or the reduced constrained form.

    The constrained form reads the weak-transition strengths (for the
    branching split) from ``strengths`` when they are not given inline.
    """
    if "constrained" in d:
        c = d["constrained"]
        if "s2" in c or "s3" in c:
            s2, s3 = float(c["s2"]), float(c["s3"])
        elif strengths is not None:
            s2, s3 = float(strengths[1]), float(strengths[2])
        else:
            raise InvalidParameterError(
                "constrained relaxation needs s2/s3 inline or via strengths"
            )
        return RelaxationParams.from_constraints(
            gamma_total=TWO_PI * float(c["gamma_total_hz"]),
            frac1=float(c["frac1"]),
            strength_ratio=s3 / s2,
            gamma4=TWO_PI * float(c["gamma4_hz"]),
            gamma1=TWO_PI * float(c["gamma1_hz"]),
        )
    return RelaxationParams(
        gamma_pop=tuple(TWO_PI * float(g) for g in d["gamma_pop_hz"]),
        gamma_coh=tuple(TWO_PI * float(g) for g in d["gamma_coh_hz"]),
    )


def levels_to_dict(levels: LevelStructure) -> dict:
    return {
        "d_gs_hz": levels.d_gs,
        "delta_pm_hz": levels.delta_pm,
        "b_field_gauss": levels.b_field,
        "gyromag_hz_per_gauss": levels.gyromag,
        "combine": levels.combine,
    }


def levels_from_dict(d: dict) -> LevelStructure:
    return LevelStructure(
        d_gs=float(d.get("d_gs_hz", 2.88e9)),
        delta_pm=float(d.get("delta_pm_hz", 0.0)),
        b_field=float(d.get("b_field_gauss", 0.0)),
        gyromag=float(d.get("gyromag_hz_per_gauss", 2.80e6)),
        combine=d.get("combine", "quadrature"),
    )


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "levels": levels_to_dict(cfg.levels),
        "laser_on": cfg.laser_on.value,
        "carrier_detune_hz": cfg.carrier_detune,
        "power_w": cfg.power,
        "sideband_rel": cfg.sideband_rel,
        "strengths": list(cfg.strengths),
        "rabi_scale_hz_per_sqrt_w": cfg.rabi_scale / TWO_PI,
        "relax": relaxation_to_dict(cfg.relax),
    }


def config_from_dict(d: dict) -> ExperimentConfig:
    try:
        strengths = tuple(float(s) for s in d.get("strengths", (1.0, 1.0, 1.0)))
        return ExperimentConfig(
            levels=levels_from_dict(d.get("levels", {})),
            relax=relaxation_from_dict(d["relax"], strengths=strengths),
            laser_on=LaserOn(d.get("laser_on", "ms0")),
            carrier_detune=float(d.get("carrier_detune_hz", 0.0)),
            power=float(d["power_w"]),
            sideband_rel=float(d["sideband_rel"]),
            strengths=strengths,
            rabi_scale=TWO_PI * float(d["rabi_scale_hz_per_sqrt_w"]),
        )
    except KeyError as exc:
        raise InvalidParameterError(f"config is missing key {exc}") from exc
    except ValueError as exc:
        raise InvalidParameterError(f"bad config value: {exc}") from exc


def spectrum_to_csv(spec: Spectrum, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["f_mod_hz", "intensity"])
        for f, y in zip(spec.f_mod, spec.intensity):
            writer.writerow([repr(float(f)), repr(float(y))])


def spectrum_from_csv(path) -> Spectrum:
    f_mod, intensity = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["f_mod_hz", "intensity"]:
            raise InvalidParameterError(
                f"{path}: expected header 'f_mod_hz,intensity'"
            )
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                f_mod.append(float(row[0]))
                intensity.append(float(row[1]))
            except (ValueError, IndexError) as exc:
                raise InvalidParameterError(
                    f"{path}: malformed CSV at row {row_num}: {row!r}"
                ) from exc
    return Spectrum(np.array(f_mod), np.array(intensity),
                    metadata={"source": str(path)})


def scan_series_to_csv(series: ScanSeries, csv_path, sidecar_path=None) -> None:
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scan_index", "f_mod_hz", "counts"])
        for k in range(series.n_scans):
            for f, c in zip(series.f_mod, series.counts[k]):
                writer.writerow([k, repr(float(f)), int(c)])
    if sidecar_path is not None:
        sidecar = dict(series.metadata)
        sidecar.update({
            "seed": series.seed,
            "n_scans": series.n_scans,
            "active_flags": [bool(a) for a in series.active],
        })
        Path(sidecar_path).write_text(json.dumps(sidecar, indent=2) + "\n")


def scan_series_from_csv(csv_path, sidecar_path) -> ScanSeries:
    sidecar = json.loads(Path(sidecar_path).read_text())
    rows: dict[int, list[tuple[float, int]]] = {}
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != [
            "scan_index", "f_mod_hz", "counts"
        ]:
            raise InvalidParameterError(
                f"{csv_path}: expected header 'scan_index,f_mod_hz,counts'"
            )
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.setdefault(int(row[0]), []).append(
                    (float(row[1]), int(row[2]))
                )
            except (ValueError, IndexError) as exc:
                raise InvalidParameterError(
                    f"{csv_path}: malformed CSV at row {row_num}: {row!r}"
                ) from exc
    indices = sorted(rows)
    f_mod = np.array([f for f, _ in rows[indices[0]]])
    counts = np.array(
        [[c for _, c in rows[k]] for k in indices], dtype=np.int64
    )
    return ScanSeries(
        f_mod,
        counts,
        np.array(sidecar["active_flags"], dtype=bool),
        seed=int(sidecar["seed"]),
        metadata={k: v for k, v in sidecar.items()
                  if k not in ("active_flags", "seed", "n_scans")},
    )
