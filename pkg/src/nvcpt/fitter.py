"""Constrained least-squares fitting of fluorescence traces.

The forward model is the spectrum sweep; the free parameters are the shared
physics (transition strengths, branching fraction, dephasing rates, level
energies), one drive-conversion factor per linked trace group, and per-trace
nuisance parameters (intensity scale, linear background, carrier detuning).
The closure rules keep the full relaxation-rate set consistent with the
reduced parametrization at every evaluation.

Bounds are enforced by coordinate transforms (log for positive scales and
rates, logistic for the branching fraction), and the minimizer is a damped
least-squares iteration with a numerically differenced Jacobian.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .analysis import LevelStructure, dip_minima
from .dynamics import RelaxationParams
from .errors import (
    DegenerateSteadyStateError,
    InvalidParameterError,
    NumericalFailureError,
)
from .spectrum import (
    ExperimentConfig,
    Spectrum,
    config_from_dict,
    model_component,
    spectrum_from_csv,
)

TWO_PI = 2.0 * np.pi

_MODEL_EXCEPTIONS = (
    InvalidParameterError,
    DegenerateSteadyStateError,
    NumericalFailureError,
)


@dataclass(frozen=True)
class FitTrace:
    """One measured trace plus the structural part of its configuration.

    The skeleton config supplies laser placement, power, sideband fraction
    and anything else the fit does not vary; rates, strengths, level
    energies and the drive conversion are overwritten by fit parameters.
    """

    spectrum: Spectrum
    config: ExperimentConfig
    group: str = "all"


@dataclass(frozen=True)
class FitProblem:
    traces: tuple[FitTrace, ...]
    gamma_total: float = TWO_PI * 13.4e6
    weighting: str = "poisson"

    def __post_init__(self):
        if len(self.traces) == 0:
            raise InvalidParameterError("FitProblem needs at least one trace")
        if self.gamma_total <= 0.0:
            raise InvalidParameterError("gamma_total must be > 0")
        if self.weighting not in ("poisson", "uniform"):
            raise InvalidParameterError(
                f"weighting must be 'poisson' or 'uniform', got {self.weighting!r}"
            )
        object.__setattr__(self, "traces", tuple(self.traces))
        by_group: dict[str, np.ndarray] = {}
        for t in self.traces:
            ref = by_group.setdefault(t.group, t.spectrum.f_mod)
            if ref.shape != t.spectrum.f_mod.shape or not np.array_equal(
                ref, t.spectrum.f_mod
            ):
                raise InvalidParameterError(
                    f"traces in group {t.group!r} use inconsistent grids"
                )

    @property
    def groups(self) -> tuple[str, ...]:
        seen: list[str] = []
        for t in self.traces:
            if t.group not in seen:
                seen.append(t.group)
        return tuple(seen)


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 200
    fd_rel_step: float = 1e-5
    cost_rtol: float = 1e-10
    step_tol: float = 1e-8
    lambda0: float = 1e-3
    bootstrap: int = 0
    bootstrap_seed: int = 0


@dataclass
class FitResult:
    params: dict[str, float]
    sigmas: dict[str, float]
    cost: float
    residuals: np.ndarray
    n_points: int
    n_params: int
    iterations: int
    converged: bool
    status: str
    final_step_norm: float
    condition_number: float
    cost_history: list[float] = field(default_factory=list)
    bootstrap_sigmas: dict[str, float] | None = None

    @property
    def reduced_chi2(self) -> float:
        dof = max(self.n_points - self.n_params, 1)
        return self.cost / dof


# ---------------------------------------------------------------------------
# Parameter table: name, bound-enforcing transform, reference magnitude used
# to scale linear coordinates and finite-difference floors.


@dataclass(frozen=True)
class _ParamSpec:
    name: str
    transform: str  # "log" | "logit" | "lin"
    ref: float = 1.0

    def encode(self, x: float) -> float:
        if self.transform == "log":
            if x <= 0.0:
                raise InvalidParameterError(f"{self.name} must be > 0, got {x}")
            return float(np.log(x))
        if self.transform == "logit":
            if not 0.0 < x < 1.0:
                raise InvalidParameterError(
                    f"{self.name} must be inside (0, 1), got {x}"
                )
            return float(np.log(x / (1.0 - x)))
        return float(x / self.ref)

    def decode(self, th: float) -> float:
        if self.transform == "log":
            return float(np.exp(th))
        if self.transform == "logit":
            return float(1.0 / (1.0 + np.exp(-th)))
        return float(th * self.ref)

    def derivative(self, th: float) -> float:
        """d(physical)/d(theta) at the given internal coordinate."""
        if self.transform == "log":
            return float(np.exp(th))
        if self.transform == "logit":
            f = 1.0 / (1.0 + np.exp(-th))
            return float(f * (1.0 - f))
        return self.ref


def _param_table(problem: FitProblem) -> list[_ParamSpec]:
    specs = [
        _ParamSpec("s2", "log"),
        _ParamSpec("s3", "log"),
        _ParamSpec("frac1", "logit"),
        _ParamSpec("gamma4", "log"),
        _ParamSpec("gamma1", "log"),
        _ParamSpec("e2", "lin", ref=1e6),
        _ParamSpec("e3", "lin", ref=1e6),
    ]
    for g in problem.groups:
        specs.append(_ParamSpec(f"rabi:{g}", "log"))
    for k, t in enumerate(problem.traces):
        span = float(t.spectrum.f_mod[-1] - t.spectrum.f_mod[0])
        data_scale = max(float(np.max(np.abs(t.spectrum.intensity))), 1.0)
        specs.append(_ParamSpec(f"scale:{k}", "log"))
        specs.append(_ParamSpec(f"b0:{k}", "lin", ref=data_scale))
        specs.append(_ParamSpec(f"b1:{k}", "lin", ref=data_scale / span))
        specs.append(_ParamSpec(f"det:{k}", "lin", ref=1e6))
    return specs


def apply_constraints(
    values: dict[str, float], problem: FitProblem
) -> tuple[list[ExperimentConfig], RelaxationParams]:
    """Resolve the free-parameter dict into per-trace configurations.

    Closure rules: branching rates sum to the fixed total with the 2/3 split
    following s3/s2; optical coherence rates are total/2 + gamma4; all three
    ground coherences decay at gamma1. Raises naming the parameter when a
    bound is violated.
    """
    for name in ("s2", "s3", "gamma4", "gamma1"):
        if values[name] < 0.0:
            raise InvalidParameterError(f"{name} must be >= 0, got {values[name]}")
    if not 0.0 <= values["frac1"] <= 1.0:
        raise InvalidParameterError(
            f"frac1 must be in [0, 1], got {values['frac1']}"
        )
    relax = RelaxationParams.from_constraints(
        gamma_total=problem.gamma_total,
        frac1=values["frac1"],
        strength_ratio=values["s3"] / values["s2"],
        gamma4=values["gamma4"],
        gamma1=values["gamma1"],
    )
    e2, e3 = values["e2"], values["e3"]
    configs = []
    for k, t in enumerate(problem.traces):
        levels = replace(
            t.config.levels,
            d_gs=0.5 * (e2 + e3),
            delta_pm=e3 - e2,
            b_field=0.0,
        )
        configs.append(t.config.replace(
            levels=levels,
            relax=relax,
            carrier_detune=values[f"det:{k}"],
            strengths=(1.0, values["s2"], values["s3"]),
            rabi_scale=values[f"rabi:{t.group}"],
        ))
    return configs, relax


class _Evaluator:
    """Weighted-residual evaluation with per-trace model caching.

    The cache keys on the parameters that actually enter the stationary-state
    model of a given trace, so finite-difference probes of purely linear
    parameters (scale, background) reuse the cached curve.
    """

    def __init__(self, problem: FitProblem):
        self.problem = problem
        self.sigmas = []
        for t in problem.traces:
            data = t.spectrum.intensity
            if problem.weighting == "poisson":
                self.sigmas.append(np.sqrt(np.maximum(data, 1.0)))
            else:
                self.sigmas.append(np.ones_like(data))
        self._cache: dict[tuple, np.ndarray] = {}

    def clear_cache(self):
        self._cache.clear()

    def _model_key(self, k: int, values: dict[str, float]) -> tuple:
        t = self.problem.traces[k]
        return (
            k, values["s2"], values["s3"], values["frac1"], values["gamma4"],
            values["gamma1"], values["e2"], values["e3"],
            values[f"rabi:{t.group}"], values[f"det:{k}"],
        )

    def trace_model(self, k: int, values: dict[str, float],
                    configs: list[ExperimentConfig]) -> np.ndarray:
        key = self._model_key(k, values)
        model = self._cache.get(key)
        if model is None:
            grid = self.problem.traces[k].spectrum.f_mod
            model = model_component(configs[k], grid)
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[key] = model
        f = self.problem.traces[k].spectrum.f_mod
        f_center = 0.5 * (f[0] + f[-1])
        return (values[f"scale:{k}"] * model + values[f"b0:{k}"]
                + values[f"b1:{k}"] * (f - f_center))

    def residuals(self, values: dict[str, float]) -> np.ndarray:
        configs, _ = apply_constraints(values, self.problem)
        parts = []
        for k, t in enumerate(self.problem.traces):
            model = self.trace_model(k, values, configs)
            parts.append((model - t.spectrum.intensity) / self.sigmas[k])
        return np.concatenate(parts)


def residuals(values: dict[str, float], problem: FitProblem) -> np.ndarray:
    """Weighted residual vector (model - data) / sigma over all traces."""
    return _Evaluator(problem).residuals(values)


def default_init(problem: FitProblem) -> dict[str, float]:
    """Documented default starting point.

    Physics defaults plus level energies located by dip-finding on the data
    and per-trace linear parameters from an exact least-squares solve
    against the initial model.
    """
    lows, highs = [], []
    for t in problem.traces:
        f = t.spectrum.f_mod
        y = t.spectrum.intensity
        kernel = np.ones(max(3, y.size // 50))
        smooth = np.convolve(y, kernel / kernel.size, mode="same")
        dips = dip_minima(f, smooth, min_prominence_frac=0.05)
        if dips.size == 0:
            dips = np.array([f[int(np.argmin(smooth))]])
        lows.append(float(dips.min()))
        highs.append(float(dips.max()))
    e2 = float(np.median(lows))
    e3 = float(np.median(highs))
    if e3 < e2:
        e2, e3 = e3, e2

    values = {
        "s2": 0.1, "s3": 0.1, "frac1": 0.7,
        "gamma4": TWO_PI * 10e6, "gamma1": TWO_PI * 1e6,
        "e2": e2, "e3": e3,
    }
    for g in problem.groups:
        p_max = max(t.config.power for t in problem.traces if t.group == g)
        values[f"rabi:{g}"] = problem.gamma_total / np.sqrt(p_max)
    for k in range(len(problem.traces)):
        values[f"scale:{k}"] = 1.0
        values[f"b0:{k}"] = 0.0
        values[f"b1:{k}"] = 0.0
        values[f"det:{k}"] = 0.0

    # exact linear least squares for scale/b0/b1 at the nonlinear init
    configs, _ = apply_constraints(values, problem)
    for k, t in enumerate(problem.traces):
        f, y = t.spectrum.f_mod, t.spectrum.intensity
        model = model_component(configs[k], f)
        basis = np.column_stack(
            [model, np.ones_like(f), f - 0.5 * (f[0] + f[-1])])
        coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
        if coef[0] <= 0.0 or not np.isfinite(coef[0]):
            span = float(np.ptp(y))
            coef = (max(span, 1e-12) / max(float(np.ptp(model)), 1e-300),
                    float(np.min(y)), 0.0)
        values[f"scale:{k}"] = float(coef[0])
        values[f"b0:{k}"] = float(coef[1])
        values[f"b1:{k}"] = float(coef[2])
    return values


def _encode(values, specs):
    return np.array([s.encode(values[s.name]) for s in specs])


def _decode(theta, specs):
    return {s.name: s.decode(th) for s, th in zip(specs, theta)}


def fit(
    problem: FitProblem,
    init: dict[str, float] | None = None,
    options: FitOptions | None = None,
) -> FitResult:
    """Minimize the weighted residual norm by damped least squares.

    Accepted steps never increase the cost; the iteration stops on relative
    cost decrease below ``cost_rtol``, step norm below ``step_tol`` (relative
    to the coordinate norm), or ``max_iter``. Non-convergence is reported in
    the result, not raised.
    """
    options = options or FitOptions()
    specs = _param_table(problem)
    values = dict(default_init(problem) if init is None else init)
    missing = [s.name for s in specs if s.name not in values]
    if missing:
        raise InvalidParameterError(f"init is missing parameters: {missing}")

    ev = _Evaluator(problem)
    theta = _encode(values, specs)
    n = theta.size

    def try_residual(th):
        try:
            return ev.residuals(_decode(th, specs))
        except _MODEL_EXCEPTIONS:
            return None

    r = try_residual(theta)
    if r is None:
        raise InvalidParameterError(
            "forward model is not evaluable at the initial parameters"
        )
    cost = float(r @ r)
    history = [cost]
    lam = options.lambda0
    status, converged = "max_iter", False
    step_norm = np.inf
    jac = None
    iterations = 0

    for iterations in range(1, options.max_iter + 1):
        ev.clear_cache()
        jac = _jacobian(try_residual, theta, r, options.fd_rel_step)
        grad = jac.T @ r
        hess = jac.T @ jac
        diag = np.diag(hess).copy()
        diag = np.maximum(diag, 1e-12 * max(diag.max(), 1e-300))

        accepted = False
        for _ in range(50):
            try:
                step = np.linalg.solve(hess + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            r_try = try_residual(theta + step)
            if r_try is not None:
                cost_try = float(r_try @ r_try)
                if cost_try < cost:
                    accepted = True
                    break
            lam *= 10.0
            if lam > 1e14:
                break
        if not accepted:
            status, converged = "stalled: no downhill step at max damping", True
            break

        lam = max(lam / 3.0, 1e-14)
        step_norm = float(np.linalg.norm(step))
        rel_decrease = (cost - cost_try) / max(cost, 1e-300)
        theta, r, cost = theta + step, r_try, cost_try
        history.append(cost)
        if rel_decrease < options.cost_rtol:
            status, converged = "converged: relative cost decrease below tolerance", True
            break
        if step_norm < options.step_tol * max(1.0, float(np.linalg.norm(theta))):
            status, converged = "converged: step norm below tolerance", True
            break

    values = _decode(theta, specs)
    if jac is None:
        jac = _jacobian(try_residual, theta, r, options.fd_rel_step)
    svals = np.linalg.svd(jac, compute_uv=False)
    cond = float(svals[0] / svals[-1]) if svals[-1] > 0.0 else np.inf
    if not np.isfinite(cond) or cond > 1e12:
        status += " [ill-conditioned Jacobian]"

    cov = np.linalg.pinv(jac.T @ jac, rcond=1e-14)
    if problem.weighting == "uniform":
        dof = max(r.size - n, 1)
        cov = cov * (cost / dof)
    sigmas = {}
    for k, s in enumerate(specs):
        sigmas[s.name] = float(
            abs(s.derivative(theta[k])) * np.sqrt(max(cov[k, k], 0.0))
        )

    result = FitResult(
        params=values,
        sigmas=sigmas,
        cost=cost,
        residuals=r,
        n_points=r.size,
        n_params=n,
        iterations=iterations,
        converged=converged,
        status=status,
        final_step_norm=step_norm,
        condition_number=cond,
        cost_history=history,
    )
    if options.bootstrap > 0:
        result.bootstrap_sigmas = _bootstrap_sigmas(problem, result, options)
    return result


def _jacobian(try_residual, theta, r0, rel_step):
    """Central-difference Jacobian with one-sided fallback per column."""
    n = theta.size
    jac = np.empty((r0.size, n))
    for k in range(n):
        h = rel_step * max(abs(theta[k]), 1.0)
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        rp, rm = try_residual(tp), try_residual(tm)
        if rp is not None and rm is not None:
            jac[:, k] = (rp - rm) / (2.0 * h)
        elif rp is not None:
            jac[:, k] = (rp - r0) / h
        elif rm is not None:
            jac[:, k] = (r0 - rm) / h
        else:
            jac[:, k] = 0.0
    return jac


def _bootstrap_sigmas(problem, result, options):
    """Parametric bootstrap: refit Poisson resamples of the fitted model."""
    ev = _Evaluator(problem)
    configs, _ = apply_constraints(result.params, problem)
    models = [ev.trace_model(k, result.params, configs)
              for k in range(len(problem.traces))]
    rng = np.random.default_rng(options.bootstrap_seed)
    samples: dict[str, list[float]] = {k: [] for k in result.params}
    refit_opts = FitOptions(max_iter=40, fd_rel_step=options.fd_rel_step,
                            cost_rtol=1e-8, step_tol=1e-6)
    for _ in range(options.bootstrap):
        traces = []
        for t, model in zip(problem.traces, models):
            fake = rng.poisson(np.clip(model, 0.0, None)).astype(float)
            traces.append(FitTrace(
                Spectrum(t.spectrum.f_mod, fake), t.config, t.group))
        sub = FitProblem(tuple(traces), problem.gamma_total, problem.weighting)
        res = fit(sub, init=result.params, options=refit_opts)
        for k, v in res.params.items():
            samples[k].append(v)
    return {k: float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
            for k, v in samples.items()}


def fitted_curves(problem: FitProblem, params: dict[str, float]):
    """Model curves at the given parameters, one array per trace."""
    ev = _Evaluator(problem)
    configs, _ = apply_constraints(params, problem)
    return [ev.trace_model(k, params, configs)
            for k in range(len(problem.traces))]


# ---------------------------------------------------------------------------
# Manifest interface. Frequencies and rates are Hz in JSON, rad/s internally.

_HZ_PARAMS = ("gamma4", "gamma1")


def params_to_manifest(values: dict[str, float]) -> dict:
    out = {}
    for k, v in values.items():
        if k in _HZ_PARAMS:
            out[k + "_hz"] = v / TWO_PI
        elif k.startswith("rabi:"):
            out[k.replace("rabi:", "rabi_hz_per_sqrt_w:")] = v / TWO_PI
        else:
            out[k] = v
    return out


def params_from_manifest(d: dict) -> dict[str, float]:
    values = {}
    for k, v in d.items():
        if k.endswith("_hz") and k[:-3] in _HZ_PARAMS:
            values[k[:-3]] = TWO_PI * float(v)
        elif k.startswith("rabi_hz_per_sqrt_w:"):
            values[k.replace("rabi_hz_per_sqrt_w:", "rabi:")] = TWO_PI * float(v)
        else:
            values[k] = float(v)
    return values


def fit_problem_from_manifest(manifest: dict, base_dir=".") -> FitProblem:
    """Build a FitProblem from a JSON manifest referencing trace CSV files.

    Each trace entry carries ``csv`` (path relative to ``base_dir``), a
    config skeleton and a ``group`` label for drive-conversion sharing.
    """
    base = Path(base_dir)
    try:
        entries = manifest["traces"]
    except KeyError as exc:
        raise InvalidParameterError("fit manifest needs a 'traces' list") from exc
    if not entries:
        raise InvalidParameterError("fit manifest lists no traces")
    traces = []
    for entry in entries:
        try:
            spec = spectrum_from_csv(base / entry["csv"])
            cfg_dict = dict(entry["config"])
            cfg_dict.setdefault("relax", {"gamma_pop_hz": [1.0, 1.0, 1.0],
                                          "gamma_coh_hz": [0.0] * 6})
            cfg_dict.setdefault("rabi_scale_hz_per_sqrt_w", 1.0)
            cfg = config_from_dict(cfg_dict)
            traces.append(FitTrace(spec, cfg, str(entry.get("group", "all"))))
        except KeyError as exc:
            raise InvalidParameterError(
                f"fit manifest trace entry is missing {exc}"
            ) from exc
    fixed = manifest.get("fixed", {})
    gamma_total = TWO_PI * float(fixed.get("gamma_total_hz", 13.4e6))
    weighting = manifest.get("weighting", "poisson")
    return FitProblem(tuple(traces), gamma_total=gamma_total,
                      weighting=weighting)


def fit_result_to_dict(result: FitResult) -> dict:
    return {
        "params": params_to_manifest(result.params),
        "sigmas": params_to_manifest(result.sigmas),
        "cost": result.cost,
        "reduced_chi2": result.reduced_chi2,
        "n_points": result.n_points,
        "n_params": result.n_params,
        "iterations": result.iterations,
        "converged": result.converged,
        "status": result.status,
        "final_step_norm": result.final_step_norm,
        "condition_number": result.condition_number,
        "cost_history": result.cost_history,
        "bootstrap_sigmas": (
            params_to_manifest(result.bootstrap_sigmas)
            if result.bootstrap_sigmas is not None else None
        ),
    }
