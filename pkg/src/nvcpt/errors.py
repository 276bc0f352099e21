"""Exception types shared across the package."""


class InvalidParameterError(ValueError):
    """A physical parameter is out of range, non-finite, or inconsistent."""


class DegenerateSteadyStateError(RuntimeError):
    """The relaxation dynamics admits more than one stationary state.

    Carries the detected null-space dimension and, when raised during a
    frequency sweep, the offending modulation frequency in Hz.
    """

    def __init__(self, dimension: int, f_mod: float | None = None):
        self.dimension = dimension
        self.f_mod = f_mod
        msg = f"steady state is degenerate (null-space dimension {dimension})"
        if f_mod is not None:
            msg += f" at f_mod = {f_mod:.6g} Hz"
        super().__init__(msg)


class NumericalFailureError(RuntimeError):
    """The linear solve for the stationary state did not meet tolerance."""


class UndefinedFractionError(ValueError):
    """A coherence fraction has a vanishing population in its denominator."""

    def __init__(self, components: tuple[str, ...]):
        self.components = components
        super().__init__(
            "coherence fraction undefined for " + ", ".join(components)
            + " (population below 1e-14)"
        )


class EmptySelectionError(ValueError):
    """A threshold selection kept zero scans."""
