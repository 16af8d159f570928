"""Structured error types shared across the package."""

from __future__ import annotations


class BoundViolation(RuntimeError):
    """A quantitative inequality that the construction is supposed to satisfy failed.

    Parameters
    ----------
    bound_id : str
        Short identifier of the violated inequality.
    measured : float
        Value observed at run time.
    threshold : float
        Value the measured quantity had to stay below.
    step : int, optional
        Iteration index at which the failure occurred.
    """

    def __init__(self, bound_id: str, measured: float, threshold: float, step: int | None = None):
        self.bound_id = bound_id
        self.measured = float(measured)
        self.threshold = float(threshold)
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(f"bound '{bound_id}' violated{where}: measured {measured:.6g} > threshold {threshold:.6g}")

    def as_dict(self) -> dict:
        return {"bound": self.bound_id, "measured": self.measured,
                "threshold": self.threshold, "step": self.step}


class SeparationError(ValueError):
    """Two diagonal entries are closer than the separation the solver requires."""

    def __init__(self, m: int, n: int, gap: float, required: float):
        self.pair = (m, n)
        self.gap = gap
        self.required = required
        super().__init__(f"separation violated for sites ({m}, {n}): |d_m - d_n| = {gap:.6g} < {required:.6g}")


class SeriesTailError(RuntimeError):
    """A truncated series could not certify its tail within the allowed number of terms."""


class ResonanceError(RuntimeError):
    """A small divisor fell below its non-resonance threshold at a needed index."""

    def __init__(self, cls: str, k, m, n, divisor: float, threshold: float):
        self.cls = cls
        self.k = tuple(int(x) for x in k)
        self.m = m
        self.n = n
        self.divisor = float(divisor)
        self.threshold = float(threshold)
        super().__init__(f"resonance {cls} at k={self.k}, m={m}, n={n}: |divisor| = {abs(divisor):.3g} < {threshold:.3g}")

    def as_dict(self) -> dict:
        return {"class": self.cls, "k": list(self.k), "m": self.m, "n": self.n,
                "divisor": self.divisor, "threshold": self.threshold}


class SiteRestrictionError(ValueError):
    """A tangential site lies outside the admissible range |n| <= |ln eps| / 6."""
