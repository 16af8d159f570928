"""Diagonalization of the disordered Stark operator by a quadratic KAM loop.

The operator is ``L = D + delta * Delta + V`` on a finite window, with
``D = diag(n)``, ``Delta`` the nearest-neighbour hopping and ``V = diag(v_n)``
an i.i.d. disorder with ``|v_n| <= 1/10``.  A first explicit conjugation
removes the hopping exactly (the Toeplitz part commutes away); the remaining
perturbation is removed by iterating ``e^W (D + P) e^{-W} = D_+ + P_+``.
All operators carry derivatives with respect to the disorder, so the
eigenvalues ``d_n(v)`` come with their parameter gradients.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BoundViolation, SeparationError
from .weighted_ops import (
    SELF_ADJOINT,
    SKEW_ADJOINT,
    DualScalar,
    LatticeOperator,
    SiteWindow,
    _exp_tail,
    ad,
    commutator_series,
    hopping,
    mul_exp,
    norm_value,
    op_exp,
    weighted_norm,
)

R_WEIGHT = 0.125
ALPHA = 0.1
DISORDER_BOUND = 0.1


def c_delta(delta: float) -> float:
    """Constant ``C(delta) = 4 delta e^{1/8} exp(4 delta e^{1/8})``."""
    a = delta * math.exp(0.125)
    return 4.0 * a * math.exp(4.0 * a)


def eps0_of(delta: float, alpha: float = ALPHA) -> float:
    """Initial smallness ``eps_0 = 2 C(delta) alpha``."""
    return 2.0 * c_delta(delta) * alpha


def uniform_disorder(rng: np.random.Generator, size: int) -> np.ndarray:
    return rng.uniform(-DISORDER_BOUND, DISORDER_BOUND, size)


@dataclass
class StarkModel:
    """Disordered Stark lattice on a window.

    Parameters
    ----------
    window : SiteWindow
    delta : float
        Hopping strength.
    disorder : ndarray
        ``v_n`` for every window site, in ``[-1/10, 1/10]``.
    seed : int or None
        Seed the disorder was drawn from (provenance only).
    """

    window: SiteWindow
    delta: float
    disorder: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.disorder = np.asarray(self.disorder, dtype=float)
        if self.disorder.shape != (self.window.size,):
            raise ValueError("disorder must have one entry per window site")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if np.any(np.abs(self.disorder) > DISORDER_BOUND + 1e-15):
            raise ValueError("disorder values must lie in [-1/10, 1/10]")

    @classmethod
    def from_seed(cls, window: SiteWindow, delta: float, seed: int,
                  sampler: Callable[[np.random.Generator, int], np.ndarray] = uniform_disorder
                  ) -> "StarkModel":
        """Draw the disorder from ``sampler`` (uniform on [-1/10, 1/10] by default)."""
        rng = np.random.default_rng(seed)
        return cls(window, delta, sampler(rng, window.size), seed)

    def v(self, site: int) -> float:
        return float(self.disorder[self.window.index(site)])

    def with_disorder(self, site: int, value: float) -> "StarkModel":
        d = self.disorder.copy()
        d[self.window.index(site)] = value
        return StarkModel(self.window, self.delta, d, self.seed)

    def dense(self, stark: bool = True, disorder: bool = True) -> np.ndarray:
        """Dense truncated matrix ``D + delta * Delta + V``."""
        n = self.window.size
        mat = self.delta * (np.eye(n, k=1) + np.eye(n, k=-1))
        if stark:
            mat += np.diag(self.window.sites.astype(float))
        if disorder:
            mat += np.diag(self.disorder)
        return mat

    def to_dict(self) -> dict:
        return {"window": [self.window.lo, self.window.hi], "delta": self.delta,
                "seed": self.seed, "disorder": self.disorder.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "StarkModel":
        return cls(SiteWindow(*data["window"]), data["delta"], np.asarray(data["disorder"]),
                   data.get("seed"))


@dataclass
class BoundCheck:
    """Outcome of one asserted inequality."""

    bound: str
    measured: float
    threshold: float
    step: int | None = None

    @property
    def passed(self) -> bool:
        return self.measured <= self.threshold

    def as_dict(self) -> dict:
        return {"bound": self.bound, "measured": self.measured, "threshold": self.threshold,
                "step": self.step, "passed": self.passed}


class _Checker:
    def __init__(self, strict: bool):
        self.strict = strict
        self.records: list[BoundCheck] = []

    def __call__(self, bound: str, measured: float, threshold: float, step: int | None = None):
        rec = BoundCheck(bound, float(measured), float(threshold), step)
        self.records.append(rec)
        if self.strict and not rec.passed:
            raise BoundViolation(bound, measured, threshold, step)
        return rec


@dataclass
class DiagonalizationResult:
    """Output of :func:`diagonalize`.

    ``eigenvalues[i]`` belongs to site ``window.lo + i``; ``eigen_grads[p, i]``
    is its derivative with respect to ``v_{active[p]}``.  ``G`` satisfies
    ``G^T L G = diag(eigenvalues)`` up to the final residual.
    """

    model: StarkModel
    eigenvalues: np.ndarray
    eigen_grads: np.ndarray
    active: tuple
    G: LatticeOperator
    steps: int
    per_step_norms: list
    constants: dict
    checks: list = field(default_factory=list)
    final_residual: float = 0.0

    @property
    def window(self) -> SiteWindow:
        return self.model.window

    @property
    def interior(self) -> SiteWindow:
        return self.model.window.interior()

    def eigenvalue(self, site: int) -> DualScalar:
        i = self.window.index(site)
        return DualScalar(self.eigenvalues[i], self.eigen_grads[:, i].copy())

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed_checks(self) -> list:
        return [c for c in self.checks if not c.passed]

    def to_dict(self, band_tol: float = 1e-15) -> dict:
        return {
            "model": self.model.to_dict(),
            "active": list(self.active),
            "eigenvalues": self.eigenvalues.tolist(),
            "eigen_grads": self.eigen_grads.tolist(),
            "steps": self.steps,
            "per_step_norms": list(self.per_step_norms),
            "constants": dict(self.constants),
            "final_residual": self.final_residual,
            "checks": [c.as_dict() for c in self.checks],
            "passed": self.passed,
            "G": self.G.to_dict(tol=band_tol),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DiagonalizationResult":
        checks = [BoundCheck(c["bound"], c["measured"], c["threshold"], c["step"])
                  for c in data.get("checks", [])]
        return cls(StarkModel.from_dict(data["model"]), np.asarray(data["eigenvalues"]),
                   np.asarray(data["eigen_grads"]).reshape(len(data["active"]), -1),
                   tuple(data["active"]), LatticeOperator.from_dict(data["G"]), data["steps"],
                   list(data["per_step_norms"]), dict(data["constants"]), checks,
                   data.get("final_residual", 0.0))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _stark_diagonal(window: SiteWindow, active: Sequence[int]) -> LatticeOperator:
    return LatticeOperator.diagonal(window, window.sites.astype(float), active=active)


def _disorder_operator(model: StarkModel, active: Sequence[int]) -> LatticeOperator:
    """``V = diag(v)`` with ``dV/dv_j = e_j e_j^T``."""
    n = model.window.size
    grads = np.zeros((len(active), n))
    for p, site in enumerate(active):
        grads[p, model.window.index(site)] = 1.0
    return LatticeOperator.diagonal(model.window, model.disorder, grads, active)


def toeplitz_generator(window: SiteWindow, active: Sequence[int] = ()) -> LatticeOperator:
    """``W_mn = Delta_mn / (m - n)``: ``-1`` above the diagonal, ``+1`` below."""
    op = LatticeOperator.toeplitz(window, {1: 1.0, -1: -1.0}, active=active, symmetry=SKEW_ADJOINT)
    return op


def first_conjugation(model: StarkModel, active: Sequence[int] | None = None,
                      tail_tol: float = 1e-18, checker: _Checker | None = None
                      ) -> tuple[LatticeOperator, LatticeOperator]:
    """Remove the hopping by the explicit unitary ``U = exp(-delta W)``.

    Returns
    -------
    U : LatticeOperator
    L_new : LatticeOperator
        ``D + V + sum_{n>=1} ad^n_{delta W}(V) / n!``.
    """
    check = checker or _Checker(strict=True)
    active = tuple(model.window.sites) if active is None else tuple(active)
    delta = model.delta
    if delta > 1.0 / 55.0:
        warnings.warn(f"delta = {delta:.4g} exceeds 1/55; the smallness bounds may fail", stacklevel=2)
    W = toeplitz_generator(model.window)
    dW = W.scale(delta)
    U, _ = op_exp(dW.scale(-1.0), tail_tol=tail_tol, r=R_WEIGHT)
    V = _disorder_operator(model, active)
    P_new, _ = commutator_series(dW, V, tail_tol=tail_tol, r=R_WEIGHT)
    L_new = _stark_diagonal(model.window, active) + V + P_new
    L_new.symmetry = SELF_ADJOINT

    a = delta * math.exp(0.125)
    ident = LatticeOperator.identity(model.window)
    check("first_conjugation.U_minus_I", weighted_norm(U - ident, R_WEIGHT).plain,
          2 * a * math.exp(2 * a) + 1e-15, 0)
    C = c_delta(delta)
    pn = weighted_norm(P_new, R_WEIGHT, ALPHA)
    v_norm = float(np.max(np.abs(model.disorder)))
    check("first_conjugation.P_new", pn.plain, C * v_norm + 1e-15, 0)
    if P_new.n_params:
        check("first_conjugation.dP_new", pn.deriv, C + 1e-15, 0)
    return U, L_new


def linear_homological_solve(D: LatticeOperator, P: LatticeOperator,
                             min_sep: float = 2.0 / 3.0, checker: _Checker | None = None,
                             step: int | None = None) -> LatticeOperator:
    """Solve ``[W, D] + P - diag P = 0`` for off-diagonal ``W``.

    ``W_mn = P_mn / (d_m - d_n)`` with the quotient rule applied to gradients.
    """
    check = checker or _Checker(strict=True)
    d = D.diag_values()
    n = len(d)
    diff = d[:, None] - d[None, :]
    off = ~np.eye(n, dtype=bool)
    gaps = np.where(off, np.abs(diff), np.inf)
    i, j = np.unravel_index(np.argmin(gaps), gaps.shape)
    if gaps[i, j] < min_sep:
        raise SeparationError(int(D.window.lo + i), int(D.window.lo + j), float(gaps[i, j]), min_sep)
    safe = np.where(off, diff, 1.0)
    value = np.where(off, P.value / safe, 0.0)
    gP, gD, active = P._grads_with(D)
    grad = np.zeros((len(active), n, n), dtype=value.dtype)
    if active:
        dg = np.diagonal(gD, axis1=1, axis2=2)
        ddiff = dg[:, :, None] - dg[:, None, :]
        check("homological.diff_derivative", float(np.max(np.abs(ddiff))), 1.5, step)
        grad = np.where(off[None], (gP - value[None] * ddiff) / safe[None], 0.0)
    if P.symmetry == SELF_ADJOINT:
        tag = SKEW_ADJOINT
    elif P.symmetry == SKEW_ADJOINT:
        tag = SELF_ADJOINT
    else:
        tag = "none"
    W = LatticeOperator(D.window, value, grad, active, tag)
    check("homological.W_norm", norm_value(W, R_WEIGHT, ALPHA),
          39.0 / 8.0 * norm_value(P, R_WEIGHT, ALPHA) + 1e-300, step)
    return W


def kam_step(D: LatticeOperator, P: LatticeOperator, tail_tol: float = 1e-18,
             checker: _Checker | None = None, step: int | None = None
             ) -> tuple[LatticeOperator, LatticeOperator, LatticeOperator]:
    """One conjugation ``e^W (D + P) e^{-W} = D_+ + P_+``.

    ``P_+ = [W, P] + sum_{n>=2} ad_W^{n-1}(Y) / n!`` where
    ``Y = [W, D + P] = diag P - P + [W, P]``; this is the same series as
    ``sum_{n>=2} ad_W^{n-1}(diag P - P)/n! + sum_{n>=1} ad_W^n(P)/n!`` but with
    a single commutator chain.

    Returns
    -------
    (D_plus, P_plus, W)
    """
    check = checker or _Checker(strict=True)
    W = linear_homological_solve(D, P, checker=check, step=step)
    diagP = P.diag_part()
    D_plus = D + diagP
    D_plus.symmetry = SELF_ADJOINT
    wp = ad(W, P)
    Y = (diagP - P) + wp
    Y.symmetry = P.symmetry
    w2 = 2.0 * norm_value(W, R_WEIGHT, ALPHA)
    y_norm = norm_value(Y, R_WEIGHT, ALPHA)
    # tail of sum_{n>N} (2w)^{n-1} |Y| / n!
    N = 2
    while w2 > 0 and y_norm / w2 * _exp_tail(w2, N) > tail_tol:
        N += 1
        if N > 64:
            break
    P_plus = wp
    term = Y
    for nn in range(2, N + 1):
        term = ad(W, term)
        P_plus = P_plus + term.scale(1.0 / math.factorial(nn))
    P_plus.symmetry = P.symmetry
    p = norm_value(P, R_WEIGHT, ALPHA)
    check("kam_step.quadratic", norm_value(P_plus, R_WEIGHT, ALPHA),
          117.0 / 8.0 * p * p * math.exp(78.0 / 8.0 * p) + 1e-300, step)
    return D_plus, P_plus, W


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------

def diagonalize(model: StarkModel, target: float = 1e-12, active: Sequence[int] | None = None,
                strict: bool = True, max_steps: int = 30, tail_tol: float = 1e-18
                ) -> DiagonalizationResult:
    """Iterate KAM steps until ``||P^k||^alpha_{1/8} <= target``.

    Parameters
    ----------
    model : StarkModel
    target : float
        Stopping threshold for the perturbation norm.
    active : sequence of int, optional
        Disorder sites carried as derivative parameters (default: all sites).
    strict : bool
        Raise :class:`BoundViolation` on the first failed inequality; otherwise
        record every check in the result.
    """
    check = _Checker(strict)
    window = model.window
    active = tuple(int(s) for s in (window.sites if active is None else active))
    delta = model.delta
    C = c_delta(delta)
    eps0 = eps0_of(delta)
    if eps0 > 1.0 / 55.0:
        warnings.warn(f"eps0 = {eps0:.4g} exceeds 1/55", stacklevel=2)
    interior = window.interior()

    if delta == 0:
        G = LatticeOperator.identity(window, active)
        D = _stark_diagonal(window, active) + _disorder_operator(model, active)
        return DiagonalizationResult(model, D.diag_values(), D.diag_grads(), active, G, 0, [0.0],
                                     {"C_delta": C, "eps0": eps0}, check.records, 0.0)

    U, L_new = first_conjugation(model, active, tail_tol, check)
    D = _stark_diagonal(window, active) + _disorder_operator(model, active)
    D.symmetry = SELF_ADJOINT
    P = L_new - D
    P.symmetry = SELF_ADJOINT
    G = U.with_symmetry("none")
    if active:
        G = LatticeOperator(window, G.value, np.zeros((len(active),) + G.value.shape), active)

    norms = [norm_value(P, R_WEIGHT, ALPHA)]
    check("P_k.contraction", norms[0], eps0, 0)
    k = 0
    while norms[-1] > target:
        if k >= max_steps:
            raise BoundViolation("diagonalize.max_steps", norms[-1], target, k)
        D, P, W = kam_step(D, P, tail_tol, check, k)
        G, _ = mul_exp(G, W.scale(-1.0), tail_tol=tail_tol, r=R_WEIGHT)
        k += 1
        norms.append(norm_value(P, R_WEIGHT, ALPHA))
        check("P_k.contraction", norms[-1], eps0 ** (1.25 ** k), k)
        d = D.diag_values()
        gaps = np.abs(d[:, None] - d[None, :]) + np.eye(len(d)) * 1e9
        check("separation", 2.0 / 3.0 + 3.0 ** (-(k + 2)) - float(gaps.min()), 0.0, k)
        _check_derivatives(D, active, window, interior, C, check, k)

    # final first-order correction: d = diag(D^k + P^k)
    final = D + P.diag_part()
    d = final.diag_values()
    dg = final.diag_grads()
    _check_derivatives(final, active, window, interior, C, check, k)
    _check_decay(G, interior, C, check, k)
    resid = float(np.max(np.abs(P.value - np.diag(np.diagonal(P.value)))))
    return DiagonalizationResult(model, d, dg, active, G, k, norms,
                                 {"C_delta": C, "eps0": eps0}, check.records, resid)


def _check_derivatives(D: LatticeOperator, active, window: SiteWindow, interior: SiteWindow,
                       C: float, check: _Checker, step: int):
    if not active:
        return
    dg = D.diag_grads()  # (P, N)
    ia, ib = window.index(interior.lo), window.index(interior.hi) + 1
    sites = window.sites
    kron = (np.asarray(active)[:, None] == sites[None, :]).astype(float)
    dev = np.abs(dg - kron)[:, ia:ib]
    check("derivative", float(dev.max()), 26.0 / 15.0 * C, step)


def decay_profile(G: LatticeOperator, interior: SiteWindow) -> tuple[np.ndarray, np.ndarray]:
    """Left and right side of the decay bound on the interior block.

    Returns ``(lhs, dist)`` with ``lhs = |(G - I)_mn| + (1/10) max_j |d(G)_mn / dv_j|``.
    """
    ia, ib = G.window.index(interior.lo), G.window.index(interior.hi) + 1
    block = G.value[ia:ib, ia:ib] - np.eye(ib - ia)
    lhs = np.abs(block)
    if G.n_params:
        lhs = lhs + ALPHA * np.max(np.abs(G.grad[:, ia:ib, ia:ib]), axis=0)
    idx = np.arange(ib - ia)
    dist = np.abs(idx[:, None] - idx[None, :])
    return lhs, dist


def _check_decay(G: LatticeOperator, interior: SiteWindow, C: float, check: _Checker, step: int):
    lhs, dist = decay_profile(G, interior)
    ratio = lhs / (19.0 / 9.0 * C * np.exp(-dist / 8.0))
    check("G.decay", float(ratio.max()), 1.0, step)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def dense_eigenvalues(model: StarkModel) -> np.ndarray:
    """Sorted eigenvalues of the dense truncated matrix."""
    return np.linalg.eigvalsh(model.dense())


def pair_eigenvalues(d: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """For each value of ``d``, the nearest entry of ``reference``."""
    ref = np.sort(reference)
    pos = np.clip(np.searchsorted(ref, d), 1, len(ref) - 1)
    left, right = ref[pos - 1], ref[pos]
    return np.where(np.abs(d - left) <= np.abs(d - right), left, right)
