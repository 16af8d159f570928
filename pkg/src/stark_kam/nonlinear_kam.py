"""Nonlinear KAM steps for the quartic lattice Hamiltonian at a few tangential sites.

The pipeline is

1. :func:`action_angle_reduce` substitutes ``q_j = sqrt(I_j + y_j) e^{i theta_j}`` at the
   tangential sites ``J`` and splits the quartic part by how many indices lie in ``J``.
2. :func:`solve_homological` removes the part of weight ``2|l| + |alpha| + |beta| <= 2``
   (the "low" part) up to second order, routing averages into the normal form.
3. :func:`kam_nonlinear_step` applies the time-1 flow of the generator through a Lie
   series and checks the drift and contraction inequalities.
4. :func:`embed_torus` composes the stored flows into a quasi-periodic state sampler.

Frequencies, coefficients and divisors carry exact derivatives with respect to
``xi``, the disorder values at ``J``.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import binom

from .errors import ResonanceError, SeriesTailError, SiteRestrictionError
from .hamiltonian_build import QuarticTensor
from .linear_kam import BoundCheck, _Checker
from .tf_series import (
    Domain,
    TFSeries,
    alpha_beta_norms,
    poisson_bracket,
    series_norm,
    vector_field_norm,
)


# -- configuration -----------------------------------------------------------
@dataclass
class TangentialConfig:
    """Tangential sites, their actions and the nonlinearity.

    Attributes
    ----------
    J : tuple of int
        Distinct tangential sites.
    y : tuple of float
        Actions ``y_j = |q_j|^2`` of the unperturbed torus.
    eps : float
        Coefficient of the quartic term.
    xi : tuple of float, optional
        Disorder values at ``J``; filled from the model when omitted.
    """

    J: tuple
    y: tuple | None = None
    eps: float = 1e-6
    xi: tuple | None = None

    def __post_init__(self):
        self.J = tuple(int(j) for j in self.J)
        if self.y is None:
            self.y = (0.01,) * len(self.J)
        self.y = tuple(float(v) for v in self.y)

    @property
    def b(self) -> int:
        return len(self.J)

    def validate(self):
        if self.b < 1:
            raise ValueError("at least one tangential site is required")
        if len(set(self.J)) != self.b:
            raise ValueError("tangential sites must be distinct")
        if len(self.y) != self.b or min(self.y) <= 0:
            raise ValueError("one positive action per tangential site is required")
        if self.eps > 0:
            limit = abs(math.log(self.eps)) / 6.0
            bad = [j for j in self.J if abs(j) > limit]
            if bad:
                raise SiteRestrictionError(
                    f"tangential sites {bad} exceed |ln eps|/6 = {limit:.3g}")
        if self.xi is not None and any(abs(x) > 0.1 for x in self.xi):
            raise ValueError("xi must lie in [-1/10, 1/10]^b")

    def default_domain(self) -> Domain:
        return Domain(r=0.5, s=0.5 * math.sqrt(min(self.y)), d=2.0, rho=0.125)

    def to_dict(self) -> dict:
        return {"J": list(self.J), "y": list(self.y), "eps": self.eps,
                "xi": None if self.xi is None else list(self.xi)}


@dataclass
class NormalForm:
    """``e + <omega, I> + sum_n Omega_n q_n qbar_n`` with dual coefficients.

    Arrays hold ``[value, d/dxi_1, ..., d/dxi_b]`` rows; ``xi0`` is the sample point.
    """

    sites: tuple
    e: np.ndarray
    omega: np.ndarray
    Omega: np.ndarray
    xi0: np.ndarray

    @property
    def b(self) -> int:
        return len(self.omega)

    def copy(self) -> "NormalForm":
        return NormalForm(self.sites, self.e.copy(), self.omega.copy(), self.Omega.copy(), self.xi0.copy())

    def __add__(self, other: "NormalForm") -> "NormalForm":
        if self.sites != other.sites:
            raise ValueError("normal forms live on different windows")
        return NormalForm(self.sites, self.e + other.e, self.omega + other.omega,
                          self.Omega + other.Omega, self.xi0)

    def to_series(self, domain: Domain = Domain()) -> TFSeries:
        b, ns, P = self.b, len(self.sites), self.omega.shape[1] - 1
        rows, coef = [], []
        row = np.zeros(2 * b + 2 * ns, dtype=int)
        rows.append(row.copy())
        coef.append(self.e)
        for j in range(b):
            r = row.copy()
            r[b + j] = 1
            rows.append(r)
            coef.append(self.omega[j])
        for i in range(ns):
            r = row.copy()
            r[2 * b + i] = 1
            r[2 * b + ns + i] = 1
            rows.append(r)
            coef.append(self.Omega[i])
        return TFSeries(self.sites, b, np.array(rows), np.array(coef, dtype=complex), domain)

    def at(self, xi) -> tuple[np.ndarray, np.ndarray]:
        """Linearized ``(omega, Omega)`` at parameter(s) ``xi`` of shape ``(b,)`` or ``(S, b)``."""
        xi = np.asarray(xi, dtype=float)
        dx = xi - self.xi0
        om = self.omega[:, 0].real + dx @ self.omega[:, 1:].real.T
        Om = self.Omega[:, 0].real + dx @ self.Omega[:, 1:].real.T
        return om, Om

    def omega_of(self, site: int) -> float:
        return float(self.Omega[self.sites.index(site), 0].real)

    def assumption_checks(self, J: Sequence[int]) -> dict:
        """Twist and separation quantities behind the frequency assumptions."""
        b = self.b
        twist = float(np.max(np.abs(self.omega[:, 1:].real - np.eye(b))))
        normal_grad = float(np.max(np.abs(self.Omega[:, 1:].real), initial=0.0))
        vals = np.sort(np.concatenate([self.omega[:, 0].real, self.Omega[:, 0].real]))
        sep = float(np.min(np.diff(vals))) if len(vals) > 1 else math.inf
        return {"tangential_twist_defect": twist, "normal_gradient": normal_grad,
                "separation": sep, "twist_limit": 1.0 / (4 * b), "separation_limit": 2.0 / 3.0}

    def to_dict(self) -> dict:
        enc = lambda a: [[[z.real, z.imag] for z in row] for row in np.atleast_2d(a)]
        return {"sites": list(self.sites), "xi0": self.xi0.tolist(), "e": enc(self.e)[0],
                "omega": enc(self.omega), "Omega": enc(self.Omega)}

    @classmethod
    def from_dict(cls, data: dict) -> "NormalForm":
        dec = lambda rows: np.array([[complex(a, b) for a, b in row] for row in rows], dtype=complex)
        return cls(tuple(data["sites"]), dec([data["e"]])[0], dec(data["omega"]),
                   dec(data["Omega"]).reshape(len(data["sites"]), -1), np.asarray(data["xi0"], dtype=float))


@dataclass
class IterationSchedule:
    """Parameters of step ``nu``; ``K_next`` is the truncation used by that step."""

    nu: int
    eps_nu: float
    K_nu: int
    K_next: int
    rho_nu: float
    s_nu: float
    r_nu: float
    gamma_nu: float
    c: float = 1.0
    tau: float = 2.0

    def domain(self, d: float = 2.0) -> Domain:
        return Domain(self.r_nu, self.s_nu, d, self.rho_nu)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def build_schedule(eps0: float, steps: int, s0: float = 0.05, r0: float = 0.5, c: float = 1.0,
                   b: int = 1, tau: float | None = None, K_override: int | None = None,
                   max_K: float = 1e12) -> list[IterationSchedule]:
    """Sequences ``eps_nu, K_nu, rho_nu, s_nu, r_nu, gamma_nu`` for ``nu = 0..steps``.

    ``eps_nu = c eps_{nu-1}^{5/4}``, ``K_0 = ceil(2 |ln eps_0|)``,
    ``K_nu = ceil(2 |ln eps_{nu-1}| K_{nu-1})``, ``rho_nu = 1/K_nu``,
    ``gamma_nu = eps_nu^{1/16}`` and ``s_nu / s_0 = 1 - sum_{i=2}^{nu+1} 2^{-i}``.
    ``K_override`` replaces every ``K_next`` (the truncation a step actually uses).
    """
    if not 0 < eps0 < 1:
        raise ValueError("eps0 must lie in (0, 1)")
    tau = b + 1.0 if tau is None else tau
    eps = [eps0]
    K = [math.ceil(2 * abs(math.log(eps0)))]
    for nu in range(1, steps + 2):
        eps.append(c * eps[-1] ** 1.25)
        K.append(math.ceil(2 * abs(math.log(eps[-2])) * K[-1]))
        if K[-1] > max_K:
            raise ValueError(f"K_{nu} = {K[-1]} exceeds the admissible truncation {max_K:g}")
    out = []
    for nu in range(steps + 1):
        shrink = 1.0 - sum(2.0 ** -i for i in range(2, nu + 2))
        K_next = K[nu + 1] if K_override is None else int(K_override)
        out.append(IterationSchedule(nu, eps[nu], K[nu], K_next, 1.0 / K[nu], s0 * shrink,
                                     r0 * shrink, eps[nu] ** (1.0 / 16.0), c, tau))
    return out


# -- reduction to action-angle variables ----------------------------------
class Reduction(NamedTuple):
    normal_form: NormalForm
    P_low: TFSeries
    P_dot: TFSeries
    P_ddot: TFSeries
    info: dict


def action_angle_reduce(T: QuarticTensor, d: np.ndarray, cfg: TangentialConfig,
                        d_grads: np.ndarray | None = None, domain: Domain | None = None,
                        order: int = 2, l_cap: int = 2) -> Reduction:
    """Substitute action-angle variables at ``cfg.J`` into the quartic Hamiltonian.

    Parameters
    ----------
    T : QuarticTensor
        Must carry gradients for exactly the sites ``cfg.J`` (in that order), or none.
    d : ndarray
        Eigenvalues on ``T.window``.
    d_grads : ndarray, shape (b, N), optional
        ``d d_n / d xi_j``.
    order : int
        Taylor order of ``sqrt(I + y)`` powers in ``I``.

    Returns
    -------
    Reduction
        ``(normal_form, P_low, P_dot, P_ddot, info)``. Terms are classified by how many
        of the four tensor indices lie in ``J``: at least two, none, exactly one.
    """
    cfg.validate()
    domain = cfg.default_domain() if domain is None else domain
    b, J = cfg.b, cfg.J
    window = T.window
    if any(j not in window for j in J):
        raise ValueError("tangential sites must lie inside the tensor window")
    nparam = b
    if T.active and tuple(T.active) != J:
        raise ValueError("tensor gradients must be taken with respect to the tangential sites")
    normal = tuple(n for n in window.sites if n not in J)
    col = {n: i for i, n in enumerate(normal)}
    ns = len(normal)
    d = np.asarray(d, dtype=float)
    dg = np.zeros((b, window.size)) if d_grads is None else np.asarray(d_grads, dtype=float)

    # Normal form.
    jidx = [window.index(j) for j in J]
    nidx = [window.index(n) for n in normal]
    y = np.asarray(cfg.y)
    e = np.zeros(1 + nparam, dtype=complex)
    e[0] = np.sum(d[jidx] * y)
    e[1:] = dg[:, jidx] @ y
    omega = np.zeros((b, 1 + nparam), dtype=complex)
    omega[:, 0] = d[jidx]
    omega[:, 1:] = dg[:, jidx].T
    Omega = np.zeros((ns, 1 + nparam), dtype=complex)
    Omega[:, 0] = d[nidx]
    Omega[:, 1:] = dg[:, nidx].T
    xi0 = np.asarray(cfg.xi if cfg.xi is not None else np.zeros(b), dtype=float)
    N = NormalForm(normal, e, omega, Omega, xi0)

    empty = TFSeries.zero(normal, b, nparam, domain)
    if cfg.eps == 0 or len(T) == 0:
        return Reduction(N, empty, empty, empty, {"truncation_mass": 0.0, "gauge_residual": 0.0,
                                                  "checks": []})

    # Monomial q_{m1} qbar_{m2} q_{m3} qbar_{m}; slots 1, 3 are q, slots 0, 2 are qbar.
    idx = T.indices
    K = len(idx)
    a = np.zeros((K, b), dtype=int)
    bb = np.zeros((K, b), dtype=int)
    alpha = np.zeros((K, ns), dtype=int)
    beta = np.zeros((K, ns), dtype=int)
    jpos = {j: p for p, j in enumerate(J)}
    rows = np.arange(K)
    for slot, is_q in ((1, True), (3, True), (2, False), (0, False)):
        sites = idx[:, slot]
        in_j = np.array([s in jpos for s in sites])
        tgt_j, tgt_n = (a, alpha) if is_q else (bb, beta)
        if in_j.any():
            np.add.at(tgt_j, (rows[in_j], [jpos[s] for s in sites[in_j]]), 1)
        if (~in_j).any():
            np.add.at(tgt_n, (rows[~in_j], [col[s] for s in sites[~in_j]]), 1)
    k = a - bb
    p = a + bb
    coef = np.zeros((K, 1 + nparam), dtype=complex)
    coef[:, 0] = cfg.eps * T.values
    if T.active:
        coef[:, 1:] = cfg.eps * T.grads

    exps_list, coef_list, tail_list = [], [], []
    for lvec in itertools.product(range(order + 2), repeat=b):
        lsum = sum(lvec)
        fac = np.ones(K)
        for j in range(b):
            half = p[:, j] / 2.0
            fac = fac * binom(half, lvec[j]) * np.where(half - lvec[j] == 0, 1.0,
                                                        y[j] ** (half - lvec[j]))
        keep = fac != 0
        if not keep.any():
            continue
        ex = np.hstack([k, np.tile(lvec, (K, 1)), alpha, beta])[keep]
        c = coef[keep] * fac[keep][:, None]
        if max(lvec) > order or lsum > l_cap:
            tail_list.append((ex, c))
        else:
            exps_list.append(ex)
            coef_list.append(c)
    P = TFSeries(normal, b, np.vstack(exps_list), np.vstack(coef_list), domain)
    trunc = 0.0
    if tail_list:
        tail = TFSeries(normal, b, np.vstack([t[0] for t in tail_list]), np.vstack([t[1] for t in tail_list]),
                        domain)
        trunc = series_norm(tail)

    # Classify by the number of tangential indices, recovered from the exponents.
    qcount = P.qdegree()
    jcount = 4 - qcount
    P_low, P_dot, P_ddot = P.select(jcount >= 2), P.select(jcount == 0), P.select(jcount == 1)

    gauge_res = float(np.max(np.abs(P.charge()), initial=0))
    checks = _reduction_checks(P_low, P_dot, P_ddot, cfg.eps)
    return Reduction(N, P_low, P_dot, P_ddot, {"truncation_mass": trunc, "gauge_residual": gauge_res,
                                               "checks": checks, "terms": len(P)})


def _reduction_checks(P_low, P_dot, P_ddot, eps) -> list:
    out = []
    root = math.sqrt(eps)
    for name, S in (("P_low_decay", P_low), ("P_ddot_decay", P_ddot)):
        worst = 0.0
        for (al, be), v in alpha_beta_norms(S).items():
            sup = [n for n, _ in al] + [n for n, _ in be]
            nstar = max((abs(n) for n in sup), default=0)
            worst = max(worst, v / (root * math.exp(-nstar / 8.0)))
        out.append(BoundCheck(name, worst, 1.0))
    worst = 0.0
    for (al, be), v in alpha_beta_norms(P_dot).items():
        sup = [n for n, _ in al] + [n for n, _ in be]
        worst = max(worst, v / (root * math.exp(-(max(sup) - min(sup)) / 8.0)))
    out.append(BoundCheck("P_dot_decay", worst, 1.0))
    return out


def split_by_weight(P: TFSeries) -> tuple[TFSeries, TFSeries]:
    """``(low, high)`` with low the terms of weight ``2|l| + |alpha| + |beta| <= 2``."""
    w = P.weight()
    return P.select(w <= 2), P.select(w > 2)


# -- homological equation ------------------------------------------------
@dataclass
class HomologicalSolution:
    """Generator ``F``, normal form increment ``Nhat`` and unsolved remainder ``Phat``."""

    F: TFSeries
    Nhat: NormalForm
    Phat: TFSeries
    residual: float = 0.0
    gau1: float = 0.0
    min_divisor_ratio: float = math.inf
    stages: dict = field(default_factory=dict)


def _divisor(N: NormalForm, S: TFSeries) -> np.ndarray:
    """Dual divisors ``<k, omega> + sum (alpha_n - beta_n) Omega_n`` per term."""
    k = S.k.astype(float)
    net = (S.alpha - S.beta).astype(float)
    return k @ N.omega + net @ N.Omega


def _classify(S: TFSeries, row: int) -> tuple[str, int | None, int | None]:
    a, b = S.alpha[row], S.beta[row]
    sites = [S.sites[i] for i in np.nonzero(a)[0] for _ in range(a[i])]
    bars = [S.sites[i] for i in np.nonzero(b)[0] for _ in range(b[i])]
    deg = len(sites) + len(bars)
    if deg == 0:
        return "R0", None, None
    if deg == 1:
        return "R1", (sites or bars)[0], None
    if sites and bars:
        return "R2", sites[0], bars[0]
    both = sites or bars
    return "R3", both[0], both[1]


def solve_homological(N: NormalForm, P_low: TFSeries, P_high: TFSeries, sched: IterationSchedule,
                      xi=None, degree_cap: int = 4, l_cap: int = 2,
                      check_residual: bool = True) -> HomologicalSolution:
    """Solve ``{N, F} + P_low + {P_high, F}^low = Nhat + Phat``.

    The weight-0 part of ``F`` is solved first, then the weight-1 part, then the
    weight-2 part; the bracket ``{P_high, F}`` only feeds weight ``w`` from parts of
    ``F`` of weight below ``w``, so each stage sees a complete right-hand side.

    Raises
    ------
    ResonanceError
        A needed divisor is below ``gamma / (|k|^tau K^j)`` for its family.
    """
    if len(P_low) and P_low.weight().max() > 2:
        raise ValueError("P_low must only contain terms of weight <= 2")
    b, sites, domain = P_low.b, P_low.sites, P_low.domain
    K = sched.K_next
    gamma, tau = sched.gamma_nu, sched.tau
    F = TFSeries.zero(sites, b, P_low.nparam, domain)
    Phat = TFSeries.zero(sites, b, P_low.nparam, domain)
    zero_nf = NormalForm(sites, np.zeros_like(N.e), np.zeros_like(N.omega), np.zeros_like(N.Omega), N.xi0)
    Nhat = zero_nf.copy()
    site_abs = np.abs(np.asarray(sites))
    min_ratio = math.inf
    gau1 = 0.0
    stages = {}
    for w in (0, 1, 2):
        rhs = P_low.by_weight(w)
        if w > 0 and len(F) and len(P_high):
            extra = poisson_bracket(P_high, F, degree_cap, l_cap).by_weight(w)
            rhs = rhs + extra
        if w == 1:
            gau1 = float(np.max(np.abs(rhs.coef[np.all(rhs.k == 0, axis=1)]), initial=0.0))
        if len(rhs) == 0:
            stages[w] = 0
            continue
        diag = np.all(rhs.k == 0, axis=1) & np.all(rhs.alpha == rhs.beta, axis=1)
        far = np.zeros(len(rhs), dtype=bool)
        involved = (rhs.alpha + rhs.beta) > 0
        if involved.any():
            far |= np.any(involved & (site_abs[None, :] > K), axis=1)
        far |= np.abs(rhs.k).sum(axis=1) > K
        far &= ~diag
        # Normal-form part.
        for row in np.nonzero(diag)[0]:
            c = rhs.coef[row]
            if w == 0:
                Nhat.e = Nhat.e + c
            elif rhs.l[row].sum() == 1:
                Nhat.omega[int(np.argmax(rhs.l[row]))] += c
            else:
                Nhat.Omega[int(np.argmax(rhs.alpha[row]))] += c
        Phat = Phat + rhs.select(far)
        solve = rhs.select(~diag & ~far)
        if len(solve) == 0:
            stages[w] = 0
            continue
        div = _divisor(N, solve)
        kabs = np.maximum(np.abs(solve.k).sum(axis=1), 1).astype(float)
        qdeg = solve.qdegree()
        kpow = np.where(qdeg == 0, 0, np.where(qdeg == 1, 1, 2))
        thresh = gamma / (kabs ** tau * float(K) ** kpow)
        ratio = np.abs(div[:, 0]) / thresh
        bad = np.nonzero(ratio < 1.0)[0]
        if len(bad):
            row = int(bad[np.argmin(ratio[bad])])
            cls, m, n = _classify(solve, row)
            raise ResonanceError(cls, solve.k[row], m, n, div[row, 0].real, thresh[row])
        min_ratio = min(min_ratio, float(ratio.min()))
        # F = -i rhs / divisor, with the quotient rule on the gradient part.
        c = solve.coef
        d0 = div[:, :1]
        fcoef = np.empty_like(c)
        fcoef[:, :1] = -1j * c[:, :1] / d0
        fcoef[:, 1:] = -1j * (c[:, 1:] * d0 - c[:, :1] * div[:, 1:]) / d0 ** 2
        F = F + solve.like(solve.exps, fcoef)
        stages[w] = len(solve)
    # Normal-form increments of a real Hamiltonian are real.
    for arr in (Nhat.e, Nhat.omega, Nhat.Omega):
        arr.imag = 0.0
    sol = HomologicalSolution(F, Nhat, Phat, gau1=gau1, min_divisor_ratio=min_ratio, stages=stages)
    if check_residual:
        sol.residual = homological_residual(N, P_low, P_high, sol, degree_cap, l_cap)
    return sol


def homological_residual(N: NormalForm, P_low: TFSeries, P_high: TFSeries, sol: HomologicalSolution,
                         degree_cap: int = 4, l_cap: int = 2) -> float:
    """Series norm of ``{N, F} + P_low + {P_high, F}^low - Nhat - Phat``."""
    dom = P_low.domain
    NF = poisson_bracket(N.to_series(dom), sol.F, None, None, 0.0)
    total = NF + P_low - sol.Nhat.to_series(dom) - sol.Phat
    if len(P_high) and len(sol.F):
        total = total + poisson_bracket(P_high, sol.F, degree_cap, l_cap).by_weight(0, 2)
    return series_norm(total)


# -- one KAM step ------------------------------------------------------------
def lie_transform(H: TFSeries, F: TFSeries, tol: float, max_terms: int = 16, degree_cap: int | None = 4,
                  l_cap: int | None = 2) -> tuple[TFSeries, dict]:
    """``H o Phi_F^1 = sum_n ad_F^n H / n!`` with ``ad_F H = {H, F}``.

    Terms are added until the next one and a geometric tail estimate both drop
    below ``tol`` in vector-field norm.
    """
    out = H
    term = H
    prev = vector_field_norm(H)
    truncated = 0.0
    for n in range(1, max_terms + 1):
        term = poisson_bracket(term, F, degree_cap, l_cap).scale(1.0 / n)
        truncated += term.truncated_mass
        size = vector_field_norm(term)
        out = out + term
        q = size / prev if prev > 0 else 0.0
        tail = size * q / (1 - q) if q < 1 else math.inf
        if size == 0.0 or (size <= tol and tail <= tol):
            return out, {"terms": n, "last_norm": size, "tail_bound": tail, "truncated_mass": truncated}
        prev = size
    raise SeriesTailError(f"Lie series did not reach {tol:.3g} within {max_terms} terms")


def kam_nonlinear_step(N: NormalForm, P: TFSeries, sched: IterationSchedule, xi=None,
                       lie_factor: float = 1e-3, contraction_c: float = 1.0, strict: bool = False,
                       degree_cap: int = 4, l_cap: int = 2) -> tuple[tuple[NormalForm, TFSeries], dict]:
    """One iteration ``H = N + P -> H o Phi_F = N_+ + P_+``.

    Returns
    -------
    (N_plus, P_plus), log
        ``log`` holds the generator, norms, Lie-series bookkeeping and bound checks.
    """
    check = _Checker(strict)
    eps = sched.eps_nu
    dom = P.domain
    low, high = split_by_weight(P)
    x_low = vector_field_norm(low)
    sol = solve_homological(N, low, high, sched, xi, degree_cap, l_cap)
    H = N.to_series(dom) + P
    tol = lie_factor * max(x_low, 1e-300) ** 1.25
    if len(sol.F):
        Hp, lie = lie_transform(H, sol.F, tol, degree_cap=degree_cap, l_cap=l_cap)
    else:
        Hp, lie = H, {"terms": 0, "last_norm": 0.0, "tail_bound": 0.0, "truncated_mass": 0.0}
    N_plus = N + sol.Nhat
    P_plus = Hp - N_plus.to_series(dom)
    low_p, high_p = split_by_weight(P_plus)
    x_low_p = vector_field_norm(low_p)
    x_high_p = vector_field_norm(high_p)

    size = lambda a: np.abs(a[:, 0]) + np.abs(a[:, 1:]).sum(axis=1)
    d_omega = float(np.max(size(sol.Nhat.omega), initial=0.0))
    weights = np.exp(sched.rho_nu * np.abs(np.asarray(N.sites, dtype=float)))
    d_Omega = float(np.max(size(sol.Nhat.Omega) * weights, initial=0.0))
    check("omega_drift", d_omega, eps ** (5 / 6), sched.nu)
    check("Omega_drift", d_Omega, eps ** (5 / 6), sched.nu)
    check("P_low_plus", x_low_p, contraction_c * eps ** 1.25, sched.nu)
    check("P_high_plus", x_high_p, 2.0, sched.nu)
    worst = 0.0
    if len(sol.F) and len(P):
        PF = poisson_bracket(P, sol.F, degree_cap, l_cap)
        for (al, be), v in alpha_beta_norms(PF).items():
            nstar = max((abs(n) for n, _ in al + be), default=0)
            worst = max(worst, v / math.exp(-sched.rho_nu * nstar))
    check("bracket_decay", worst, eps ** 0.8, sched.nu)

    text = sol.F.to_text()
    log = {
        "step": sched.nu,
        "schedule": sched.to_dict(),
        "norms": {"X_P_low": x_low, "X_P_low_plus": x_low_p, "X_P_high_plus": x_high_p,
                  "X_F": vector_field_norm(sol.F), "omega_drift": d_omega, "Omega_drift": d_Omega},
        "homological": {"residual": sol.residual, "gau1": sol.gau1, "stages": sol.stages,
                        "min_divisor_ratio": sol.min_divisor_ratio, "Phat_norm": series_norm(sol.Phat)},
        "lie": lie,
        "checks": [c.as_dict() for c in check.records],
        "generator": {"terms": len(sol.F), "sha256": hashlib.sha256(text.encode()).hexdigest(),
                      "text": text},
        "normal_form": N_plus.to_dict(),
    }
    log["_F"] = sol.F
    log["_solution"] = sol
    return (N_plus, P_plus), log


def contraction_exponent(log: dict) -> float:
    """``log ||X_{P_+^low}|| / log ||X_{P^low}||``."""
    a, b = log["norms"]["X_P_low_plus"], log["norms"]["X_P_low"]
    return math.log(a) / math.log(b)


# -- quasi-periodic torus ---------------------------------------------------
def _eval_many(S: TFSeries, theta, I, q, qbar) -> np.ndarray:
    """Values of ``S`` at ``M`` points (rows of each argument)."""
    if len(S) == 0:
        return np.zeros(len(theta), dtype=complex)
    vals = np.exp(1j * (theta @ S.k.T.astype(float)))
    c = S.coef[:, 0]
    for block, x in ((S.l, I), (S.alpha, q), (S.beta, qbar)):
        cols = np.nonzero(block.any(axis=0))[0]
        for i in cols:
            vals = vals * np.power(x[:, i:i + 1].astype(complex), block[None, :, i])
    return vals @ c


class _FlowField:
    """Hamiltonian vector field of ``F``: ``theta' = dF/dI, I' = -dF/dtheta,
    q' = i dF/dqbar, qbar' = -i dF/dq``."""

    def __init__(self, F: TFSeries):
        self.F = F
        b, ns = F.b, len(F.sites)
        self.dI = [F.derivative("I", j) for j in range(b)]
        self.dth = [F.derivative("theta", j) for j in range(b)]
        active_a = set(np.nonzero(F.alpha.any(axis=0))[0]) if len(F) else set()
        active_b = set(np.nonzero(F.beta.any(axis=0))[0]) if len(F) else set()
        self.dq = {i: F.derivative("q", i) for i in active_a}
        self.dqb = {i: F.derivative("qbar", i) for i in active_b}
        self.ns = ns

    def __call__(self, x):
        th, I, q, qb = x
        dth = np.stack([_eval_many(s, th, I, q, qb) for s in self.dI], axis=1)
        dI = -np.stack([_eval_many(s, th, I, q, qb) for s in self.dth], axis=1)
        dq = np.zeros_like(q)
        dqb = np.zeros_like(qb)
        for i, s in self.dqb.items():
            dq[:, i] = 1j * _eval_many(s, th, I, q, qb)
        for i, s in self.dq.items():
            dqb[:, i] = -1j * _eval_many(s, th, I, q, qb)
        return dth, dI, dq, dqb


def flow_time_one(F: TFSeries, x, steps: int = 8):
    """RK4 integration of the time-1 flow of ``F`` from points ``x = (theta, I, q, qbar)``."""
    field_ = _FlowField(F)
    h = 1.0 / steps
    x = tuple(np.asarray(v, dtype=complex) for v in x)
    add = lambda x, k, c: tuple(a + c * b for a, b in zip(x, k))
    for _ in range(steps):
        k1 = field_(x)
        k2 = field_(add(x, k1, h / 2))
        k3 = field_(add(x, k2, h / 2))
        k4 = field_(add(x, k3, h))
        x = tuple(a + h / 6 * (p + 2 * q_ + 2 * r + s) for a, p, q_, r, s in zip(x, k1, k2, k3, k4))
    return x


@dataclass
class TorusSampler:
    """Quasi-periodic state on the embedded torus.

    ``theta(t) = theta0 + omega t``; the original coordinates are a trigonometric
    polynomial in ``theta`` stored by its FFT on a grid.
    """

    omega: np.ndarray
    theta0: np.ndarray
    y: np.ndarray
    J: tuple
    normal_sites: tuple
    window_sites: tuple
    frame: np.ndarray
    grid: int
    coeffs: dict

    def coords(self, theta: np.ndarray):
        """``(theta_orig, I, q)`` at torus angles ``theta`` of shape ``(M, b)``."""
        theta = np.atleast_2d(theta)
        b = len(self.J)
        modes = np.fft.fftfreq(self.grid, 1.0 / self.grid)
        kgrid = np.stack(np.meshgrid(*([modes] * b), indexing="ij"), axis=-1).reshape(-1, b)
        phase = np.exp(1j * theta @ kgrid.T) / self.grid ** b
        out = {}
        for name, c in self.coeffs.items():
            out[name] = phase @ c.reshape(self.grid ** b, -1)
        dth = out["dtheta"].real
        return theta + dth, out["I"].real, out["q"]

    def q_full(self, t) -> np.ndarray:
        """Diagonal-frame amplitudes on the Hamiltonian window at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        theta = self.theta0[None, :] + t[:, None] * self.omega[None, :]
        th, I, q = self.coords(theta)
        out = np.zeros((len(t), len(self.window_sites)), dtype=complex)
        pos = {n: i for i, n in enumerate(self.window_sites)}
        for jj, j in enumerate(self.J):
            out[:, pos[j]] = np.sqrt(I[:, jj] + self.y[jj]) * np.exp(1j * th[:, jj])
        for i, n in enumerate(self.normal_sites):
            out[:, pos[n]] = q[:, i]
        return out

    def __call__(self, t) -> np.ndarray:
        """Physical amplitudes ``u = G q`` on the full lattice window."""
        return self.q_full(t) @ self.frame.T


def embed_torus(generators: Sequence[TFSeries], normal_form: NormalForm, cfg: TangentialConfig,
                frame: np.ndarray, window_sites: Sequence[int], theta0=None, grid: int = 32,
                rk_steps: int = 8) -> TorusSampler:
    """Compose the time-1 flows of ``generators`` (first step first) on the final torus.

    Parameters
    ----------
    frame : ndarray, shape (N_lattice, N_window)
        Columns of ``G`` for the Hamiltonian window, mapping ``q`` to ``u``.
    """
    b = cfg.b
    theta0 = np.zeros(b) if theta0 is None else np.asarray(theta0, dtype=float)
    normal = normal_form.sites
    ns = len(normal)
    axes = [np.arange(grid) * 2 * np.pi / grid] * b
    th = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, b)
    M = len(th)
    x = (th.astype(complex), np.zeros((M, b), dtype=complex), np.zeros((M, ns), dtype=complex),
         np.zeros((M, ns), dtype=complex))
    for F in reversed(list(generators)):
        if len(F):
            x = flow_time_one(F, x, rk_steps)
    shape = (grid,) * b
    fft = lambda v: np.fft.fftn(v.reshape(shape + (-1,)), axes=tuple(range(b)))
    coeffs = {"dtheta": fft((x[0] - th).real), "I": fft(x[1].real), "q": fft(x[2])}
    return TorusSampler(normal_form.omega[:, 0].real.copy(), theta0, np.asarray(cfg.y), cfg.J, normal,
                        tuple(window_sites), np.asarray(frame), grid, coeffs)


def torus_distance(sampler: TorusSampler, theta_grid: int = 64) -> float:
    """``max_theta`` weighted l1 distance between the embedded torus and the unperturbed one."""
    b = len(sampler.J)
    axes = [np.arange(theta_grid) * 2 * np.pi / theta_grid] * b
    th = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, b)
    t_orig, I, q = sampler.coords(th)
    return float(np.max(np.abs(t_orig - th).sum(axis=1) + np.abs(I).sum(axis=1) + np.abs(q).sum(axis=1)))


# -- full pipeline ----------------------------------------------------------
@dataclass
class KAMRun:
    """Result of :func:`run_kam`."""

    cfg: TangentialConfig
    reduction: Reduction
    schedule: list
    logs: list
    normal_forms: list
    perturbations: list

    @property
    def generators(self) -> list:
        return [lg["_F"] for lg in self.logs]

    @property
    def passed(self) -> bool:
        return all(c["passed"] for lg in self.logs for c in lg["checks"]) and \
            all(c.passed for c in self.reduction.info["checks"])

    def to_dict(self) -> dict:
        strip = lambda lg: {k: v for k, v in lg.items() if not k.startswith("_")}
        return {"config": self.cfg.to_dict(),
                "reduction": {"truncation_mass": self.reduction.info["truncation_mass"],
                              "gauge_residual": self.reduction.info["gauge_residual"],
                              "checks": [c.as_dict() for c in self.reduction.info["checks"]],
                              "normal_form": self.reduction.normal_form.to_dict()},
                "schedule": [s.to_dict() for s in self.schedule],
                "steps": [strip(lg) for lg in self.logs],
                "passed": self.passed}


def run_kam(T: QuarticTensor, d: np.ndarray, cfg: TangentialConfig, d_grads=None, steps: int = 1,
            K_override: int | None = None, c: float = 1.0, strict: bool = False,
            degree_cap: int = 4, l_cap: int = 2) -> KAMRun:
    """Reduce, then run ``steps`` KAM iterations with the default schedule.

    With ``cfg.eps == 0`` there is nothing to remove and no step is run.
    """
    red = action_angle_reduce(T, d, cfg, d_grads, l_cap=l_cap)
    base = cfg.default_domain()
    if cfg.eps == 0:
        return KAMRun(cfg, red, [], [], [red.normal_form], [red.P_low])
    sched = build_schedule(cfg.eps, steps - 1, s0=base.s, r0=base.r, c=c, b=cfg.b, K_override=K_override)
    N = red.normal_form
    P = red.P_low + red.P_dot + red.P_ddot
    logs, nfs, ps = [], [N], [P]
    for s in sched:
        dom = Domain(s.r_nu, s.s_nu, base.d, s.rho_nu)
        P = P.like(P.exps, P.coef)
        P.domain = dom
        (N, P), log = kam_nonlinear_step(N, P, s, cfg.xi, strict=strict, degree_cap=degree_cap, l_cap=l_cap)
        logs.append(log)
        nfs.append(N)
        ps.append(P)
    return KAMRun(cfg, red, sched, logs, nfs, ps)
