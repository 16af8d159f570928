"""Sparse Taylor-Fourier polynomials in (theta, I, q, conj q) with dual coefficients.

A series is a finite sum

    F = sum_{k, l, alpha, beta} F_{k l alpha beta}(xi) I^l e^{i <k, theta>} q^alpha conj(q)^beta

over ``b`` angle/action pairs and a finite list of normal sites. Each term is
one row of an integer exponent matrix ``[k | l | alpha | beta]`` plus one row
of a complex coefficient matrix ``[value | d/dxi_1 ... d/dxi_P]``. Storing
exponents densely keeps brackets and products as numpy outer sums followed by
a single merge of equal rows.

Bracket convention
------------------
    {F, G} = <d_theta F, d_I G> - <d_I F, d_theta G>
             + i sum_n (d_{q_n} F d_{qbar_n} G - d_{qbar_n} F d_{q_n} G).

With it ``{q_n, qbar_n} = i``, the substitution ``q = sqrt(I + y) e^{i theta}``
is canonical, and ``dF/dt = {F, H}`` reproduces ``i dq/dt = -dH/d(qbar)`` and
``dtheta/dt = dH/dI``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import xlogy

from .weighted_ops import DualScalar

EXP_DTYPE = np.int16


@dataclass(frozen=True)
class Domain:
    """Complex neighbourhood ``|Im theta| < r, |I| < s^2, ||q|| + ||qbar|| < s``.

    ``||q|| = sum_n |q_n| <n>^d e^{rho |n|}``.
    """

    r: float = 0.5
    s: float = 0.05
    d: float = 2.0
    rho: float = 0.125

    def site_weights(self, sites: Sequence[int]) -> np.ndarray:
        n = np.asarray(sites, dtype=float)
        return (1.0 + n * n) ** (self.d / 2.0) * np.exp(self.rho * np.abs(n))

    def to_dict(self) -> dict:
        return {"r": self.r, "s": self.s, "d": self.d, "rho": self.rho}


class MultiIndex(NamedTuple):
    """Exponents of one monomial; ``alpha`` and ``beta`` are sorted ``(site, power)`` pairs."""

    k: tuple
    l: tuple
    alpha: tuple = ()
    beta: tuple = ()

    @property
    def degree(self) -> int:
        return 2 * sum(self.l) + sum(p for _, p in self.alpha) + sum(p for _, p in self.beta)

    @property
    def charge(self) -> int:
        return sum(self.k) + sum(p for _, p in self.alpha) - sum(p for _, p in self.beta)

    def _support(self) -> list:
        return [n for n, p in self.alpha if p] + [n for n, p in self.beta if p]

    @property
    def n_plus(self) -> int:
        sup = self._support()
        return max(sup) if sup else 0

    @property
    def n_minus(self) -> int:
        sup = self._support()
        return min(sup) if sup else 0

    @property
    def n_star(self) -> int:
        return max(abs(self.n_plus), abs(self.n_minus))


def _as_dual_row(c, nparam: int) -> np.ndarray:
    row = np.zeros(1 + nparam, dtype=complex)
    if isinstance(c, DualScalar):
        row[0] = c.value
        g = np.asarray(c.grad, dtype=complex).ravel()
        row[1:1 + g.size] = g
    else:
        arr = np.asarray(c, dtype=complex).ravel()
        row[:arr.size] = arr
    return row


def _merge_rows(exps: np.ndarray, coef: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum coefficients of identical exponent rows; output is in a canonical order."""
    if len(exps) == 0:
        return exps, coef
    exps = np.ascontiguousarray(exps, dtype=EXP_DTYPE)
    keys = exps.view(np.dtype((np.void, exps.dtype.itemsize * exps.shape[1]))).ravel()
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    out = np.zeros((len(first), coef.shape[1]), dtype=complex)
    np.add.at(out, inverse.ravel(), coef)
    return exps[first], out


class TFSeries:
    """Sparse Taylor-Fourier polynomial.

    Parameters
    ----------
    sites : sequence of int
        Normal sites (columns of ``alpha`` and ``beta``).
    b : int
        Number of angle/action pairs.
    exps : ndarray, shape (T, 2b + 2len(sites))
    coef : ndarray, shape (T, 1 + nparam)
    domain : Domain
    truncated_mass : float
        Norm of terms discarded by degree caps when this series was produced.
    merge : bool
        Merge duplicate rows and drop exact zeros.
    """

    __slots__ = ("sites", "b", "exps", "coef", "domain", "truncated_mass")

    def __init__(self, sites, b: int, exps, coef, domain: Domain = Domain(),
                 truncated_mass: float = 0.0, merge: bool = True):
        self.sites = tuple(int(n) for n in sites)
        self.b = int(b)
        width = 2 * self.b + 2 * len(self.sites)
        exps = np.asarray(exps, dtype=EXP_DTYPE).reshape(-1, width)
        coef = np.asarray(coef, dtype=complex)
        if coef.ndim != 2 or len(coef) != len(exps):
            raise ValueError("coefficients must have shape (terms, 1 + nparam)")
        if merge:
            exps, coef = _merge_rows(exps, coef)
            keep = np.any(coef != 0, axis=1)
            exps, coef = exps[keep], coef[keep]
        self.exps = exps
        self.coef = coef
        self.domain = domain
        self.truncated_mass = float(truncated_mass)

    # -- construction ------------------------------------------------------
    @classmethod
    def zero(cls, sites, b: int, nparam: int = 0, domain: Domain = Domain()) -> "TFSeries":
        width = 2 * b + 2 * len(tuple(sites))
        return cls(sites, b, np.zeros((0, width)), np.zeros((0, 1 + nparam)), domain)

    @classmethod
    def from_terms(cls, sites, b: int, terms: dict, nparam: int = 0,
                   domain: Domain = Domain()) -> "TFSeries":
        sites = tuple(sites)
        pos = {n: i for i, n in enumerate(sites)}
        ns = len(sites)
        exps = np.zeros((len(terms), 2 * b + 2 * ns), dtype=EXP_DTYPE)
        coef = np.zeros((len(terms), 1 + nparam), dtype=complex)
        for row, (mi, c) in enumerate(terms.items()):
            if not isinstance(mi, MultiIndex):
                mi = MultiIndex(*mi)
            exps[row, :b] = mi.k
            exps[row, b:2 * b] = mi.l
            for n, p in mi.alpha:
                if n not in pos:
                    raise ValueError(f"site {n} is outside the normal window")
                exps[row, 2 * b + pos[n]] += p
            for n, p in mi.beta:
                if n not in pos:
                    raise ValueError(f"site {n} is outside the normal window")
                exps[row, 2 * b + ns + pos[n]] += p
            coef[row] = _as_dual_row(c, nparam)
        return cls(sites, b, exps, coef, domain)

    def like(self, exps, coef, truncated_mass: float = 0.0, merge: bool = True) -> "TFSeries":
        return TFSeries(self.sites, self.b, exps, coef, self.domain, truncated_mass, merge)

    # -- views -------------------------------------------------------------
    @property
    def nparam(self) -> int:
        return self.coef.shape[1] - 1

    @property
    def k(self) -> np.ndarray:
        return self.exps[:, :self.b]

    @property
    def l(self) -> np.ndarray:
        return self.exps[:, self.b:2 * self.b]

    @property
    def alpha(self) -> np.ndarray:
        return self.exps[:, 2 * self.b:2 * self.b + len(self.sites)]

    @property
    def beta(self) -> np.ndarray:
        return self.exps[:, 2 * self.b + len(self.sites):]

    def __len__(self) -> int:
        return len(self.exps)

    def weight(self) -> np.ndarray:
        """``2|l| + |alpha| + |beta|`` per term."""
        return 2 * self.l.sum(axis=1) + self.alpha.sum(axis=1) + self.beta.sum(axis=1)

    def qdegree(self) -> np.ndarray:
        return self.alpha.sum(axis=1) + self.beta.sum(axis=1)

    def charge(self) -> np.ndarray:
        return self.k.sum(axis=1) + self.alpha.sum(axis=1) - self.beta.sum(axis=1)

    def multi_index(self, row: int) -> MultiIndex:
        a, bt = self.alpha[row], self.beta[row]
        return MultiIndex(tuple(int(x) for x in self.k[row]), tuple(int(x) for x in self.l[row]),
                          tuple((self.sites[i], int(a[i])) for i in np.nonzero(a)[0]),
                          tuple((self.sites[i], int(bt[i])) for i in np.nonzero(bt)[0]))

    @property
    def terms(self) -> dict:
        """Mapping ``MultiIndex -> DualScalar``."""
        return {self.multi_index(i): DualScalar(self.coef[i, 0], self.coef[i, 1:]) for i in range(len(self))}

    def coefficient(self, mi: MultiIndex) -> complex:
        probe = TFSeries.from_terms(self.sites, self.b, {mi: 1.0}, self.nparam)
        hit = np.all(self.exps == probe.exps[0], axis=1)
        return complex(self.coef[hit, 0].sum())

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.coef), initial=0.0))

    # -- algebra -----------------------------------------------------------
    def _check(self, other: "TFSeries"):
        if self.sites != other.sites or self.b != other.b:
            raise ValueError("series live on different windows")
        if self.nparam != other.nparam:
            raise ValueError("series carry different parameter counts")

    def __add__(self, other: "TFSeries") -> "TFSeries":
        self._check(other)
        return self.like(np.vstack([self.exps, other.exps]), np.vstack([self.coef, other.coef]),
                         self.truncated_mass + other.truncated_mass)

    def __neg__(self) -> "TFSeries":
        return self.like(self.exps, -self.coef, self.truncated_mass, merge=False)

    def __sub__(self, other: "TFSeries") -> "TFSeries":
        return self + (-other)

    def scale(self, c) -> "TFSeries":
        """Multiply by a complex number or a DualScalar."""
        if isinstance(c, DualScalar):
            g = np.asarray(c.grad, dtype=complex)
            out = self.coef * c.value
            out[:, 1:] += self.coef[:, :1] * g[None, :]
            return self.like(self.exps, out, abs(c.value) * self.truncated_mass)
        return self.like(self.exps, self.coef * c, abs(c) * self.truncated_mass)

    def select(self, mask) -> "TFSeries":
        mask = np.asarray(mask, dtype=bool)
        return self.like(self.exps[mask], self.coef[mask], merge=False)

    def by_weight(self, lo: int, hi: int | None = None) -> "TFSeries":
        w = self.weight()
        return self.select((w >= lo) & (w <= (lo if hi is None else hi)))

    def prune(self, tol: float) -> "TFSeries":
        return self.select(np.max(np.abs(self.coef), axis=1) > tol)

    def reality_defect(self) -> float:
        """Max ``|F_{k l alpha beta} - conj F_{-k l beta alpha}|``."""
        ns = len(self.sites)
        mirror = np.hstack([-self.k, self.l, self.beta, self.alpha])
        both = self.like(np.vstack([self.exps, mirror]), np.vstack([self.coef, -np.conj(self.coef)]))
        return both.max_abs()

    # -- evaluation --------------------------------------------------------
    def evaluate(self, theta, I, q, qbar) -> complex:
        """Value of the series (dual part dropped) at one point."""
        return complex(np.sum(self.coef[:, 0] * self._monomials(theta, I, q, qbar)))

    def _monomials(self, theta, I, q, qbar) -> np.ndarray:
        theta, I = np.atleast_1d(theta), np.atleast_1d(I)
        q, qbar = np.asarray(q, dtype=complex), np.asarray(qbar, dtype=complex)
        vals = np.exp(1j * (self.k @ theta))
        for block, x in ((self.l, I), (self.alpha, q), (self.beta, qbar)):
            cols = np.nonzero(block.any(axis=0))[0]
            if len(cols):
                vals = vals * np.prod(np.power(x[cols][None, :].astype(complex), block[:, cols]), axis=1)
        return vals

    def derivative(self, var: str, index: int) -> "TFSeries":
        """Partial derivative; ``var`` in ``{'theta', 'I', 'q', 'qbar'}``."""
        col = {"theta": 0, "I": self.b, "q": 2 * self.b, "qbar": 2 * self.b + len(self.sites)}[var] + index
        e = self.exps[:, col].astype(float)
        if var == "theta":
            return self.like(self.exps, self.coef * (1j * e)[:, None])
        mask = e > 0
        exps = self.exps[mask].copy()
        exps[:, col] -= 1
        return self.like(exps, self.coef[mask] * e[mask][:, None])

    # -- text format ------------------------------------------------------
    def to_text(self) -> str:
        """One term per line: ``k | l | alpha | beta | re im | grad re im ...``."""
        lines = [f"# sites {','.join(map(str, self.sites))} b {self.b} nparam {self.nparam}"]
        for i in range(len(self)):
            mi = self.multi_index(i)
            fmt = lambda pairs: ",".join(f"{n}:{p}" for n, p in pairs) or "-"
            c = self.coef[i]
            grad = " ".join(f"{z.real:.17g} {z.imag:.17g}" for z in c[1:])
            lines.append(f"{','.join(map(str, mi.k))} | {','.join(map(str, mi.l))} | {fmt(mi.alpha)} | "
                         f"{fmt(mi.beta)} | {c[0].real:.17g} {c[0].imag:.17g} | {grad}".rstrip())
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, domain: Domain = Domain()) -> "TFSeries":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = lines[0].split()
        sites = [int(x) for x in head[2].split(",")] if head[2] else []
        b, nparam = int(head[4]), int(head[6])
        parse_pairs = lambda f: tuple(tuple(int(v) for v in p.split(":")) for p in f.strip().split(",")) \
            if f.strip() != "-" else ()
        terms = {}
        for ln in lines[1:]:
            f = ln.split("|")
            k = tuple(int(x) for x in f[0].split(","))
            l = tuple(int(x) for x in f[1].split(","))
            vals = [float(x) for x in f[4].split()]
            grads = [float(x) for x in f[5].split()] if len(f) > 5 else []
            row = [complex(vals[0], vals[1])] + [complex(grads[2 * i], grads[2 * i + 1]) for i in range(nparam)]
            terms[MultiIndex(k, l, parse_pairs(f[2]), parse_pairs(f[3]))] = np.array(row)
        return cls.from_terms(sites, b, terms, nparam, domain)


# -- norms ------------------------------------------------------------------
def monomial_sup(F: TFSeries, domain: Domain | None = None) -> np.ndarray:
    """Per-term sup of ``|I^l e^{i<k,theta>} q^alpha qbar^beta|`` over the domain.

    The weighted l1 ball constraint makes each sup an AM-GM extremum:
    ``s^D prod_n (alpha_n / (D w_n))^alpha_n (beta_n / (D w_n))^beta_n``
    with ``D = |alpha| + |beta|``, and likewise for ``I`` on ``|I|_1 < s^2``.
    """
    dom = F.domain if domain is None else domain
    if len(F) == 0:
        return np.zeros(0)
    logw = np.log(dom.site_weights(F.sites))
    a, bt = F.alpha.astype(float), F.beta.astype(float)
    D = a.sum(axis=1) + bt.sum(axis=1)
    safeD = np.where(D > 0, D, 1.0)[:, None]
    log_q = (D * np.log(dom.s) + np.sum(xlogy(a, a / safeD) + xlogy(bt, bt / safeD), axis=1)
             - (a + bt) @ logw)
    l = F.l.astype(float)
    L = l.sum(axis=1)
    safeL = np.where(L > 0, L, 1.0)[:, None]
    log_i = 2 * L * np.log(dom.s) + np.sum(xlogy(l, l / safeL), axis=1)
    log_k = dom.r * np.abs(F.k).sum(axis=1)
    return np.exp(log_q + log_i + log_k)


def coefficient_size(F: TFSeries) -> np.ndarray:
    """``|F| + |dF/dxi|_1`` per term."""
    return np.abs(F.coef[:, 0]) + np.abs(F.coef[:, 1:]).sum(axis=1)


def series_norm(F: TFSeries, domain: Domain | None = None) -> float:
    """Weighted norm: sum over terms of coefficient size times the monomial sup."""
    return float(np.sum(coefficient_size(F) * monomial_sup(F, domain)))


def vector_field_norm(F: TFSeries, domain: Domain | None = None) -> float:
    """``||d_I F|| + s^{-2} ||d_theta F|| + s^{-1} sum_n w_n (||d_{q_n} F|| + ||d_{qbar_n} F||)``."""
    dom = F.domain if domain is None else domain
    total = 0.0
    for j in range(F.b):
        total += series_norm(F.derivative("I", j), dom)
        total += series_norm(F.derivative("theta", j), dom) / dom.s ** 2
    w = dom.site_weights(F.sites)
    qsum = 0.0
    active_a = np.nonzero(F.alpha.any(axis=0))[0] if len(F) else []
    active_b = np.nonzero(F.beta.any(axis=0))[0] if len(F) else []
    for i in active_a:
        qsum += w[i] * series_norm(F.derivative("q", i), dom)
    for i in active_b:
        qsum += w[i] * series_norm(F.derivative("qbar", i), dom)
    return float(total + qsum / dom.s)


def alpha_beta_norms(F: TFSeries, domain: Domain | None = None) -> dict:
    """Norm of each coefficient function ``F_{alpha beta}(theta, I)``, keyed by the
    ``(alpha, beta)`` part of the multi-index."""
    dom = F.domain if domain is None else domain
    if len(F) == 0:
        return {}
    stripped = F.like(np.hstack([F.k, F.l, np.zeros_like(F.alpha), np.zeros_like(F.beta)]), F.coef, merge=False)
    size = coefficient_size(F) * monomial_sup(stripped, dom)
    qpart = np.ascontiguousarray(np.hstack([F.alpha, F.beta]))
    keys = qpart.view(np.dtype((np.void, qpart.dtype.itemsize * qpart.shape[1]))).ravel()
    _, first, inv = np.unique(keys, return_index=True, return_inverse=True)
    sums = np.zeros(len(first))
    np.add.at(sums, inv.ravel(), size)
    out = {}
    for g, row in enumerate(first):
        mi = F.multi_index(row)
        out[(mi.alpha, mi.beta)] = float(sums[g])
    return out


# -- products and brackets -------------------------------------------------
def _dual_outer(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Dual products of every row of ``A`` with every row of ``B``, flattened."""
    out = np.empty((A.shape[0], B.shape[0], A.shape[1]), dtype=complex)
    out[..., 0] = A[:, None, 0] * B[None, :, 0]
    out[..., 1:] = A[:, None, :1] * B[None, :, 1:] + A[:, None, 1:] * B[None, :, :1]
    return out.reshape(-1, A.shape[1])


def _pair_block(F: TFSeries, G: TFSeries, fmask, gmask, fcol: int, gcol: int, ffac, gfac, scale):
    """Terms of (d F / d x_fcol)(d G / d x_gcol) for the selected rows."""
    fi, gi = np.nonzero(fmask)[0], np.nonzero(gmask)[0]
    if len(fi) == 0 or len(gi) == 0:
        return None
    ef, eg = F.exps[fi].astype(np.int32), G.exps[gi].astype(np.int32)
    ef_d, eg_d = ef.copy(), eg.copy()
    if fcol >= F.b:
        ef_d[:, fcol] -= 1
    if gcol >= G.b:
        eg_d[:, gcol] -= 1
    exps = (ef_d[:, None, :] + eg_d[None, :, :]).reshape(-1, ef.shape[1])
    A = F.coef[fi] * np.asarray(ffac)[fi][:, None]
    B = G.coef[gi] * np.asarray(gfac)[gi][:, None]
    return exps, scale * _dual_outer(A, B)


def _finish(F: TFSeries, out: TFSeries, degree_cap: int | None, l_cap: int | None,
            prune_rel: float, scale: float) -> TFSeries:
    mass = 0.0
    if prune_rel > 0 and len(out):
        small = np.max(np.abs(out.coef), axis=1) <= prune_rel * scale
        if small.any():
            mass = series_norm(out.select(small))
            out = out.select(~small)
    if len(out) and (degree_cap is not None or l_cap is not None):
        keep = np.ones(len(out), dtype=bool)
        if degree_cap is not None:
            keep &= out.qdegree() <= degree_cap
        if l_cap is not None:
            keep &= out.l.sum(axis=1) <= l_cap
        if not keep.all():
            mass += series_norm(out.select(~keep))
            out = out.select(keep)
    out.truncated_mass = mass
    return out


def _collect(F: TFSeries, blocks: list) -> tuple[TFSeries, float]:
    blocks = [blk for blk in blocks if blk is not None]
    if not blocks:
        return TFSeries.zero(F.sites, F.b, F.nparam, F.domain), 0.0
    scale = max(float(np.max(np.abs(c))) for _, c in blocks)
    return F.like(np.vstack([blk[0] for blk in blocks]), np.vstack([blk[1] for blk in blocks])), scale


def _half_bracket(F: TFSeries, G: TFSeries) -> tuple[TFSeries, float]:
    """``<d_theta F, d_I G> + i sum_n d_{q_n} F d_{qbar_n} G``."""
    b, ns = F.b, len(F.sites)
    blocks = []
    for j in range(b):
        kF = F.exps[:, j].astype(float)
        lG = G.exps[:, b + j].astype(float)
        blocks.append(_pair_block(F, G, kF != 0, lG > 0, j, b + j, 1j * kF, lG, 1.0))
    for i in range(ns):
        ca, cb = 2 * b + i, 2 * b + ns + i
        aF, bG = F.exps[:, ca].astype(float), G.exps[:, cb].astype(float)
        blocks.append(_pair_block(F, G, aF > 0, bG > 0, ca, cb, aF, bG, 1j))
    return _collect(F, blocks)


def poisson_bracket(F: TFSeries, G: TFSeries, degree_cap: int | None = 4, l_cap: int | None = 2,
                    prune_rel: float = 1e-16) -> TFSeries:
    """Poisson bracket ``{F, G}`` (convention in the module docstring).

    Computed as ``B(F, G) - B(G, F)`` with ``B`` the half bracket
    ``<d_theta F, d_I G> + i sum d_q F d_qbar G``, so antisymmetry holds exactly.

    Parameters
    ----------
    degree_cap, l_cap : int or None
        Terms with ``|alpha| + |beta| > degree_cap`` or ``|l| > l_cap`` are dropped;
        the norm of what was dropped is stored in ``truncated_mass``.
    prune_rel : float
        Coefficients below ``prune_rel`` times the largest raw product are dropped.
    """
    F._check(G)
    X, sx = _half_bracket(F, G)
    Y, sy = _half_bracket(G, F)
    out = F.like(np.vstack([X.exps, Y.exps]), np.vstack([X.coef, -Y.coef]))
    return _finish(F, out, degree_cap, l_cap, prune_rel, max(sx, sy))


def series_mul(F: TFSeries, G: TFSeries, degree_cap: int | None = None, l_cap: int | None = None,
               prune_rel: float = 0.0) -> TFSeries:
    """Product ``F G``."""
    F._check(G)
    if len(F) == 0 or len(G) == 0:
        return TFSeries.zero(F.sites, F.b, F.nparam, F.domain)
    exps = (F.exps.astype(np.int32)[:, None, :] + G.exps.astype(np.int32)[None, :, :]).reshape(-1, F.exps.shape[1])
    out, scale = _collect(F, [(exps, _dual_outer(F.coef, G.coef))])
    return _finish(F, out, degree_cap, l_cap, prune_rel, scale)


def gauge_filter(F: TFSeries) -> tuple[TFSeries, float]:
    """Drop terms with nonzero charge ``sum k + |alpha| - |beta|``; return the removed norm."""
    bad = F.charge() != 0
    return F.select(~bad), series_norm(F.select(bad))
