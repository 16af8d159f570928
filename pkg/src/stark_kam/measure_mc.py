"""Monte Carlo estimate of the parameter measure removed by the non-resonance conditions.

Every condition is a lower bound on a divisor that is affine in ``xi`` once the
normal form is linearized about its sample point:

* ``R0``: ``|<k, omega>| >= gamma / |k|^tau``
* ``R1``: ``|<k, omega> + Omega_n| >= gamma / (|k|^tau K)``
* ``R2``: ``|<k, omega> + Omega_m - Omega_n| >= gamma / (|k|^tau K^2)``
* ``R3``: ``|<k, omega> + Omega_m + Omega_n| >= gamma / (|k|^tau K^2)``

with ``0 < |k|_1 <= k_cut`` and ``K = K_{nu+1}``. Sign variants are covered by
letting ``k`` range over a symmetric set. Divisors at ``k = 0`` do not depend on
``xi`` to leading order and are governed by the separation assumption instead.
Conditions whose divisor cannot reach its threshold anywhere on the parameter box
are discarded before sampling.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import binomtest

from .nonlinear_kam import IterationSchedule, NormalForm

BOX_HALF_WIDTH = 0.1
NO_SITE = np.iinfo(np.int64).min


@dataclass
class Violation:
    level: int
    cls: str
    k: tuple
    m: int | None
    n: int | None
    divisor: float
    threshold: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ResonanceReport:
    """Outcome of all checks at one parameter value; ``accepted`` iff no violations."""

    xi: np.ndarray
    violations: list = field(default_factory=list)

    @property
    def accepted(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {"xi": np.asarray(self.xi).tolist(), "accepted": self.accepted,
                "violations": [v.to_dict() for v in self.violations]}


@dataclass
class DivisorTable:
    """Affine divisors ``c0 + c . (xi - xi0)`` with thresholds, one row per condition."""

    cls: np.ndarray
    k: np.ndarray
    m: np.ndarray
    n: np.ndarray
    c0: np.ndarray
    c: np.ndarray
    threshold: np.ndarray
    xi0: np.ndarray
    level: int = 0

    def __len__(self) -> int:
        return len(self.c0)

    def select(self, mask) -> "DivisorTable":
        return DivisorTable(self.cls[mask], self.k[mask], self.m[mask], self.n[mask], self.c0[mask],
                            self.c[mask], self.threshold[mask], self.xi0, self.level)

    def values(self, xi: np.ndarray) -> np.ndarray:
        """Divisors at ``xi`` of shape ``(S, b)``; result ``(S, rows)``."""
        return self.c0[None, :] + (np.atleast_2d(xi) - self.xi0) @ self.c.T

    def reachable(self, lo: np.ndarray, hi: np.ndarray) -> "DivisorTable":
        """Rows whose ``|divisor|`` can drop below threshold somewhere in the box."""
        mid = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        centre = self.c0 + (mid - self.xi0) @ self.c.T
        spread = np.abs(self.c) @ half
        return self.select(np.abs(centre) - spread < self.threshold)


def k_vectors(b: int, k_cut: int) -> np.ndarray:
    """All integer vectors with ``|k|_1 <= k_cut``, zero included."""
    rng = range(-k_cut, k_cut + 1)
    ks = [k for k in itertools.product(rng, repeat=b) if sum(map(abs, k)) <= k_cut]
    return np.array(ks, dtype=int).reshape(-1, b)


def default_k_cut(b: int, tau: float, rel_tail: float = 0.01, limit: int = 10_000) -> int:
    """Smallest ``K`` with ``sum_{|k|_1 > K} |k|^{-(tau+1)} < rel_tail``.

    The number of vectors with ``|k|_1 = j`` in ``Z^b`` is
    ``sum_i 2^i C(b, i) C(j-1, i-1)``.
    """
    def count(j):
        return sum(2 ** i * math.comb(b, i) * math.comb(j - 1, i - 1) for i in range(1, b + 1))

    terms = [count(j) * j ** -(tau + 1) for j in range(1, limit + 1)]
    tail = np.cumsum(terms[::-1])[::-1]
    for K in range(limit):
        if tail[K] < rel_tail:
            return K
    raise ValueError("the tail series does not converge fast enough; increase tau")


def divisor_table(N: NormalForm, sched: IterationSchedule, k_cut: int, sites: Sequence[int] | None = None,
                  level: int | None = None) -> DivisorTable:
    """Enumerate every condition of the four families for normal sites ``|n| <= K_{nu+1}``."""
    b = N.b
    K = sched.K_next
    sites = [n for n in N.sites if abs(n) <= K] if sites is None else list(sites)
    pos = [N.sites.index(n) for n in sites]
    om0, omg = N.omega[:, 0].real, N.omega[:, 1:].real
    Om0, Omg = N.Omega[pos, 0].real, N.Omega[pos, 1:].real
    ks = k_vectors(b, k_cut)
    ks = ks[np.abs(ks).sum(axis=1) > 0]
    kabs = np.abs(ks).sum(axis=1).astype(float)
    kw0 = ks @ om0
    kwg = ks @ omg
    base = sched.gamma_nu / kabs ** sched.tau
    ns = len(sites)
    sites_arr = np.asarray(sites, dtype=int)
    blocks = []

    blocks.append(("R0", ks, np.full(len(ks), NO_SITE), np.full(len(ks), NO_SITE), kw0, kwg, base))
    if ns:
        ki, ni = np.meshgrid(np.arange(len(ks)), np.arange(ns), indexing="ij")
        ki, ni = ki.ravel(), ni.ravel()
        blocks.append(("R1", ks[ki], np.full(len(ki), NO_SITE), sites_arr[ni], kw0[ki] + Om0[ni],
                       kwg[ki] + Omg[ni], base[ki] / K))
        mi, nj = np.meshgrid(np.arange(ns), np.arange(ns), indexing="ij")
        off = mi != nj
        mi, nj = mi[off], nj[off]
        ki, pi = np.meshgrid(np.arange(len(ks)), np.arange(len(mi)), indexing="ij")
        ki, pi = ki.ravel(), pi.ravel()
        blocks.append(("R2", ks[ki], sites_arr[mi[pi]], sites_arr[nj[pi]],
                       kw0[ki] + Om0[mi[pi]] - Om0[nj[pi]], kwg[ki] + Omg[mi[pi]] - Omg[nj[pi]],
                       base[ki] / K ** 2))
        mi, nj = np.triu_indices(ns)
        ki, pi = np.meshgrid(np.arange(len(ks)), np.arange(len(mi)), indexing="ij")
        ki, pi = ki.ravel(), pi.ravel()
        blocks.append(("R3", ks[ki], sites_arr[mi[pi]], sites_arr[nj[pi]],
                       kw0[ki] + Om0[mi[pi]] + Om0[nj[pi]], kwg[ki] + Omg[mi[pi]] + Omg[nj[pi]],
                       base[ki] / K ** 2))
    cat = lambda i: np.concatenate([blk[i] for blk in blocks])
    cls = np.concatenate([np.full(len(blk[4]), blk[0]) for blk in blocks])
    return DivisorTable(cls, cat(1).reshape(-1, b), cat(2), cat(3), cat(4), cat(5).reshape(-1, b), cat(6),
                        np.asarray(N.xi0, dtype=float), sched.nu if level is None else level)


def resonance_check(N: NormalForm, sched: IterationSchedule, xi, k_cut: int | None = None,
                    sites: Sequence[int] | None = None) -> ResonanceReport:
    """Evaluate all conditions at one parameter value."""
    k_cut = default_k_cut(N.b, sched.tau) if k_cut is None else k_cut
    xi = np.asarray(xi, dtype=float)
    table = divisor_table(N, sched, k_cut, sites)
    vals = table.values(xi)[0]
    hit = np.nonzero(np.abs(vals) < table.threshold)[0]
    none = lambda x: None if x == NO_SITE else int(x)
    viol = [Violation(table.level, str(table.cls[i]), tuple(int(v) for v in table.k[i]), none(table.m[i]),
                      none(table.n[i]), float(vals[i]), float(table.threshold[i])) for i in hit]
    return ResonanceReport(xi, viol)


def rejected_mask(tables: Sequence[DivisorTable], xi: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Boolean ``(S, len(tables))``: sample rejected at each level."""
    xi = np.atleast_2d(xi)
    out = np.zeros((len(xi), len(tables)), dtype=bool)
    lo, hi = xi.min(axis=0), xi.max(axis=0)
    for j, t in enumerate(tables):
        t = t.reachable(lo, hi)
        if len(t) == 0:
            continue
        for s in range(0, len(xi), chunk):
            v = t.values(xi[s:s + chunk])
            out[s:s + chunk, j] = np.any(np.abs(v) < t.threshold[None, :], axis=1)
    return out


def twist_check(N: NormalForm, k_cut: int, sites: Sequence[int] | None = None) -> dict:
    """Worst ratio of ``|d/dxi_i (<k,omega> + Omega_m - Omega_n)|`` to ``|k|/(6b)``.

    ``i`` is the coordinate where ``|k_i|`` is largest; ratios below one fail.
    """
    b = N.b
    sites = list(N.sites) if sites is None else list(sites)
    pos = [N.sites.index(n) for n in sites]
    omg = N.omega[:, 1:].real
    Omg = N.Omega[pos, 1:].real
    ks = k_vectors(b, k_cut)
    ks = ks[np.abs(ks).sum(axis=1) > 0]
    i = np.argmax(np.abs(ks), axis=1)
    kgrad = (ks @ omg)[np.arange(len(ks)), i]
    spread = np.max(np.abs(Omg[:, None, :] - Omg[None, :, :]), axis=(0, 1)) if len(pos) else np.zeros(b)
    worst = np.abs(kgrad) - spread[i]
    ratio = worst / (np.abs(ks).sum(axis=1) / (6.0 * b))
    return {"min_ratio": float(ratio.min()), "passed": bool(ratio.min() >= 1.0)}


@dataclass
class MeasureRow:
    eps: float
    samples: int
    rejected: int
    rejected_frac: float
    ci_lo: float
    ci_hi: float
    per_level: list
    gamma0: float
    twist_ratio: float

    @property
    def saturated(self) -> bool:
        return self.rejected_frac >= 0.99 or self.rejected == 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class MeasureTable:
    rows: list
    slope: float | None
    band: tuple = (1 / 32, 1 / 8)
    skipped: list = field(default_factory=list)

    @property
    def slope_ok(self) -> bool:
        return self.slope is not None and self.band[0] <= self.slope <= self.band[1]

    def to_csv(self) -> str:
        lines = ["eps,rejected_frac,ci_lo,ci_hi"]
        lines += [f"{r.eps:.6e},{r.rejected_frac:.10f},{r.ci_lo:.10f},{r.ci_hi:.10f}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows], "slope": self.slope, "band": list(self.band),
                "slope_ok": self.slope_ok, "skipped": self.skipped}


def binomial_row(eps: float, rejected: int, samples: int, per_level, gamma0: float, twist: float,
                 confidence: float = 0.95) -> MeasureRow:
    ci = binomtest(int(rejected), int(samples)).proportion_ci(confidence, method="wilson")
    return MeasureRow(eps, int(samples), int(rejected), rejected / samples, float(ci.low), float(ci.high),
                      list(per_level), gamma0, twist)


def fit_slope(rows: Sequence[MeasureRow]) -> tuple[float | None, list]:
    """Least-squares slope of ``log fraction`` against ``log eps`` over unsaturated rows."""
    used = [r for r in rows if not r.saturated]
    skipped = [r.eps for r in rows if r.saturated]
    if len(used) < 2:
        return None, skipped
    x = np.log([r.eps for r in used])
    y = np.log([r.rejected_frac for r in used])
    return float(np.polyfit(x, y, 1)[0]), skipped


def sample_box(b: int, samples: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-BOX_HALF_WIDTH, BOX_HALF_WIDTH, size=(samples, b))


def measure_levels(levels: Sequence[tuple[NormalForm, IterationSchedule]], samples: int, seed: int,
                   k_cut: int | None = None, sites: Sequence[int] | None = None, eps: float | None = None):
    """Rejected fraction for a list of ``(normal form, schedule)`` levels."""
    N0, s0 = levels[0]
    b = N0.b
    k_cut = default_k_cut(b, s0.tau) if k_cut is None else k_cut
    xi = sample_box(b, samples, seed)
    tables = [divisor_table(N, s, k_cut, sites, level=i) for i, (N, s) in enumerate(levels)]
    mask = rejected_mask(tables, xi)
    twist = twist_check(N0, k_cut, sites)["min_ratio"]
    per_level = mask.mean(axis=0).tolist()
    return binomial_row(s0.eps_nu if eps is None else eps, int(mask.any(axis=1).sum()), samples, per_level,
                        s0.gamma_nu, twist)


def measure_sweep(pipeline, eps_list: Sequence[float], samples: int = 20_000, seed: int = 0,
                  k_cut: int | None = None) -> MeasureTable:
    """Rejected fraction per ``eps`` and the log-log slope.

    Parameters
    ----------
    pipeline : callable
        ``pipeline(eps) -> list of (NormalForm, IterationSchedule)``, one entry per level.

    Raises
    ------
    ValueError
        Fewer than two levels are unsaturated, so no slope can be fitted.
    """
    if samples < 1000:
        raise ValueError("at least 1000 samples are required")
    rows = [measure_levels(pipeline(e), samples, seed, k_cut, eps=e) for e in eps_list]
    slope, skipped = fit_slope(rows)
    if slope is None:
        raise ValueError("degenerate fit: every level is saturated or empty; widen the eps range "
                         "(gamma_0 = eps^(1/16) must be well below the box half-width 0.1)")
    return MeasureTable(rows, slope, skipped=skipped)


def kam_levels(T, d, d_grads, J, y=None, steps: int = 1, K_override: int | None = 8, xi0=None):
    """Build a ``pipeline`` for :func:`measure_sweep` from a quartic tensor.

    Level ``nu`` pairs the normal form after ``nu`` KAM steps with the unmodified
    schedule entry ``nu``.
    """
    from .nonlinear_kam import TangentialConfig, build_schedule, run_kam

    def pipeline(eps):
        cfg = TangentialConfig(tuple(J), y, eps, None if xi0 is None else tuple(xi0))
        run = run_kam(T, d, cfg, d_grads, steps=steps, K_override=K_override)
        sched = build_schedule(eps, steps, s0=run.schedule[0].s_nu, r0=run.schedule[0].r_nu, b=cfg.b)
        return [(run.normal_forms[i], sched[i]) for i in range(steps + 1)]

    return pipeline
