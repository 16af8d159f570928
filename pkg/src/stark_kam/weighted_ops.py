"""Exponentially weighted algebra of truncated lattice operators.

A lattice operator is a matrix indexed by a finite window of integer sites.
Every entry carries a value and a gradient with respect to a fixed list of
"active" disorder sites, so products and series propagate first-order
parameter derivatives exactly (forward-mode dual numbers).

Entries are held densely (``value`` is ``(N, N)``, ``grad`` is ``(P, N, N)``);
banded structure is exposed through :meth:`LatticeOperator.bands` and used for
serialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import SeriesTailError

SELF_ADJOINT = "self-adjoint"
SKEW_ADJOINT = "skew-adjoint"
NO_SYMMETRY = "none"
_TAGS = (SELF_ADJOINT, SKEW_ADJOINT, NO_SYMMETRY)


@dataclass(frozen=True)
class SiteWindow:
    """Inclusive window ``[lo, hi]`` of lattice sites."""

    lo: int
    hi: int

    def __post_init__(self):
        if int(self.lo) != self.lo or int(self.hi) != self.hi:
            raise ValueError("window bounds must be integers")
        if self.hi < self.lo:
            raise ValueError(f"window lo={self.lo} exceeds hi={self.hi}")
        if self.hi - self.lo + 1 < 3:
            raise ValueError("window must contain at least 3 sites")

    @property
    def size(self) -> int:
        return self.hi - self.lo + 1

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1)

    def index(self, site: int) -> int:
        if not self.lo <= site <= self.hi:
            raise IndexError(f"site {site} outside window [{self.lo}, {self.hi}]")
        return int(site - self.lo)

    def __contains__(self, site) -> bool:
        return self.lo <= site <= self.hi

    @property
    def margin(self) -> int:
        """Edge margin excluded from interior assertions (a quarter of the size)."""
        return self.size // 4

    def interior(self, margin: int | None = None) -> "SiteWindow":
        m = self.margin if margin is None else margin
        return SiteWindow(self.lo + m, self.hi - m)

    @classmethod
    def parse(cls, text: str) -> "SiteWindow":
        """Parse ``"lo:hi"``, e.g. ``"-64:64"``."""
        parts = str(text).split(":")
        if len(parts) != 2:
            raise ValueError(f"window: expected 'lo:hi', got {text!r}")
        try:
            lo, hi = int(parts[0]), int(parts[1])
        except ValueError:
            raise ValueError(f"window: bounds must be integers, got {text!r}") from None
        return cls(lo, hi)

    def __str__(self) -> str:
        return f"{self.lo}:{self.hi}"


@dataclass
class DualScalar:
    """A value together with its gradient over the active parameter list."""

    value: float | complex
    grad: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.grad = np.asarray(self.grad)
        if not (np.isfinite(self.value) and np.all(np.isfinite(self.grad))):
            raise ValueError("DualScalar entries must be finite")

    def _lift(self, other) -> "DualScalar":
        if isinstance(other, DualScalar):
            return other
        return DualScalar(other, np.zeros_like(self.grad))

    def __add__(self, other):
        o = self._lift(other)
        return DualScalar(self.value + o.value, self.grad + o.grad)

    __radd__ = __add__

    def __neg__(self):
        return DualScalar(-self.value, -self.grad)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        o = self._lift(other)
        return DualScalar(self.value * o.value, self.grad * o.value + self.value * o.grad)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        return DualScalar(self.value / o.value,
                          (self.grad * o.value - self.value * o.grad) / o.value ** 2)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __abs__(self) -> float:
        return abs(self.value)

    def to_list(self) -> list:
        return [float(np.real(self.value))] + [float(g) for g in np.real(self.grad)]


@dataclass
class WeightedNormValue:
    """Result of :func:`weighted_norm`."""

    plain: float
    with_deriv: float
    r: float
    alpha: float
    deriv: float = 0.0


class LatticeOperator:
    """Matrix on a site window with dual-number entries.

    Parameters
    ----------
    window : SiteWindow
    value : ndarray, shape (N, N)
    grad : ndarray, shape (P, N, N), optional
        Derivatives with respect to ``active`` disorder sites.
    active : sequence of int
        Labels of the disorder sites the gradient refers to.
    symmetry : {"self-adjoint", "skew-adjoint", "none"}
    dropped_mass : float
        Accumulated weight of entries discarded by truncation in the
        operations that produced this operator.
    """

    __slots__ = ("window", "value", "grad", "active", "symmetry", "dropped_mass")

    def __init__(self, window: SiteWindow, value, grad=None, active: Sequence[int] = (),
                 symmetry: str = NO_SYMMETRY, dropped_mass: float = 0.0):
        value = np.asarray(value)
        n = window.size
        if value.shape != (n, n):
            raise ValueError(f"value shape {value.shape} does not match window size {n}")
        active = tuple(int(a) for a in active)
        if grad is None:
            grad = np.zeros((len(active), n, n), dtype=value.dtype)
        grad = np.asarray(grad)
        if grad.shape != (len(active), n, n):
            raise ValueError(f"grad shape {grad.shape} does not match ({len(active)}, {n}, {n})")
        if symmetry not in _TAGS:
            raise ValueError(f"unknown symmetry tag {symmetry!r}")
        self.window = window
        self.value = value
        self.grad = grad
        self.active = active
        self.symmetry = symmetry
        self.dropped_mass = float(dropped_mass)

    # -- constructors -------------------------------------------------------
    @classmethod
    def zeros(cls, window: SiteWindow, active: Sequence[int] = (), dtype=float,
              symmetry: str = SELF_ADJOINT) -> "LatticeOperator":
        n = window.size
        return cls(window, np.zeros((n, n), dtype=dtype),
                   np.zeros((len(active), n, n), dtype=dtype), active, symmetry)

    @classmethod
    def identity(cls, window: SiteWindow, active: Sequence[int] = ()) -> "LatticeOperator":
        op = cls.zeros(window, active)
        np.fill_diagonal(op.value, 1.0)
        return op

    @classmethod
    def diagonal(cls, window: SiteWindow, values, grads=None,
                 active: Sequence[int] = ()) -> "LatticeOperator":
        """Diagonal operator; ``grads`` has shape (P, N) if given."""
        values = np.asarray(values)
        n = window.size
        value = np.diag(values)
        grad = np.zeros((len(active), n, n), dtype=value.dtype)
        if grads is not None:
            grads = np.asarray(grads)
            idx = np.arange(n)
            grad[:, idx, idx] = grads
        sym = SELF_ADJOINT if np.isrealobj(values) else NO_SYMMETRY
        return cls(window, value, grad, active, sym)

    @classmethod
    def toeplitz(cls, window: SiteWindow, bands: dict, active: Sequence[int] = (),
                 symmetry: str = NO_SYMMETRY) -> "LatticeOperator":
        """Constant-diagonal operator; ``bands[l]`` is the value on ``m - n = l``."""
        n = window.size
        value = np.zeros((n, n), dtype=np.result_type(*[type(v) for v in bands.values()], float))
        for l, v in bands.items():
            value += v * np.eye(n, k=-l)
        return cls(window, value, None, active, symmetry)

    # -- basic accessors ----------------------------------------------------
    @property
    def n_params(self) -> int:
        return len(self.active)

    def entry(self, m: int, n: int) -> DualScalar:
        i, j = self.window.index(m), self.window.index(n)
        return DualScalar(self.value[i, j], self.grad[:, i, j].copy())

    def diag_values(self) -> np.ndarray:
        return np.diagonal(self.value).copy()

    def diag_grads(self) -> np.ndarray:
        """Gradients of the diagonal, shape (P, N)."""
        return np.diagonal(self.grad, axis1=1, axis2=2).copy()

    def diag_part(self) -> "LatticeOperator":
        n = self.window.size
        idx = np.arange(n)
        value = np.zeros_like(self.value)
        value[idx, idx] = self.value[idx, idx]
        grad = np.zeros_like(self.grad)
        grad[:, idx, idx] = self.grad[:, idx, idx]
        return LatticeOperator(self.window, value, grad, self.active, SELF_ADJOINT
                               if np.isrealobj(value) else NO_SYMMETRY)

    def adjoint(self) -> "LatticeOperator":
        return LatticeOperator(self.window, self.value.conj().T, np.conj(np.swapaxes(self.grad, 1, 2)),
                               self.active, self.symmetry, self.dropped_mass)

    def copy(self) -> "LatticeOperator":
        return LatticeOperator(self.window, self.value.copy(), self.grad.copy(), self.active,
                               self.symmetry, self.dropped_mass)

    def with_symmetry(self, tag: str) -> "LatticeOperator":
        return LatticeOperator(self.window, self.value, self.grad, self.active, tag, self.dropped_mass)

    def max_entry(self) -> float:
        return float(np.max(np.abs(self.value))) if self.value.size else 0.0

    def restrict(self, sub: SiteWindow) -> "LatticeOperator":
        """Sub-block on a smaller window (gradients kept)."""
        a, b = self.window.index(sub.lo), self.window.index(sub.hi) + 1
        return LatticeOperator(sub, self.value[a:b, a:b].copy(), self.grad[:, a:b, a:b].copy(),
                               self.active, self.symmetry, self.dropped_mass)

    def select_params(self, sites: Sequence[int]) -> "LatticeOperator":
        """Keep only the gradient components of the given active sites."""
        pos = [self.active.index(s) for s in sites]
        return LatticeOperator(self.window, self.value, self.grad[pos], tuple(sites),
                               self.symmetry, self.dropped_mass)

    def symmetry_defect(self) -> float:
        """Max deviation from the tagged symmetry (0 for untagged operators)."""
        if self.symmetry == NO_SYMMETRY:
            return 0.0
        sign = 1.0 if self.symmetry == SELF_ADJOINT else -1.0
        d = np.max(np.abs(self.value - sign * self.value.conj().T), initial=0.0)
        if self.grad.size:
            d = max(d, np.max(np.abs(self.grad - sign * np.conj(np.swapaxes(self.grad, 1, 2)))))
        return float(d)

    # -- linear structure ---------------------------------------------------
    def _check_compatible(self, other: "LatticeOperator"):
        if self.window != other.window:
            raise ValueError(f"window mismatch: {self.window} vs {other.window}")

    def _grads_with(self, other: "LatticeOperator"):
        """Return (grad_self, grad_other, active) on a common parameter list."""
        if self.active == other.active:
            return self.grad, other.grad, self.active
        if not other.active:
            return self.grad, np.zeros_like(self.grad, dtype=np.result_type(self.grad, other.grad)), self.active
        if not self.active:
            return np.zeros_like(other.grad, dtype=np.result_type(self.grad, other.grad)), other.grad, other.active
        raise ValueError("active parameter lists differ")

    def __add__(self, other: "LatticeOperator") -> "LatticeOperator":
        self._check_compatible(other)
        ga, gb, act = self._grads_with(other)
        tag = self.symmetry if self.symmetry == other.symmetry else NO_SYMMETRY
        return LatticeOperator(self.window, self.value + other.value, ga + gb, act, tag,
                               self.dropped_mass + other.dropped_mass)

    def __neg__(self) -> "LatticeOperator":
        return LatticeOperator(self.window, -self.value, -self.grad, self.active, self.symmetry,
                               self.dropped_mass)

    def __sub__(self, other: "LatticeOperator") -> "LatticeOperator":
        return self + (-other)

    def scale(self, c) -> "LatticeOperator":
        tag = self.symmetry
        if np.iscomplexobj(c) and np.imag(c) != 0:
            if np.real(c) == 0 and tag != NO_SYMMETRY:
                tag = SKEW_ADJOINT if tag == SELF_ADJOINT else SELF_ADJOINT
            else:
                tag = NO_SYMMETRY
        return LatticeOperator(self.window, c * self.value, c * self.grad, self.active, tag,
                               abs(c) * self.dropped_mass)

    def __mul__(self, c) -> "LatticeOperator":
        return self.scale(c)

    __rmul__ = __mul__

    def __matmul__(self, other: "LatticeOperator") -> "LatticeOperator":
        return op_mul(self, other)

    # -- band view / serialization -----------------------------------------
    def bands(self, tol: float = 0.0) -> dict:
        """Map ``l = m - n`` to (values, grads) along that diagonal.

        Only diagonals with some entry above ``tol`` (value or gradient) are listed.
        """
        n = self.window.size
        out = {}
        for off in range(-(n - 1), n):
            v = np.diagonal(self.value, off)
            g = np.diagonal(self.grad, off, axis1=1, axis2=2)
            if np.max(np.abs(v), initial=0.0) > tol or (g.size and np.max(np.abs(g)) > tol):
                out[-off] = (v.copy(), g.copy())
        return out

    def to_dict(self, tol: float = 0.0) -> dict:
        cplx = np.iscomplexobj(self.value) or np.iscomplexobj(self.grad)
        bands = {}
        for l, (v, g) in sorted(self.bands(tol).items()):
            entry = {"re": np.real(v).tolist()}
            if self.n_params:
                entry["grad_re"] = np.real(g).tolist()
            if cplx:
                entry["im"] = np.imag(v).tolist()
                if self.n_params:
                    entry["grad_im"] = np.imag(g).tolist()
            bands[str(l)] = entry
        return {"window": [self.window.lo, self.window.hi], "active": list(self.active),
                "symmetry": self.symmetry, "dropped_mass": self.dropped_mass, "bands": bands}

    @classmethod
    def from_dict(cls, data: dict) -> "LatticeOperator":
        window = SiteWindow(*data["window"])
        active = tuple(data.get("active", ()))
        n = window.size
        cplx = any("im" in b for b in data["bands"].values())
        dtype = complex if cplx else float
        value = np.zeros((n, n), dtype=dtype)
        grad = np.zeros((len(active), n, n), dtype=dtype)
        for key, b in data["bands"].items():
            l = int(key)
            off = -l
            rows = np.arange(max(0, -off), min(n, n - off))
            cols = rows + off
            v = np.asarray(b["re"], dtype=float)
            if cplx:
                v = v + 1j * np.asarray(b.get("im", np.zeros_like(v)))
            value[rows, cols] = v
            if active:
                g = np.asarray(b["grad_re"], dtype=float)
                if cplx and "grad_im" in b:
                    g = g + 1j * np.asarray(b["grad_im"])
                grad[:, rows, cols] = g
        return cls(window, value, grad, active, data.get("symmetry", NO_SYMMETRY),
                   data.get("dropped_mass", 0.0))


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def _diag_max_profile(a: np.ndarray) -> np.ndarray:
    """For a (..., N, N) array, max |entry| on each diagonal, ordered by offset -(N-1)..(N-1)."""
    n = a.shape[-1]
    out = np.empty(a.shape[:-2] + (2 * n - 1,))
    absa = np.abs(a)
    for j, off in enumerate(range(-(n - 1), n)):
        out[..., j] = np.diagonal(absa, off, axis1=-2, axis2=-1).max(axis=-1)
    return out


def weighted_norm(A: LatticeOperator, r: float = 0.125, alpha: float = 0.1) -> WeightedNormValue:
    """Exponentially weighted norm ``sum_l e^{r|l|} max_{m-n=l} |A_mn|``.

    The derivative-augmented version adds ``alpha * max_j`` of the same weighted
    sum applied to ``dA/dv_j``.

    Parameters
    ----------
    A : LatticeOperator
    r : float
        Exponential weight, must be positive.
    alpha : float
        Derivative weight in (0, 1).
    """
    if not r > 0:
        raise ValueError("r must be positive")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    bad = ~np.isfinite(A.value)
    if A.grad.size:
        bad = bad | ~np.all(np.isfinite(A.grad), axis=0)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValueError(f"non-finite entry at (m, n) = ({A.window.lo + i}, {A.window.lo + j})")
    n = A.window.size
    weights = np.exp(r * np.abs(np.arange(-(n - 1), n)))
    plain = float(_diag_max_profile(A.value) @ weights)
    deriv = 0.0
    if A.n_params:
        deriv = float(np.max(_diag_max_profile(A.grad) @ weights))
    return WeightedNormValue(plain, plain + alpha * deriv, r, alpha, deriv)


def norm_value(A: LatticeOperator, r: float = 0.125, alpha: float = 0.1) -> float:
    """The derivative-augmented norm when gradients are carried, else the plain one."""
    w = weighted_norm(A, r, alpha)
    return w.with_deriv if A.n_params else w.plain


# ---------------------------------------------------------------------------
# products, commutators, exponentials
# ---------------------------------------------------------------------------

def _batched_right(g: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``g[p] @ b`` for every p, as one matrix product."""
    p, n, _ = g.shape
    return (g.reshape(p * n, n) @ b).reshape(p, n, n)


def _batched_left(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``a @ g[p]`` for every p, as one matrix product."""
    p, n, _ = g.shape
    flat = np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(n, p * n)
    return (a @ flat).reshape(n, p, n).transpose(1, 0, 2)


def op_mul(A: LatticeOperator, B: LatticeOperator, band_cap: int | None = None) -> LatticeOperator:
    """Matrix product with the product rule on gradients.

    Parameters
    ----------
    band_cap : int, optional
        If given, entries with ``|m - n| > band_cap`` are dropped and their
        total absolute value is added to ``dropped_mass``.
    """
    A._check_compatible(B)
    ga, gb, act = A._grads_with(B)
    value = A.value @ B.value
    if act:
        grad = _batched_right(ga, B.value) + _batched_left(A.value, gb)
    else:
        grad = np.zeros((0,) + value.shape, dtype=value.dtype)
    tag = NO_SYMMETRY
    if A is B and A.symmetry != NO_SYMMETRY:
        tag = SELF_ADJOINT
    dropped = A.dropped_mass + B.dropped_mass
    if band_cap is not None:
        n = A.window.size
        far = np.abs(np.subtract.outer(np.arange(n), np.arange(n))) > band_cap
        dropped += float(np.abs(value[far]).sum())
        value = np.where(far, 0, value)
        if act:
            grad = np.where(far[None], 0, grad)
    return LatticeOperator(A.window, value, grad, act, tag, dropped)


def ad(W: LatticeOperator, X: LatticeOperator) -> LatticeOperator:
    """Commutator ``[W, X] = WX - XW``.

    When ``W`` is skew-adjoint and ``X`` carries a symmetry tag, ``XW`` is the
    (signed) adjoint of ``WX`` and only one product is formed.
    """
    if W.symmetry == SKEW_ADJOINT and X.symmetry in (SELF_ADJOINT, SKEW_ADJOINT):
        wx = op_mul(W, X)
        adj = wx.adjoint()
        if X.symmetry == SELF_ADJOINT:
            out = LatticeOperator(W.window, wx.value + adj.value, wx.grad + adj.grad, wx.active,
                                  SELF_ADJOINT, wx.dropped_mass)
        else:
            out = LatticeOperator(W.window, wx.value - adj.value, wx.grad - adj.grad, wx.active,
                                  SKEW_ADJOINT, wx.dropped_mass)
        return out
    out = op_mul(W, X) - op_mul(X, W)
    return out.with_symmetry(NO_SYMMETRY)


def _exp_tail(x: float, J: int) -> float:
    """Upper bound on ``sum_{j>J} x^j / j!`` for ``x >= 0``."""
    if x == 0:
        return 0.0
    term = math.exp((J + 1) * math.log(x) - math.lgamma(J + 2))
    ratio = x / (J + 2)
    if ratio >= 1:
        return math.inf
    return term / (1 - ratio)


def op_exp(W: LatticeOperator, tail_tol: float = 1e-16, r: float = 0.125, alpha: float = 0.1,
           j_max: int = 64) -> tuple[LatticeOperator, float]:
    """Truncated exponential ``sum_{j<=J} W^j / j!`` with certified tail.

    Returns
    -------
    (expW, tail_bound)
    """
    x = norm_value(W, r, alpha)
    J = 0
    while _exp_tail(x, J) > tail_tol:
        J += 1
        if J > j_max:
            raise SeriesTailError(f"exp tail {_exp_tail(x, j_max):.3g} above {tail_tol:.3g} within J_max={j_max}")
    result = LatticeOperator.identity(W.window, W.active)
    if W.n_params == 0:
        result = LatticeOperator.identity(W.window)
    term = result
    for j in range(1, J + 1):
        term = op_mul(term, W).scale(1.0 / j)
        result = result + term
    result = result.with_symmetry(NO_SYMMETRY)
    result.dropped_mass = W.dropped_mass
    return result, _exp_tail(x, J)


def mul_exp(G: LatticeOperator, W: LatticeOperator, tail_tol: float = 1e-16, r: float = 0.125,
            alpha: float = 0.1, j_max: int = 64) -> tuple[LatticeOperator, float]:
    """``G @ exp(W)`` evaluated as ``sum_j G W^j / j!`` without forming ``exp(W)``."""
    x = norm_value(W, r, alpha)
    J = 0
    while _exp_tail(x, J) > tail_tol:
        J += 1
        if J > j_max:
            raise SeriesTailError(f"exp tail above {tail_tol:.3g} within J_max={j_max}")
    result = G.with_symmetry(NO_SYMMETRY)
    term = result
    for j in range(1, J + 1):
        term = op_mul(term, W).scale(1.0 / j)
        result = result + term
    g_norm = norm_value(G, r, alpha)
    return result.with_symmetry(NO_SYMMETRY), g_norm * _exp_tail(x, J)


def commutator_series(W: LatticeOperator, X: LatticeOperator, tail_tol: float = 1e-16,
                      r: float = 0.125, alpha: float = 0.1, n_max: int = 64,
                      start: int = 1) -> tuple[LatticeOperator, float]:
    """``sum_{n>=start} ad_W^n(X) / n!`` with tail certified by ``||ad_W Y|| <= 2||W|| ||Y||``.

    Returns
    -------
    (series, tail_bound)
    """
    w = 2.0 * norm_value(W, r, alpha)
    xn = norm_value(X, r, alpha)
    first = ad(W, X)
    if not np.any(first.value) and not np.any(first.grad):
        return LatticeOperator.zeros(X.window, first.active, first.value.dtype, first.symmetry), 0.0
    N = start
    while xn * _exp_tail(w, N) > tail_tol:
        N += 1
        if N > n_max:
            raise SeriesTailError(f"commutator tail above {tail_tol:.3g} within n_max={n_max}")
    term = X
    total = None
    for n in range(1, N + 1):
        term = (first if n == 1 else ad(W, term)).scale(1.0 / n)
        if n >= start:
            total = term if total is None else total + term
    if total is None:
        total = LatticeOperator.zeros(X.window, X.active, X.value.dtype, X.symmetry)
    return total, xn * _exp_tail(w, N)


def hopping(window: SiteWindow) -> LatticeOperator:
    """Nearest-neighbour hopping matrix (ones on ``|m - n| = 1``)."""
    return LatticeOperator.toeplitz(window, {1: 1.0, -1: 1.0}, symmetry=SELF_ADJOINT)


def random_banded(window: SiteWindow, bandwidth: int, rng: np.random.Generator,
                  active: Sequence[int] = (), scale: float = 1.0,
                  symmetry: str = NO_SYMMETRY, decay: float = 0.0) -> LatticeOperator:
    """Random operator supported on ``|m - n| <= bandwidth`` (for tests and experiments)."""
    n = window.size
    dist = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    mask = dist <= bandwidth
    damp = np.exp(-decay * dist)
    value = scale * rng.uniform(-1, 1, (n, n)) * mask * damp
    grad = scale * rng.uniform(-1, 1, (len(active), n, n)) * mask * damp
    if symmetry == SELF_ADJOINT:
        value = 0.5 * (value + value.T)
        grad = 0.5 * (grad + np.swapaxes(grad, 1, 2))
    elif symmetry == SKEW_ADJOINT:
        value = 0.5 * (value - value.T)
        grad = 0.5 * (grad - np.swapaxes(grad, 1, 2))
    return LatticeOperator(window, value, grad, active, symmetry)

