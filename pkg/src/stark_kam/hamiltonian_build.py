"""Quartic Hamiltonian in the frame that diagonalizes the linear operator.

With ``u = G q`` the lattice equation becomes ``i dq_n/dt = -dH/d(conj q_n)``,

    H(q, conj q) = sum_m d_m |q_m|^2
                   + eps * sum_{m, m1, m2, m3} T_{m m1 m2 m3} q_m1 conj(q_m2) q_m3 conj(q_m),

    T_{m m1 m2 m3} = 1/2 sum_k G_km G_km1 G_km2 G_km3.

Since ``G`` is real the tensor is fully symmetric in its four indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .weighted_ops import DualScalar, LatticeOperator, SiteWindow


@dataclass
class QuarticTensor:
    """Pruned coefficient list of the quartic part.

    Attributes
    ----------
    window : SiteWindow
        Sites the indices range over (the interior of the diagonalization window).
    indices : ndarray, shape (K, 4)
        Site labels ``(m, m1, m2, m3)`` of the kept entries.
    values : ndarray, shape (K,)
    grads : ndarray, shape (K, P)
        Derivatives with respect to ``active`` disorder sites.
    prune_tol : float
    dropped_mass : float
        Sum of ``|T|`` over discarded entries.
    factor, factor_grad : ndarray
        Columns of ``G`` restricted to ``window`` (all rows), used for the
        factorized contraction.
    """

    window: SiteWindow
    indices: np.ndarray
    values: np.ndarray
    grads: np.ndarray
    active: tuple = ()
    prune_tol: float = 1e-14
    dropped_mass: float = 0.0
    factor: np.ndarray | None = field(default=None, repr=False)
    factor_grad: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self._lookup = None

    def __len__(self) -> int:
        return len(self.values)

    @property
    def coeffs(self) -> dict:
        """Mapping ``(m, m1, m2, m3) -> DualScalar`` (built lazily)."""
        if self._lookup is None:
            self._lookup = {tuple(int(x) for x in idx): i for i, idx in enumerate(self.indices)}
        return {key: DualScalar(self.values[i], self.grads[i]) for key, i in self._lookup.items()}

    def get(self, m: int, m1: int, m2: int, m3: int) -> float:
        if self._lookup is None:
            self._lookup = {tuple(int(x) for x in idx): i for i, idx in enumerate(self.indices)}
        i = self._lookup.get((m, m1, m2, m3))
        return 0.0 if i is None else float(self.values[i])

    def dense(self) -> np.ndarray:
        """Dense ``(N, N, N, N)`` array over ``window`` (small windows only)."""
        n = self.window.size
        out = np.zeros((n, n, n, n))
        loc = self.indices - self.window.lo
        out[loc[:, 0], loc[:, 1], loc[:, 2], loc[:, 3]] = self.values
        return out

    # -- Hamiltonian evaluation -------------------------------------------
    def quartic_energy(self, q: np.ndarray) -> complex:
        """``sum T q_m1 conj(q_m2) q_m3 conj(q_m)`` for ``q`` indexed over ``window``."""
        loc = self.indices - self.window.lo
        qc = np.conj(q)
        return np.sum(self.values * q[loc[:, 1]] * qc[loc[:, 2]] * q[loc[:, 3]] * qc[loc[:, 0]])

    def dqbar(self, q: np.ndarray) -> np.ndarray:
        """``d/d(conj q_n)`` of the quartic sum, from the stored entries."""
        loc = self.indices - self.window.lo
        qc = np.conj(q)
        out = np.zeros(self.window.size, dtype=complex)
        np.add.at(out, loc[:, 0], self.values * q[loc[:, 1]] * qc[loc[:, 2]] * q[loc[:, 3]])
        np.add.at(out, loc[:, 2], self.values * q[loc[:, 1]] * q[loc[:, 3]] * qc[loc[:, 0]])
        return out

    def dqbar_factored(self, q: np.ndarray) -> np.ndarray:
        """Same as :meth:`dqbar` through ``G^T (|Gq|^2 Gq)`` (no pruning)."""
        if self.factor is None:
            raise ValueError("tensor was built without its factor")
        u = self.factor @ q
        return self.factor.T @ (np.abs(u) ** 2 * u)

    # -- checks ------------------------------------------------------------
    def decay_ratios(self) -> tuple[float, float]:
        """Max of ``|T| / (24 e^{-spread/8})`` and of ``0.1 max|dT| / (24 e^{-spread/8})``."""
        spread = self.indices.max(axis=1) - self.indices.min(axis=1)
        bound = 24.0 * np.exp(-spread / 8.0)
        val = float(np.max(np.abs(self.values) / bound, initial=0.0))
        der = 0.0
        if self.grads.size:
            der = float(np.max(0.1 * np.max(np.abs(self.grads), axis=1) / bound, initial=0.0))
        return val, der

    def to_dict(self) -> dict:
        return {"window": [self.window.lo, self.window.hi], "active": list(self.active),
                "prune_tol": self.prune_tol, "dropped_mass": self.dropped_mass,
                "indices": self.indices.tolist(), "values": self.values.tolist(),
                "grads": self.grads.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "QuarticTensor":
        active = tuple(data.get("active", ()))
        values = np.asarray(data["values"], dtype=float)
        grads = np.asarray(data["grads"], dtype=float).reshape(len(values), len(active))
        return cls(SiteWindow(*data["window"]), np.asarray(data["indices"], dtype=int).reshape(-1, 4),
                   values, grads, active, data["prune_tol"], data["dropped_mass"])


def build_quartic(G: LatticeOperator, prune_tol: float = 1e-14, window: SiteWindow | None = None,
                  active: Sequence[int] | None = ()) -> QuarticTensor:
    """Quartic coefficients ``1/2 sum_k G_km G_km1 G_km2 G_km3`` over ``window``.

    Parameters
    ----------
    G : LatticeOperator
        Real orthogonal frame change from :func:`diagonalize`.
    prune_tol : float
        Entries whose value and gradient are both below this are dropped.
    window : SiteWindow, optional
        Index range, default the interior of ``G.window``.
    active : sequence of int, optional
        Subset of ``G.active`` whose gradients are propagated (default none).
    """
    window = G.window.interior() if window is None else window
    a, b = G.window.index(window.lo), G.window.index(window.hi) + 1
    cols = np.asarray(G.value[:, a:b], dtype=float)
    active = tuple(active or ())
    pos = [G.active.index(s) for s in active]
    gcols = np.asarray(G.grad[pos][:, :, a:b], dtype=float) if active else np.zeros((0,) + cols.shape)
    n = b - a
    scale = np.max(np.abs(cols))
    idx_list, val_list, grad_list = [], [], []
    dropped = 0.0
    sites = window.sites
    for i in range(n):
        gm = cols[:, i]
        rows = np.abs(gm) > 1e-18 * scale
        Gi = cols[rows]
        gmr = gm[rows]
        block = 0.5 * np.einsum("k,ka,kb,kc->abc", gmr, Gi, Gi, Gi, optimize=True)
        gblocks = []
        for p in range(len(active)):
            dG = gcols[p][rows]
            dgm = dG[:, i]
            gb = np.einsum("k,ka,kb,kc->abc", dgm, Gi, Gi, Gi, optimize=True)
            t = np.einsum("k,ka,kb,kc->abc", gmr, dG, Gi, Gi, optimize=True)
            gb += t + t.transpose(1, 0, 2) + t.transpose(1, 2, 0)
            gblocks.append(0.5 * gb)
        keep = np.abs(block) > prune_tol
        if gblocks:
            gstack = np.stack(gblocks, axis=-1)
            keep |= np.max(np.abs(gstack), axis=-1) > prune_tol
        dropped += float(np.abs(block[~keep]).sum())
        a1, a2, a3 = np.nonzero(keep)
        idx_list.append(np.column_stack([np.full(len(a1), sites[i]), sites[a1], sites[a2], sites[a3]]))
        val_list.append(block[keep])
        grad_list.append(gstack[keep] if gblocks else np.zeros((len(a1), 0)))
    indices = np.concatenate(idx_list).astype(int)
    values = np.concatenate(val_list)
    grads = np.concatenate(grad_list)
    return QuarticTensor(window, indices, values, grads, active, prune_tol, dropped, cols, gcols)


def build_quartic_naive(G: np.ndarray, lo: int, window: SiteWindow) -> dict:
    """Reference quadruple loop (plus the inner sum over ``k``); O(N^5)."""
    n_rows = G.shape[0]
    out = {}
    sites = list(window.sites)
    for m in sites:
        for m1 in sites:
            for m2 in sites:
                for m3 in sites:
                    s = 0.0
                    for k in range(n_rows):
                        s += G[k, m - lo] * G[k, m1 - lo] * G[k, m2 - lo] * G[k, m3 - lo]
                    out[(m, m1, m2, m3)] = 0.5 * s
    return out


@dataclass
class QuarticHamiltonian:
    """``H = sum d_m |q_m|^2 + eps * quartic``, indexed over ``T.window``."""

    d: np.ndarray
    T: QuarticTensor
    eps: float
    d_grads: np.ndarray | None = None
    model: dict | None = None

    def energy(self, q: np.ndarray) -> float:
        return float(np.real(np.sum(self.d * np.abs(q) ** 2) + self.eps * self.T.quartic_energy(q)))

    def i_qdot(self, q: np.ndarray, factored: bool = False) -> np.ndarray:
        return hamiltonian_vector_field(self.d, self.T, self.eps, q, factored)

    def qdot(self, q: np.ndarray, factored: bool = False) -> np.ndarray:
        return -1j * self.i_qdot(q, factored)

    def to_dict(self) -> dict:
        return {"eps": self.eps, "d": self.d.tolist(),
                "d_grads": None if self.d_grads is None else self.d_grads.tolist(),
                "tensor": self.T.to_dict(), "model": self.model}

    @classmethod
    def from_dict(cls, data: dict) -> "QuarticHamiltonian":
        T = QuarticTensor.from_dict(data["tensor"])
        dg = data.get("d_grads")
        return cls(np.asarray(data["d"]), T, data["eps"],
                   None if dg is None else np.asarray(dg).reshape(len(T.active), -1), data.get("model"))


def hamiltonian_vector_field(d: np.ndarray, T: QuarticTensor, eps: float, q: np.ndarray,
                             factored: bool = False) -> np.ndarray:
    """``i dq/dt = -d q - eps * dQuartic/d(conj q)``.

    Parameters
    ----------
    d : ndarray
        Eigenvalues on ``T.window``.
    factored : bool
        Contract through ``G`` instead of the stored entries.
    """
    q = np.asarray(q, dtype=complex)
    nonlin = T.dqbar_factored(q) if factored else T.dqbar(q)
    return -d * q - eps * nonlin


def rk4_flow(H: QuarticHamiltonian, q0: np.ndarray, T_end: float, dt: float,
             stride: int = 1, factored: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Classical RK4 in the diagonal frame; returns ``(times, states)`` at ``stride``."""
    steps = int(round(T_end / dt))
    q = np.asarray(q0, dtype=complex).copy()
    times, states = [0.0], [q.copy()]
    f = lambda x: H.qdot(x, factored)
    for s in range(1, steps + 1):
        k1 = f(q)
        k2 = f(q + 0.5 * dt * k1)
        k3 = f(q + 0.5 * dt * k2)
        k4 = f(q + dt * k3)
        q = q + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if s % stride == 0:
            times.append(s * dt)
            states.append(q.copy())
    return np.asarray(times), np.asarray(states)


def hamiltonian_from_result(result, eps: float, prune_tol: float = 1e-14,
                            window: SiteWindow | None = None,
                            active: Sequence[int] = ()) -> QuarticHamiltonian:
    """Assemble the quartic Hamiltonian from a diagonalization result."""
    window = result.window.interior() if window is None else window
    T = build_quartic(result.G, prune_tol, window, active)
    a, b = result.window.index(window.lo), result.window.index(window.hi) + 1
    d = result.eigenvalues[a:b].copy()
    pos = [result.active.index(s) for s in active]
    dg = result.eigen_grads[pos][:, a:b] if active else None
    return QuarticHamiltonian(d, T, eps, dg, result.model.to_dict())
