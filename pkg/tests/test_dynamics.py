import numpy as np
import pytest

from stark_kam.dynamics import (
    BandPropagator,
    LatticeState,
    energy,
    integrate,
    quasiperiodicity_defect,
    recover_frequency,
    verify_localization,
)
from stark_kam.hamiltonian_build import build_quartic, hamiltonian_from_result, rk4_flow
from stark_kam.linear_kam import StarkModel, diagonalize
from stark_kam.nonlinear_kam import TangentialConfig, action_angle_reduce, embed_torus
from stark_kam.weighted_ops import SiteWindow

W16 = SiteWindow(-16, 16)


@pytest.fixture(scope="module")
def model16():
    return StarkModel.from_seed(W16, 1 / 60, 4)


def localized(window, amp=0.1):
    u = np.zeros(window.size, dtype=complex)
    u[window.index(0)] = amp
    u[window.index(1)] = 0.5j * amp
    return LatticeState(window, u)


def test_decoupled_oscillators():
    base = StarkModel.from_seed(SiteWindow(-6, 6), 0.0, 1)
    rng = np.random.default_rng(0)
    u0 = rng.normal(size=13) + 1j * rng.normal(size=13)
    traj = integrate(base, 0.0, LatticeState(base.window, u0), 5.0, 1e-3, "splitstep", stride=1000)
    for scheme_traj in (traj, integrate(base, 0.0, LatticeState(base.window, u0), 5.0, 1e-3, "rk4", 1000)):
        np.testing.assert_allclose(np.abs(scheme_traj.states), np.abs(u0)[None, :].repeat(6, 0), atol=1e-9)
        freq = base.window.sites + base.disorder
        expected = u0 * np.exp(1j * freq * 5.0)
        np.testing.assert_allclose(scheme_traj.states[-1], expected, atol=1e-9)


def test_band_propagator_matches_expm(model16):
    L = model16.dense()
    p = BandPropagator.build(L, 1e-3)
    assert p.dropped_mass < 1e-15
    u = np.random.default_rng(1).normal(size=L.shape[0]).astype(complex)
    from scipy.linalg import expm
    ref = expm(1j * 1e-3 * L) @ u
    n = len(u)
    got = np.zeros(n, dtype=complex)
    for o in range(-p.width, p.width + 1):
        i = np.arange(max(0, -o), min(n, n - o))
        got[i] += p.band[i, o + p.width] * u[i + o]
    np.testing.assert_allclose(got, ref, atol=1e-15)


def test_mass_conservation_splitstep(model16):
    traj = integrate(model16, 1.0, localized(W16), 1000.0, 1e-3, "splitstep", stride=10_000)
    assert traj.mass_drift <= 1e-8


def test_energy_conservation_rk4(model16):
    traj = integrate(model16, 1.0, localized(W16), 1000.0, 1e-3, "rk4", stride=10_000)
    assert traj.energy_drift <= 1e-6
    assert traj.mass_drift <= 1e-8


def test_eigenvector_stays_put(model16):
    vals, vecs = np.linalg.eigh(model16.dense())
    j = int(np.argmin(np.abs(vals)))
    psi = vecs[:, j]
    traj = integrate(model16, 0.0, LatticeState(W16, psi.astype(complex)), 50.0, 1e-3, "splitstep", 1000)
    np.testing.assert_allclose(np.abs(traj.states @ psi), 1.0, atol=1e-6)
    assert recover_frequency(traj, psi) == pytest.approx(vals[j], abs=1e-9)


def test_rk4_step_limit(model16):
    with pytest.raises(ValueError, match="rk4"):
        integrate(model16, 0.0, localized(W16), 1.0, 0.01, "rk4")


def test_frame_change_consistency(model16):
    res = diagonalize(model16)
    H = hamiltonian_from_result(res, eps=0.5)
    win = res.window.interior()
    a = res.window.index(win.lo)
    Gi = res.G.value[:, a:a + win.size]
    q0 = np.zeros(win.size, dtype=complex)
    q0[win.index(0)] = 0.1
    q0[win.index(1)] = 0.05j
    _, qs = rk4_flow(H, q0, 100.0, 1e-2, stride=5000)
    traj = integrate(model16, 0.5, LatticeState(W16, Gi @ q0), 100.0, 1e-3, "splitstep", stride=50_000)
    back = traj.states[-1] @ Gi
    assert np.max(np.abs(back - qs[-1])) <= 1e-6


@pytest.mark.parametrize("d", [1.0, 2.0, 4.0])
def test_linear_localization_bounded(d):
    m = StarkModel.from_seed(SiteWindow(-32, 32), 1 / 60, 0)
    traj = integrate(m, 0.0, LatticeState.delta(m.window), 1000.0, 1e-2, "splitstep", stride=100)
    diag = verify_localization(traj, d=d)
    assert diag.bounded and not diag.truncation_contaminated


def test_free_hopping_control_spreads():
    m = StarkModel.from_seed(SiteWindow(-80, 80), 1 / 60, 0)
    traj = integrate(m, 0.0, LatticeState.delta(m.window), 1000.0, 1e-2, "splitstep", stride=100,
                     stark=False, disorder=False)
    diag = verify_localization(traj, d=2.0)
    assert diag.ratio > 10 and not diag.bounded


def test_unperturbed_torus_has_no_defect():
    m = StarkModel.from_seed(SiteWindow(-16, 16), 1 / 60, 0)
    res = diagonalize(m, active=(0,))
    win = res.window.interior()
    a = res.window.index(win.lo)
    T = build_quartic(res.G, active=(0,), window=win)
    cfg = TangentialConfig((0,), eps=0.0)
    red = action_angle_reduce(T, res.eigenvalues[a:a + win.size], cfg, res.eigen_grads[:, a:a + win.size])
    sampler = embed_torus([], red.normal_form, cfg, res.G.value[:, a:a + win.size], win.sites)
    traj = integrate(m, 0.0, LatticeState(m.window, sampler(0.0)[0]), 100.0, 1e-2, "splitstep", stride=100)
    assert quasiperiodicity_defect(traj, sampler)["defect"] <= 1e-10


def test_energy_formula():
    m = StarkModel.from_seed(SiteWindow(-2, 2), 0.1, 0)
    u = np.arange(5) + 1j
    L = m.dense()
    assert energy(L, 0.3, u)[0] == pytest.approx((u.conj() @ L @ u).real + 0.15 * np.sum(np.abs(u) ** 4))


def test_csv_columns(model16):
    traj = integrate(model16, 0.0, localized(W16), 1.0, 1e-2, "splitstep", stride=50)
    lines = traj.to_csv().splitlines()
    assert lines[0] == "t,mass,energy,M_d,edge_mass" and len(lines) == 4
