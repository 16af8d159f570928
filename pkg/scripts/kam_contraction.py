"""One nonlinear KAM step per eps: contraction exponent and normal-form drift."""
import argparse
import time

from stark_kam.hamiltonian_build import build_quartic
from stark_kam.linear_kam import StarkModel, diagonalize
from stark_kam.nonlinear_kam import TangentialConfig, contraction_exponent, run_kam
from stark_kam.weighted_ops import SiteWindow


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--window", default="-16:16")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--K", type=int, default=8)
    ap.add_argument("--eps", type=float, nargs="+", default=[1e-5, 1e-6, 1e-7, 1e-8])
    args = ap.parse_args()

    model = StarkModel.from_seed(SiteWindow.parse(args.window), 1 / 60, args.seed)
    res = diagonalize(model, active=(0,))
    T = build_quartic(res.G, active=(0,))
    iw = res.window.interior()
    a = res.window.index(iw.lo)
    d, dg = res.eigenvalues[a:a + iw.size], res.eigen_grads[:, a:a + iw.size]
    print("eps,exponent,X_P_low,X_P_low_plus,omega_drift,omega_bound,Omega_drift,checks_ok,seconds")
    for eps in args.eps:
        t0 = time.perf_counter()
        run = run_kam(T, d, TangentialConfig((0,), eps=eps, xi=(model.v(0),)), dg, steps=1, K_override=args.K)
        lg = run.logs[0]
        n = lg["norms"]
        ok = all(c["passed"] for c in lg["checks"])
        print(f"{eps:.0e},{contraction_exponent(lg):.4f},{n['X_P_low']:.3e},{n['X_P_low_plus']:.3e},"
              f"{n['omega_drift']:.3e},{eps ** (5 / 6):.3e},{n['Omega_drift']:.3e},{ok},"
              f"{time.perf_counter() - t0:.1f}")


if __name__ == "__main__":
    main()
