"""Command line entry point ``stark-kam``.

Subcommands: ``diagonalize``, ``hamiltonian``, ``kam``, ``measure``, ``evolve``,
``check-bounds``, ``report`` and ``run`` (all stages from one config file).

Every JSON artifact is written with sorted keys and embeds the run configuration,
its SHA-256 hash and a version string. CSV artifacts carry the same provenance in
leading ``#`` comment lines. Exit codes: 0 all asserted bounds hold, 1 a bound or
non-resonance condition failed, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .errors import BoundViolation, ResonanceError, SeriesTailError, SiteRestrictionError
from .weighted_ops import SiteWindow

OUTDIR_ENV = "STARK_KAM_OUTDIR"
EXIT_OK, EXIT_BOUND, EXIT_USAGE = 0, 1, 2

# Central table of defaults; every entry can be overridden from the config file
# or the matching command line flag.
DEFAULTS = {
    "window": "-32:32",
    "delta": 1 / 60,
    "eps": 1e-6,
    "J": [0],
    "y": None,
    "seeds": [0],
    "steps": 1,
    "K_override": 8,
    "schedule_c": 1.0,
    "samples": 20_000,
    "eps_list": [1e-32, 1e-40, 1e-48, 1e-56],
    "T": 1000.0,
    "dt": 1e-3,
    "scheme": "splitstep",
    "d": 2.0,
    "init": "delta:0",
    "stages": ["diagonalize", "hamiltonian", "kam"],
    "workers": 1,
    "tolerances": {"target": 1e-12, "prune_tol": 1e-14, "localization_factor": 4.0},
}


class UsageError(Exception):
    """Bad configuration or input file; maps to exit code 2."""


# -- configuration ------------------------------------------------------------
def parse_window(text: str) -> SiteWindow:
    try:
        return SiteWindow.parse(text)
    except ValueError as exc:
        msg = str(exc)
        raise argparse.ArgumentTypeError(msg if msg.startswith("window") else f"window: {msg}") from None


def parse_number(text) -> float:
    """Float or fraction such as ``1/60``."""
    try:
        return float(Fraction(str(text))) if "/" in str(text) else float(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None


def parse_int_list(text: str) -> list:
    """``"0,2,5"`` or ranges such as ``"0-19"``."""
    out = []
    try:
        for part in str(text).split(","):
            part = part.strip()
            if "-" in part[1:]:
                i = part.index("-", 1)
                out.extend(range(int(part[:i]), int(part[i + 1:]) + 1))
            elif part:
                out.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers like '0,1' or '0-19', got {text!r}") from None
    return out


def parse_float_list(text: str) -> list:
    return [parse_number(x) for x in str(text).split(",") if x.strip()]


@dataclass
class RunConfig:
    """Validated settings for one invocation; serialized into every artifact."""

    window: str = DEFAULTS["window"]
    delta: float = DEFAULTS["delta"]
    eps: float = DEFAULTS["eps"]
    J: list = field(default_factory=lambda: list(DEFAULTS["J"]))
    y: list | None = None
    seeds: list = field(default_factory=lambda: list(DEFAULTS["seeds"]))
    steps: int = DEFAULTS["steps"]
    K_override: int | None = DEFAULTS["K_override"]
    schedule_c: float = DEFAULTS["schedule_c"]
    samples: int = DEFAULTS["samples"]
    eps_list: list = field(default_factory=lambda: list(DEFAULTS["eps_list"]))
    T: float = DEFAULTS["T"]
    dt: float = DEFAULTS["dt"]
    scheme: str = DEFAULTS["scheme"]
    d: float = DEFAULTS["d"]
    init: str = DEFAULTS["init"]
    stages: list = field(default_factory=lambda: list(DEFAULTS["stages"]))
    workers: int = DEFAULTS["workers"]
    outdir: str = ""
    tolerances: dict = field(default_factory=lambda: dict(DEFAULTS["tolerances"]))

    @classmethod
    def from_mapping(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise UsageError(f"config: unknown field(s) {', '.join(unknown)}")
        data = dict(data)
        if "delta" in data:
            data["delta"] = parse_number(data["delta"])
        if "tolerances" in data:
            data["tolerances"] = {**DEFAULTS["tolerances"], **data["tolerances"]}
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self):
        try:
            SiteWindow.parse(self.window)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if self.delta < 0:
            raise UsageError("delta: must be non-negative")
        if not 0 <= self.eps < 1:
            raise UsageError("eps: must lie in [0, 1)")
        if self.scheme not in ("splitstep", "rk4"):
            raise UsageError("scheme: expected 'splitstep' or 'rk4'")
        if self.steps < 1:
            raise UsageError("steps: at least one KAM step is required")
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise UsageError(f"stages: unknown stage(s) {', '.join(bad)}")
        if not self.J:
            raise UsageError("J: at least one tangential site is required")

    @property
    def site_window(self) -> SiteWindow:
        return SiteWindow.parse(self.window)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("outdir")
        return out


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), allow_nan=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def config_hash(cfg_dict: dict) -> str:
    return hashlib.sha256(canonical_json(cfg_dict).encode()).hexdigest()


def version_string() -> str:
    """``<version>+g<commit>[.dirty]`` when run from a git checkout, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--abbrev=12"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip().replace('-dirty', '.dirty')}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def provenance(stage: str, cfg: dict) -> dict:
    return {"stage": stage, "config": cfg, "config_hash": config_hash(cfg), "version": version_string()}


def write_json(path: Path, stage: str, cfg: dict, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json({"provenance": provenance(stage, cfg), **payload}) + "\n")
    return path


def write_csv(path: Path, stage: str, cfg: dict, body: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    prov = provenance(stage, cfg)
    head = f"# stage={stage} version={prov['version']} config_hash={prov['config_hash']}\n" \
           f"# config={canonical_json(cfg)}\n"
    path.write_text(head + body)
    return path


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"input file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from None


def resolve_out(out: str | None, default_name: str, outdir: str | None) -> Path:
    base = Path(outdir or os.environ.get(OUTDIR_ENV, "."))
    if out is None:
        return base / default_name
    p = Path(out)
    return p if p.is_absolute() or p.parent != Path(".") else base / p


# -- stages ----------------------------------------------------------------------
def stage_diagonalize(window: SiteWindow, delta: float, seed: int, active, target: float) -> dict:
    from .linear_kam import StarkModel, diagonalize

    model = StarkModel.from_seed(window, delta, seed)
    res = diagonalize(model, target=target, active=active, strict=False)
    return res.to_dict()


def stage_hamiltonian(diag: dict, eps: float, active, prune_tol: float) -> dict:
    from .hamiltonian_build import hamiltonian_from_result
    from .linear_kam import DiagonalizationResult

    res = DiagonalizationResult.from_dict(diag)
    active = [s for s in active if s in res.active]
    H = hamiltonian_from_result(res, eps, prune_tol, active=active)
    ratios = H.T.decay_ratios()
    checks = [{"bound": "quartic_decay", "measured": ratios[0], "threshold": 1.0, "passed": ratios[0] <= 1.0},
              {"bound": "quartic_derivative_decay", "measured": ratios[1], "threshold": 1.0,
               "passed": ratios[1] <= 1.0}]
    return {"hamiltonian": H.to_dict(), "frame": H.T.factor, "lattice_window": [res.window.lo, res.window.hi],
            "checks": checks, "passed": all(c["passed"] for c in checks)}


def load_hamiltonian(ham: dict):
    from .hamiltonian_build import QuarticHamiltonian

    H = QuarticHamiltonian.from_dict(ham["hamiltonian"])
    frame = np.asarray(ham["frame"], dtype=float)
    return H, frame


def stage_kam(ham: dict, J, eps: float, steps: int, xi, K_override, c: float, y=None) -> dict:
    from .linear_kam import StarkModel
    from .nonlinear_kam import TangentialConfig, run_kam

    H, frame = load_hamiltonian(ham)
    model = StarkModel.from_dict(H.model)
    J = tuple(int(j) for j in J)
    if tuple(H.T.active) != J:
        raise UsageError(f"sites: the Hamiltonian carries derivatives for {list(H.T.active)}, not {list(J)}; "
                         "rebuild it with --active matching --sites")
    if xi in (None, "auto"):
        xi = tuple(model.v(j) for j in J)
    cfg = TangentialConfig(J, y, eps, tuple(xi))
    run = run_kam(H.T, H.d, cfg, H.d_grads, steps=steps, K_override=K_override, c=c)
    out = run.to_dict()
    out.update({"frame": frame, "window_sites": list(H.T.window.sites), "model": H.model,
                "assumptions": run.normal_forms[-1].assumption_checks(J)})
    return out


def sampler_from_kamlog(log: dict):
    from .nonlinear_kam import NormalForm, TangentialConfig, embed_torus
    from .tf_series import TFSeries

    cfg = TangentialConfig(**log["config"])
    gens = [TFSeries.from_text(s["generator"]["text"]) for s in log["steps"]]
    nf = NormalForm.from_dict(log["steps"][-1]["normal_form"] if log["steps"] else
                              log["reduction"]["normal_form"])
    return embed_torus(gens, nf, cfg, np.asarray(log["frame"]), log["window_sites"])


def stage_measure(ham: dict, J, eps_list, samples: int, seed: int, steps: int, K_override) -> dict:
    from .linear_kam import StarkModel
    from .measure_mc import kam_levels, measure_sweep

    H, _ = load_hamiltonian(ham)
    model = StarkModel.from_dict(H.model)
    pipe = kam_levels(H.T, H.d, H.d_grads, J, steps=steps, K_override=K_override,
                      xi0=[model.v(j) for j in J])
    return measure_sweep(pipe, eps_list, samples, seed)


def stage_evolve(model_doc: dict, eps: float, init: str, T: float, dt: float, scheme: str, d: float,
                 factor: float):
    from .dynamics import LatticeState, integrate, verify_localization
    from .linear_kam import StarkModel

    model = StarkModel.from_dict(model_doc.get("model", model_doc))
    kind, _, arg = init.partition(":")
    if kind == "delta":
        u0 = LatticeState.delta(model.window, int(arg or 0))
    elif kind == "torus":
        sampler = sampler_from_kamlog(read_json(arg))
        u0 = LatticeState(model.window, sampler(0.0)[0])
    else:
        raise UsageError(f"init: expected 'delta:<site>' or 'torus:<kamlog.json>', got {init!r}")
    stride = max(1, int(round(1.0 / dt)))
    steps = int(round(T / dt))
    while steps % stride:
        stride -= 1
    traj = integrate(model, eps, u0, T, dt, scheme, stride)
    return traj, verify_localization(traj, d, factor)


def _check_seed(args) -> dict:
    window, delta, seed, target = args
    from .linear_kam import StarkModel, dense_eigenvalues, diagonalize, pair_eigenvalues

    model = StarkModel.from_seed(window, delta, seed)
    res = diagonalize(model, target=target, strict=False, active=())
    inner = res.interior
    a, b = window.index(inner.lo), window.index(inner.hi) + 1
    ref = pair_eigenvalues(res.eigenvalues[a:b], dense_eigenvalues(model))
    spectral = float(np.max(np.abs(res.eigenvalues[a:b] - ref)))
    eps0 = res.constants["eps0"]
    ladder = float(np.max(np.abs(res.eigenvalues[a:b] - inner.sites - model.disorder[a:b])))
    checks = [c.as_dict() for c in res.checks]
    checks.append({"bound": "spectral_oracle", "measured": spectral, "threshold": 1e-8, "step": None,
                   "passed": spectral <= 1e-8})
    checks.append({"bound": "ladder", "measured": ladder, "threshold": 5 / 3 * eps0, "step": None,
                   "passed": ladder <= 5 / 3 * eps0})
    return {"seed": seed, "steps": res.steps, "per_step_norms": res.per_step_norms, "checks": checks,
            "passed": all(c["passed"] for c in checks)}


STAGES = ("diagonalize", "hamiltonian", "kam", "measure", "evolve", "check-bounds")


# -- command handlers --------------------------------------------------------------
def _cfg_from_args(args, **overrides) -> RunConfig:
    base = read_json(args.config) if getattr(args, "config", None) else {}
    base.pop("provenance", None)
    for k, v in overrides.items():
        if v is not None:
            base[k] = v
    return RunConfig.from_mapping(base)


def cmd_diagonalize(args) -> int:
    cfg = _cfg_from_args(args, window=args.window and str(args.window), delta=args.delta,
                         seeds=[args.seed] if args.seed is not None else None)
    active = args.active if args.active is not None else list(cfg.J)
    doc = stage_diagonalize(cfg.site_window, cfg.delta, cfg.seeds[0], active, cfg.tolerances["target"])
    path = write_json(resolve_out(args.out, "diag.json", args.outdir), "diagonalize", cfg.to_dict(), doc)
    print(f"diagonalize: {doc['steps']} steps, passed={doc['passed']} -> {path}")
    return EXIT_OK if doc["passed"] else EXIT_BOUND


def cmd_hamiltonian(args) -> int:
    cfg = _cfg_from_args(args, eps=args.eps)
    active = args.active if args.active is not None else list(cfg.J)
    doc = stage_hamiltonian(read_json(args.diag), cfg.eps, active, cfg.tolerances["prune_tol"])
    path = write_json(resolve_out(args.out, "ham.json", args.outdir), "hamiltonian", cfg.to_dict(), doc)
    print(f"hamiltonian: {len(doc['hamiltonian']['tensor']['values'])} entries, passed={doc['passed']} -> {path}")
    return EXIT_OK if doc["passed"] else EXIT_BOUND


def cmd_kam(args) -> int:
    cfg = _cfg_from_args(args, eps=args.eps, J=args.sites, steps=args.steps, K_override=args.K)
    xi = None if args.xi in (None, "auto") else parse_float_list(args.xi)
    out = resolve_out(args.out, "kamlog.json", args.outdir)
    try:
        doc = stage_kam(read_json(args.ham), cfg.J, cfg.eps, cfg.steps, xi, cfg.K_override, cfg.schedule_c, cfg.y)
    except ResonanceError as exc:
        write_json(out, "kam", cfg.to_dict(), {"passed": False, "resonance": exc.as_dict()})
        print(f"kam: {exc}", file=sys.stderr)
        return EXIT_BOUND
    except (BoundViolation, SeriesTailError) as exc:
        write_json(out, "kam", cfg.to_dict(), {"passed": False, "error": str(exc)})
        print(f"kam: {exc}", file=sys.stderr)
        return EXIT_BOUND
    write_json(out, "kam", cfg.to_dict(), doc)
    print(f"kam: {len(doc['steps'])} step(s), passed={doc['passed']} -> {out}")
    return EXIT_OK if doc["passed"] else EXIT_BOUND


def cmd_measure(args) -> int:
    cfg = _cfg_from_args(args, eps_list=args.eps, samples=args.samples,
                         seeds=[args.seed] if args.seed is not None else None, J=args.sites)
    try:
        table = stage_measure(read_json(args.ham), cfg.J, cfg.eps_list, cfg.samples, cfg.seeds[0], cfg.steps,
                              cfg.K_override)
    except ValueError as exc:
        print(f"measure: {exc}", file=sys.stderr)
        return EXIT_BOUND
    out = resolve_out(args.out, "measure.csv", args.outdir)
    write_csv(out, "measure", cfg.to_dict(), table.to_csv())
    write_json(out.with_suffix(".json"), "measure", cfg.to_dict(), table.to_dict())
    print(f"measure: slope={table.slope:.4f} band={table.band} ok={table.slope_ok} -> {out}")
    return EXIT_OK if table.slope_ok else EXIT_BOUND


def cmd_evolve(args) -> int:
    cfg = _cfg_from_args(args, eps=args.eps, init=args.init, T=args.T, dt=args.dt, scheme=args.scheme, d=args.d)
    traj, diag = stage_evolve(read_json(args.model), cfg.eps, cfg.init, cfg.T, cfg.dt, cfg.scheme, cfg.d,
                              cfg.tolerances["localization_factor"])
    out = resolve_out(args.out, "traj.csv", args.outdir)
    write_csv(out, "evolve", cfg.to_dict(), traj.to_csv(cfg.d))
    summary = {"localization": diag.to_dict(), "mass_drift": traj.mass_drift, "energy_drift": traj.energy_drift,
               "propagator_dropped": traj.propagator_dropped}
    write_json(out.with_suffix(".json"), "evolve", cfg.to_dict(), summary)
    print(f"evolve: max M_d ratio {diag.ratio:.4g} bounded={diag.bounded} -> {out}")
    return EXIT_OK if diag.bounded else EXIT_BOUND


def cmd_check_bounds(args) -> int:
    cfg = _cfg_from_args(args, window=args.window and str(args.window), delta=args.delta, seeds=args.seeds,
                         workers=args.workers)
    jobs = [(cfg.site_window, cfg.delta, s, cfg.tolerances["target"]) for s in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(_check_seed, jobs))
    else:
        rows = [_check_seed(j) for j in jobs]
    passed = all(r["passed"] for r in rows)
    for r in rows:
        failed = [c["bound"] for c in r["checks"] if not c["passed"]]
        print(f"seed {r['seed']}: {'PASS' if r['passed'] else 'FAIL ' + ','.join(sorted(set(failed)))}")
    path = write_json(resolve_out(args.out, "bounds.json", args.outdir), "check-bounds", cfg.to_dict(),
                      {"seeds": rows, "passed": passed})
    print(f"check-bounds: {sum(r['passed'] for r in rows)}/{len(rows)} seeds pass -> {path}")
    return EXIT_OK if passed else EXIT_BOUND


def _verdicts(doc: dict) -> list:
    out = []
    for key in ("checks",):
        for c in doc.get(key, []):
            out.append((c["bound"], c["passed"]))
    for step in doc.get("steps", []) if isinstance(doc.get("steps"), list) else []:
        for c in step.get("checks", []) if isinstance(step, dict) else []:
            out.append((f"{c['bound']}@{c.get('step')}", c["passed"]))
    return out


def cmd_report(args) -> int:
    lines = ["# stark-kam report", ""]
    ok = True
    for p in args.inputs:
        doc = read_json(p)
        stage = doc.get("provenance", {}).get("stage", "?")
        passed = doc.get("passed", doc.get("slope_ok", doc.get("localization", {}).get("bounded")))
        ok &= passed is not False
        lines.append(f"## {p} ({stage}): {'PASS' if passed else 'FAIL' if passed is False else 'n/a'}")
        lines.append(f"config_hash {doc.get('provenance', {}).get('config_hash', '-')}")
        bad = [name for name, good in _verdicts(doc) if not good]
        lines.append(f"failed bounds: {', '.join(bad) if bad else 'none'}")
        lines.append("")
    out = resolve_out(args.out, "report.md", args.outdir)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines))
    if args.gnuplot:
        gp = out.with_suffix(".gp")
        gp.write_text(
            "set datafile separator ','\nset logscale y\nset xlabel 't'\nset ylabel 'M_d(t)/M_d(0)'\n"
            f"plot '{args.gnuplot}' every ::1 using 1:($4) with lines title 'M_d'\n")
    print(f"report: {len(args.inputs)} artifact(s), all pass={ok} -> {out}")
    return EXIT_OK if ok else EXIT_BOUND


def run_pipeline(cfg: RunConfig) -> int:
    """Run ``cfg.stages`` in order for every seed; nonzero iff some bound fails."""
    cfg.validate()
    outdir = Path(cfg.outdir or os.environ.get(OUTDIR_ENV, "."))
    conf = cfg.to_dict()
    status = EXIT_OK
    for seed in cfg.seeds:
        cell = outdir / f"seed{seed}"
        diag = ham = kamlog = None
        for stage in cfg.stages:
            try:
                if stage == "diagonalize":
                    diag = stage_diagonalize(cfg.site_window, cfg.delta, seed, list(cfg.J), cfg.tolerances["target"])
                    write_json(cell / "diag.json", stage, conf, diag)
                    ok = diag["passed"]
                elif stage == "hamiltonian":
                    ham = stage_hamiltonian(_need(diag, stage, "diagonalize"), cfg.eps, list(cfg.J),
                                            cfg.tolerances["prune_tol"])
                    write_json(cell / "ham.json", stage, conf, ham)
                    ok = ham["passed"]
                elif stage == "kam":
                    kamlog = stage_kam(_need(ham, stage, "hamiltonian"), cfg.J, cfg.eps, cfg.steps, None,
                                       cfg.K_override, cfg.schedule_c, cfg.y)
                    write_json(cell / "kamlog.json", stage, conf, kamlog)
                    ok = kamlog["passed"]
                elif stage == "measure":
                    table = stage_measure(_need(ham, stage, "hamiltonian"), cfg.J, cfg.eps_list, cfg.samples, seed,
                                          cfg.steps, cfg.K_override)
                    write_csv(cell / "measure.csv", stage, conf, table.to_csv())
                    ok = table.slope_ok
                elif stage == "evolve":
                    init = cfg.init
                    if init == "torus":
                        init = f"torus:{cell / 'kamlog.json'}"
                    traj, loc = stage_evolve(_need(diag, stage, "diagonalize"), cfg.eps, init, cfg.T, cfg.dt,
                                             cfg.scheme, cfg.d, cfg.tolerances["localization_factor"])
                    write_csv(cell / "traj.csv", stage, conf, traj.to_csv(cfg.d))
                    ok = loc.bounded
                else:
                    row = _check_seed((cfg.site_window, cfg.delta, seed, cfg.tolerances["target"]))
                    write_json(cell / "bounds.json", stage, conf, row)
                    ok = row["passed"]
            except (ResonanceError, BoundViolation, SeriesTailError) as exc:
                print(f"[seed {seed}] stage {stage}: {exc}", file=sys.stderr)
                ok = False
            print(f"[seed {seed}] {stage}: {'PASS' if ok else 'FAIL'}")
            if not ok:
                status = EXIT_BOUND
    return status


def _need(doc, stage, prior):
    if doc is None:
        raise UsageError(f"stage {stage} needs stage {prior} earlier in the same run")
    return doc


def cmd_run(args) -> int:
    cfg = _cfg_from_args(args)
    if args.outdir:
        cfg.outdir = args.outdir
    return run_pipeline(cfg)


# -- parser -----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stark-kam", description="KAM workbench for the nonlinear Stark lattice.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command")

    def common(sp, out_help):
        sp.add_argument("--config", help="JSON config file; flags override its fields")
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--outdir", help=f"output directory (default ${OUTDIR_ENV} or .)")

    sp = sub.add_parser("diagonalize", help="run the linear KAM iteration for one seed")
    common(sp, "output JSON (default diag.json)")
    sp.add_argument("--window", type=parse_window)
    sp.add_argument("--delta", type=parse_number)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--active", type=parse_int_list, help="disorder sites to differentiate against")
    sp.set_defaults(func=cmd_diagonalize)

    sp = sub.add_parser("hamiltonian", help="build the quartic Hamiltonian in the diagonal frame")
    common(sp, "output JSON (default ham.json)")
    sp.add_argument("--diag", required=True)
    sp.add_argument("--eps", type=parse_number)
    sp.add_argument("--active", type=parse_int_list)
    sp.set_defaults(func=cmd_hamiltonian)

    sp = sub.add_parser("kam", help="run nonlinear KAM steps at tangential sites")
    common(sp, "output JSON (default kamlog.json)")
    sp.add_argument("--ham", required=True)
    sp.add_argument("--sites", type=parse_int_list)
    sp.add_argument("--eps", type=parse_number)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--K", type=int, help="truncation override for every step")
    sp.add_argument("--xi", default="auto", help="'auto' or comma separated values")
    sp.set_defaults(func=cmd_kam)

    sp = sub.add_parser("measure", help="Monte Carlo estimate of the resonant parameter measure")
    common(sp, "output CSV (default measure.csv)")
    sp.add_argument("--ham", required=True)
    sp.add_argument("--sites", type=parse_int_list)
    sp.add_argument("--eps", type=parse_float_list)
    sp.add_argument("--samples", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_measure)

    sp = sub.add_parser("evolve", help="integrate the lattice equation")
    common(sp, "output CSV (default traj.csv)")
    sp.add_argument("--model", required=True, help="diag.json or a model JSON")
    sp.add_argument("--eps", type=parse_number)
    sp.add_argument("--init", help="'delta:<site>' or 'torus:<kamlog.json>'")
    sp.add_argument("--T", type=parse_number)
    sp.add_argument("--dt", type=parse_number)
    sp.add_argument("--scheme", choices=("splitstep", "rk4"))
    sp.add_argument("--d", type=parse_number)
    sp.set_defaults(func=cmd_evolve)

    sp = sub.add_parser("check-bounds", help="linear bound verdicts over many seeds")
    common(sp, "output JSON (default bounds.json)")
    sp.add_argument("--window", type=parse_window)
    sp.add_argument("--delta", type=parse_number)
    sp.add_argument("--seeds", type=parse_int_list)
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_check_bounds)

    sp = sub.add_parser("report", help="summarize JSON artifacts")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out")
    sp.add_argument("--outdir")
    sp.add_argument("--gnuplot", metavar="TRAJ_CSV", help="also write a gnuplot script for this trajectory")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("run", help="run the stages listed in a config file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--outdir")
    sp.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"stark-kam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SiteRestrictionError as exc:
        print(f"stark-kam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
