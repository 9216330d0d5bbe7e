"""Command line: configuration-driven experiment stages with machine-readable outputs."""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, McSection, derive_seed, load_config
from .dynamics import compare, reconstruct, residual_check, split_step_evolve
from .errors import ConfigError, NlrsError
from .nonlinear import Region, FULL_BOX, jacobian, jacobian_decay_fit, ldt_scan, t_builder, theta_window
from .resonance import AuditConfig, harmonic_cluster_audit, near_resonant_counts, small_scale_nonresonance
from .solver import Schedule, schedule_check, solve
from .spectral import EigenSystem, diagonalize, sample_potential, select_modes
from .stats import McPlan, center_density_mc, minami_mc, wegner_mc

EXIT_OK, EXIT_CONFIG, EXIT_AUDIT, EXIT_NONCONVERGED, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _plain(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_plain) + "\n"


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str = __version__
    artifacts: list = field(default_factory=list)
    wall_times: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)

    def to_dict(self):
        return {"config_hash": self.config_hash, "tool_version": self.tool_version,
                "artifacts": self.artifacts, "wall_times": self.wall_times, "stages": self.stages}


class Run:
    """Output directory, manifest bookkeeping and stage timing for one command."""

    def __init__(self, cfg: ExperimentConfig, out_dir=None):
        self.cfg = cfg
        self.out = Path(out_dir or cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(cfg.hash())
        self.last_good = None
        self.marked = set()
        self._adopt_previous()

    def _adopt_previous(self):
        """Keep entries of an earlier command on the same config whose files are unchanged."""
        path = self.out / "manifest.json"
        if not path.exists():
            return
        try:
            old = json.loads(path.read_text())
        except ValueError:
            return
        if old.get("config_hash") != self.manifest.config_hash:
            return
        for a in old.get("artifacts", []):
            f = self.out / a["path"]
            if f.exists() and hashlib.sha256(f.read_bytes()).hexdigest() == a["sha256"]:
                self.manifest.artifacts.append(a)
        self.manifest.stages.update(old.get("stages", {}))
        self.manifest.wall_times.update(old.get("wall_times", {}))

    def write(self, stage: str, name: str, text: str) -> Path:
        path = self.out / name
        path.write_text(text)
        digest = hashlib.sha256(text.encode()).hexdigest()
        self.manifest.artifacts = [a for a in self.manifest.artifacts if a["path"] != name]
        self.manifest.artifacts.append({"stage": stage, "path": name, "sha256": digest})
        self.last_good = path
        return path

    def stage(self, name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            out = fn(self, *args, **kwargs)
        except NlrsError as e:
            self.manifest.stages[name] = {"status": "error", "error": type(e).__name__, "message": str(e),
                                          "last_good": None if self.last_good is None else self.last_good.name}
            self.manifest.wall_times[name] = time.perf_counter() - t0
            self.finish()
            raise StageError(name, e, self.last_good) from e
        self.manifest.wall_times[name] = time.perf_counter() - t0
        if name not in self.marked:
            self.manifest.stages[name] = {"status": "pass"}
        return out

    def mark(self, name, status, **info):
        self.manifest.stages[name] = {"status": status, **info}
        self.marked.add(name)

    def finish(self):
        self.manifest.artifacts.sort(key=lambda a: a["path"])
        path = self.out / "manifest.json"
        path.write_text(dumps(self.manifest.to_dict()))
        return path


class StageError(Exception):
    def __init__(self, stage, error, last_good):
        super().__init__(f"stage {stage} failed: {error}")
        self.stage, self.error, self.last_good = stage, error, last_good
        self.exit_code = getattr(error, "exit_code", EXIT_NUMERIC)


# --- stages ---------------------------------------------------------------------

def stage_spectrum(run: Run):
    cfg = run.cfg
    V = sample_potential(cfg.potential.spec(), cfg.potential.box, cfg.seed)
    eig = diagonalize(V)
    run.write("spectrum", "potential.json", dumps({"box": V.box.to_dict(), "seed": V.seed,
                                                   "distribution": V.distribution.to_dict(),
                                                   "values": [float(v) for v in V.values]}))
    run.write("spectrum", "spectrum.eig.json", eig.to_json())
    sel = select_modes(eig, cfg.modes.betas, cfg.modes.L, cfg.modes.amplitudes)
    run.write("spectrum", "selection.json", dumps(sel.to_dict()))
    return V, eig, sel


def audit_config(cfg: ExperimentConfig, delta=None) -> AuditConfig:
    a = cfg.audit
    return AuditConfig(cfg.model.delta if delta is None else delta, cfg.modes.b, a.n_box_radius, a.j_box_radius,
                       a.q1, a.threshold_exponent, a.s_exponent, a.small_scale_factor, a.harmonic_factor,
                       a.near_factor, a.max_violations)


def run_audits(cfg: ExperimentConfig, eig: EigenSystem, sel):
    acfg = audit_config(cfg)
    ss = small_scale_nonresonance(eig, sel.omega0, sel, acfg)
    hc = harmonic_cluster_audit(eig, sel.omega0, cfg.audit.m_radius, acfg)
    radius = cfg.audit.near_box_radius or acfg.log_box_radius()
    top = float(np.max(np.abs(eig.eigenvalues))) + 1.0
    thetas = np.linspace(-top, top, cfg.audit.theta_points)
    counts = np.maximum(near_resonant_counts(eig, sel.omega0, thetas, radius, acfg, 1),
                        near_resonant_counts(eig, sel.omega0, thetas, radius, acfg, -1))
    near = {"audit": "near_resonant_count", "box_radius": radius, "theta_points": int(thetas.size),
            "theta_range": [-top, top], "max_count": int(counts.max()), "bound": cfg.modes.b,
            "pass": bool(counts.max() <= cfg.modes.b),
            "fraction_over_bound": float(np.mean(counts > cfg.modes.b))}
    return [ss.to_dict(), hc.to_dict(), near]


def stage_audit(run: Run, eig, sel):
    reports = run_audits(run.cfg, eig, sel)
    run.write("audit", "audits.json", dumps(reports))
    passed = all(r["pass"] for r in reports)
    run.mark("audit", "pass", verdict="pass" if passed else "fail")
    return reports, passed


def schedule_of(cfg: ExperimentConfig, initial_radius="config") -> Schedule:
    s = cfg.solver
    r0 = s.initial_radius if initial_radius == "config" else initial_radius
    return Schedule(r0, s.growth, s.max_radius, s.tol, s.max_iter, s.pivot_floor)


def _summaries(reports):
    keys = ("audit", "pass", "n_violations", "min_margin", "threshold", "max_count", "bound")
    return [{k: r[k] for k in keys if k in r} for r in reports]


def stage_solve(run: Run, eig, sel, reports):
    cfg = run.cfg
    cert = solve(eig, sel, cfg.model.delta, cfg.model.p, schedule_of(cfg), audits=_summaries(reports),
                 config={"config_hash": cfg.hash()}, seeds={"potential": cfg.seed})
    run.write("solve", "certificate.json", cert.to_json() + "\n")
    run.write("solve", "u_hat.jsonl", cert.u_hat.to_jsonl())
    run.mark("solve", "pass" if cert.converged else "fail", converged=cert.converged,
             final_residual=cert.final_residual)
    return cert


def stage_verify(run: Run, V, eig, sel, cert):
    d = run.cfg.dynamics
    delta, p = run.cfg.model.delta, run.cfg.model.p
    res = residual_check(cert.u_hat, cert.omega, eig, delta, p, d.residual_times, V)
    traj = split_step_evolve(reconstruct(cert.u_hat, cert.omega, eig, 0.0), V, eig, delta, p, d.t_end, d.h,
                             d.record_every)
    mismatch = compare(traj, cert.u_hat, cert.omega, eig)
    lin = split_step_evolve(reconstruct(cert.u0, sel.omega0, eig, 0.0), V, eig, 0.0, p, d.t_end, d.h,
                            d.record_every)
    lin_mismatch = compare(lin, cert.u0, sel.omega0, eig)
    report = {
        "residual": res, "residual_pass": res <= d.residual_tol,
        "mismatch": mismatch, "mismatch_pass": mismatch <= d.mismatch_tol,
        "norm_drift": traj.norm_drift(), "norm_drift_pass": traj.norm_drift() <= d.drift_tol,
        "energy_drift": traj.energy_drift(),
        "linear_control_mismatch": lin_mismatch, "linear_control_pass": lin_mismatch <= 1e-10,
        "t_end": d.t_end, "h": d.h,
    }
    report["pass"] = all(v for k, v in report.items() if k.endswith("_pass"))
    run.write("verify", "verify.json", dumps(report))
    run.write("verify", "trajectory.csv", traj.to_csv())
    if d.field_dump_every:
        run.write("verify", "fields.jsonl", traj.fields_jsonl(d.field_dump_every))
    run.mark("verify", "pass" if report["pass"] else "fail")
    return report


def ldt_c_tilde(cfg: ExperimentConfig, eig, cert):
    """Half the fitted Jacobian decay rate, unless the config fixes it."""
    if cfg.ldt.c_tilde is not None:
        return float(cfg.ldt.c_tilde), None
    jac = jacobian(cert.u_hat, eig, cfg.model.p)
    verts = Region(FULL_BOX, cfg.ldt.fit_radius, 0).vertices(cfg.modes.b, eig)
    fit = jacobian_decay_fit(jac, verts)
    return 0.5 * fit.gamma_hat, fit


def stage_ldt(run: Run, eig, cert):
    cfg = run.cfg
    c_tilde, fit = ldt_c_tilde(cfg, eig, cert)
    N = cfg.ldt.N
    build = t_builder(cert.omega, cert.u_hat, eig, cfg.model.delta, cfg.model.p)
    j0 = cfg.ldt.j0 or sorted({-2 * N, -N, 0, N, 2 * N})
    lo, hi = np.inf, -np.inf
    for j in j0:
        a, b = theta_window(build(Region(FULL_BOX, N, j)))
        lo, hi = min(lo, a), max(hi, b)
    grid = np.linspace(lo, hi, cfg.ldt.theta_points)
    scan = ldt_scan(build, N, grid, j0, c_tilde, cfg.ldt.norm_exponent, cfg.ldt.background)
    out = scan.to_dict()
    out["jacobian_fit"] = None if fit is None else fit.to_dict()
    out["pass"] = scan.fraction <= 1e-2
    run.write("ldt", "ldt.json", dumps(out))
    run.mark("ldt", "pass", verdict="pass" if out["pass"] else "fail", bad_fraction=scan.fraction)
    return scan


def stage_mc(run: Run):
    cfg = run.cfg
    mc, dist = cfg.mc, cfg.potential.spec()
    plan = McPlan(mc.trials, derive_seed(cfg.seed, "mc"), McSection.box_of(mc.box_size), dist)
    eps = sorted(mc.eps, reverse=True)
    w = wegner_mc(plan, mc.energy, eps)
    m = minami_mc(plan, eps)
    run.write("mc", "wegner.csv", w.to_csv())
    run.write("mc", "wegner.json", w.to_json() + "\n")
    run.write("mc", "minami.csv", m.to_csv())
    run.write("mc", "minami.json", m.to_json() + "\n")
    dplan = McPlan(mc.density_trials, derive_seed(cfg.seed, "density"), McSection.box_of(mc.density_box_size), dist)
    L = mc.density_L
    starts = np.arange(dplan.box.lo + L, dplan.box.hi - 2 * L + 1, L)
    counts = center_density_mc(dplan, L, starts)
    lo, hi = mc.density_band
    ok = (counts >= lo * L) & (counts <= hi * L)
    run.write("mc", "center_density.json", dumps({
        "L": L, "trials": mc.density_trials, "windows": int(starts.size), "band": [lo * L, hi * L],
        "fraction_in_band": float(ok.mean()), "target_fraction": mc.density_target_fraction,
        "pass": bool(ok.mean() >= mc.density_target_fraction), "mean_count": float(counts.mean()),
        "window_starts": starts.tolist(), "counts": counts.tolist()}))
    return w, m, ok.mean()


def amplitude_grid(cfg: ExperimentConfig):
    pts = [list(map(float, a)) for a in cfg.sweep.amplitudes]
    if cfg.sweep.amplitude_points:
        rng = np.random.default_rng(derive_seed(cfg.seed, "amplitudes"))
        pts += rng.uniform(1.0, 2.0, size=(cfg.sweep.amplitude_points, cfg.modes.b)).tolist()
    return pts or [list(map(float, cfg.modes.amplitudes))]


_WORKER = {}


def _init_worker(eig_json, cfg_json):
    _WORKER["eig"] = EigenSystem.from_json(eig_json)
    _WORKER["cfg"] = json.loads(cfg_json)


def _sweep_point(args):
    index, delta, a = args
    eig, c = _WORKER["eig"], _WORKER["cfg"]
    row = {"index": index, "delta": delta, "amplitudes": a}
    try:
        sel = select_modes(eig, c["betas"], c["L"], a)
        cert = solve(eig, sel, delta, c["p"], Schedule(**c["schedule"]))
        row.update(converged=bool(cert.converged), residual=cert.final_residual,
                   omega_deviation=[float(x) for x in cert.omega_deviation],
                   iterations=cert.newton_iterations, error=None)
    except NlrsError as e:
        row.update(converged=False, residual=None, omega_deviation=None, iterations=None,
                   error=f"{type(e).__name__}: {e}")
    return row


def threads() -> int:
    raw = os.environ.get("NLRS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as e:
        raise ConfigError(f"NLRS_THREADS must be an integer, got {raw!r}") from e
    return max(1, n)


def stage_sweep(run: Run, eig):
    cfg = run.cfg
    deltas = cfg.sweep.deltas or [cfg.model.delta]
    grid = [(i, float(d), a) for i, (d, a) in enumerate((d, a) for d in deltas for a in amplitude_grid(cfg))] \
        if (cfg.sweep.deltas or cfg.sweep.amplitudes or cfg.sweep.amplitude_points) else []
    if len(grid) > cfg.sweep.max_points:
        raise ConfigError(f"sweep grid has {len(grid)} points, above sweep.max_points")
    sched = schedule_of(cfg, cfg.sweep.initial_radius).to_dict()
    payload = json.dumps({"betas": cfg.modes.betas, "L": cfg.modes.L, "p": cfg.model.p, "schedule": sched})
    n = min(threads(), max(1, len(grid)))
    if n == 1:
        _init_worker(eig.to_json(), payload)
        rows = [_sweep_point(g) for g in grid]
    else:
        with ProcessPoolExecutor(n, initializer=_init_worker, initargs=(eig.to_json(), payload)) as ex:
            rows = list(ex.map(_sweep_point, grid))
    rows.sort(key=lambda r: r["index"])
    lines = ["index,delta,amplitudes,converged,residual,omega_deviation,iterations,error"]
    for r in rows:
        lines.append(",".join([
            str(r["index"]), repr(r["delta"]), " ".join(repr(x) for x in r["amplitudes"]),
            str(r["converged"]).lower(), "" if r["residual"] is None else repr(r["residual"]),
            "" if r["omega_deviation"] is None else " ".join(repr(x) for x in r["omega_deviation"]),
            "" if r["iterations"] is None else str(r["iterations"]),
            "" if r["error"] is None else '"' + r["error"].replace('"', "'") + '"',
        ]))
    by_delta = {}
    for r in rows:
        by_delta.setdefault(repr(r["delta"]), []).append(r["converged"])
    summary = {
        "points": len(rows),
        "success_fraction": float(np.mean([r["converged"] for r in rows])) if rows else None,
        "success_by_delta": {k: float(np.mean(v)) for k, v in by_delta.items()},
        "rows": rows,
    }
    run.write("sweep", "sweep.csv", "\n".join(lines) + "\n")
    run.write("sweep", "sweep.json", dumps(summary))
    return summary


def stage_schedule(run: Run):
    s = run.cfg.schedule
    rep = schedule_check(run.cfg.model.delta, s.M, s.nu, s.C, s.c, s.r_max)
    out = {"delta": run.cfg.model.delta, "M": s.M, "nu": s.nu, "C": s.C, "c": s.c, **rep.to_dict()}
    run.write("schedule", "schedule.json", dumps(out))
    run.mark("schedule", "pass", verdict="pass" if rep.holds else "fail", first_violation=rep.first_violation)
    return rep


def _load_certificate(run: Run, eig, sel, reports):
    """Reuse a certificate from the output directory when it matches the config."""
    from .nonlinear import LatticeCoeffs
    from .solver import SolutionCertificate, coefficient_decay, frequency_decay, initial_guess
    path = run.out / "certificate.json"
    upath = run.out / "u_hat.jsonl"
    if path.exists() and upath.exists():
        d = json.loads(path.read_text())
        if d.get("config", {}).get("config_hash") == run.cfg.hash() and d.get("converged"):
            u = LatticeCoeffs.from_jsonl(upath.read_text(), sel.b, eig.size, eig.label_offset)
            u0 = initial_guess(sel, eig).u_hat
            return SolutionCertificate(u, np.array(d["omega"]), np.array(d["omega0"]), d["final_residual"],
                                       d["halo_residual"], coefficient_decay(u), coefficient_decay(u, sel.alphas),
                                       frequency_decay(u), True,
                                       [(h["r"], h["residual"], h["correction"]) for h in d["history"]],
                                       d["audits"], d["config"], d["seeds"], d["flags"], u0)
    return run.stage("solve", stage_solve, eig, sel, reports)


# --- commands -------------------------------------------------------------------

def _audit_gate(run, passed, override):
    if not passed and not (override or run.cfg.solver.override_audits):
        run.mark("solve", "skipped", reason="resonance audits failed; set solver.override_audits to proceed")
        return False
    return True


def cmd_sample_spectrum(run, args):
    run.stage("spectrum", stage_spectrum)
    return EXIT_OK


def cmd_audit(run, args):
    V, eig, sel = run.stage("spectrum", stage_spectrum)
    _, passed = run.stage("audit", stage_audit, eig, sel)
    return EXIT_OK if passed else EXIT_AUDIT


def cmd_solve(run, args):
    V, eig, sel = run.stage("spectrum", stage_spectrum)
    reports, passed = run.stage("audit", stage_audit, eig, sel)
    if not _audit_gate(run, passed, args.override_audits):
        return EXIT_AUDIT
    cert = run.stage("solve", stage_solve, eig, sel, reports)
    return EXIT_OK if cert.converged else EXIT_NONCONVERGED


def run_pipeline(run: Run, override=False) -> int:
    V, eig, sel = run.stage("spectrum", stage_spectrum)
    reports, passed = run.stage("audit", stage_audit, eig, sel)
    if not _audit_gate(run, passed, override):
        return EXIT_AUDIT
    cert = run.stage("solve", stage_solve, eig, sel, reports)
    if not cert.converged:
        return EXIT_NONCONVERGED
    report = run.stage("verify", stage_verify, V, eig, sel, cert)
    return EXIT_OK if report["pass"] else EXIT_NUMERIC


def cmd_run(run, args):
    return run_pipeline(run, args.override_audits)


def cmd_verify(run, args):
    V, eig, sel = run.stage("spectrum", stage_spectrum)
    reports, passed = run.stage("audit", stage_audit, eig, sel)
    if not _audit_gate(run, passed, args.override_audits):
        return EXIT_AUDIT
    cert = _load_certificate(run, eig, sel, reports)
    if not cert.converged:
        return EXIT_NONCONVERGED
    report = run.stage("verify", stage_verify, V, eig, sel, cert)
    return EXIT_OK if report["pass"] else EXIT_NUMERIC


def cmd_ldt_scan(run, args):
    V, eig, sel = run.stage("spectrum", stage_spectrum)
    reports, passed = run.stage("audit", stage_audit, eig, sel)
    if not _audit_gate(run, passed, args.override_audits):
        return EXIT_AUDIT
    cert = _load_certificate(run, eig, sel, reports)
    if not cert.converged:
        return EXIT_NONCONVERGED
    run.stage("ldt", stage_ldt, eig, cert)
    return EXIT_OK


def cmd_mc_stats(run, args):
    run.stage("mc", stage_mc)
    return EXIT_OK


def cmd_sweep(run, args):
    V, eig, sel = run.stage("spectrum", stage_spectrum)
    run.stage("sweep", stage_sweep, eig)
    return EXIT_OK


def cmd_schedule_check(run, args):
    rep = run.stage("schedule", stage_schedule)
    return EXIT_OK if rep.holds else EXIT_AUDIT


COMMANDS = {
    "sample-spectrum": (cmd_sample_spectrum, "sample a potential, diagonalize and select modes"),
    "audit": (cmd_audit, "run the resonance audits (exit 2 on failure)"),
    "mc-stats": (cmd_mc_stats, "Monte Carlo spacing and center-density statistics"),
    "solve": (cmd_solve, "Newton solve with frequency updates (exit 3 if not converged)"),
    "verify": (cmd_verify, "residual check and split-step comparison of a solution"),
    "ldt-scan": (cmd_ldt_scan, "theta scan of restricted inverses of the linearized operator"),
    "sweep": (cmd_sweep, "solver success over delta and amplitude grids"),
    "schedule-check": (cmd_schedule_check, "check the step-to-step schedule inequalities"),
    "run": (cmd_run, "spectrum, audits, solve and verify in one pipeline"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nlrs", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="TOML experiment configuration")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="base seed (overrides seed)")
        p.add_argument("--override-audits", action="store_true", help="solve even if resonance audits fail")
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        run = Run(cfg, args.out)
    except NlrsError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    try:
        code = COMMANDS[args.command][0](run, args)
    except StageError as e:
        where = f"; last good artifact: {e.last_good}" if e.last_good else ""
        print(f"error: {e}{where}", file=sys.stderr)
        return e.exit_code
    run.finish()
    return code


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
