"""Experiment harness: YAML run configurations, staged pipeline, manifests and plot data.

Usage::

    python -m dhlab harnack --config run.yaml --seed 3 --out runs/h1

Exit codes: 0 all audits passed, 1 an audit failed, 2 configuration error,
3 runtime or solver error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__, clt, funcineq, heat, moser
from .env import MODELS, EnvironmentSpec, generate_environment, moment_report, save_environment
from .grid import assemble_form, make_ball

log = logging.getLogger(__name__)

EXPERIMENTS = ("env-gen", "inequality-audit", "harnack", "log-audit", "oscillation", "diagonal", "clt-sweep",
               "full-pipeline")
PIPELINE = ("env-gen", "inequality-audit", "harnack", "log-audit", "oscillation", "diagonal", "clt-sweep")
OUT_ENV = "DHLAB_OUT"

EXIT_OK, EXIT_AUDIT, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

# Every key the schema accepts, with its default.  ``None`` means "derived from
# the environment size" and is resolved in ``parse_config``.
DEFAULTS = {
    "experiment": "full-pipeline",
    "seed": 0,
    "output": "runs/default",
    "failure_regime": False,
    "environment": {
        "d": 2,
        "N": 32,
        "h": 1.0,
        "model": "constant",
        "tail_lambda_inv": 6.0,
        "tail_Lambda": 6.0,
        "anisotropy": 2.0,
        "sigma_log": 0.5,
        "corr_length": 2.0,
        "trap_beta": 1.0,
    },
    "exponents": {"p": 4, "q": 4},
    "inequality": {"trials": 200, "radius": None},
    "cylinder": {"radius": None, "tau": 1.0, "delta": 0.5, "kappa": 0.5, "n_solutions": 50, "amplitude": 1.0},
    "log": {"n_solutions": 20, "amplitude": 2.0, "levels": [1, 2, 4, 8]},
    "oscillation": {"r0": None, "k_max": 1, "n_solutions": 20},
    "diagonal": {"t_min": None, "decades": 1.0, "count": 7},
    "clt": {"epsilons": [1.0, 0.5, 0.25, 0.125], "t_min": 0.5, "t_max": 2.0, "n_times": 5, "r": 2.0,
            "n_origins": 4, "regime": None},
    "solver": {"rtol": heat.SOLVER_RTOL, "method": "direct"},
}


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass
class RunConfig:
    experiment: str
    seed: int
    output: Path
    failure_regime: bool
    environment: EnvironmentSpec
    p: float
    q: float
    sections: dict

    def canonical(self) -> dict:
        data = {
            "experiment": self.experiment,
            "seed": self.seed,
            "failure_regime": self.failure_regime,
            "environment": asdict(self.environment),
            "exponents": {"p": _dump_exp(self.p), "q": _dump_exp(self.q)},
        }
        data.update(copy.deepcopy(self.sections))
        return data

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    calibration_version: str
    experiment: str
    seed: int
    threads: int
    stages: dict = field(default_factory=dict)  # name -> {"seconds", "passed", "summary"}
    residuals: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    outputs: dict = field(default_factory=dict)  # relative path -> sha256
    status: str = "running"

    @property
    def passed(self) -> bool:
        return all(s.get("passed", True) is not False for s in self.stages.values())

    def exit_code(self) -> int:
        if self.status == "failed":
            return EXIT_RUNTIME
        return EXIT_OK if self.passed else EXIT_AUDIT


def _dump_exp(v):
    return "inf" if math.isinf(v) else v


def _parse_exp(v, name, errors):
    if isinstance(v, str) and v.strip().lower() in ("inf", "infinity", ".inf"):
        return math.inf
    try:
        out = float(v)
    except (TypeError, ValueError):
        errors.append(f"exponents.{name}={v!r} is not a number or 'inf'")
        return None
    if not out > 1:
        errors.append(f"exponents.{name}={v} must exceed 1")
        return None
    return out


def _merge(defaults: dict, given: dict, path: str, strict: bool, errors: list[str]) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        where = f"{path}{key}"
        if key not in defaults:
            if strict:
                errors.append(f"unknown key {where!r}")
            continue
        if isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                errors.append(f"{where} must be a mapping")
                continue
            out[key] = _merge(defaults[key], val, where + ".", strict, errors)
        else:
            out[key] = val
    return out


def _check_number(errors, section, key, value, positive=True, integer=False):
    name = f"{section}.{key}"
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        errors.append(f"{name}={value!r} must be a number")
        return
    if integer and int(value) != value:
        errors.append(f"{name}={value} must be an integer")
    if positive and not value > 0:
        errors.append(f"{name}={value} must be positive")


def parse_config(text: str, strict: bool = True, seed: int | None = None, output=None,
                 experiment: str | None = None) -> RunConfig:
    """Validate a YAML run configuration, collecting every error before raising."""
    errors: list[str] = []
    try:
        raw = yaml.safe_load(text) if text and text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError([f"unreadable YAML: {exc}"]) from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(["top level of the configuration must be a mapping"])
    cfg = _merge(DEFAULTS, raw, "", strict, errors)
    if experiment is not None:
        cfg["experiment"] = experiment
    if seed is not None:
        cfg["seed"] = seed
    if output is not None:
        cfg["output"] = str(output)
    elif "output" not in raw and os.environ.get(OUT_ENV):
        cfg["output"] = str(Path(os.environ[OUT_ENV]) / cfg["experiment"])

    if cfg["experiment"] not in EXPERIMENTS:
        errors.append(f"experiment={cfg['experiment']!r} not one of {EXPERIMENTS}")
    if isinstance(cfg["seed"], bool) or not isinstance(cfg["seed"], int) or not 0 <= cfg["seed"] < 2**64:
        errors.append(f"seed={cfg['seed']!r} must be a 64-bit unsigned integer")
    if not isinstance(cfg["failure_regime"], bool):
        errors.append("failure_regime must be true or false")

    env_raw = dict(cfg["environment"])
    spec = None
    if env_raw.get("model") not in MODELS:
        errors.append(f"environment.model={env_raw.get('model')!r} not one of {MODELS}")
    else:
        try:
            spec = EnvironmentSpec(seed=int(cfg["seed"]) if isinstance(cfg["seed"], int) else 0, **env_raw)
        except (TypeError, ValueError) as exc:
            errors.append(f"environment: {exc}")

    p = _parse_exp(cfg["exponents"]["p"], "p", errors)
    q = _parse_exp(cfg["exponents"]["q"], "q", errors)
    if spec is not None and p is not None and q is not None:
        if not funcineq.moment_condition(p, q, spec.d) and not cfg["failure_regime"]:
            errors.append(f"moment condition 1/p + 1/q < 2/d violated for p={p}, q={q}, d={spec.d} "
                          "(set failure_regime: true to run the failure regime)")

    _check_number(errors, "inequality", "trials", cfg["inequality"]["trials"], integer=True)
    cyl = cfg["cylinder"]
    for key in ("tau", "amplitude"):
        _check_number(errors, "cylinder", key, cyl[key])
    _check_number(errors, "cylinder", "n_solutions", cyl["n_solutions"], integer=True)
    if not (isinstance(cyl["delta"], (int, float)) and 0.5 <= cyl["delta"] < 1):
        errors.append(f"cylinder.delta={cyl['delta']!r} must lie in [1/2, 1)")
    if not (isinstance(cyl["kappa"], (int, float)) and 0 < cyl["kappa"] < 1):
        errors.append(f"cylinder.kappa={cyl['kappa']!r} must lie in (0, 1)")
    for sec, key in (("inequality", "radius"), ("cylinder", "radius"), ("oscillation", "r0"), ("diagonal", "t_min")):
        if cfg[sec][key] is not None:
            _check_number(errors, sec, key, cfg[sec][key])
    _check_number(errors, "log", "n_solutions", cfg["log"]["n_solutions"], integer=True)
    _check_number(errors, "log", "amplitude", cfg["log"]["amplitude"])
    levels = cfg["log"]["levels"]
    if not (isinstance(levels, list) and levels and all(isinstance(v, (int, float)) and v > 0 for v in levels)
            and all(b > a for a, b in zip(levels, levels[1:]))):
        errors.append("log.levels must be a nonempty ascending list of positive numbers")
    _check_number(errors, "oscillation", "k_max", cfg["oscillation"]["k_max"], integer=True)
    _check_number(errors, "oscillation", "n_solutions", cfg["oscillation"]["n_solutions"], integer=True)
    _check_number(errors, "diagonal", "decades", cfg["diagonal"]["decades"])
    _check_number(errors, "diagonal", "count", cfg["diagonal"]["count"], integer=True)
    c = cfg["clt"]
    eps = c["epsilons"]
    if not (isinstance(eps, list) and eps and all(isinstance(v, (int, float)) and 0 < v <= 1 for v in eps)):
        errors.append("clt.epsilons must be a nonempty list of numbers in (0, 1]")
    for key in ("t_min", "t_max", "r"):
        _check_number(errors, "clt", key, c[key])
    if isinstance(c["t_min"], (int, float)) and isinstance(c["t_max"], (int, float)) and c["t_max"] < c["t_min"]:
        errors.append("clt.t_max must be >= clt.t_min")
    _check_number(errors, "clt", "n_times", c["n_times"], integer=True)
    _check_number(errors, "clt", "n_origins", c["n_origins"], integer=True)
    if c["regime"] not in (None, "admissible", "constant", "failure"):
        errors.append(f"clt.regime={c['regime']!r} not one of admissible, constant, failure")
    _check_number(errors, "solver", "rtol", cfg["solver"]["rtol"])
    if cfg["solver"]["method"] not in ("cg", "direct"):
        errors.append(f"solver.method={cfg['solver']['method']!r} not one of cg, direct")

    out_dir = Path(cfg["output"])
    probe = out_dir if out_dir.exists() else next((p for p in out_dir.parents if p.exists()), Path("."))
    if not os.access(probe, os.W_OK):
        errors.append(f"output directory {out_dir} is not writable")

    if errors:
        raise ConfigError(errors)

    h, N = spec.h, spec.N
    side = N * h
    if cfg["inequality"]["radius"] is None:
        cfg["inequality"]["radius"] = side / 4
    if cyl["radius"] is None:
        cyl["radius"] = min(8 * h, side / 4)
    if cfg["oscillation"]["r0"] is None:
        cfg["oscillation"]["r0"] = side / 4
    if cfg["diagonal"]["t_min"] is None:
        cfg["diagonal"]["t_min"] = side / 16
    if c["regime"] is None:
        c["regime"] = "failure" if cfg["failure_regime"] else "admissible"
    sections = {k: cfg[k] for k in ("inequality", "cylinder", "log", "oscillation", "diagonal", "clt", "solver")}
    return RunConfig(cfg["experiment"], int(cfg["seed"]), out_dir, bool(cfg["failure_regime"]), spec, p, q, sections)


# --- pipeline stages ------------------------------------------------------------------


class _Context:
    """Shared state of one run; all file writes go through ``write_*``."""

    def __init__(self, config: RunConfig, manifest: RunManifest):
        self.config = config
        self.manifest = manifest
        self.out = config.output
        self.sample = generate_environment(config.environment)
        self.form = assemble_form(self.sample)
        self.grid = self.form.grid
        self.center = self.grid.center_site()
        self.exps = funcineq.exponents(config.p, config.q, config.environment.d)
        self.C_H = None
        self._stab = None

    @property
    def sections(self) -> dict:
        return self.config.sections

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_json(self, name: str, data) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")
        return p

    def write_csv(self, name: str, header, rows) -> Path:
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        return p

    def stabilization(self):
        if self._stab is None:
            radii = funcineq.dyadic_radii(self.grid, r_min=4 * self.grid.h)
            self._stab = funcineq.stabilization_radius(self.sample, self.center, 1.0, self.exps, radii)
            rows = [[r] + [self._stab.table[k][i] for k in funcineq.SWEPT] for i, r in enumerate(self._stab.radii)]
            self.write_csv("stabilization.csv", ["radius", *funcineq.SWEPT], rows)
            if self._stab.flagged:
                self.manifest.flags.append("stabilization radius not reached below the largest swept radius")
        return self._stab


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    return str(obj)


def _stage_env_gen(ctx: _Context) -> dict:
    save_environment(ctx.sample, ctx.path("environment.bin"))
    p, q = ctx.config.p, ctx.config.q
    rep = moment_report(ctx.sample, p, q)
    ctx.write_json("environment.json", {"spec": asdict(ctx.config.environment), "moments": asdict(rep),
                                        "offdiagonal_norm": ctx.sample.offdiagonal_norm})
    if not rep.condition_ok:
        ctx.manifest.flags.append("empirical moment condition fails for this sample")
    return {"passed": True, "condition_value": rep.condition_value}


def _stage_inequality(ctx: _Context) -> dict:
    sec = ctx.sections["inequality"]
    ball = make_ball(ctx.grid, ctx.center, float(sec["radius"]))
    reports = funcineq.audit_all(ctx.sample, ball, int(sec["trials"]), ctx.exps, seed=ctx.config.seed)
    if ball.radius < 8 * ctx.grid.h:
        ctx.manifest.flags.append(f"inequality ball radius {ball.radius} below the calibrated range (8h)")
    ctx.write_json("inequality_audit.json", {k: asdict(v) for k, v in reports.items()})
    failed = [k for k, v in reports.items() if not v.passed]
    return {"passed": not failed, "failed": failed}


def _stage_harnack(ctx: _Context) -> dict:
    sec = ctx.sections["cylinder"]
    r = float(sec["radius"])
    T = sec["tau"] * r * r
    stab = ctx.stabilization()
    window = make_ball(ctx.grid, ctx.center, r + ctx.grid.h).sites
    u = moser.make_caloric(ctx.form, T, seed=ctx.config.seed, n_solutions=int(sec["n_solutions"]),
                           amplitude=float(sec["amplitude"]), corr_length=r, dt=T / 256, window=window,
                           solver=ctx.sections["solver"]["method"])
    cyl = moser.cylinders(ctx.center, T, r, sec["tau"], sec["delta"], sec["kappa"], h=ctx.grid.h)
    audit = moser.harnack_ratio(u, cyl, ctx.config.environment.model,
                                funcineq.moment_condition(ctx.config.p, ctx.config.q, ctx.config.environment.d),
                                stab.radius)
    moser.write_harnack_records([audit], ctx.out / "harnack")
    ctx.C_H = audit.C_H
    ctx.manifest.residuals["harnack_ie_steps"] = u.ie_steps
    if not audit.above_stabilization:
        ctx.manifest.flags.append(f"harnack radius {r} not above stabilization radius {stab.radius}")
    flagged = sum(rec.flagged for rec in audit.records)
    if flagged:
        ctx.manifest.flags.append(f"{flagged} Harnack ratios below 1")
    return {"passed": audit.all_finite, "C_H": audit.C_H, "ratios_below_one": flagged}


def _stage_log(ctx: _Context) -> dict:
    sec = ctx.sections["log"]
    r = float(ctx.sections["cylinder"]["radius"])
    rep = moser.log_audit_run(ctx.sample, ctx.center, r, ctx.exps, int(sec["n_solutions"]), ctx.config.seed,
                              float(sec["amplitude"]), form=ctx.form)
    env = moser.log_envelope(ctx.exps, ctx.config.environment.N, r, ctx.config.environment.d,
                             ctx.config.environment.h, int(sec["n_solutions"]), ctx.config.seed,
                             float(sec["amplitude"]))
    ctx.write_json("log_audit.json", {**asdict(rep), "envelope": env})
    return {"passed": rep.value <= env, "value": rep.value, "envelope": env}


def _stage_oscillation(ctx: _Context) -> dict:
    sec = ctx.sections["oscillation"]
    r0 = float(sec["r0"])
    T = r0 * r0
    stab = ctx.stabilization()
    window = make_ball(ctx.grid, ctx.center, r0 + ctx.grid.h).sites
    u = moser.make_caloric(ctx.form, T, seed=ctx.config.seed + 1, n_solutions=int(sec["n_solutions"]),
                           corr_length=r0, dt=T / 256, window=window, solver=ctx.sections["solver"]["method"])
    C_H = ctx.C_H
    if C_H is None:
        cyl = moser.cylinders(ctx.center, T, r0, h=ctx.grid.h)
        C_H = moser.harnack_ratio(u, cyl).C_H
    rep = moser.oscillation_decay(u, ctx.center, T, int(sec["k_max"]), r0=r0, C_H=C_H,
                                  stabilization_radius=stab.radius)
    ctx.write_json("oscillation.json", asdict(rep))
    if rep.passed is None:
        ctx.manifest.flags.append("no oscillation level above the stabilization radius")
    return {"passed": rep.passed is not False, "bound": rep.bound}


def _stage_diagonal(ctx: _Context) -> dict:
    sec = ctx.sections["diagonal"]
    times = np.geomspace(sec["t_min"], sec["t_min"] * 10 ** sec["decades"], int(sec["count"]))
    times, D = heat.diagonal_values(ctx.form, times, solver=ctx.sections["solver"]["method"])
    sup = D.max(axis=1)
    d = ctx.config.environment.d
    slope = heat.loglog_slope(times, sup)
    fit = heat.fit_power_envelope(times, sup, float(ctx.exps.gamma))
    ctx.write_csv("diagonal.csv", ["t", "sup_diagonal"], [[f"{t:.10g}", f"{v:.12g}"] for t, v in zip(times, sup)])
    ctx.write_json("diagonal.json", {"slope": slope, "envelope": fit})
    if ctx.config.environment.model == "constant":
        passed = abs(slope + d / 2) <= 0.05 * d / 2
    else:
        passed = fit["satisfied"]
    return {"passed": passed, "slope": slope, "envelope_satisfied": fit["satisfied"]}


def _stage_clt(ctx: _Context) -> dict:
    sec = ctx.sections["clt"]
    form = ctx.form
    times = list(np.linspace(sec["t_min"], sec["t_max"], int(sec["n_times"])))
    corr = clt.solve_corrector(form=form, rtol=ctx.sections["solver"]["rtol"])
    ctx.manifest.residuals["corrector"] = corr.residuals
    t_est = _largest_guarded_time(form)
    moment = clt.sigma_stationary_moment(form, t_est)
    corr_t = clt.sigma_from_corrector(corr, clt.a_lambda(form), moment)
    target = clt.choose_target(corr_t, moment)
    ctx.manifest.flags.extend(corr_t.flags)
    origins = clt.random_origins(form, int(sec["n_origins"]), ctx.config.seed)
    stab = ctx.stabilization()
    res = clt.clt_sweep(form, origins, sec["epsilons"], times, float(sec["r"]), target,
                        stabilization_radius=0.0 if stab.flagged else stab.radius,
                        solver=ctx.sections["solver"]["method"])
    for o in origins:
        for e in res.per_origin[o]:
            if e.skipped:
                ctx.manifest.flags.append(f"origin {o}, eps {e.eps}: {e.skipped}")
    res.write(ctx.out / "clt")
    verdict = clt.sweep_verdict(res, sec["regime"])
    ctx.write_json("clt/verdict.json", {"verdict": verdict, "estimators": {
        "corrector": corr_t.as_dict(), "second_moment": moment.as_dict(), "used": target.method}})
    return {"passed": verdict["passed"], "estimator": target.method}


def _largest_guarded_time(form) -> float:
    """Largest time allowed by the torus guard."""
    return (form.grid.side / 12) ** 2 / clt.sigma_prior(form)


STAGES = {
    "env-gen": _stage_env_gen,
    "inequality-audit": _stage_inequality,
    "harnack": _stage_harnack,
    "log-audit": _stage_log,
    "oscillation": _stage_oscillation,
    "diagonal": _stage_diagonal,
    "clt-sweep": _stage_clt,
}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_outputs(out: Path, manifest: RunManifest):
    manifest.outputs = {str(p.relative_to(out)): _sha256(p) for p in sorted(out.rglob("*"))
                        if p.is_file() and p.name != "manifest.json"}


def run(config: RunConfig, threads: int = 1) -> RunManifest:
    """Run the configured experiment; outputs and ``manifest.json`` land in ``config.output``."""
    out = config.output
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").unlink(missing_ok=True)
    _, cal_version = funcineq.calibration_factors(4, 4, 2)
    manifest = RunManifest(config.hash(), __version__, cal_version, config.experiment, config.seed, threads)
    (out / "config.json").write_text(json.dumps(config.canonical(), indent=2, sort_keys=True) + "\n")
    stages = PIPELINE if config.experiment == "full-pipeline" else (config.experiment,)
    stage = "setup"
    try:
        ctx = _Context(config, manifest)
        for stage in stages:
            start = time.perf_counter()
            log.info("stage %s", stage)
            summary = STAGES[stage](ctx)
            manifest.stages[stage] = {"seconds": time.perf_counter() - start, "passed": bool(summary["passed"]),
                                      "summary": summary}
            log.info("stage %s %s", stage, "passed" if summary["passed"] else "FAILED")
        emit_plot_data(out)
        manifest.status = "complete"
    except Exception as exc:  # every stage failure is recorded, then reported as a runtime error
        manifest.status = "failed"
        manifest.stages[stage] = {"passed": False, "error": f"{type(exc).__name__}: {exc}"}
        (out / "FAILED").write_text(f"stage: {stage}\n{type(exc).__name__}: {exc}\n")
        log.error("stage %s failed: %s", stage, exc)
    _hash_outputs(out, manifest)
    (out / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True,
                                                  default=_json_default) + "\n")
    return manifest


# --- plot data -------------------------------------------------------------------------


_GNUPLOT = {
    "error_vs_eps": ("set logscale xy\nset xlabel 'eps'\nset ylabel 'sup error'\n"
                     "plot for [o in system(\"tail -n +2 error_vs_eps.csv | cut -d, -f2 | sort -u\")] "
                     "'< grep \",'.o.',\" error_vs_eps.csv' using 1:3 with linespoints title 'origin '.o\n"),
    "harnack_hist": ("set style fill solid 0.5\nset xlabel 'Harnack ratio'\nset ylabel 'count'\n"
                     "set datafile separator ','\nplot 'harnack_hist.csv' every ::1 using 1:3 with boxes notitle\n"),
    "diagonal_decay": ("set datafile separator ','\nset xlabel 'log t'\nset ylabel 'log sup p_t(x,x)'\n"
                       "plot 'diagonal_decay.csv' every ::1 using 1:2 with linespoints notitle\n"),
    "stabilization": ("set datafile separator ','\nset logscale xy\nset xlabel 'radius'\n"
                      "plot for [c=2:4] 'stabilization.csv' every ::1 using 1:c with linespoints "
                      "title columnhead(c)\n"),
}


def emit_plot_data(results_dir) -> tuple[list[Path], list[str]]:
    """Long-format CSVs plus a gnuplot script per available figure; returns (written, missing inputs)."""
    root = Path(results_dir)
    plots = root / "plots"
    written, missing = [], []

    def script(name):
        p = plots / f"{name}.gp"
        p.write_text("set datafile separator ','\n" + _GNUPLOT[name])
        written.append(p)

    sweep = root / "clt" / "clt_sweep.json"
    if sweep.exists():
        plots.mkdir(exist_ok=True)
        data = json.loads(sweep.read_text())
        p = plots / "error_vs_eps.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eps", "origin", "sup_error", "relative_error"])
            for o, rows in data["per_origin"].items():
                for e in rows:
                    if e["sup_error"] is not None:
                        w.writerow([e["eps"], o, f"{e['sup_error']:.12g}", f"{e['relative_error']:.12g}"])
        written.append(p)
        script("error_vs_eps")
    else:
        missing.append(str(sweep))

    harn = root / "harnack" / "harnack.csv"
    if harn.exists():
        plots.mkdir(exist_ok=True)
        with open(harn) as fh:
            ratios = np.array([float(row["ratio"]) for row in csv.DictReader(fh)])
        counts, edges = np.histogram(ratios, bins=max(1, min(20, ratios.size)))
        p = plots / "harnack_hist.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_center", "bin_width", "count"])
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                w.writerow([f"{(lo + hi) / 2:.10g}", f"{hi - lo:.10g}", int(c)])
        written.append(p)
        script("harnack_hist")
    else:
        missing.append(str(harn))

    diag = root / "diagonal.csv"
    if diag.exists():
        plots.mkdir(exist_ok=True)
        with open(diag) as fh:
            rows = [(float(r["t"]), float(r["sup_diagonal"])) for r in csv.DictReader(fh)]
        p = plots / "diagonal_decay.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["log_t", "log_sup_diagonal"])
            w.writerows([f"{math.log(t):.12g}", f"{math.log(v):.12g}"] for t, v in rows)
        written.append(p)
        script("diagonal_decay")
    else:
        missing.append(str(diag))

    stab = root / "stabilization.csv"
    if stab.exists():
        plots.mkdir(exist_ok=True)
        p = plots / "stabilization.csv"
        p.write_text(stab.read_text())
        written.append(p)
        script("stabilization")
    else:
        missing.append(str(stab))
    return written, missing


# --- command line ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dhlab", description="Degenerate heat-kernel experiment runner.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        sp = sub.add_parser(name, help=f"run the {name} experiment")
        sp.add_argument("--config", type=Path, help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", type=Path, help=f"output directory (default from config or ${OUT_ENV})")
        sp.add_argument("--threads", type=int, default=1, help="recorded in the manifest; runs are sequential")
        sp.add_argument("--strict", action=argparse.BooleanOptionalAction, default=True,
                        help="reject unknown configuration keys (default on)")
        sp.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    plot = sub.add_parser("emit-plots", help="write plot data for a finished run")
    plot.add_argument("results", type=Path)
    plot.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "emit-plots":
        written, missing = emit_plot_data(args.results)
        for p in written:
            print(p)
        for m in missing:
            print(f"missing: {m}", file=sys.stderr)
        return EXIT_OK if written else EXIT_CONFIG
    try:
        text = args.config.read_text() if args.config else ""
        config = parse_config(text, strict=args.strict, seed=args.seed, output=args.out, experiment=args.command)
    except OSError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        for e in exc.errors:
            print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    manifest = run(config, threads=args.threads)
    for name, st in manifest.stages.items():
        state = "pass" if st.get("passed") else "FAIL"
        print(f"{name}: {state}" + (f" ({st['error']})" if "error" in st else ""))
    for flag in manifest.flags:
        print(f"flag: {flag}")
    return manifest.exit_code()


if __name__ == "__main__":
    sys.exit(main())
