"""Limiting covariance estimators and the local CLT sweep.

Two independent routes to Sigma: the second moment of the heat kernel at a
diffusive time, and the periodic corrector with ``Sigma = 2 a_hom / a_Lambda``.
The sweep rescales the observation window on one fixed environment and
reports the sup error against ``a_Lambda^-1 k_t^Sigma`` together with a
four-term split of the integrated error on small balls.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import isotonic_regression

from .env import FieldSample
from .grid import FormMatrix, assemble_form
from .heat import SOLVER_RTOL, SolverError, default_dt, evolve_path, kernel_columns, point_masses

log = logging.getLogger(__name__)

CROSS_TOLERANCE = 0.10


class GuardError(ValueError):
    pass


def gaussian_kernel(Sigma, t: float, x) -> np.ndarray:
    """k_t^Sigma(x) for points x of shape (..., d)."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if t <= 0:
        raise ValueError("t must be positive")
    d = Sigma.shape[0]
    det = np.linalg.det(Sigma)
    if not det > 0 or np.any(np.linalg.eigvalsh(Sigma) <= 0):
        raise np.linalg.LinAlgError("Sigma must be positive definite")
    x = np.asarray(x, dtype=float)
    inv = np.linalg.inv(Sigma)
    quad = np.einsum("...i,ij,...j->...", x, inv, x)
    return np.exp(-quad / (2 * t)) / math.sqrt((2 * math.pi * t) ** d * det)


@dataclass
class CltTarget:
    Sigma: np.ndarray
    a_Lambda: float
    method: str
    flags: list[str] = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Sigma = np.asarray(self.Sigma, dtype=float)
        if not np.allclose(self.Sigma, self.Sigma.T, rtol=1e-10, atol=1e-12):
            raise ValueError("Sigma must be symmetric")
        self.Sigma = 0.5 * (self.Sigma + self.Sigma.T)
        if np.any(np.linalg.eigvalsh(self.Sigma) <= 0):
            raise ValueError("Sigma must be positive definite")
        if not self.a_Lambda > 0:
            raise ValueError("a_Lambda must be positive")

    def as_dict(self) -> dict:
        return {"Sigma": self.Sigma.tolist(), "a_Lambda": self.a_Lambda, "method": self.method,
                "flags": list(self.flags), "details": self.details}


def a_lambda(form: FormMatrix) -> float:
    """Torus average of Lambda."""
    return float(form.Lam.mean())


def sigma_prior(form: FormMatrix) -> float:
    """Upper scale for Sigma: 2 * largest mean axis conductance / mean Lambda."""
    g = form.grid
    means = [form.cond[form.directions == k].mean() / g.h ** (g.d - 2) for k in range(g.d)]
    return 2 * max(means) / a_lambda(form)


def torus_guard(form: FormMatrix, t: float) -> bool:
    return 6 * math.sqrt(t * sigma_prior(form)) <= form.grid.side / 2


def second_moment(form: FormMatrix, o: int, column) -> np.ndarray:
    disp = form.grid.displacement(o)
    w = column * form.m
    return np.einsum("j,ja,jb->ab", w, disp, disp)


def stratified_origins(form: FormMatrix, stride: int) -> np.ndarray:
    """Every ``stride``-th site along each axis."""
    g = form.grid
    ticks = np.arange(0, g.N, stride)
    mesh = np.stack(np.meshgrid(*([ticks] * g.d), indexing="ij"), -1).reshape(-1, g.d)
    return np.ravel_multi_index(tuple(mesh.T), g.shape)


def sigma_second_moment(form: FormMatrix, o, t: float, dt: float | None = None, solver: str = "direct",
                        weights: str = "m") -> CltTarget:
    """Sigma_est(t) = (1/t) sum_j (x_j - o)(x_j - o)^T p_t(o, j) m_j.

    Several origins may be given; their estimates are averaged with weights
    m_o (``weights="m"``, a stationary start) or uniformly.  A single origin
    carries a start bias of order 1/t from its local environment.
    """
    if not torus_guard(form, t):
        raise GuardError(f"6 sqrt(t Sigma_prior) exceeds half the torus at t={t}")
    origins = np.atleast_1d(np.asarray(o, dtype=int))
    cols, rec = kernel_columns(form, origins, t, dt, solver=solver)
    per = np.array([second_moment(form, oo, cols[:, k]) / t for k, oo in enumerate(origins)])
    w = form.m[origins] if weights == "m" else np.ones(origins.size)
    Sigma = np.tensordot(w / w.sum(), per, axes=1)
    return CltTarget(Sigma, a_lambda(form), "second_moment",
                     details={"t": t, "origins": origins.tolist(), "weights": weights, "ie_steps": rec.ie_steps})


def sigma_stationary_moment(form: FormMatrix, t: float, dt: float | None = None) -> CltTarget:
    """Second-moment estimate averaged over every origin with weights m_o.

    Equals (1/t) sum_o m_o sum_j (x_j - o)(x_j - o)^T p_t(o, j) m_j / sum m with the
    unwrapped displacement.  Rather than one kernel column per origin it evolves
    the d mean-drift columns phi_e(s, x) = E_x[(X_s - X_0)_e], which solve
    d phi/ds = L phi + b_e from phi = 0, and integrates the exact rate
    d/ds E_m[(X_s - X_0)(X_s - X_0)^T] by the trapezoid rule.
    """
    if not torus_guard(form, t):
        raise GuardError(f"6 sqrt(t Sigma_prior) exceeds half the torus at t={t}")
    g = form.grid
    d, h = g.d, g.h
    n_steps, dt = _steps_for(t, default_dt(h, t) if dt is None else dt)
    D = _face_operator(form)
    axis = [form.directions == e for e in range(d)]
    source = np.stack([D.T @ np.where(axis[e], form.cond * h, 0.0) for e in range(d)], axis=1)
    M = sp.diags(form.m)
    lu = spla.splu(sp.csc_matrix(M + (dt / 2) * form.E))
    B = sp.csr_matrix(M - (dt / 2) * form.E)
    total_m = float(form.m.sum())
    base = np.diag([2 * h**2 * form.cond[axis[e]].sum() for e in range(d)])

    def rate(phi):
        Dphi = D @ phi
        cross = np.array([[h * np.sum(form.cond[axis[e]] * Dphi[axis[e], f]) for f in range(d)] for e in range(d)])
        return (base - cross - cross.T) / total_m

    phi = np.zeros((form.n, d))
    r_prev = rate(phi)
    Q = np.zeros((d, d))
    for _ in range(n_steps):
        phi = lu.solve(B @ phi + dt * source)
        r_next = rate(phi)
        Q += 0.5 * dt * (r_prev + r_next)
        r_prev = r_next
    return CltTarget(Q / t, a_lambda(form), "second_moment",
                     details={"t": t, "origins": "stationary", "dt": dt, "steps": n_steps})


def _steps_for(t: float, dt: float) -> tuple[int, float]:
    n = max(1, math.ceil(t / dt - 1e-9))
    return n, t / n


@dataclass
class CorrectorField:
    chi: np.ndarray  # (d, n_sites)
    a_hom: np.ndarray
    residuals: list[float]
    harmonic_bound: float
    arithmetic_bound: np.ndarray

    @property
    def d(self) -> int:
        return self.chi.shape[0]


def _face_operator(form: FormMatrix) -> sp.csr_matrix:
    """D with (D v)_f = v_tail - v_head."""
    nf = form.cond.size
    rows = np.concatenate([np.arange(nf), np.arange(nf)])
    cols = np.concatenate([form.tails, form.heads])
    vals = np.concatenate([np.ones(nf), -np.ones(nf)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(nf, form.n))


def solve_corrector(sample: FieldSample | None = None, grid=None, form: FormMatrix | None = None,
                    rtol: float = SOLVER_RTOL) -> CorrectorField:
    """Periodic cell problems E chi_e = -E l_e for every axis e.

    The linear map l_e has face increment l_e(tail) - l_e(head) = -h on faces
    along e (including the wrap-around face) and 0 otherwise.
    """
    if form is None:
        form = assemble_form(sample, grid)
    g = form.grid
    d, h = g.d, g.h
    D = _face_operator(form)
    precond = sp.diags(1.0 / form.E.diagonal())
    chi = np.zeros((d, form.n))
    grads = []
    residuals = []
    for e in range(d):
        ge = np.where(form.directions == e, -h, 0.0)
        b = -(D.T @ (form.cond * ge))
        nb = np.linalg.norm(b)
        if nb == 0:
            x = np.zeros(form.n)
            res = 0.0
        else:
            x, info = spla.cg(form.E, b, rtol=rtol, atol=0.0, M=precond, maxiter=20 * form.n)
            res = float(np.linalg.norm(b - form.E @ x) / nb)
            if info != 0:
                raise SolverError(f"corrector solve for direction {e} did not converge", res)
        x -= np.sum(x * form.m) / form.m.sum()
        chi[e] = x
        residuals.append(res)
        grads.append(ge + D @ x)
    vol = g.volume
    a_hom = np.array([[np.sum(form.cond * grads[e] * grads[f]) for f in range(d)] for e in range(d)]) / vol
    a_hom = 0.5 * (a_hom + a_hom.T)
    # Voigt-Reuss bounds from the face conductances along each axis
    harm = []
    arith = []
    for e in range(d):
        c = form.cond[form.directions == e] / h ** (d - 2)
        harm.append(1.0 / np.mean(1.0 / c))
        arith.append(np.mean(c))
    return CorrectorField(chi, a_hom, residuals, float(min(harm)), np.array(arith))


def sigma_from_corrector(corrector: CorrectorField, a_Lambda: float, reference: CltTarget | None = None) -> CltTarget:
    """Sigma = 2 a_hom / a_Lambda, flagged when it disagrees with ``reference`` by more than 10%."""
    target = CltTarget(2 * corrector.a_hom / a_Lambda, a_Lambda, "corrector")
    if reference is not None:
        rel = relative_op_distance(target.Sigma, reference.Sigma)
        target.details["cross_check"] = rel
        if rel > CROSS_TOLERANCE:
            target.flags.append(f"corrector disagrees with {reference.method} by {rel:.3f}")
    return target


def relative_op_distance(A, B) -> float:
    return float(np.linalg.norm(np.asarray(A) - np.asarray(B), 2) / np.linalg.norm(np.asarray(B), 2))


def choose_target(corrector_target: CltTarget, moment_target: CltTarget) -> CltTarget:
    """Corrector Sigma unless the cross-check flagged it, then the second-moment estimate."""
    return moment_target if corrector_target.flags else corrector_target


# --- sweep --------------------------------------------------------------------


@dataclass
class EpsilonResult:
    eps: float
    sup_error: float | None
    relative_error: float | None
    J: dict = field(default_factory=dict)
    mass_error: float | None = None
    skipped: str | None = None


@dataclass
class CltSweepResult:
    origins: list[int]
    epsilons: list[float]
    times: list[float]
    r: float
    r0: float
    target: dict
    per_origin: dict[int, list[EpsilonResult]]
    records: list[tuple] = field(default_factory=list, repr=False)

    def errors(self, origin: int | None = None) -> np.ndarray:
        o = self.origins[0] if origin is None else origin
        return np.array([np.nan if e.sup_error is None else e.sup_error for e in self.per_origin[o]])

    def to_json(self) -> str:
        data = {
            "origins": self.origins,
            "epsilons": self.epsilons,
            "times": self.times,
            "r": self.r,
            "r0": self.r0,
            "target": self.target,
            "per_origin": {str(k): [asdict(e) for e in v] for k, v in self.per_origin.items()},
        }
        return json.dumps(data, indent=2)

    def write(self, directory) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        jpath = directory / "clt_sweep.json"
        jpath.write_text(self.to_json())
        cpath = directory / "clt_sweep.csv"
        with open(cpath, "w", newline="") as fh:
            w = csv.writer(fh)
            d = len(self.records[0][3]) if self.records else 0
            w.writerow(["origin", "eps", "t"] + [f"x{k + 1}" for k in range(d)] + ["density", "gaussian", "error"])
            for o, eps, t, x, dens, gauss in self.records:
                w.writerow([o, eps, t, *(f"{v:.10g}" for v in x), f"{dens:.12g}", f"{gauss:.12g}",
                            f"{abs(dens - gauss):.12g}"])
        return jpath, cpath


def isotonic_residual(errors) -> float:
    """max |e - nonincreasing fit| / max e, errors ordered from coarse to fine eps."""
    e = np.asarray(errors, dtype=float)
    fit = isotonic_regression(e, increasing=False).x
    return float(np.max(np.abs(e - fit)) / np.max(e))


def _cover_centers(r: float, r0: float, d: int) -> np.ndarray:
    ticks = np.arange(-r, r + 1e-12, r0)
    mesh = np.stack(np.meshgrid(*([ticks] * d), indexing="ij"), -1).reshape(-1, d)
    return mesh[np.linalg.norm(mesh, axis=1) < r]


def j_decomposition(form: FormMatrix, o: int, p, t: float, eps: float, target: CltTarget, centers,
                    r0: float) -> dict:
    """J = J1 + J2 + J3 + J4 on each ball B(x, r0), discretised on the micro lattice.

    Returns the sup over centres of |J| and |J_i| and the largest recombination error.
    """
    g = form.grid
    h = g.h
    disp = g.displacement(o)
    a = target.a_Lambda
    cell = (eps * h) ** g.d
    out = {"J": 0.0, "J1": 0.0, "J2": 0.0, "J3": 0.0, "J4": 0.0, "recombination": 0.0}
    for x in centers:
        y_micro = x / eps
        dist = np.linalg.norm(disp - y_micro, axis=1)
        sites = np.flatnonzero(dist < r0 / eps)
        if sites.size == 0:
            continue
        nearest = int(np.argmin(dist))
        kx = float(gaussian_kernel(target.Sigma, t, x))
        ky = gaussian_kernel(target.Sigma, t, eps * disp[sites])
        m = form.m[sites]
        S = float(m.sum())
        px = p[nearest]
        vol = sites.size * cell
        J = float(np.sum(p[sites] * m) - np.sum(ky) * cell)
        J1 = float(np.sum((p[sites] - px) * m))
        J2 = S * (px - eps ** g.d / a * kx)
        J3 = kx * (eps ** g.d / a * S - vol)
        J4 = float(np.sum(kx - ky) * cell)
        for key, val in (("J", J), ("J1", J1), ("J2", J2), ("J3", J3), ("J4", J4)):
            out[key] = max(out[key], abs(val))
        out["recombination"] = max(out["recombination"], abs(J - (J1 + J2 + J3 + J4)))
    return out


def clt_sweep(form: FormMatrix, origins, epsilons, times, r: float, target: CltTarget,
              r0: float | None = None, stabilization_radius: float = 0.0, solver: str = "direct",
              keep_records: bool = True) -> CltSweepResult:
    """Sup error of eps^-d p_{t/eps^2}(o, x/eps) against a_Lambda^-1 k_t^Sigma(x) on B(o, r) x times."""
    g = form.grid
    origins = [int(o) for o in np.atleast_1d(origins)]
    epsilons = sorted((float(e) for e in epsilons), reverse=True)
    times = [float(t) for t in times]
    r0 = r / 2 if r0 is None else r0
    centers = _cover_centers(r, r0, g.d)
    scale = float(gaussian_kernel(target.Sigma, min(times), np.zeros(g.d)))
    per = {o: [] for o in origins}
    records = []
    for eps in epsilons:
        t_micro = [t / eps**2 for t in times]
        reason = None
        if not torus_guard(form, max(t_micro)):
            reason = f"torus guard violated at t/eps^2 = {max(t_micro)}"
        elif eps == epsilons[-1] and r / eps < stabilization_radius:
            reason = f"r/eps = {r / eps} below stabilization radius {stabilization_radius}"
        if reason is not None:
            log.warning("skipping eps=%s: %s", eps, reason)
            for o in origins:
                per[o].append(EpsilonResult(eps, None, None, skipped=reason))
            continue
        dt = default_dt(g.h, t_micro[0])
        path, _ = evolve_path(form, point_masses(form, origins), t_micro, dt, solver=solver)
        for k, o in enumerate(origins):
            disp = g.displacement(o)
            inside = np.flatnonzero(np.linalg.norm(eps * disp, axis=1) < r)
            sup_err = 0.0
            J_tot = {}
            mass_err = 0.0
            for ti, t in enumerate(times):
                p = path[ti][:, k]
                mass_err = max(mass_err, abs(float(np.sum(p * form.m)) - 1.0))
                dens = eps ** (-g.d) * p[inside]
                x = eps * disp[inside]
                gauss = gaussian_kernel(target.Sigma, t, x) / target.a_Lambda
                sup_err = max(sup_err, float(np.max(np.abs(dens - gauss))))
                if keep_records:
                    records.extend((o, eps, t, xx, dd, gg) for xx, dd, gg in zip(x, dens, gauss))
                jd = j_decomposition(form, o, p, t, eps, target, centers, r0)
                for key, val in jd.items():
                    J_tot[key] = max(J_tot.get(key, 0.0), val)
            per[o].append(EpsilonResult(eps, sup_err, sup_err / scale, J_tot, mass_err))
    return CltSweepResult(origins, epsilons, times, r, r0, target.as_dict(), per, records)


def random_origins(form: FormMatrix, count: int, seed: int, spread: float | None = None) -> list[int]:
    """Sites drawn uniformly from a central box of half-width ``spread`` (default: a quarter torus)."""
    g = form.grid
    rng = np.random.default_rng([seed, 4242])
    half = g.N // 4 if spread is None else int(spread / g.h)
    c = g.N // 2
    idx = rng.integers(c - half, c + half + 1, size=(count, g.d))
    return [g.flat(row) for row in idx]


def sweep_verdict(result: CltSweepResult, regime: str = "admissible", iso_tol: float = 0.2,
                  decay: float = 0.4, floor: float = 0.5, accuracy: float = 0.02) -> dict:
    """Pass/fail of a sweep per origin over the evaluated (non-skipped) epsilons.

    ``admissible``: isotonic residual below ``iso_tol`` and, with at least two
    evaluated epsilons, finest error below ``decay`` times the coarsest.
    ``constant``: additionally the finest relative error below ``accuracy``.
    ``failure``: the finest error stays above ``floor`` times the coarsest.
    """
    if regime not in ("admissible", "constant", "failure"):
        raise ValueError(f"unknown regime {regime!r}")
    per = {}
    for o in result.origins:
        evaluated = [e for e in result.per_origin[o] if e.skipped is None]
        errs = np.array([e.sup_error for e in evaluated])
        entry = {"evaluated": [e.eps for e in evaluated], "errors": errs.tolist()}
        if errs.size == 0:
            entry.update(passed=False, reason="every epsilon skipped")
        else:
            ratio = float(errs[-1] / errs[0]) if errs[0] > 0 else 0.0
            iso = isotonic_residual(errs) if errs.max() > 0 else 0.0
            entry.update(isotonic_residual=iso, finest_over_coarsest=ratio,
                         finest_relative=evaluated[-1].relative_error)
            if regime == "failure":
                ok = errs.size >= 2 and ratio >= floor
            else:
                ok = iso < iso_tol and (errs.size < 2 or ratio < decay)
                if regime == "constant":
                    ok = ok and evaluated[-1].relative_error < accuracy
            entry["passed"] = bool(ok)
        per[o] = entry
    return {"regime": regime, "per_origin": per, "passed": all(v["passed"] for v in per.values())}
