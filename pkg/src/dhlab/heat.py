"""Heat semigroup on the torus and on killed balls.

Time stepping solves ``M du/dt = -E u``.  A Crank-Nicolson step is tried
first; if it turns nonnegative input into a value below ``-1e-12 * max|u|``
the step is redone with implicit Euler, which is positivity preserving for
the M-matrix stencil.  Signed data never triggers the guard.
Kernel columns are densities against the speed measure ``m``.
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

from .grid import FormMatrix

log = logging.getLogger(__name__)

SOLVER_RTOL = 1e-10
GUARD_TOL = 1e-12


class SolverError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass
class SchemeRecord:
    dt: float
    method: str = "cn"
    solver: str = "cg"
    rtol: float = SOLVER_RTOL
    cn_steps: int = 0
    ie_steps: int = 0

    @property
    def switches(self) -> int:
        return self.ie_steps

    def merge(self, other: "SchemeRecord") -> None:
        self.cn_steps += other.cn_steps
        self.ie_steps += other.ie_steps


@dataclass
class HeatState:
    t: float
    u: np.ndarray
    scheme: SchemeRecord


@dataclass
class KernelColumn:
    o: int
    t: float
    values: np.ndarray
    scheme: SchemeRecord

    def mass(self, m) -> float:
        return float(np.sum(self.values * m))


def default_dt(h: float, t: float) -> float:
    return min(h * h, t / 64.0) if t > 0 else h * h


def positivity_safe_dt(form: FormMatrix) -> float:
    """Largest step for which a Crank-Nicolson step keeps nonnegative data nonnegative."""
    diag = form.E.diagonal()
    with np.errstate(divide="ignore"):
        ratio = np.where(diag > 0, 2.0 * form.m / diag, np.inf)
    return float(ratio.min())


class _Solve:
    """Solver for (M + c E) x = b, reused across steps."""

    def __init__(self, form: FormMatrix, c: float, solver: str, rtol: float):
        self.A = (sp.diags(form.m) + c * form.E).tocsc()
        self.solver = solver
        self.rtol = rtol
        if solver == "direct":
            self.lu = spla.splu(self.A)
        elif solver == "cg":
            self.precond = sp.diags(1.0 / self.A.diagonal())
        else:
            raise ValueError(f"unknown solver {solver!r}")

    def __call__(self, b, x0=None):
        if self.solver == "direct":
            return self.lu.solve(b)
        if b.ndim == 2:
            cols = [self(b[:, k], None if x0 is None else x0[:, k]) for k in range(b.shape[1])]
            return np.column_stack(cols)
        nb = np.linalg.norm(b)
        if nb == 0:
            return np.zeros_like(b)
        x, info = spla.cg(self.A, b, x0=x0, rtol=self.rtol, atol=0.0, M=self.precond, maxiter=10 * b.size)
        if info != 0:
            res = float(np.linalg.norm(b - self.A @ x) / nb)
            raise SolverError(f"conjugate gradient did not converge (info={info})", res)
        return x


class Propagator:
    """One-step evolution with a fixed step size on a given form."""

    def __init__(self, form: FormMatrix, dt: float, method: str = "cn", solver: str = "cg",
                 rtol: float = SOLVER_RTOL, guard: bool = True):
        if dt <= 0:
            raise ValueError(f"dt must be positive, got {dt}")
        if method not in ("cn", "ie"):
            raise ValueError(f"unknown method {method!r}")
        self.form = form
        self.dt = dt
        self.method = method
        self.solver = solver
        self.rtol = rtol
        self.guard = guard
        self._ie = _Solve(form, dt, solver, rtol)
        self._cn = _Solve(form, dt / 2, solver, rtol) if method == "cn" else None
        self._total_m = float(form.m.sum())

    def _fix_mass(self, A, x, b):
        # (M + cE) 1 = m on the torus, so a constant shift restores 1^T A x = 1^T b.
        if not self.form.conservative:
            return x
        return x + (b.sum(axis=0) - (A @ x).sum(axis=0)) / self._total_m

    def step(self, u, record: SchemeRecord):
        m = self.form.m if u.ndim == 1 else self.form.m[:, None]
        if self._cn is not None:
            b = m * u - (self.dt / 2) * (self.form.E @ u)
            x = self._fix_mass(self._cn.A, self._cn(b, u), b)
            # the guard protects positivity, so it only applies to nonnegative input
            signed = u.min() < -GUARD_TOL * np.abs(u).max()
            if not self.guard or signed or x.min() >= -GUARD_TOL * np.abs(x).max():
                record.cn_steps += 1
                return x
        b = m * u
        x = self._fix_mass(self._ie.A, self._ie(b, u), b)
        record.ie_steps += 1
        return x

    def run(self, u, n_steps: int, record: SchemeRecord):
        for _ in range(n_steps):
            u = self.step(u, record)
            if not np.all(np.isfinite(u)):
                raise SolverError("non-finite values during time stepping", math.inf)
        return u


def _steps(t: float, dt: float) -> tuple[int, float]:
    n = max(1, math.ceil(t / dt - 1e-9))
    return n, t / n


def evolve(form: FormMatrix, u0, t: float, dt: float | None = None, method: str = "cn",
           solver: str = "cg", rtol: float = SOLVER_RTOL, guard: bool = True) -> HeatState:
    """Evolve ``u0`` (one column or a batch of columns) up to time ``t``.

    The step is shrunk so that an integer number of steps lands on ``t``.
    """
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    u = np.array(u0, dtype=float)
    if dt is None:
        dt = default_dt(form.grid.h, t)
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if t == 0:
        return HeatState(0.0, u, SchemeRecord(dt, method, solver, rtol))
    n, dt_eff = _steps(t, dt)
    record = SchemeRecord(dt_eff, method, solver, rtol)
    prop = Propagator(form, dt_eff, method, solver, rtol, guard)
    return HeatState(t, prop.run(u, n, record), record)


def evolve_path(form: FormMatrix, u0, times, dt: float, method: str = "cn", solver: str = "cg",
                rtol: float = SOLVER_RTOL, guard: bool = True) -> tuple[np.ndarray, SchemeRecord]:
    """Values of the solution at every time in ``times`` (ascending, starting at or after 0).

    Returns an array of shape ``(len(times),) + u0.shape``.
    """
    times = np.asarray(times, dtype=float)
    if times.size and (times[0] < 0 or np.any(np.diff(times) < 0)):
        raise ValueError("times must be nonnegative and ascending")
    u = np.array(u0, dtype=float)
    out = np.empty((times.size,) + u.shape)
    record = SchemeRecord(dt, method, solver, rtol)
    cache: dict[float, Propagator] = {}
    now = 0.0
    for k, target in enumerate(times):
        gap = target - now
        if gap > 1e-14:
            n, dt_eff = _steps(gap, dt)
            key = round(dt_eff, 12)
            if key not in cache:
                cache[key] = Propagator(form, dt_eff, method, solver, rtol, guard)
            u = cache[key].run(u, n, record)
            now = target
        out[k] = u
    return out, record


def point_masses(form: FormMatrix, sites) -> np.ndarray:
    sites = np.atleast_1d(np.asarray(sites, dtype=int))
    u = np.zeros((form.n, sites.size))
    u[sites, np.arange(sites.size)] = 1.0 / form.m[sites]
    return u


def kernel_columns(form: FormMatrix, sites, t: float, dt: float | None = None, **kw) -> tuple[np.ndarray, SchemeRecord]:
    """p_t(o, .) for every o in ``sites`` as columns of one array.

    All columns share one step schedule (guard decisions are taken for the
    whole batch), so the discrete kernel stays exactly symmetric.
    """
    if t <= 0:
        raise ValueError(f"t must be positive, got {t}")
    state = evolve(form, point_masses(form, sites), t, dt, **kw)
    return state.u, state.scheme


def kernel_column(form: FormMatrix, o: int, t: float, dt: float | None = None, **kw) -> KernelColumn:
    vals, record = kernel_columns(form, [o], t, dt, **kw)
    return KernelColumn(int(o), t, vals[:, 0], record)


def probe_sites(form: FormMatrix, count: int = 64, full_limit: int = 1024) -> np.ndarray:
    """Deterministic probe set: every site on small grids, a stratified sample otherwise."""
    g = form.grid
    if g.n_sites <= full_limit:
        return np.arange(g.n_sites)
    per_axis = max(1, round(count ** (1.0 / g.d)))
    stride = g.N / per_axis
    ticks = (np.arange(per_axis) * stride + stride / 2).astype(int)
    mesh = np.stack(np.meshgrid(*([ticks] * g.d), indexing="ij"), axis=-1).reshape(-1, g.d)
    return np.ravel_multi_index(tuple(mesh.T), g.shape)


def chapman_kolmogorov_residual(form: FormMatrix, o: int, t: float, s: float, dt: float | None = None,
                                probes=None, **kw) -> float:
    """max_j |p_{t+s}(o,j) - sum_k p_t(o,k) p_s(j,k) m_k| over probe sites j.

    The sum uses symmetry of p_s so that only columns at the probes are needed.
    The residual is normalised by max_j p_{t+s}(o,j).  The step is capped at
    the positivity-safe step so that no scheme switches occur; the t+s run
    uses the t-leg schedule followed by the s-leg schedule, so the residual
    measures solver error only.
    """
    if t <= 0 or s <= 0:
        raise ValueError("t and s must be positive")
    if dt is None:
        dt = min(default_dt(form.grid.h, min(t, s)), positivity_safe_dt(form))
    probes = probe_sites(form) if probes is None else np.asarray(probes, dtype=int)
    path, _ = evolve_path(form, point_masses(form, [o])[:, 0], [t, t + s], dt, **kw)
    p_t, p_ts = path[0], path[1]
    p_s, _ = kernel_columns(form, probes, s, dt, **kw)
    composed = (p_t * form.m) @ p_s
    diff = np.abs(p_ts[probes] - composed)
    return float(diff.max() / np.abs(p_ts).max())


def symmetry_residual(form: FormMatrix, sites, t: float, dt: float | None = None, **kw) -> float:
    """max |p_t(x,y) - p_t(y,x)| over pairs in ``sites``, relative to the largest value."""
    cols, _ = kernel_columns(form, sites, t, dt, **kw)
    block = cols[np.asarray(sites), :]
    return float(np.abs(block - block.T).max() / np.abs(block).max())


def diagonal_profile(form: FormMatrix, times, dt: float | None = None, probes=None,
                     solver: str = "direct", **kw) -> list[tuple[float, float]]:
    """(t, max over probes of p_t(x,x)) for each time; see :func:`diagonal_values`."""
    times, diag = diagonal_values(form, times, dt, probes, solver=solver, **kw)
    return [(float(t), float(row.max())) for t, row in zip(times, diag)]


def diagonal_values(form: FormMatrix, times, dt: float | None = None, probes=None,
                    solver: str = "direct", **kw) -> tuple[np.ndarray, np.ndarray]:
    """p_t(x,x) at every probe x and time, shape (len(times), len(probes))."""
    times = np.asarray(times, dtype=float)
    if times.size == 0 or times[0] <= 0 or np.any(np.diff(times) <= 0):
        raise ValueError("times must be positive and strictly ascending")
    probes = probe_sites(form) if probes is None else np.asarray(probes, dtype=int)
    if dt is None:
        dt = default_dt(form.grid.h, times[0])
    path, _ = evolve_path(form, point_masses(form, probes), times, dt, solver=solver, **kw)
    idx = np.arange(probes.size)
    return times, path[:, probes, idx]


def fit_power_envelope(times, values, gamma: float) -> dict:
    """Fit C t^(-gamma) through the first point and report the envelope check."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    C = values[0] * times[0] ** gamma
    envelope = C * times ** (-gamma)
    ratio = values / envelope
    return {
        "gamma": float(gamma),
        "C": float(C),
        "ratios": ratio.tolist(),
        "log_residuals": np.log(ratio).tolist(),
        "satisfied": bool(np.all(ratio <= 1 + 1e-9)),
    }


def fit_diagonal_envelope(times, values, distances, gamma: float, d: int, s0: float) -> dict:
    """Fit C t^-gamma (s0 + |x| + sqrt t)^(2 gamma - d) to p_t(x,x) at the first time.

    ``values`` has shape (len(times), len(distances)); ``distances`` are |x|
    from the reference point whose stabilization radius is ``s0``.  For
    gamma = d/2 the shape reduces to C t^-d/2.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    dist = np.asarray(distances, dtype=float)
    shape = times[:, None] ** (-gamma) * (s0 + dist[None, :] + np.sqrt(times)[:, None]) ** (2 * gamma - d)
    C = float(np.max(values[0] / shape[0]))
    ratio = values / (C * shape)
    worst = ratio.max(axis=1)
    return {
        "gamma": float(gamma),
        "C": C,
        "s0": float(s0),
        "worst_ratio": worst.tolist(),
        "log_residuals": np.log(worst).tolist(),
        "satisfied": bool(np.all(ratio <= 1 + 1e-9)),
    }


def loglog_slope(times, values) -> float:
    return float(np.polyfit(np.log(times), np.log(values), 1)[0])


# --- export ------------------------------------------------------------------


@dataclass
class KernelManifest:
    t: float
    dt: float
    rtol: float
    solver: str
    cn_steps: int
    ie_steps: int
    base_site: int
    extra: dict = field(default_factory=dict)


def export_kernel_csv(form: FormMatrix, column: KernelColumn, path) -> tuple[Path, Path]:
    """Write ``site,x_1..x_d,density`` rows plus a JSON manifest next to it."""
    path = Path(path)
    g = form.grid
    coords = g.indices * g.h
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site"] + [f"x{k + 1}" for k in range(g.d)] + ["density"])
        for i in range(g.n_sites):
            w.writerow([i, *(f"{c:.10g}" for c in coords[i]), f"{column.values[i]:.17g}"])
    rec = column.scheme
    manifest = KernelManifest(column.t, rec.dt, rec.rtol, rec.solver, rec.cn_steps, rec.ie_steps, column.o)
    mpath = path.with_suffix(".manifest.json")
    mpath.write_text(json.dumps(asdict(manifest), indent=2))
    return path, mpath
