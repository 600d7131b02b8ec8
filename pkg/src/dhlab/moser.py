"""Parabolic cylinders, caloric test solutions and the Moser/Harnack audits.

Solutions are global torus solutions sampled at every time step on a window
of sites; restricting them to a cylinder gives a caloric function there.
Suprema and infima run over grid sites and time samples, with closed time
intervals and open torus-metric balls.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .env import EnvironmentSpec, FieldSample, generate_environment
from .funcineq import ConstantReport, ExponentSet, constants
from .grid import FormMatrix, TorusGrid, assemble_form, ball_volume, grid_for, make_ball, radial_cutoff
from .heat import Propagator, SchemeRecord, kernel_columns

log = logging.getLogger(__name__)

KINDS = ("Q", "Q_sigma", "Q_prime", "Q_minus", "Q_plus", "K_plus", "K_minus")
TIME_TOL = 1e-9
RATIO_TOL = 1e-9


class CylinderError(ValueError):
    pass


class PositivityError(RuntimeError):
    pass


# --- geometry ----------------------------------------------------------------


@dataclass(frozen=True)
class ParabolicCylinder:
    kind: str
    center: int
    t_lo: float
    t_hi: float
    radius: float

    @property
    def duration(self) -> float:
        return self.t_hi - self.t_lo

    def contains_time(self, t) -> np.ndarray:
        t = np.asarray(t)
        return (t >= self.t_lo - TIME_TOL) & (t <= self.t_hi + TIME_TOL)

    def sites(self, grid: TorusGrid) -> np.ndarray:
        return make_ball(grid, self.center, self.radius).sites


@dataclass(frozen=True)
class CylinderSet:
    center: int
    s: float
    r: float
    tau: float
    delta: float
    kappa: float

    def _cyl(self, kind, lo, hi, radius) -> ParabolicCylinder:
        return ParabolicCylinder(kind, self.center, lo, hi, radius)

    def Q(self) -> ParabolicCylinder:
        return self._cyl("Q", self.s - self.tau * self.r**2, self.s, self.r)

    def Q_sigma(self, sigma: float | None = None) -> ParabolicCylinder:
        sg = self.delta if sigma is None else sigma
        return self._cyl("Q_sigma", self.s - sg * self.tau * self.r**2, self.s, sg * self.r)

    def Q_prime(self, sigma: float | None = None) -> ParabolicCylinder:
        sg = self.delta if sigma is None else sigma
        T = self.tau * self.r**2
        return self._cyl("Q_prime", self.s - T, self.s - (1 - sg) * T, sg * self.r)

    def Q_minus(self) -> ParabolicCylinder:
        T = self.tau * self.r**2
        return self._cyl("Q_minus", self.s - (3 + self.delta) * T / 4, self.s - (3 - self.delta) * T / 4,
                         self.delta * self.r)

    def Q_plus(self) -> ParabolicCylinder:
        T = self.tau * self.r**2
        return self._cyl("Q_plus", self.s - (1 + self.delta) * T / 4, self.s, self.delta * self.r)

    def K_plus(self) -> ParabolicCylinder:
        T = self.tau * self.r**2
        return self._cyl("K_plus", self.s - self.kappa * T, self.s, self.delta * self.r)

    def K_minus(self) -> ParabolicCylinder:
        T = self.tau * self.r**2
        return self._cyl("K_minus", self.s - T, self.s - self.kappa * T, self.delta * self.r)

    def all(self) -> dict[str, ParabolicCylinder]:
        return {k: getattr(self, k)() for k in KINDS}


def cylinders(x: int, s: float, r: float, tau: float = 1.0, delta: float = 0.5, kappa: float = 0.5,
              h: float = 1.0, t_start: float = 0.0) -> CylinderSet:
    """All cylinders attached to Q = (s - tau r^2, s) x B(x, r)."""
    if r < 4 * h - 1e-12:
        raise CylinderError(f"radius {r} below 4h = {4 * h}")
    if tau <= 0:
        raise CylinderError("tau must be positive")
    if not 0.5 <= delta < 1:
        raise CylinderError(f"delta={delta} outside [1/2, 1)")
    if not 0 < kappa < 1:
        raise CylinderError(f"kappa={kappa} outside (0, 1)")
    if s - tau * r * r < t_start - TIME_TOL:
        raise CylinderError(f"cylinder bottom {s - tau * r * r} precedes solution start {t_start}")
    return CylinderSet(int(x), float(s), float(r), float(tau), float(delta), float(kappa))


# --- caloric solutions -------------------------------------------------------


@dataclass
class CaloricBatch:
    """Solutions sampled at ``times`` on the sites ``window``.

    ``values`` has shape ``(len(times), len(window), n_solutions)``.
    """

    grid: TorusGrid
    times: np.ndarray
    window: np.ndarray
    values: np.ndarray
    Lam: np.ndarray  # Lambda on the window
    ie_steps: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_solutions(self) -> int:
        return self.values.shape[2]

    def positions(self, sites) -> np.ndarray:
        pos = np.searchsorted(self.window, sites)
        if np.any(pos >= self.window.size) or np.any(self.window[np.minimum(pos, self.window.size - 1)] != sites):
            raise CylinderError("cylinder extends beyond the stored window")
        return pos

    def block(self, cyl: ParabolicCylinder, sites=None):
        """(time indices, window positions, values[t, site, sol]) inside a cylinder."""
        tmask = cyl.contains_time(self.times)
        if not tmask.any():
            raise CylinderError(f"no time samples in {cyl.kind} ({cyl.t_lo}, {cyl.t_hi})")
        sites = cyl.sites(self.grid) if sites is None else sites
        pos = self.positions(sites)
        tidx = np.flatnonzero(tmask)
        return tidx, pos, self.values[np.ix_(tidx, pos, np.arange(self.n_solutions))]

    def select(self, k) -> "CaloricBatch":
        k = np.atleast_1d(k)
        return CaloricBatch(self.grid, self.times, self.window, self.values[:, :, k], self.Lam, self.ie_steps,
                            dict(self.meta))


def smooth_field(rng, grid: TorusGrid, corr_length: float) -> np.ndarray:
    """Unit-variance periodic Gaussian field with a Gaussian covariance of range corr_length."""
    freqs = [np.fft.fftfreq(grid.N, d=grid.h) * 2 * np.pi] * grid.d
    k2 = sum(np.meshgrid(*[f**2 for f in freqs], indexing="ij"))
    filt = np.exp(-k2 * corr_length**2 / 4)
    noise = rng.standard_normal(grid.shape)
    f = np.fft.ifftn(np.fft.fftn(noise) * filt).real
    std = f.std()
    return (f - f.mean()) / std if std > 0 else f


def initial_data(grid: TorusGrid, seed: int, n: int, amplitude: float = 1.0,
                 corr_length: float | None = None) -> np.ndarray:
    """Strictly positive columns exp(amplitude * smooth field), one stream per column."""
    corr = 4 * grid.h if corr_length is None else corr_length
    cols = [np.exp(amplitude * smooth_field(np.random.default_rng([seed, k]), grid, corr).reshape(-1))
            for k in range(n)]
    return np.column_stack(cols)


def make_caloric(form: FormMatrix, horizon: float, seed: int = 0, n_solutions: int = 1,
                 amplitude: float = 1.0, corr_length: float | None = None, dt: float | None = None,
                 window=None, u0=None, solver: str = "direct", max_switches: int = 10) -> CaloricBatch:
    """Evolve strictly positive data on the whole torus and keep every time step on ``window``."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    grid = form.grid
    if u0 is None:
        u0 = initial_data(grid, seed, n_solutions, amplitude, corr_length)
    u0 = np.asarray(u0, dtype=float)
    if u0.ndim == 1:
        u0 = u0[:, None]
    if u0.min() <= 0:
        raise PositivityError("initial data must be strictly positive")
    if dt is None:
        dt = min(grid.h**2, horizon / 64)
    n_steps = max(1, math.ceil(horizon / dt - 1e-9))
    times = np.linspace(0.0, horizon, n_steps + 1)
    window = np.arange(grid.n_sites) if window is None else np.unique(np.asarray(window, dtype=int))
    values = np.empty((times.size, window.size, u0.shape[1]))
    values[0] = u0[window]
    prop = Propagator(form, horizon / n_steps, "cn", solver)
    record = SchemeRecord(prop.dt, "cn", solver)
    u = u0
    for k in range(1, times.size):
        u = prop.step(u, record)
        if record.ie_steps > max_switches:
            raise PositivityError(f"positivity guard triggered {record.ie_steps} times (limit {max_switches})")
        values[k] = u[window]
    if values.min() <= 0:
        raise PositivityError(f"solution lost strict positivity (min {values.min():.3e})")
    return CaloricBatch(grid, times, window, values, form.Lam[window], record.ie_steps,
                        {"seed": seed, "amplitude": amplitude, "corr_length": corr_length, "dt": prop.dt})


def kernel_solution(form: FormMatrix, o: int, t0: float, horizon: float, dt: float | None = None,
                    window=None, solver: str = "direct") -> CaloricBatch:
    """p_{t0 + t}(o, .) for t in [0, horizon] as a caloric batch of one solution."""
    col, _ = kernel_columns(form, [o], t0, solver=solver)
    return make_caloric(form, horizon, dt=dt, window=window, u0=col[:, 0], solver=solver)


def weak_form_residual(form: FormMatrix, u_prev, u_next, dt: float) -> float:
    """|| M (u_next - u_prev)/dt + E (u_next + u_prev)/2 || relative to || M u_prev / dt ||."""
    r = form.m * (u_next - u_prev) / dt + form.E @ (0.5 * (u_next + u_prev))
    return float(np.linalg.norm(r) / np.linalg.norm(form.m * u_prev / dt))


# --- Harnack -----------------------------------------------------------------


@dataclass
class HarnackRecord:
    sup_minus: float
    inf_plus: float
    ratio: float
    flagged: bool


@dataclass
class HarnackAudit:
    environment: str
    center: int
    s: float
    r: float
    tau: float
    delta: float
    records: list[HarnackRecord]
    C_H: float
    exponent_condition: bool | None = None
    stabilization_radius: float | None = None

    @property
    def ratios(self) -> np.ndarray:
        return np.array([rec.ratio for rec in self.records])

    @property
    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.ratios)))

    @property
    def above_stabilization(self) -> bool | None:
        if self.stabilization_radius is None:
            return None
        return self.r > self.stabilization_radius

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=float)


def harnack_ratio(u: CaloricBatch, cyl: CylinderSet, environment: str = "", exponent_condition=None,
                  stabilization_radius=None) -> HarnackAudit:
    """sup over Q_- divided by inf over Q_+, per solution; C_H is the largest ratio."""
    _, _, q = u.block(cyl.Q())
    if q.min() <= 0:
        raise PositivityError("solution is not strictly positive on Q")
    _, _, vm = u.block(cyl.Q_minus())
    _, _, vp = u.block(cyl.Q_plus())
    sup_m = vm.max(axis=(0, 1))
    inf_p = vp.min(axis=(0, 1))
    ratios = sup_m / inf_p
    records = [HarnackRecord(float(a), float(b), float(c), bool(c < 1 - RATIO_TOL))
               for a, b, c in zip(sup_m, inf_p, ratios)]
    return HarnackAudit(environment, cyl.center, cyl.s, cyl.r, cyl.tau, cyl.delta, records,
                        float(ratios.max()), exponent_condition, stabilization_radius)


def write_harnack_records(audits: list[HarnackAudit], directory) -> Path:
    """One JSON record per run plus an aggregate CSV."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, a in enumerate(audits):
        (directory / f"harnack_{i:03d}.json").write_text(a.to_json())
        for j, rec in enumerate(a.records):
            rows.append([i, j, a.environment, a.r, a.tau, a.delta, rec.sup_minus, rec.inf_plus, rec.ratio,
                         int(rec.flagged)])
    path = directory / "harnack.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "solution", "environment", "r", "tau", "delta", "sup_minus", "inf_plus", "ratio",
                    "flagged"])
        w.writerows(rows)
    return path


# --- space-time norms --------------------------------------------------------


def _time_weights(times: np.ndarray, tidx: np.ndarray) -> np.ndarray:
    """Trapezoid weights for the samples tidx (consecutive) over their span."""
    t = times[tidx]
    if t.size < 2:
        raise CylinderError("fewer than 2 time samples in cylinder")
    w = np.zeros(t.size)
    dt = np.diff(t)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    return w


def spacetime_norm(u: CaloricBatch, cyl: ParabolicCylinder, alpha: float, weight: str = "Lambda") -> np.ndarray:
    """(1/(|I||B|) int_Q |u|^alpha Lambda dt dx)^(1/alpha) per solution; alpha = inf gives the sup."""
    tidx, pos, vals = u.block(cyl)
    if pos.size < 2:
        raise CylinderError("fewer than 2 sites in cylinder")
    if math.isinf(alpha):
        return np.abs(vals).max(axis=(0, 1))
    wt = _time_weights(u.times, tidx)
    ws = u.Lam[pos] if weight == "Lambda" else np.ones(pos.size)
    hd = u.grid.h**u.grid.d
    integral = np.einsum("t,s,tsk->k", wt, ws * hd, np.abs(vals) ** alpha)
    denom = cyl.duration * pos.size * hd
    return (integral / denom) ** (1.0 / alpha)


# --- mean value audits ---------------------------------------------------------


MEAN_VALUE_DIRECTIONS = ("sub_sup_bound", "super_neg_power", "super_small_alpha")


def gap_exponent(direction: str, nu: float, alpha: float = 1.0, alpha0: float | None = None) -> float:
    """Power of 1/(sigma - sigma') in the corresponding mean value bound."""
    if direction == "sub_sup_bound":
        return nu / (nu - 1)
    if direction == "super_neg_power":
        return 2 * nu / (nu - 1)
    if direction == "super_small_alpha":
        return 2 * nu / (nu - 1) * (1 + nu) * (1 / alpha - 1 / alpha0)
    raise ValueError(f"unknown direction {direction!r}")


@dataclass
class MeanValueReport:
    direction: str
    gaps: list[float]
    raw: list[float]  # R(g) per gap, maximised over the batch
    scaled: list[float]  # R(g) * g^kappa
    kappa: float
    fitted_exponent: float
    scaling_ok: bool
    exponent_ok: bool
    alpha: float
    alpha0: float | None = None
    tau_factor: float = 1.0

    @property
    def passed(self) -> bool:
        return self.scaling_ok


def _mean_value_ratio(u: CaloricBatch, cyl: CylinderSet, direction, sigma, sigma_p, alpha, alpha0):
    if direction == "sub_sup_bound":
        lhs = spacetime_norm(u, cyl.Q_sigma(sigma_p), math.inf)
        rhs = spacetime_norm(u, cyl.Q_sigma(sigma), 2)
    elif direction == "super_neg_power":
        inv = _inverse(u)
        lhs = spacetime_norm(inv, cyl.Q_sigma(sigma_p), math.inf) ** alpha
        rhs = spacetime_norm(inv, cyl.Q_sigma(sigma), alpha) ** alpha
    else:
        lhs = spacetime_norm(u, cyl.Q_prime(sigma_p), alpha0)
        rhs = spacetime_norm(u, cyl.Q_prime(sigma), alpha)
    return lhs / rhs


def _inverse(u: CaloricBatch) -> CaloricBatch:
    if u.values.min() <= 0:
        raise PositivityError("negative powers need a strictly positive solution")
    return CaloricBatch(u.grid, u.times, u.window, 1.0 / u.values, u.Lam, u.ie_steps, u.meta)


def mean_value_audit(u: CaloricBatch, cyl: CylinderSet, direction: str, exps: ExponentSet,
                     sigma: float = 1.0, gaps=(0.5, 0.25, 0.125), alpha: float | None = None,
                     alpha0: float | None = None, slack: float = 2.0) -> MeanValueReport:
    """Constant-free ratios R(g) for sigma' = sigma - g and their gap scaling.

    The bound allows R(g) <= C g^(-kappa).  The check is that the normalised
    ratio R(g) g^kappa does not grow by more than ``slack`` when the gap halves;
    the fitted power of 1/g is also reported and compared with kappa.
    """
    if direction not in MEAN_VALUE_DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    nu = float(exps.nu)
    if direction == "super_small_alpha":
        alpha0 = nu / 2 if alpha0 is None else alpha0
        alpha = alpha0 / (2 * nu) if alpha is None else alpha
        if not (0 < alpha0 < nu and 0 < alpha < alpha0 / nu):
            raise ValueError(f"need 0 < alpha0 < nu and 0 < alpha < alpha0/nu (alpha={alpha}, alpha0={alpha0})")
    else:
        alpha = 1.0 if alpha is None else alpha
    gaps = [float(g) for g in gaps]
    for g in gaps:
        if not (0.5 <= sigma - g < sigma <= 1):
            raise ValueError(f"gap {g} gives sigma'={sigma - g} outside [1/2, sigma)")
    kappa = gap_exponent(direction, nu, alpha, alpha0)
    raw = [float(np.max(_mean_value_ratio(u, cyl, direction, sigma, sigma - g, alpha, alpha0))) for g in gaps]
    scaled = [R * g**kappa for R, g in zip(raw, gaps)]
    order = np.argsort(gaps)[::-1]  # from widest to narrowest gap
    ok = all(scaled[order[i + 1]] <= slack * scaled[order[i]] * (1 + 1e-12) for i in range(len(gaps) - 1))
    if len(gaps) > 1 and min(raw) > 0:
        fitted = float(np.polyfit(np.log(1.0 / np.array(gaps)), np.log(raw), 1)[0])
    else:
        fitted = 0.0
    exp_ok = bool(-1e-9 <= fitted <= kappa + 1e-9)
    tau = cyl.tau
    return MeanValueReport(direction, gaps, raw, scaled, kappa, fitted, bool(ok), exp_ok, alpha, alpha0,
                           tau_factor=float(tau**0.5 * (1 + 1 / tau) ** (kappa / 2)))


# --- log level sets -------------------------------------------------------------


@dataclass
class LogLevelReport:
    k: list[float]
    levels: list[float]
    plus: list[list[float]]  # [solution][level] measure * level / normaliser on K+
    minus: list[list[float]]
    normaliser: float
    value: float  # max over solutions, levels and both sides

    def ratio_spread(self) -> float:
        """max / min of measure*level over levels among nonzero entries (inf if any level is empty)."""
        arr = np.maximum(np.array(self.plus), np.array(self.minus)).max(axis=0)
        if np.any(arr <= 0):
            return math.inf
        return float(arr.max() / arr.min())


def log_constant(u: CaloricBatch, cyl: CylinderSet, t: float) -> np.ndarray:
    """eta^2 Lambda weighted average over B of -log u at the sample nearest to t."""
    grid = u.grid
    ball = make_ball(grid, cyl.center, cyl.r)
    pos = u.positions(ball.sites)
    ti = int(np.argmin(np.abs(u.times - t)))
    eta = radial_cutoff(grid, cyl.center, cyl.r)[ball.sites]
    w = eta**2 * u.Lam[pos]
    vals = u.values[ti, pos, :]
    if vals.min() <= 0:
        raise PositivityError("log audit needs a strictly positive solution")
    return (w[:, None] * -np.log(vals)).sum(axis=0) / w.sum()


def log_normaliser(u: CaloricBatch, cyl: CylinderSet, consts: ConstantReport) -> float:
    """m^Lambda(B) M^{B,Lambda} |B|^(2/d) max(C_P^{B,Lambda}, tau^2)."""
    grid = u.grid
    ball = make_ball(grid, cyl.center, cyl.r)
    m_ball = float(u.Lam[u.positions(ball.sites)].sum() * grid.h**grid.d)
    vol = ball_volume(grid.d, cyl.r)
    return m_ball * consts.M_B_Lambda * vol ** (2 / grid.d) * max(consts.C_P_B_Lambda, cyl.tau**2)


def log_level_audit(u: CaloricBatch, cyl: CylinderSet, consts: ConstantReport, levels=(1, 2, 4, 8)) -> LogLevelReport:
    """gamma^Lambda of the low sublevel set on K+ and high superlevel set on K-, times the level."""
    levels = [float(x) for x in levels]
    if any(x <= 0 for x in levels) or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be positive and ascending")
    s_prime = cyl.s - cyl.kappa * cyl.tau * cyl.r**2
    k = log_constant(u, cyl, s_prime)
    norm = log_normaliser(u, cyl, consts)
    hd = u.grid.h**u.grid.d
    out = {}
    for name, c in (("plus", cyl.K_plus()), ("minus", cyl.K_minus())):
        tidx, pos, vals = u.block(c)
        wt = _time_weights(u.times, tidx)
        logs = np.log(vals)
        table = []
        for j in range(u.n_solutions):
            row = []
            for ell in levels:
                if name == "plus":
                    mask = logs[:, :, j] < -ell - k[j]
                else:
                    mask = logs[:, :, j] > ell - k[j]
                meas = float(np.einsum("t,s,ts->", wt, u.Lam[pos] * hd, mask))
                row.append(meas * ell / norm)
            table.append(row)
        out[name] = table
    value = float(max(np.max(out["plus"]), np.max(out["minus"])))
    return LogLevelReport(k.tolist(), levels, out["plus"], out["minus"], norm, value)


LOG_ENVELOPE_SAFETY = 2.0


def log_audit_run(sample: FieldSample, x: int, r: float, exps: ExponentSet, n_solutions: int = 20,
                  seed: int = 0, amplitude: float = 2.0, form: FormMatrix | None = None) -> LogLevelReport:
    """Log-level audit on Q = (0, r^2) x B(x, r) for a batch of exp(field) solutions."""
    form = assemble_form(sample) if form is None else form
    grid = form.grid
    horizon = r * r
    window = make_ball(grid, x, r + grid.h).sites
    u = make_caloric(form, horizon, seed=seed, n_solutions=n_solutions, amplitude=amplitude,
                     corr_length=r / 2, dt=horizon / 256, window=window)
    cyl = cylinders(x, horizon, r, h=grid.h)
    consts = constants(sample, make_ball(grid, x, r), exps)
    return log_level_audit(u, cyl, consts)


def log_envelope(exps: ExponentSet, N: int, r: float, d: int = 2, h: float = 1.0, n_solutions: int = 20,
                 seed: int = 0, amplitude: float = 2.0, safety: float = LOG_ENVELOPE_SAFETY) -> float:
    """Envelope for the normalised measure * level: ``safety`` times its constant-environment value."""
    sample = generate_environment(EnvironmentSpec(d=d, N=N, h=h, model="constant"))
    grid = grid_for(sample)
    rep = log_audit_run(sample, grid.center_site(), r, exps, n_solutions, seed, amplitude)
    return safety * rep.value


# --- oscillation -----------------------------------------------------------------


@dataclass
class OscillationReport:
    radii: list[float]
    oscillations: list[list[float]]  # [solution][level]
    contraction: list[list[float]]  # [solution][level k -> k+1]
    bound: float | None
    checked_levels: list[int]
    passed: bool | None


def oscillation_decay(u: CaloricBatch, x: int, t0: float, k_max: int, r0: float | None = None,
                      C_H: float | None = None, stabilization_radius: float = 0.0,
                      slack: float = 0.1) -> OscillationReport:
    """osc(u, Q_k) on Q_k = (t0 - r_k^2, t0) x B(x, r_k), r_k = 2^-k r0."""
    if k_max < 1:
        raise ValueError("need at least 2 levels")
    r0 = math.sqrt(t0) if r0 is None else r0
    h = u.grid.h
    radii = [r0 * 2.0**-k for k in range(k_max + 1)]
    if radii[-1] < 4 * h - 1e-12:
        raise CylinderError(f"finest radius {radii[-1]} below 4h")
    if t0 - r0**2 < u.times[0] - TIME_TOL:
        raise CylinderError("largest cylinder starts before the solution")
    osc = []
    for r in radii:
        cyl = ParabolicCylinder("Q", x, t0 - r * r, t0, r)
        _, _, vals = u.block(cyl)
        osc.append(vals.max(axis=(0, 1)) - vals.min(axis=(0, 1)))
    osc = np.array(osc).T  # [solution][level]
    with np.errstate(divide="ignore", invalid="ignore"):
        contr = np.where(osc[:, :-1] > 0, osc[:, 1:] / osc[:, :-1], 0.0)
    checked = [k for k in range(k_max) if radii[k + 1] >= stabilization_radius - 1e-12]
    bound = passed = None
    if C_H is not None:
        bound = 1 - 1 / (4 * C_H) + slack
        passed = bool(np.all(contr[:, checked] <= bound)) if checked else None
    return OscillationReport(radii, osc.tolist(), contr.tolist(), bound, checked, passed)


# --- rescaled kernel modulus ---------------------------------------------------------


def diffusive_guard(grid: TorusGrid, t_micro: float, sigma_max: float) -> bool:
    """Six diffusive standard deviations fit inside half the torus."""
    return 6 * math.sqrt(t_micro * sigma_max) <= grid.side / 2


def kernel_modulus(values, grid: TorusGrid, center: int, radius: float) -> float:
    """sup_{z,y in B} |f(z) - f(y)|."""
    sites = make_ball(grid, center, radius).sites
    v = np.asarray(values)[sites]
    return float(v.max() - v.min())


def rescaled_oscillation(form: FormMatrix, o: int, x, r: float, t: float, eps: float,
                         stabilization_radius: float = 0.0, sigma_max: float = 2.0,
                         column=None, solver: str = "direct") -> float:
    """eps^-d sup_{z,y in B(x,r)} |p_{t/eps^2}(o, z/eps) - p_{t/eps^2}(o, y/eps)|.

    ``x`` is a macroscopic displacement from the site o.  A precomputed kernel
    column at microscopic time t/eps^2 may be passed as ``column``.
    """
    grid = form.grid
    if math.sqrt(t) < r:
        raise ValueError("need sqrt(t) >= r")
    if r / eps <= stabilization_radius:
        raise ValueError(f"micro radius {r / eps} not above the stabilization radius {stabilization_radius}")
    t_micro = t / eps**2
    if not diffusive_guard(grid, t_micro, sigma_max):
        raise CylinderError(f"torus too small for the diffusive scale at t/eps^2 = {t_micro}")
    if column is None:
        column = kernel_columns(form, [o], t_micro, solver=solver)[0][:, 0]
    shift = np.round(np.asarray(x, dtype=float) / eps / grid.h).astype(int)
    center = grid.flat(grid.multi(o) + shift)
    return eps ** (-grid.d) * kernel_modulus(column, grid, center, r / eps)


def fit_holder_envelope(ratios, values, t: float, d: int) -> tuple[float, float]:
    """Fit value = c (r/sqrt t)^theta t^(-d/2); returns (c, theta)."""
    x = np.log(np.asarray(ratios))
    y = np.log(np.asarray(values) * t ** (d / 2))
    theta, logc = np.polyfit(x, y, 1)
    return float(math.exp(logc)), float(theta)
