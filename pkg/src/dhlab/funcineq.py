"""Exponents, ball constants and empirical audits of the local functional inequalities.

Exponents are kept as exact fractions; an infinite exponent is ``math.inf``.
Each audit reports the largest observed ratio LHS / (RHS without the
environment constant) over random test functions and compares it with the
environment constant times a dimensional factor calibrated once on the
constant environment.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .env import EnvironmentSpec, FieldSample, generate_environment
from .grid import (Ball, FormMatrix, assemble_form, ball_energy_matrix, ball_norm, cutoff_face_weights,
                   grad_sup, grid_for, make_ball, radial_cutoff)

log = logging.getLogger(__name__)

INF = math.inf

INEQUALITIES = (
    "sobolev",
    "weighted_sobolev",
    "sobolev_cutoff",
    "weighted_sobolev_cutoff",
    "nash",
    "weighted_nash",
    "poincare",
    "weighted_poincare",
    "poincare_cutoff",
    "weighted_poincare_cutoff",
)
POINCARE_FAMILY = ("poincare", "weighted_poincare", "poincare_cutoff", "weighted_poincare_cutoff")
ZERO_BOUNDARY = ("sobolev", "weighted_sobolev", "nash", "weighted_nash")

CALIBRATION_SAFETY = 2.0
CALIBRATION_N = 64
CALIBRATION_RADIUS = 16.0
CALIBRATION_TRIALS = 200


class ExponentError(ValueError):
    pass


def _as_exponent(x) -> Fraction | float:
    if isinstance(x, str):
        if x.strip().lower() in ("inf", "infinity", "∞"):
            return INF
        return Fraction(x)
    if isinstance(x, float):
        if math.isinf(x):
            return INF
        return Fraction(str(x))
    return Fraction(x)


def _recip(x) -> Fraction:
    return Fraction(0) if x == INF else 1 / Fraction(x)


def _from_recip(r: Fraction):
    return INF if r == 0 else 1 / r


def to_float(x) -> float:
    return float(x)


@dataclass(frozen=True)
class ExponentSet:
    p: Fraction | float
    q: Fraction | float
    d: int
    p_star: Fraction | float
    rho: Fraction | float
    nu: Fraction
    mu: Fraction
    gamma: Fraction

    @property
    def rho_over_pstar(self) -> Fraction | float:
        # rho / p* = rho (1 - 1/p), handled through reciprocals
        return _from_recip(_recip(self.rho) / (1 - _recip(self.p)))

    @property
    def holder_power(self) -> Fraction:
        """2 p* / rho, the power of ||Lambda||_p in the weighted Sobolev constant."""
        return 2 * _recip(self.rho) / (1 - _recip(self.p))

    def as_dict(self) -> dict:
        return {k: (str(v) if v != INF else "inf") for k, v in asdict(self).items()}

    def floats(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}


def exponents(p, q, d: int) -> ExponentSet:
    """Exponents attached to the moment pair (p, q) in dimension d."""
    if int(d) != d or d < 2:
        raise ExponentError(f"dimension must be an integer >= 2, got {d}")
    d = int(d)
    p, q = _as_exponent(p), _as_exponent(q)
    for name, v in (("p", p), ("q", q)):
        if v != INF and v < 1:
            raise ExponentError(f"{name}={v} must lie in [1, inf]")
    ip, iq = _recip(p), _recip(q)
    two_d = Fraction(2, d)
    if not ip + iq < two_d:
        raise ExponentError(f"moment condition 1/p + 1/q < 2/d fails: {ip} + {iq} >= {two_d}")
    p_star = _from_recip(1 - ip)
    irho = Fraction(1, 2) - Fraction(1, d) + iq / 2
    rho = _from_recip(irho)
    nu = 2 - 2 * irho / (1 - ip)
    mu = 1 / (two_d - iq)
    gamma = (1 - ip) / (two_d - ip - iq)
    return ExponentSet(p, q, d, p_star, rho, nu, mu, gamma)


def moment_condition(p, q, d: int) -> bool:
    return _recip(_as_exponent(p)) + _recip(_as_exponent(q)) < Fraction(2, d)


def poincare_pair(exps: ExponentSet, choice: str = "proportional") -> tuple:
    """(p_bar, q_bar) on the line 1/p_bar + 1/q_bar = 2/d.

    ``proportional`` scales (1/p, 1/q) onto the line; for p = q = inf it falls
    back to p_bar = q_bar = d.  ``q_side`` keeps q_bar = q, ``p_side`` keeps p_bar = p.
    """
    ip, iq = _recip(exps.p), _recip(exps.q)
    two_d = Fraction(2, exps.d)
    if choice == "proportional":
        if ip + iq == 0:
            return Fraction(exps.d), Fraction(exps.d)
        s = two_d / (ip + iq)
        return _from_recip(s * ip), _from_recip(s * iq)
    if choice == "q_side":
        return _from_recip(two_d - iq), exps.q
    if choice == "p_side":
        return exps.p, _from_recip(two_d - ip)
    raise ValueError(f"unknown pair choice {choice!r}")


# --- constants ---------------------------------------------------------------


def cutoff_profile(s):
    """Phi(s) = (1 - s)_+ of the canonical radial cutoff."""
    return max(0.0, 1.0 - s)


@dataclass
class ConstantReport:
    center: int
    radius: float
    C_S_B: float
    C_S_B_Lambda: float
    C_P_B: float
    C_P_B_Lambda: float
    M_B: float
    M_B_Lambda: float
    pbar_qbar: tuple[float, float]
    C_P_B_Lambda_alternatives: dict = field(default_factory=dict)
    empirical_best: dict = field(default_factory=dict)
    stabilization_radius: float | None = None

    def bound_constant(self, which: str) -> float:
        return {
            "sobolev": self.C_S_B,
            "weighted_sobolev": self.C_S_B_Lambda,
            "sobolev_cutoff": self.C_S_B,
            "weighted_sobolev_cutoff": self.C_S_B_Lambda,
            "nash": self.C_S_B,
            "weighted_nash": self.C_S_B_Lambda,
            "poincare": self.C_P_B,
            "weighted_poincare": self.C_P_B_Lambda,
            "poincare_cutoff": self.M_B * self.C_P_B,
            "weighted_poincare_cutoff": self.M_B_Lambda * self.C_P_B_Lambda,
        }[which]


def _norm(values, ball: Ball, r) -> float:
    return ball_norm(values, ball, float(r))


def _cp_lambda(lam_inv, Lam, ball, pair) -> float:
    return _norm(Lam, ball, pair[0]) * _norm(lam_inv, ball, pair[1])


def constants(sample: FieldSample, ball: Ball, exps: ExponentSet, pbar_qbar=None) -> ConstantReport:
    h = sample.h
    if ball.radius < 4 * h:
        raise ValueError(f"ball radius {ball.radius} below 4h")
    lam_inv = 1.0 / sample.lam.reshape(-1)
    Lam = sample.Lam.reshape(-1)
    if pbar_qbar is None:
        pair = poincare_pair(exps)
    else:
        pair = tuple(_as_exponent(v) for v in pbar_qbar)
        if _recip(pair[0]) + _recip(pair[1]) != Fraction(2, exps.d):
            raise ExponentError(f"pair {pair} does not satisfy 1/p_bar + 1/q_bar = 2/d")
    C_S = _norm(lam_inv, ball, exps.q)
    C_S_L = C_S * _norm(Lam, ball, exps.p) ** float(exps.holder_power)
    C_P = _norm(lam_inv, ball, Fraction(exps.d, 2))
    M_B = cutoff_profile(0.0) / cutoff_profile(0.5)
    half = ball.scaled(0.5)
    M_B_L = M_B * _norm(Lam, ball, 1) / _norm(Lam, half, 1)
    alternatives = {}
    for choice in ("q_side", "p_side"):
        alt = poincare_pair(exps, choice)
        alternatives[choice] = {"pair": [float(alt[0]), float(alt[1])], "value": _cp_lambda(lam_inv, Lam, ball, alt)}
    return ConstantReport(
        center=ball.center,
        radius=ball.radius,
        C_S_B=C_S,
        C_S_B_Lambda=C_S_L,
        C_P_B=C_P,
        C_P_B_Lambda=_cp_lambda(lam_inv, Lam, ball, pair),
        M_B=M_B,
        M_B_Lambda=M_B_L,
        pbar_qbar=(float(pair[0]), float(pair[1])),
        C_P_B_Lambda_alternatives=alternatives,
    )


# --- test functions ----------------------------------------------------------


def _bump_kernel_hat(grid, width: float) -> np.ndarray:
    r = grid.distance(0).reshape(grid.shape)
    z = np.clip(1.0 - (r / width) ** 2, 0.0, None)
    with np.errstate(divide="ignore"):
        k = np.where(z > 0, np.exp(-1.0 / np.where(z > 0, z, 1.0)), 0.0)
    return np.fft.rfftn(k / k.sum())


def trial_functions(grid, ball: Ball, n: int, seed: int, support: str) -> np.ndarray:
    """Smoothed white-noise fields, one column per trial.

    Trial k uses its own stream ``(seed, k)`` and a bump of width
    (3r/16) * 2^(k mod 4), capped at r/2 and floored at h, so the family scales
    with the ball radius r.  ``support="ball"`` multiplies alternately by
    the ball indicator and by the radial cutoff; ``support="free"`` leaves the
    field unrestricted.
    """
    out = np.empty((grid.n_sites, n))
    kernels = {}
    cut = radial_cutoff(grid, ball.center, ball.radius)
    ind = ball.mask().astype(float)
    for k in range(n):
        width = max(grid.h, min(3 * ball.radius / 16 * 2 ** (k % 4), ball.radius / 2))
        if width not in kernels:
            kernels[width] = _bump_kernel_hat(grid, width)
        noise = np.random.default_rng([seed, k]).standard_normal(grid.shape)
        axes = tuple(range(grid.d))
        u = np.fft.irfftn(np.fft.rfftn(noise) * kernels[width], s=grid.shape, axes=axes).reshape(-1)
        if support == "ball":
            u = u * (ind if k % 2 == 0 else cut)
        out[:, k] = u
    return out


# --- vectorised norms --------------------------------------------------------


def _col_norms(U, ball: Ball, r, weight=None) -> np.ndarray:
    """Column-wise ball norms, same normalisation as :func:`ball_norm`."""
    V = np.abs(U[ball.sites])
    w = None if weight is None else np.asarray(weight)[ball.sites][:, None]
    r = float(r)
    if math.isinf(r):
        return V.max(axis=0) if w is None else (V * (w > 0)).max(axis=0)
    integrand = V**r if w is None else V**r * w
    hd = ball.grid.h**ball.grid.d
    return (integrand.sum(axis=0) * hd / ball.volume) ** (1.0 / r)


def _col_energy(form: FormMatrix, U, face_w=None) -> np.ndarray:
    dU = U[form.tails] - U[form.heads]
    c = form.cond if face_w is None else form.cond * face_w
    return np.einsum("f,fk->k", c, dU * dU)


def _centered(U, ball: Ball, weight) -> np.ndarray:
    V = U[ball.sites]
    w = weight[ball.sites][:, None]
    mean = (V * w).sum(axis=0) / w.sum()
    out = np.zeros_like(U)
    out[ball.sites] = V - mean
    return out


def inequality_ratios(which: str, form: FormMatrix, ball: Ball, exps: ExponentSet, U) -> np.ndarray:
    """LHS / (RHS without the environment constant) for each trial column.

    Trials where the right-hand side vanishes give NaN.
    """
    grid = form.grid
    d = grid.d
    vol = ball.analytic_volume
    Lam = form.Lam
    scale_s = vol ** (2.0 / d) / vol  # |B|^(2/d) / |B|
    eta = radial_cutoff(grid, ball.center, ball.radius)
    ones = np.ones(form.n)
    if which in ("sobolev", "weighted_sobolev"):
        if which == "sobolev":
            lhs = _col_norms(U, ball, exps.rho) ** 2
        else:
            lhs = _col_norms(U, ball, exps.rho_over_pstar, Lam) ** 2
        rhs = scale_s * _col_energy(form, U)
    elif which in ("sobolev_cutoff", "weighted_sobolev_cutoff"):
        EU = eta[:, None] * U
        if which == "sobolev_cutoff":
            lhs = _col_norms(EU, ball, exps.rho) ** 2
        else:
            lhs = _col_norms(EU, ball, exps.rho_over_pstar, Lam) ** 2
        e_eta = _col_energy(form, U, cutoff_face_weights(form, eta))
        rhs = vol ** (2.0 / d) * (e_eta / vol + grad_sup(form, eta) ** 2 * _col_norms(U, ball, 2, Lam) ** 2)
    elif which in ("nash", "weighted_nash"):
        scale = vol ** ((2.0 - d) / d)
        if which == "nash":
            a = 2.0 / float(exps.mu)
            lhs = _col_norms(U, ball, 2) ** (2 + a)
            rhs = scale * _col_energy(form, U) * _col_norms(U, ball, 1) ** a
        else:
            a = 2.0 / float(exps.gamma)
            lhs = _col_norms(U, ball, 2, Lam) ** (2 + a)
            rhs = scale * _col_energy(form, U) * _col_norms(U, ball, 1, Lam) ** a
    elif which in POINCARE_FAMILY:
        weight = {
            "poincare": ones,
            "weighted_poincare": Lam,
            "poincare_cutoff": eta**2,
            "weighted_poincare_cutoff": Lam * eta**2,
        }[which]
        C = _centered(U, ball, weight)
        lhs = _col_norms(C, ball, 2, weight) ** 2
        face_w = _inside_faces(form, ball)
        if which.endswith("cutoff"):
            face_w = face_w * cutoff_face_weights(form, eta)
        rhs = vol ** ((2.0 - d) / d) * _col_energy(form, U, face_w)
    else:
        raise ValueError(f"unknown inequality {which!r}")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0), np.nan)
    return ratio


def _inside_faces(form: FormMatrix, ball: Ball) -> np.ndarray:
    inside = ball.mask()
    return (inside[form.tails] & inside[form.heads]).astype(float)


def poincare_exact_best(which: str, form: FormMatrix, ball: Ball) -> float:
    """Largest possible Poincare ratio, from the smallest nonzero generalized eigenvalue."""
    if which not in POINCARE_FAMILY:
        raise ValueError(f"{which} has no eigen characterisation here")
    grid = form.grid
    d = grid.d
    eta = radial_cutoff(grid, ball.center, ball.radius)
    weight = {
        "poincare": np.ones(form.n),
        "weighted_poincare": form.Lam,
        "poincare_cutoff": eta**2,
        "weighted_poincare_cutoff": form.Lam * eta**2,
    }[which][ball.sites]
    face_w = cutoff_face_weights(form, eta) if which.endswith("cutoff") else None
    EB = ball_energy_matrix(form, ball, face_w).toarray()
    W = np.diag(weight)
    vals = sla.eigh(EB, W, eigvals_only=True, subset_by_index=[0, 1])
    lam1 = vals[1]
    hd = grid.h**d
    return float(hd / ball.volume / (ball.analytic_volume ** ((2.0 - d) / d) * lam1))


# --- calibration -------------------------------------------------------------


def calibration_key(p, q, d) -> str:
    e = exponents(p, q, d)
    return f"d={d},p={'inf' if e.p == INF else e.p},q={'inf' if e.q == INF else e.q}"


@lru_cache(maxsize=1)
def _frozen_calibration() -> dict:
    text = resources.files("dhlab").joinpath("data/calibration.json").read_text()
    return json.loads(text)


def calibration_table(path=None) -> dict:
    if path is None:
        return _frozen_calibration()
    return json.loads(Path(path).read_text())


def calibrate(p, q, d: int = 2, N: int = CALIBRATION_N, radius: float = CALIBRATION_RADIUS,
              trials: int = CALIBRATION_TRIALS, seed: int = 0) -> dict:
    """Dimensional factors c: safety times the largest constant-environment ratio over the constant."""
    exps = exponents(p, q, d)
    sample = generate_environment(EnvironmentSpec(d=d, N=N, model="constant"))
    form = assemble_form(sample)
    ball = make_ball(form.grid, form.grid.center_site(), radius)
    consts = constants(sample, ball, exps)
    factors = {}
    for which in INEQUALITIES:
        U = trial_functions(form.grid, ball, trials, seed, _support_for(which))
        best = float(np.nanmax(inequality_ratios(which, form, ball, exps, U)))
        factors[which] = CALIBRATION_SAFETY * best / consts.bound_constant(which)
    return factors


def calibration_factors(p, q, d: int, table: dict | None = None) -> tuple[dict, str]:
    table = _frozen_calibration() if table is None else table
    key = calibration_key(p, q, d)
    if key in table["factors"]:
        return table["factors"][key], table["version"]
    log.warning("no frozen calibration for %s; calibrating on the fly", key)
    return calibrate(p, q, d), "on-the-fly"


# --- audits ------------------------------------------------------------------


@dataclass
class AuditReport:
    which: str
    empirical_best: float
    bound_constant: float
    calibration_factor: float
    paper_bound_factor: float
    passed: bool
    trials: int
    skipped: int
    exact_best: float | None = None
    eigen_consistent: bool | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def pass_(self) -> bool:
        return self.passed

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=str)


def _support_for(which: str) -> str:
    return "ball" if which in ZERO_BOUNDARY else "free"


def audit_inequality(which: str, sample: FieldSample, ball: Ball, trials: int, exps: ExponentSet,
                     seed: int = 0, form: FormMatrix | None = None, table: dict | None = None,
                     U=None) -> AuditReport:
    """Empirical audit of one inequality on one ball."""
    if which not in INEQUALITIES:
        raise ValueError(f"unknown inequality {which!r}; expected one of {INEQUALITIES}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    form = assemble_form(sample) if form is None else form
    consts = constants(sample, ball, exps)
    if U is None:
        U = trial_functions(form.grid, ball, trials, seed, _support_for(which))
    ratios = inequality_ratios(which, form, ball, exps, U)
    valid = ratios[np.isfinite(ratios)]
    best = float(valid.max()) if valid.size else 0.0
    factors, version = calibration_factors(exps.p, exps.q, exps.d, table)
    c = factors[which]
    const = consts.bound_constant(which)
    bound = c * const
    exact = consistent = None
    if which in POINCARE_FAMILY:
        exact = poincare_exact_best(which, form, ball)
        consistent = bool(best <= exact * (1 + 1e-9))
    passed = bool(best <= bound) and consistent is not False
    return AuditReport(
        which=which,
        empirical_best=best,
        bound_constant=const,
        calibration_factor=c,
        paper_bound_factor=bound,
        passed=passed,
        trials=int(valid.size),
        skipped=int(ratios.size - valid.size),
        exact_best=exact,
        eigen_consistent=consistent,
        provenance={
            "seed": seed,
            "environment": asdict(sample.spec),
            "ball": {"center": ball.center, "radius": ball.radius},
            "exponents": exps.as_dict(),
            "calibration_version": version,
        },
    )


def audit_all(sample: FieldSample, ball: Ball, trials: int, exps: ExponentSet, seed: int = 0,
              table: dict | None = None) -> dict[str, AuditReport]:
    form = assemble_form(sample)
    cache = {}
    out = {}
    for which in INEQUALITIES:
        support = _support_for(which)
        if support not in cache:
            cache[support] = trial_functions(form.grid, ball, trials, seed, support)
        out[which] = audit_inequality(which, sample, ball, trials, exps, seed, form, table, cache[support])
    return out


# --- radius sweeps -----------------------------------------------------------


SWEPT = ("C_S_B_Lambda", "C_P_B_Lambda", "M_B_Lambda")


def dyadic_radii(grid, r_min: float | None = None, r_max: float | None = None) -> list[float]:
    r = 8 * grid.h if r_min is None else r_min
    top = grid.side / 4 if r_max is None else r_max
    out = []
    while r <= top + 1e-12:
        out.append(r)
        r *= 2
    return out


def constant_sweep(sample: FieldSample, x: int, exps: ExponentSet, radii=None) -> list[ConstantReport]:
    grid = grid_for(sample)
    radii = dyadic_radii(grid) if radii is None else radii
    return [constants(sample, make_ball(grid, x, r), exps) for r in radii]


@dataclass
class StabilizationResult:
    radius: float
    flagged: bool
    delta: float
    radii: list[float]
    table: dict[str, list[float]]

    def last_doubling_change(self) -> dict[str, float]:
        return {k: abs(v[-1] / v[-2] - 1.0) for k, v in self.table.items()}


def stabilization_radius(sample: FieldSample, x: int, delta: float, exps: ExponentSet | None = None,
                         radii=None) -> StabilizationResult:
    """Smallest dyadic radius from which C_S, C_P and M constants stay within (1+delta) of the largest-radius values.

    If only the largest radius qualifies, the torus half-width is returned and flagged.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    exps = exponents(INF, INF, sample.d) if exps is None else exps
    sweep = constant_sweep(sample, x, exps, radii)
    rs = [c.radius for c in sweep]
    table = {k: [getattr(c, k) for c in sweep] for k in SWEPT}
    within = np.ones(len(rs), dtype=bool)
    for vals in table.values():
        v = np.asarray(vals)
        rel = v / v[-1]
        within &= (rel <= 1 + delta) & (rel >= 1 / (1 + delta))
    # smallest index from which every later radius is within the band
    k = len(rs) - 1
    while k > 0 and within[k - 1]:
        k -= 1
    if k == len(rs) - 1 and len(rs) > 1:
        return StabilizationResult(grid_for(sample).side / 2, True, delta, rs, table)
    return StabilizationResult(rs[k], False, delta, rs, table)


CALIBRATED_PAIRS = ((3, 3), (4, 4), (6, 6), (8, 8), (INF, INF), (4, INF), (INF, 4))


def write_calibration(path, pairs=CALIBRATED_PAIRS, d: int = 2, version: str = "1") -> dict:
    """Regenerate the frozen calibration table."""
    table = {
        "version": version,
        "safety": CALIBRATION_SAFETY,
        "N": CALIBRATION_N,
        "radius": CALIBRATION_RADIUS,
        "trials": CALIBRATION_TRIALS,
        "factors": {calibration_key(p, q, d): calibrate(p, q, d) for p, q in pairs},
    }
    Path(path).write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    return table
