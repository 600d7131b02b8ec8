from __future__ import annotations

import math
from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make
from dhlab.funcineq import (INEQUALITIES, ExponentError, audit_all, audit_inequality, calibration_factors,
                            calibration_key, constants, exponents, inequality_ratios, moment_condition,
                            poincare_exact_best, poincare_pair, stabilization_radius, trial_functions)
from dhlab.grid import make_ball

INF = math.inf


def oracle(p, q, d):
    """Closed forms written the long way round, in exact arithmetic."""
    p_star = F(1) if p == INF else F(p) / (p - 1)
    rho = F(2 * d, d - 2) if q == INF and d > 2 else (F(2 * q * d, q * (d - 2) + d) if q != INF else None)
    ip = 0 if p == INF else F(1, p)
    iq = 0 if q == INF else F(1, q)
    gamma = (1 - ip) / (F(2, d) - ip - iq)
    mu = 1 / (F(2, d) - iq)
    nu = None if rho is None else 2 - 2 * p_star / rho
    return p_star, rho, nu, mu, gamma


ADMISSIBLE_GRID = [(p, q) for p in (2, 3, 4, 6, 8) for q in (3, 4, 6, 12) if F(1, p) + F(1, q) < 1]


def test_grid_has_twenty_points():
    assert len(ADMISSIBLE_GRID) == 20


@pytest.mark.parametrize("p,q", ADMISSIBLE_GRID)
def test_exponents_match_closed_forms_d2(p, q):
    e = exponents(p, q, 2)
    p_star, rho, nu, mu, gamma = oracle(p, q, 2)
    assert (e.p_star, e.rho, e.nu, e.mu, e.gamma) == (p_star, rho, nu, mu, gamma)
    assert e.rho == 2 * q
    assert 1 < e.nu <= 2
    assert e.gamma >= 1


@pytest.mark.parametrize("p,q,d", [(6, 6, 3), (8, 12, 3), (10, 10, 4), (INF, 8, 3)])
def test_exponents_higher_dimensions(p, q, d):
    e = exponents(p, q, d)
    p_star, rho, nu, mu, gamma = oracle(p, q, d)
    assert (e.p_star, e.rho, e.nu, e.mu, e.gamma) == (p_star, rho, nu, mu, gamma)
    assert e.gamma >= F(d, 2)


@pytest.mark.parametrize("d", [2, 3, 4])
def test_infinite_moments_give_classical_values(d):
    e = exponents(INF, INF, d)
    assert e.gamma == F(d, 2)
    assert e.nu == 2 - (F(1, 2) - F(1, d)) * 2
    if d == 2:
        assert e.rho == INF and e.nu == 2


def test_exponent_input_forms():
    assert exponents("4", "inf", 2) == exponents(4, INF, 2)
    assert exponents(4.0, 4.0, 2) == exponents(F(4), F(4), 2)
    assert exponents(3, 3, 2).as_dict()["rho"] == "6"


@pytest.mark.parametrize("p,q,d", [(2, 2, 2), (1, INF, 2), (3, 3, 3), (0.5, 4, 2), (4, 4, 1)])
def test_moment_condition_rejected(p, q, d):
    with pytest.raises(ExponentError):
        exponents(p, q, d)


@given(p=st.fractions(F(1), F(50)), q=st.fractions(F(1), F(50)))
def test_moment_condition_boundary(p, q):
    ok = moment_condition(p, q, 2)
    assert ok == (1 / p + 1 / q < 1)
    if ok:
        e = exponents(p, q, 2)
        assert e.rho > 2 * e.p_star and 1 < e.nu <= 2


PAIR_CASES = [(c, p, q) for c in ("proportional", "q_side", "p_side")
              for p, q in [(3, 3), (4, 6), (INF, 4), (4, INF), (INF, INF)]
              if not (c == "p_side" and p == INF or c == "q_side" and q == INF)]


@pytest.mark.parametrize("choice,p,q", PAIR_CASES)
def test_poincare_pair_on_critical_line(choice, p, q):
    e = exponents(p, q, 2)
    a, b = poincare_pair(e, choice)
    assert F(1) / a + F(1) / b == 1
    assert a >= 1 and b >= 1


def test_constants_constant_environment(constant16):
    s, f = constant16
    ball = make_ball(f.grid, f.grid.center_site(), 5.0)
    c = constants(s, ball, exponents(4, 4, 2))
    for k in ("C_S_B", "C_S_B_Lambda", "C_P_B", "C_P_B_Lambda"):
        assert getattr(c, k) == pytest.approx(1.0, rel=1e-12)
    assert c.M_B == 2.0 and c.M_B_Lambda == pytest.approx(2.0)
    with pytest.raises(ValueError):
        constants(s, make_ball(f.grid, 0, 3.0), exponents(4, 4, 2))


def test_constants_reject_off_line_pair(pareto16):
    s, f = pareto16
    with pytest.raises(ExponentError):
        constants(s, make_ball(f.grid, 0, 5.0), exponents(4, 4, 2), pbar_qbar=(3, 3))


@pytest.mark.parametrize("which", ["poincare", "weighted_poincare", "poincare_cutoff", "weighted_poincare_cutoff"])
def test_poincare_eigen_bound_dominates_trials(which, lognormal16):
    _, f = lognormal16
    ball = make_ball(f.grid, f.grid.center_site(), 6.0)
    U = trial_functions(f.grid, ball, 50, 0, "free")
    best = np.nanmax(inequality_ratios(which, f, ball, exponents(4, 4, 2), U))
    exact = poincare_exact_best(which, f, ball)
    assert best <= exact * (1 + 1e-9)


def test_poincare_eigenvector_attains_bound(constant16):
    import scipy.linalg as sla
    from dhlab.grid import ball_energy_matrix
    _, f = constant16
    ball = make_ball(f.grid, f.grid.center_site(), 6.0)
    _, V = sla.eigh(ball_energy_matrix(f, ball).toarray())
    u = np.zeros(f.n)
    u[ball.sites] = V[:, 1]
    r = inequality_ratios("poincare", f, ball, exponents(4, 4, 2), u[:, None])[0]
    assert r == pytest.approx(poincare_exact_best("poincare", f, ball), rel=1e-8)


def test_trial_functions_deterministic_and_supported(constant16):
    _, f = constant16
    ball = make_ball(f.grid, f.grid.center_site(), 5.0)
    a = trial_functions(f.grid, ball, 6, 3, "ball")
    assert np.array_equal(a, trial_functions(f.grid, ball, 6, 3, "ball"))
    assert np.all(a[~ball.mask()] == 0)


def test_unknown_inequality(constant16):
    s, f = constant16
    ball = make_ball(f.grid, f.grid.center_site(), 5.0)
    with pytest.raises(ValueError):
        audit_inequality("hardy", s, ball, 10, exponents(4, 4, 2))


def test_audit_all_passes_on_pareto(pareto16):
    s, f = pareto16
    ball = make_ball(f.grid, f.grid.center_site(), 5.0)
    reports = audit_all(s, ball, 40, exponents(4, 4, 2))
    assert set(reports) == set(INEQUALITIES)
    for r in reports.values():
        assert r.passed, r.which
        assert r.provenance["calibration_version"] == "1"


def test_calibration_table_frozen():
    factors, version = calibration_factors(4, 4, 2)
    assert version == "1" and set(factors) == set(INEQUALITIES)
    assert calibration_key(4, INF, 2) == "d=2,p=4,q=inf"


def test_stabilization_trivial_on_constant():
    s, _ = make("constant", 64)
    res = stabilization_radius(s, 0, 0.1)
    assert not res.flagged and res.radius == res.radii[0]
    with pytest.raises(ValueError):
        stabilization_radius(s, 0, 0.0)


def test_poincare_eigenvalue_matches_disk_neumann_scaling():
    from scipy.special import jnp_zeros
    s, f = make("constant", 64)
    ball = make_ball(f.grid, f.grid.center_site(), 16.0)
    best = poincare_exact_best("poincare", f, ball)
    lam1 = f.grid.h**2 / ball.volume / best  # d = 2: the |B| power is 1
    assert lam1 * 16.0**2 == pytest.approx(jnp_zeros(1, 1)[0] ** 2, rel=0.05)
