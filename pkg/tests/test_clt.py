from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make
from dhlab.clt import (CltTarget, GuardError, a_lambda, choose_target, clt_sweep, gaussian_kernel,
                       isotonic_residual, random_origins, relative_op_distance, sigma_from_corrector,
                       sigma_second_moment, sigma_stationary_moment, solve_corrector, stratified_origins,
                       sweep_verdict, torus_guard)
from dhlab.env import EnvironmentSpec, FieldSample, generate_environment
from dhlab.grid import assemble_form


def test_gaussian_kernel_values():
    assert gaussian_kernel(np.eye(2), 1.0, [0, 0]) == pytest.approx(1 / (2 * math.pi))
    assert gaussian_kernel(2 * np.eye(2), 2.0, [0, 0]) == pytest.approx(1 / (8 * math.pi))
    S = np.array([[2.0, 0.5], [0.5, 1.0]])
    x = np.array([0.3, -0.7])
    expect = math.exp(-x @ np.linalg.solve(S, x) / 2) / (2 * math.pi * math.sqrt(np.linalg.det(S)))
    assert gaussian_kernel(S, 1.0, x) == pytest.approx(expect)
    with pytest.raises(np.linalg.LinAlgError):
        gaussian_kernel(np.diag([1.0, -1.0]), 1.0, [0, 0])
    with pytest.raises(ValueError):
        gaussian_kernel(np.eye(2), 0.0, [0, 0])


def test_gaussian_kernel_integrates_to_one():
    S = np.array([[2.0, 0.6], [0.6, 1.5]])
    g = np.linspace(-12, 12, 601)
    X = np.stack(np.meshgrid(g, g, indexing="ij"), -1)
    total = gaussian_kernel(S, 1.3, X).sum() * (g[1] - g[0]) ** 2
    assert total == pytest.approx(1.0, abs=1e-8)


def test_target_validation():
    with pytest.raises(ValueError):
        CltTarget(np.array([[1.0, 0.5], [0.0, 1.0]]), 1.0, "x")
    with pytest.raises(ValueError):
        CltTarget(-np.eye(2), 1.0, "x")
    with pytest.raises(ValueError):
        CltTarget(np.eye(2), 0.0, "x")


def test_corrector_constant_environment():
    _, f = make("constant", 16)
    c = solve_corrector(form=f)
    assert np.abs(c.chi).max() == 0
    assert c.a_hom == pytest.approx(np.eye(2))
    assert sigma_from_corrector(c, a_lambda(f)).Sigma == pytest.approx(2 * np.eye(2))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_layered_closed_form(seed):
    s, f = make("layered", 64, seed=seed)
    a = s.a[:, 0]  # independent of x_2
    series = 0.5 * (a[:, 0, 0] + np.roll(a[:, 0, 0], -1))
    harm = 1 / np.mean(1 / series)
    arith = np.mean(a[:, 1, 1])
    c = solve_corrector(form=f, rtol=1e-12)
    assert c.a_hom == pytest.approx(np.array([[harm, 0], [0, arith]]), rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("model", ["lognormal", "iid-cell-pareto", "trap-counterexample"])
def test_corrector_bounds_and_residual(model):
    _, f = make(model, 16)
    c = solve_corrector(form=f)
    assert max(c.residuals) <= 1e-10
    w = np.linalg.eigvalsh(c.a_hom)
    assert c.harmonic_bound * (1 - 1e-9) <= w.min() and w.max() <= c.arithmetic_bound.max() * (1 + 1e-9)
    assert np.abs(c.chi @ f.m).max() <= 1e-9


@settings(max_examples=5)
@given(scale=st.floats(0.2, 5.0))
def test_lambda_scaling_divides_sigma(scale):
    s, f = make("lognormal", 16)
    s2 = FieldSample(s.spec, s.lam, s.Lam * scale, s.a)
    f2 = assemble_form(s2)
    c = solve_corrector(form=f)
    c2 = solve_corrector(form=f2)
    assert c2.a_hom == pytest.approx(c.a_hom, rel=1e-8)
    S1 = sigma_from_corrector(c, a_lambda(f)).Sigma
    S2 = sigma_from_corrector(c2, a_lambda(f2)).Sigma
    assert S2 == pytest.approx(S1 / scale, rel=1e-8)


def test_second_moment_constant_is_exact():
    _, f = make("constant", 64)
    o = f.grid.center_site()
    est = sigma_second_moment(f, o, 8.0)
    assert est.Sigma == pytest.approx(2 * np.eye(2), rel=1e-8, abs=1e-10)
    assert sigma_stationary_moment(f, 8.0).Sigma == pytest.approx(2 * np.eye(2), rel=1e-12, abs=1e-14)
    assert sigma_second_moment(f, stratified_origins(f, 16), 8.0).Sigma == pytest.approx(2 * np.eye(2), rel=1e-8)


def test_stationary_moment_parallel_layers_exact():
    _, f = make("layered", 64, seed=3)
    c = solve_corrector(form=f, rtol=1e-12)
    S = sigma_stationary_moment(f, 5.0).Sigma
    assert S[1, 1] == pytest.approx(2 * c.a_hom[1, 1] / a_lambda(f), rel=1e-10)
    assert abs(S[0, 1]) <= 1e-10


def test_stationary_matches_weighted_origins():
    # the drift-column estimator equals the m-weighted average over every origin
    _, f = make("lognormal", 32, seed=4)
    t = 3.0
    a = sigma_stationary_moment(f, t, dt=0.05).Sigma
    b = sigma_second_moment(f, np.arange(f.n), t, dt=0.05).Sigma
    assert a == pytest.approx(b, rel=2e-4)


def test_guard():
    _, f = make("constant", 16)
    assert not torus_guard(f, 100.0)
    with pytest.raises(GuardError):
        sigma_second_moment(f, 0, 100.0)
    with pytest.raises(GuardError):
        sigma_stationary_moment(f, 100.0)


def test_cross_check_flags_and_choice():
    ref = CltTarget(2 * np.eye(2), 1.0, "second_moment")
    c = solve_corrector(form=make("constant", 16)[1])
    ok = sigma_from_corrector(c, 1.0, ref)
    assert not ok.flags and choose_target(ok, ref) is ok
    bad = sigma_from_corrector(c, 0.5, ref)
    assert bad.flags and choose_target(bad, ref) is ref
    assert relative_op_distance(3 * np.eye(2), 2 * np.eye(2)) == pytest.approx(0.5)


def test_isotonic_residual():
    assert isotonic_residual([4, 3, 2, 1]) == 0
    assert isotonic_residual([1, 2]) == pytest.approx(0.25)


def test_random_origins_deterministic():
    _, f = make("constant", 32)
    a = random_origins(f, 4, 7)
    assert a == random_origins(f, 4, 7) and len(set(a)) == 4


def test_small_sweep_constant():
    s = generate_environment(EnvironmentSpec(N=64))
    f = assemble_form(s)
    target = CltTarget(2 * np.eye(2), 1.0, "exact")
    o = f.grid.center_site()
    res = clt_sweep(f, [o], [1.0, 0.5, 0.25], [0.5, 1.0], 1.0, target)
    e = res.per_origin[o]
    assert e[2].skipped is not None and e[0].skipped is None
    for r in e[:2]:
        assert r.mass_error <= 1e-10
        assert r.J["recombination"] <= 1e-10
    assert e[1].sup_error < e[0].sup_error
    v = sweep_verdict(res, "admissible")
    assert v["per_origin"][o]["evaluated"] == [1.0, 0.5]
    assert v["passed"]
    assert not sweep_verdict(res, "failure")["passed"]
    with pytest.raises(ValueError):
        sweep_verdict(res, "other")


def test_sweep_write(tmp_path):
    f = assemble_form(generate_environment(EnvironmentSpec(N=32)))
    res = clt_sweep(f, [f.grid.center_site()], [1.0], [0.5], 1.0, CltTarget(2 * np.eye(2), 1.0, "exact"))
    j, c = res.write(tmp_path)
    assert '"per_origin"' in j.read_text()
    assert c.read_text().splitlines()[0] == "origin,eps,t,x1,x2,density,gaussian,error"
