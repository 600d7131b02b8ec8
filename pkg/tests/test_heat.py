from __future__ import annotations

import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make
from dhlab.env import EnvironmentSpec, generate_environment
from dhlab.grid import assemble_form
from dhlab.heat import (SchemeRecord, chapman_kolmogorov_residual, default_dt, diagonal_values, evolve,
                        evolve_path, export_kernel_csv, fit_diagonal_envelope, fit_power_envelope, kernel_column,
                        kernel_columns, loglog_slope, point_masses, positivity_safe_dt, probe_sites,
                        symmetry_residual)


def dense_kernel(form, t):
    """p_t(x, y) from the eigendecomposition of M^-1/2 E M^-1/2."""
    s = 1 / np.sqrt(form.m)
    w, V = np.linalg.eigh(s[:, None] * form.E.toarray() * s[None, :])
    P = (V * np.exp(-t * w)) @ V.T
    return s[:, None] * P * s[None, :]


def test_default_dt():
    assert default_dt(1.0, 128.0) == 1.0
    assert default_dt(1.0, 6.4) == pytest.approx(0.1)
    assert default_dt(0.5, 0.0) == 0.25


@pytest.mark.parametrize("model", ["constant", "lognormal", "iid-cell-pareto"])
def test_matches_dense_oracle(model):
    _, f = make(model, 16)
    t = 3.0
    P = dense_kernel(f, t)
    assert abs(P - P.T).max() <= 1e-10 * abs(P).max()
    sites = [0, 37, 200]
    cols, rec = kernel_columns(f, sites, t, dt=min(0.01, positivity_safe_dt(f)), solver="direct")
    assert rec.ie_steps == 0
    assert abs(cols - P[:, sites]).max() <= 1e-4 * abs(P[:, sites]).max()


def test_crank_nicolson_is_second_order():
    _, f = make("lognormal", 16)
    P = dense_kernel(f, 2.0)[:, 0]
    errs = []
    for dt in (0.04, 0.02, 0.01):
        u = kernel_column(f, 0, 2.0, dt=dt, solver="direct", guard=False).values
        errs.append(abs(u - P).max())
    assert errs[0] / errs[1] == pytest.approx(4, rel=0.15)
    assert errs[1] / errs[2] == pytest.approx(4, rel=0.15)


def test_implicit_euler_first_order():
    _, f = make("constant", 16)
    P = dense_kernel(f, 2.0)[:, 0]
    e = [abs(kernel_column(f, 0, 2.0, dt=dt, method="ie", solver="direct").values - P).max() for dt in (0.04, 0.02)]
    assert e[0] / e[1] == pytest.approx(2, rel=0.15)


def test_fourier_mode_decay():
    # constant environment, h = 1: cos(2 pi k x / N) decays at rate 2(1 - cos(2 pi k / N)) per axis
    N = 32
    f = assemble_form(generate_environment(EnvironmentSpec(N=N)))
    x = f.grid.indices[:, 0]
    for k in (1, 3):
        u0 = np.cos(2 * math.pi * k * x / N)
        lam = 2 * (1 - math.cos(2 * math.pi * k / N))
        u = evolve(f, u0, 5.0, dt=0.01, solver="direct").u
        # the discrete eigenvector picks up the exact Crank-Nicolson amplification factor
        g = ((1 - lam * 0.005) / (1 + lam * 0.005)) ** 500
        assert u == pytest.approx(g * u0, abs=1e-12)
        assert g == pytest.approx(math.exp(-lam * 5.0), rel=1e-4)


@pytest.mark.parametrize("model", ["constant", "lognormal", "iid-cell-pareto", "trap-counterexample", "layered"])
def test_semigroup_axioms_small(model):
    _, f = make(model, 16)
    col = kernel_column(f, 5, 2.0)
    assert abs(col.mass(f.m) - 1) <= 1e-10
    assert col.values.min() >= -1e-12 * col.values.max()
    assert symmetry_residual(f, [0, 17, 100, 255], 2.0) <= 1e-8
    assert chapman_kolmogorov_residual(f, 3, 1.0, 1.0, probes=np.arange(0, 256, 7), solver="direct") <= 1e-9


def test_positivity_guard_switches_to_implicit_euler():
    _, f = make("iid-cell-pareto", 16)
    dt = 20 * positivity_safe_dt(f)
    col = kernel_column(f, 0, 50 * dt, dt=dt)
    assert col.scheme.ie_steps > 0
    assert col.values.min() >= -1e-12 * col.values.max()
    assert col.mass(f.m) == pytest.approx(1, abs=1e-10)


@settings(max_examples=10)
@given(seed=st.integers(0, 10_000), t=st.floats(0.2, 5.0))
def test_mass_and_positivity_property(seed, t):
    s = generate_environment(EnvironmentSpec(N=8, model="lognormal", seed=seed))
    f = assemble_form(s)
    col = kernel_column(f, 0, t)
    assert abs(col.mass(f.m) - 1) <= 1e-10
    assert col.values.min() >= -1e-12 * col.values.max()


def test_diagonal_nonincreasing(lognormal16):
    _, f = lognormal16
    times, diag = diagonal_values(f, [1, 2, 4, 8, 16], probes=[0, 50, 130])
    assert np.all(np.diff(diag, axis=0) <= 1e-12)


def test_evolve_errors(constant16):
    _, f = constant16
    with pytest.raises(ValueError):
        evolve(f, np.ones(f.n), -1.0)
    with pytest.raises(ValueError):
        kernel_column(f, 0, 0.0)
    with pytest.raises(ValueError):
        evolve(f, np.ones(f.n), 1.0, method="rk4")
    with pytest.raises(ValueError):
        evolve_path(f, np.ones(f.n), [2.0, 1.0], 0.1)
    assert evolve(f, np.ones(f.n), 0.0).u == pytest.approx(np.ones(f.n))


def test_cg_and_direct_agree(lognormal16):
    _, f = lognormal16
    u0 = point_masses(f, [3])[:, 0]
    a = evolve(f, u0, 1.0, solver="cg").u
    b = evolve(f, u0, 1.0, solver="direct").u
    assert abs(a - b).max() <= 1e-8 * abs(b).max()


def test_probe_sites():
    _, f = make("constant", 16)
    assert probe_sites(f).size == 256
    g = assemble_form(generate_environment(EnvironmentSpec(N=64)))
    p = probe_sites(g, count=64)
    assert p.size == 64 and np.unique(p).size == 64


def test_power_fits():
    t = np.array([1.0, 2, 4, 8])
    assert loglog_slope(t, 3 * t ** -1.0) == pytest.approx(-1.0)
    fit = fit_power_envelope(t, 3 * t ** -1.0, 1.0)
    assert fit["satisfied"]
    fit = fit_power_envelope(t, 3 * t ** -0.5, 1.0)
    assert not fit["satisfied"]
    fit = fit_diagonal_envelope(t, 2 * t[:, None] ** -1.0 * np.ones((4, 2)), np.zeros(2), 1.0, 2, 1.0)
    assert fit["satisfied"]


def test_export_kernel_csv(tmp_path, constant16):
    _, f = constant16
    col = kernel_column(f, 0, 1.0)
    csv_path, manifest = export_kernel_csv(f, col, tmp_path / "k.csv")
    rows = csv_path.read_text().splitlines()
    assert rows[0] == "site,x1,x2,density" and len(rows) == f.n + 1
    assert float(rows[1].split(",")[-1]) == pytest.approx(col.values[0], rel=1e-15)
    assert '"cn_steps"' in manifest.read_text()
