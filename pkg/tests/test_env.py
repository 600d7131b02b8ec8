from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import ks_2samp

from dhlab.env import (MODELS, EnvironmentSpec, SpecError, generate_environment, load_environment,
                       moment_report, save_environment)


def test_constant_environment_is_identity():
    s = generate_environment(EnvironmentSpec(model="constant", d=2, N=8))
    assert np.all(s.lam == 1) and np.all(s.Lam == 1)
    assert np.array_equal(s.a, np.broadcast_to(np.eye(2), (8, 8, 2, 2)))


@pytest.mark.parametrize("bad", [dict(d=1), dict(N=2), dict(N=12), dict(h=0.0), dict(model="nope"),
                                 dict(anisotropy=0.5)])
def test_invalid_specs_rejected(bad):
    with pytest.raises(SpecError):
        EnvironmentSpec(**bad)


def test_all_errors_reported_together():
    with pytest.raises(SpecError) as exc:
        EnvironmentSpec(d=1, N=12, h=-1.0)
    msg = str(exc.value)
    assert "d=1" in msg and "N=12" in msg and "h=-1.0" in msg


@pytest.mark.parametrize("model", MODELS)
def test_determinism_and_ellipticity(model):
    spec = EnvironmentSpec(N=16, model=model, seed=7)
    a, b = generate_environment(spec), generate_environment(spec)
    assert np.array_equal(a.lam, b.lam) and np.array_equal(a.Lam, b.Lam) and np.array_equal(a.a, b.a)
    assert np.all(a.lam > 0) and np.all(a.lam <= a.Lam) and np.all(np.isfinite(a.a))
    assert a.ellipticity_violation() < 1e-10


@given(seed=st.integers(0, 2**32), model=st.sampled_from(MODELS))
def test_sample_invariants_property(seed, model):
    s = generate_environment(EnvironmentSpec(N=8, model=model, seed=seed))
    assert np.allclose(s.a, np.swapaxes(s.a, -1, -2))
    assert s.ellipticity_violation() < 1e-10
    assert np.all(s.lam <= s.Lam)


def test_moment_report_constant():
    s = generate_environment(EnvironmentSpec(model="constant", N=8))
    r = moment_report(s, 2, 2)
    assert r.mean_Lambda_p == 1 and r.mean_lambda_inv_q == 1 and r.condition_ok is False  # 1/2+1/2 = 2/d
    r = moment_report(s, math.inf, math.inf)
    assert r.mean_Lambda_p == 1 and r.mean_lambda_inv_q == 1 and r.condition_ok


def test_pareto_moment_matches_closed_form():
    # Lambda >= 1 is Pareto(alpha) with unit scale before the max with lambda <= 1: E[Lambda^p] = a/(a-p)
    s = generate_environment(EnvironmentSpec(model="iid-cell-pareto", N=256, seed=1))
    r = moment_report(s, 4, 4)
    oracle = 6 / (6 - 4)
    assert oracle / 3 <= r.mean_Lambda_p <= 3 * oracle
    assert oracle / 3 <= r.mean_lambda_inv_q <= 3 * oracle
    assert r.condition_ok


def test_trap_moments_blow_up_with_N():
    # lambda^-q grows with the torus for q = 2: the dyadic annulus k has 2^(2k) cells of weight 2^(qk)
    vals = [moment_report(generate_environment(EnvironmentSpec(model="trap-counterexample", N=n)), 2, 2)
            .mean_lambda_inv_q for n in (32, 64, 128)]
    assert vals[0] < vals[1] < vals[2]
    assert vals[2] / vals[1] > 1.5


def test_stationarity_proxy_subbox_ks():
    s = generate_environment(EnvironmentSpec(model="iid-cell-pareto", N=256, seed=3))
    sub = s.lam[:64, :64].reshape(-1)
    assert ks_2samp(sub, s.lam.reshape(-1)).statistic < 0.05


def test_anisotropy_monotone_coupling():
    lo = generate_environment(EnvironmentSpec(model="lognormal", N=16, seed=2, anisotropy=1.5))
    hi = generate_environment(EnvironmentSpec(model="lognormal", N=16, seed=2, anisotropy=3.0))
    ev_lo = np.linalg.eigvalsh(lo.a)
    ev_hi = np.linalg.eigvalsh(hi.a)
    assert np.all(ev_hi[..., -1] / ev_hi[..., 0] >= ev_lo[..., -1] / ev_lo[..., 0] - 1e-9)
    assert np.array_equal(lo.Lam / lo.lam, hi.Lam / hi.lam)


def test_layered_depends_on_first_coordinate_only():
    s = generate_environment(EnvironmentSpec(model="layered", N=16, seed=4))
    assert np.allclose(s.a, s.a[:, :1])
    assert np.allclose(s.a[..., 0, 1], 0)


@pytest.mark.parametrize("model", MODELS)
def test_binary_roundtrip(tmp_path, model):
    s = generate_environment(EnvironmentSpec(N=8, model=model, seed=5))
    path = save_environment(s, tmp_path / "env.bin")
    raw = path.read_bytes()
    assert raw[:4] == b"DHL1"
    t = load_environment(path)
    assert t.spec == s.spec
    assert np.array_equal(t.lam, s.lam) and np.array_equal(t.Lam, s.Lam) and np.array_equal(t.a, s.a)


def test_truncated_binary_rejected(tmp_path):
    s = generate_environment(EnvironmentSpec(N=8, model="lognormal"))
    path = save_environment(s, tmp_path / "env.bin")
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_environment(path)
