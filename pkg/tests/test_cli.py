from __future__ import annotations

import json

import pytest

from dhlab.cli import (DEFAULTS, EXIT_AUDIT, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, OUT_ENV, ConfigError, RunManifest,
                       emit_plot_data, main, parse_config, run)

MINIMAL = "environment:\n  model: constant\n  N: 16\n"


def test_minimal_config_fills_defaults(tmp_path):
    cfg = parse_config(MINIMAL, output=tmp_path)
    assert cfg.environment.N == 16 and cfg.environment.model == "constant"
    assert cfg.experiment == "full-pipeline" and cfg.seed == 0
    assert cfg.sections["inequality"]["radius"] == 4.0
    assert cfg.sections["cylinder"]["radius"] == 4.0
    assert cfg.sections["clt"]["regime"] == "admissible"
    assert cfg.sections["log"]["levels"] == DEFAULTS["log"]["levels"]


def test_empty_config_is_valid(tmp_path):
    assert parse_config("", output=tmp_path).environment.N == 32


def test_moment_condition_boundary(tmp_path):
    parse_config(MINIMAL + "exponents: {p: 3, q: 3}\n", output=tmp_path)
    with pytest.raises(ConfigError) as err:
        parse_config(MINIMAL + "exponents: {p: 2, q: 2}\n", output=tmp_path)
    assert any("moment condition" in e for e in err.value.errors)
    cfg = parse_config(MINIMAL + "exponents: {p: 2, q: 2}\nfailure_regime: true\n", output=tmp_path)
    assert cfg.sections["clt"]["regime"] == "failure"


def test_infinite_exponents(tmp_path):
    cfg = parse_config(MINIMAL + "exponents: {p: inf, q: 4}\n", output=tmp_path)
    assert cfg.canonical()["exponents"]["p"] == "inf"


def test_unknown_keys_and_all_errors_reported(tmp_path):
    text = MINIMAL + "bogus: 1\ncylinder: {delta: 0.2, colour: red}\nclt: {epsilons: [2.0]}\n"
    with pytest.raises(ConfigError) as err:
        parse_config(text, output=tmp_path)
    msgs = " | ".join(err.value.errors)
    for needle in ("bogus", "colour", "delta", "epsilons"):
        assert needle in msgs
    assert len(err.value.errors) >= 4
    # non-strict mode ignores unknown keys but still checks values
    parse_config(MINIMAL + "bogus: 1\n", strict=False, output=tmp_path)


@pytest.mark.parametrize("text", ["environment: {model: nope}\n", "seed: -1\n", "environment: {N: 0}\n",
                                  ": : :\n", "- a\n- b\n", "solver: {method: lu}\n"])
def test_invalid_configs(text, tmp_path):
    with pytest.raises(ConfigError):
        parse_config(text, output=tmp_path)


def test_output_not_writable(tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    try:
        import os
        if os.access(locked, os.W_OK):
            pytest.skip("running with privileges that ignore directory permissions")
        with pytest.raises(ConfigError):
            parse_config(MINIMAL, output=locked / "out")
    finally:
        locked.chmod(0o700)


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path))
    cfg = parse_config(MINIMAL, experiment="harnack")
    assert cfg.output == tmp_path / "harnack"


def test_config_hash_tracks_content(tmp_path):
    a = parse_config(MINIMAL, output=tmp_path)
    b = parse_config(MINIMAL, output=tmp_path / "elsewhere")
    c = parse_config(MINIMAL, seed=1, output=tmp_path)
    assert a.hash() == b.hash() != c.hash()


def test_manifest_exit_codes():
    m = RunManifest("h", "v", "1", "x", 0, 1, stages={"a": {"passed": True}})
    assert m.exit_code() == EXIT_OK
    m.stages["b"] = {"passed": False}
    assert m.exit_code() == EXIT_AUDIT
    m.status = "failed"
    assert m.exit_code() == EXIT_RUNTIME


def _write(tmp_path, text):
    p = tmp_path / "config.yaml"
    p.write_text(text)
    return p


def test_main_config_error_exit(tmp_path, capsys):
    cfg = _write(tmp_path, MINIMAL + "exponents: {p: 2, q: 2}\nbogus: 1\n")
    assert main(["env-gen", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "moment condition" in err and "bogus" in err
    assert main(["env-gen", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG


def test_runtime_failure_leaves_marker(tmp_path):
    # cylinders need a radius of at least 4h; the stage raises on a smaller one
    cfg = parse_config(MINIMAL + "cylinder: {radius: 2}\n", experiment="harnack", output=tmp_path)
    m = run(cfg)
    assert m.exit_code() == EXIT_RUNTIME
    assert "harnack" in (tmp_path / "FAILED").read_text()
    assert json.loads((tmp_path / "manifest.json").read_text())["status"] == "failed"


def _hashes(out):
    return json.loads((out / "manifest.json").read_text())["outputs"]


@pytest.mark.parametrize("experiment", ["env-gen", "harnack", "inequality-audit"])
def test_identical_reruns(tmp_path, experiment):
    cfg = _write(tmp_path, "environment: {model: iid-cell-pareto, N: 16}\ninequality: {trials: 20}\n"
                           "cylinder: {n_solutions: 5}\n")
    for name in ("a", "b"):
        assert main([experiment, "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / name)]) == EXIT_OK
    a, b = _hashes(tmp_path / "a"), _hashes(tmp_path / "b")
    assert a and a == b
    assert main([experiment, "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "c")]) == EXIT_OK
    if experiment != "inequality-audit":
        assert _hashes(tmp_path / "c") != a


def test_manifest_contents(tmp_path):
    main(["env-gen", "--out", str(tmp_path), "--threads", "2"])
    m = json.loads((tmp_path / "manifest.json").read_text())
    for key in ("config_hash", "tool_version", "calibration_version", "stages", "residuals", "flags", "outputs"):
        assert key in m
    assert m["threads"] == 2 and "seconds" in m["stages"]["env-gen"]
    assert set(m["outputs"]) >= {"config.json", "environment.bin", "environment.json"}


def test_clt_guard_skip_is_flagged_not_fatal(tmp_path):
    cfg = _write(tmp_path, "environment: {model: constant, N: 32}\nclt: {n_origins: 1, n_times: 2}\n")
    assert main(["clt-sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert any("torus guard" in f for f in m["flags"])
    rows = (tmp_path / "o" / "plots" / "error_vs_eps.csv").read_text().splitlines()
    assert rows[0].startswith("eps") or "eps" in rows[0]


def test_emit_plot_data_lists_missing(tmp_path, capsys):
    written, missing = emit_plot_data(tmp_path)
    assert written == [] and len(missing) >= 4
    assert main(["emit-plots", str(tmp_path)]) == EXIT_CONFIG


def test_emit_plot_data_from_harnack(tmp_path):
    main(["harnack", "--out", str(tmp_path), "--config", str(_write(tmp_path, MINIMAL + "cylinder: {n_solutions: 5}\n"))])
    written, missing = emit_plot_data(tmp_path)
    names = {p.name for p in written}
    assert "harnack_hist.csv" in names and any(n.endswith(".gp") for n in names)
    assert any("clt" in m or "error" in m for m in missing)


@pytest.mark.slow
def test_full_pipeline_constant(tmp_path, capsys):
    assert main(["full-pipeline", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    for stage in ("env-gen", "inequality-audit", "harnack", "log-audit", "oscillation", "diagonal", "clt-sweep"):
        assert f"{stage}: pass" in out
    written, missing = emit_plot_data(tmp_path)
    assert not missing
    assert {p.name for p in written} >= {"error_vs_eps.csv", "harnack_hist.csv", "diagonal_decay.csv",
                                         "stabilization.csv"}
