import numpy as np
import pytest

from lsdk import cli, harness
from lsdk.core import ParameterVector
from lsdk.harness import ConfigError, PhiSpec, parse_config

SMALL_DOPING = "problem = doping\nm = 15\nN = 5\nh = 0.05\n"
SMALL_RADON = "problem = radon\ngrid = 30\nN = 8\n"


def test_parse_example_config():
    cfg = parse_config("problem = radon\nvariant = lsdk\nnoise_rel = 0.04\ntau = 2")
    assert (cfg.problem, cfg.variant, cfg.noise_rel, cfg.tau) == ("radon", "lsdk", 0.04, 2.0)


def test_tau_below_two_is_rejected_with_bound():
    with pytest.raises(ConfigError, match=r"line 1: .*tau >= 2\(1 \+ eta\)/\(1 - 2 eta\)"):
        parse_config("tau = 1.5")


def test_empty_text_gives_radon_defaults():
    cfg = parse_config("")
    assert cfg == parse_config("# only a comment\n\n")
    assert cfg.problem == "radon" and cfg.variant == "lsdk"
    assert cfg.grid == (120, 120) and cfg.N == 50 and cfg.tau == 2.0 and cfg.noise_rel == 0.04
    assert cfg.phi == PhiSpec("clamped", scale=0.4, cap=2.0)


def test_doping_defaults():
    cfg = parse_config("problem = doping")
    assert (cfg.m, cfg.grid, cfg.N, cfg.tau, cfg.noise_rel) == (31, (31, 31), 11, 2.5, 0.01)
    assert parse_config("problem = doping\nvariant = lk").phi == PhiSpec("const")


@pytest.mark.parametrize("text, line, fragment", [
    ("problem = radon\ncolour = red", 2, "unknown key"),
    ("variant = lsdk\nvariant = sdk", 2, "duplicate"),
    ("\n\nnoise_rel = -0.1", 3, "nonnegative"),
    ("grid = 12x", 1, "grid"),
    ("problem = radon\nm = 31", 2, "does not apply"),
    ("problem = doping\nphantom = p.txt", 2, "does not apply"),
    ("variant = llk\nphi = clamped 0.4 2", 2, "constant"),
    ("phi = clamped 1.5 2", 1, "exceeds 1"),
    ("phi = linear 1", 1, "const"),
    ("just words", 1, "key = value"),
    ("seed = 1.5", 1, "seed"),
    ("problem = doping\nx_min = 5\nx_max = 1", 3, "x_min < x_max"),
    ("variant = lsdk\nresidual_target = llk", 2, "non-loping"),
    ("problem = doping\nm = 5\ncontact_weight = 1, 1, 1", 3, "5 entries"),
    ("problem = doping\ncontact_weight = 1, -1", 2, "positive"),
])
def test_config_errors_cite_lines(text, line, fragment):
    with pytest.raises(ConfigError, match=fragment) as exc:
        parse_config(text)
    assert exc.value.line == line
    assert str(exc.value).startswith(f"line {line}:")


def test_config_text_roundtrip():
    for text in ("", "problem = doping\nvariant = llk\nphi = const 0.5", SMALL_RADON,
                 "problem = doping\nm = 5\ncontact_weight = 1, 2, 3, 2, 1"):
        cfg = parse_config(text)
        assert parse_config(cfg.to_text()) == cfg


def test_pgm_example_and_roundtrip(tmp_path):
    path = tmp_path / "f.pgm"
    harness.write_pgm(ParameterVector([0.0, 1.0, 0.5, 0.25], (2, 2), 1.0), path)
    pix, lo, hi = harness.read_pgm(path)
    assert pix.tolist() == [[0, 255], [127, 63]]
    assert (lo, hi) == (0.0, 1.0)
    lines = path.read_text().splitlines()
    assert lines[0] == "P2" and lines[1] == "# min=0.0 max=1.0" and lines[2] == "2 2"


def test_pgm_constant_field_and_exact_scale(tmp_path):
    path = tmp_path / "c.pgm"
    harness.write_pgm(ParameterVector(np.full(6, 0.1 + 0.2), (2, 3), 1.0), path)
    pix, lo, hi = harness.read_pgm(path)
    assert pix.shape == (2, 3) and np.all(pix == 0)
    assert lo == hi == 0.1 + 0.2
    with pytest.raises(ValueError):
        harness.write_pgm(ParameterVector([np.inf, 0.0], (1, 2), 1.0), path)


def run_cfg(text, out):
    return harness.run_experiment(parse_config(text), out)


def test_run_experiment_artifacts(tmp_path):
    paths = run_cfg(SMALL_DOPING, tmp_path / "a")
    assert all(paths[name].exists() for name in harness.ARTIFACTS)
    trace = paths["trace.csv"].read_text().splitlines()
    assert trace[0] == harness.TRACE_HEADER
    summary = dict(line.split(" = ", 1) for line in paths["summary.txt"].read_text().splitlines())
    cycles = [int(l.split(",")[1]) for l in paths["cycles.csv"].read_text().splitlines()[1:]]
    assert int(summary["total_updates"]) == sum(cycles) == int(summary["adjoint_evals"])
    assert summary["stop_reason"] == "AllLoped" and cycles[-1] == 0
    assert float(summary["max_residual_ratio"]) < 1
    assert len(trace) - 1 == len(cycles) * 5
    assert "seconds" not in paths["summary.txt"].read_text()


def test_trace_rows_match_run_length_and_use_shortest_repr(tmp_path):
    paths = run_cfg(SMALL_RADON, tmp_path)
    rows = [r.split(",") for r in paths["trace.csv"].read_text().splitlines()[1:]]
    cycles = paths["cycles.csv"].read_text().splitlines()[1:]
    assert len(rows) == len(cycles) * 8
    for r in rows[:20]:
        assert repr(float(r[5])) == r[5]
        assert int(r[0]) == int(r[1]) // 8


def test_rerun_is_byte_identical(tmp_path):
    for text in (SMALL_DOPING, SMALL_RADON, SMALL_RADON + "variant = cgne\nmax_cycles = 8"):
        a = run_cfg(text, tmp_path / "a")
        b = run_cfg(text, tmp_path / "b")
        for name in harness.ARTIFACTS:
            assert a[name].read_bytes() == b[name].read_bytes(), name


def test_contact_weight_scales_currents(tmp_path):
    w = ", ".join(["2"] * 15)
    a = run_cfg(SMALL_DOPING + "noise_rel = 0\nmax_cycles = 1", tmp_path / "a")
    b = run_cfg(SMALL_DOPING + f"noise_rel = 0\nmax_cycles = 1\ncontact_weight = {w}",
                tmp_path / "b")
    ra = [float(r.split(",")[5]) for r in a["trace.csv"].read_text().splitlines()[1:2]]
    rb = [float(r.split(",")[5]) for r in b["trace.csv"].read_text().splitlines()[1:2]]
    assert rb[0] == pytest.approx(2 * ra[0], rel=1e-12)


def test_seed_changes_trace(tmp_path):
    a = run_cfg(SMALL_RADON, tmp_path / "a")["trace.csv"].read_text()
    b = run_cfg(SMALL_RADON + "seed = 1", tmp_path / "b")["trace.csv"].read_text()
    assert a != b


def test_zero_noise_lsdk_runs_without_loping(tmp_path):
    paths = run_cfg(SMALL_RADON + "noise_rel = 0\nmax_cycles = 4", tmp_path)
    summary = paths["summary.txt"].read_text()
    assert "stop_reason = MaxCycles" in summary and "max_residual_ratio = n/a" in summary
    omegas = {r.split(",")[3] for r in paths["trace.csv"].read_text().splitlines()[1:]}
    assert omegas == {"1"}


def test_cgne_is_capped_at_minimal_error(tmp_path):
    paths = run_cfg(SMALL_RADON + "variant = cgne\nmax_cycles = 30", tmp_path)
    summary = dict(l.split(" = ", 1) for l in paths["summary.txt"].read_text().splitlines())
    assert summary["stop_reason"] == "MinError"
    cyc = int(summary["cycles"])
    assert 0 < cyc < 30
    errs = [float(r.split(",")[7]) for r in paths["trace.csv"].read_text().splitlines()[1:]]
    assert float(summary["final_error_rel"]) <= min(errs)


def test_doping_ordering_through_harness(tmp_path):
    counts = {}
    for variant, extra in (("lsdk", ""), ("llk", ""), ("lk", "residual_target = llk\n")):
        text = SMALL_DOPING + f"variant = {variant}\n" + extra
        s = run_cfg(text, tmp_path / variant)["summary.txt"].read_text()
        counts[variant] = int(dict(l.split(" = ", 1) for l in s.splitlines())["cycles"])
    assert counts["lsdk"] <= counts["llk"] <= counts["lk"]


def test_failure_leaves_no_partial_artifacts(tmp_path, monkeypatch):
    def boom(*_):
        raise OSError("disk full")

    monkeypatch.setattr(harness, "write_pgm", boom)
    out = tmp_path / "fail"
    with pytest.raises(OSError):
        run_cfg(SMALL_DOPING, out)
    assert not out.exists()


def test_output_dir_precedence(monkeypatch, tmp_path):
    monkeypatch.setenv(harness.OUTPUT_ENV, str(tmp_path / "env"))
    cfg = parse_config("")
    assert harness.resolve_output_dir(cfg) == tmp_path / "env"
    cfg = parse_config(f"output_dir = {tmp_path / 'cfg'}")
    assert harness.resolve_output_dir(cfg) == tmp_path / "cfg"
    assert harness.resolve_output_dir(cfg, tmp_path / "cli") == tmp_path / "cli"


# ---------------------------------------------------------------------------
# command line


def write(path, text):
    path.write_text(text)
    return str(path)


def test_cli_validate(tmp_path, capsys):
    assert cli.main(["validate", "--config", write(tmp_path / "ok.cfg", SMALL_RADON)]) == 0
    assert "grid = 30x30" in capsys.readouterr().out
    assert cli.main(["validate", "--config", write(tmp_path / "bad.cfg", "tau = 1")]) == 1
    assert "line 1" in capsys.readouterr().err
    assert cli.main(["validate", "--config", str(tmp_path / "missing.cfg")]) == 1


def test_cli_solve_and_jobs(tmp_path, capsys, monkeypatch):
    a = write(tmp_path / "a.cfg", SMALL_DOPING)
    b = write(tmp_path / "b.cfg", SMALL_RADON)
    monkeypatch.setenv(harness.OUTPUT_ENV, str(tmp_path / "out"))
    assert cli.main(["solve", "--config", a, b, "--jobs", "2"]) == 0
    assert (tmp_path / "out" / "a" / "summary.txt").exists()
    assert (tmp_path / "out" / "b" / "trace.csv").exists()
    assert cli.main(["solve", "--config", a, "--output", str(tmp_path / "one")]) == 0
    assert (tmp_path / "one" / "recon.pgm").exists()


def test_cli_exit_codes(tmp_path, capsys):
    bad_scene = write(tmp_path / "scene.txt", "triangle 0 0 1")
    cfg = write(tmp_path / "s.cfg", SMALL_RADON + f"phantom = {bad_scene}\n")
    assert cli.main(["solve", "--config", cfg, "--output", str(tmp_path / "o")]) == 1
    # an initial guess below x_min makes the device model fail
    low = tmp_path / "x0.txt"
    np.savetxt(low, np.full((15, 15), 0.05))
    domain = write(tmp_path / "d.cfg", SMALL_DOPING + f"initial_file = {low}\n")
    assert cli.main(["solve", "--config", domain, "--output", str(tmp_path / "d")]) == 2
    assert "DomainError" in capsys.readouterr().err
    assert not (tmp_path / "d").exists()
    assert cli.main(["solve", "--config", cfg, "--jobs", "0"]) == 1


def test_cli_adjoint_check(capsys):
    assert cli.main(["adjoint-check", "--problem", "radon", "--grid", "24"]) == 0
    assert cli.main(["adjoint-check", "--problem", "doping", "--grid", "9"]) == 0
    assert "PASS" in capsys.readouterr().out
