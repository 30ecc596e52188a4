import csv
import hashlib
import io
import json
import math
import re
from pathlib import Path

import numpy as np
import pytest

from conftest import FIXTURES, run_cli
from pointscat import dataset_io as dio
from pointscat.cli import build_parser
from pointscat.greens import ComplexEnergy
from pointscat.krein import perturbed_green

README = Path(__file__).resolve().parents[1] / "README.md"
MANIFEST = json.loads((FIXTURES / "golden_manifest.json").read_text())


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def ok(args, **kw):
    out = run_cli(args, **kw)
    assert out.returncode == 0, out.stderr
    return out.stdout


def rows(text):
    return list(csv.reader(io.StringIO(text)))


@pytest.fixture
def local_origin(tmp_path):
    """Single local scatterer at the origin (amplitude is direction independent)."""
    path = tmp_path / "origin.pscat.json"
    ok(["alpha-to-theta", "--alpha", "0.5", "--xi", "0,0,0", "--out", str(path)])
    return path


# -- forward ---------------------------------------------------------------------


def test_forward_matches_golden_bytes():
    cfg = FIXTURES / "single_local.pscat.json"
    out = ok(["forward", "--config", str(cfg), "--k", "1", "--x=1,0,0", "--y=0,1,0"])
    assert out == (FIXTURES / "forward_single_local.json").read_text()
    g = complex(perturbed_green(dio.read_config(cfg), ComplexEnergy.on_shell(1.0), [1, 0, 0], [0, 1, 0]))
    assert json.loads(out) == {"g_im": g.imag, "g_re": g.real}


def test_forward_free_limit(tmp_path):
    cfg = tmp_path / "weak.pscat.json"
    ok(["alpha-to-theta", "--alpha", "1e12", "--xi=0,0,-1", "--out", str(cfg)])
    out = json.loads(ok(["forward", "--config", str(cfg), "--z-re", "2.0", "--z-im", "0.5",
                         "--x=1,0,0", "--y=0,1,0"]))
    w = ComplexEnergy.from_z(2.0 + 0.5j).root
    r = math.sqrt(2)
    g0 = np.exp(1j * w * r) / (4 * math.pi * r)
    assert abs(complex(out["g_re"], out["g_im"]) - g0) < 1e-12


def test_forward_coincident_points_exit_2():
    out = run_cli(["forward", "--config", str(FIXTURES / "single_local.pscat.json"), "--k", "1",
                   "--x=1,0,0", "--y=1,0,0"])
    assert out.returncode == 2
    assert "invalid input" in out.stderr


def test_forward_bound_state_exit_3(tmp_path):
    # alpha - i sqrt(z)/(4 pi) vanishes at z = -(4 pi alpha)^2 for alpha < 0
    cfg = tmp_path / "bound.pscat.json"
    ok(["alpha-to-theta", "--alpha=-0.1", "--xi=0,0,0", "--out", str(cfg)])
    z = -(4 * math.pi * 0.1) ** 2
    out = run_cli(["forward", "--config", str(cfg), f"--z-re={z!r}", "--x=1,0,0", "--y=0,1,0"])
    assert out.returncode == 3, out.stderr
    assert "resonance" in out.stderr


def test_missing_config_exit_2(tmp_path):
    out = run_cli(["forward", "--config", str(tmp_path / "nope.pscat.json"), "--k", "1",
                   "--x=1,0,0", "--y=0,1,0"])
    assert out.returncode == 2
    assert "nope.pscat.json" in out.stderr


# -- verify ----------------------------------------------------------------------


def test_verify_real_symmetric_all_pass():
    report = json.loads(ok(["verify", "--config", str(FIXTURES / "golden_config.pscat.json"),
                            "--k", "0.3", "--pairs", "4"]))
    assert set(report["status"].values()) == {"PASS"}


def test_verify_complex_t_fails_reciprocity_only_where_expected():
    report = json.loads(ok(["verify", "--config", str(FIXTURES / "counterexample_complex_t.pscat.json"),
                            "--k", "1", "--pairs", "4"]))
    assert report["status"]["reciprocity_defect"] == "FAIL"
    assert report["status"]["reality_defect"] == "FAIL"
    assert report["status"]["optical_residual"] == "PASS"
    assert report["status"]["unitarity_defect"] == "PASS"
    assert report["reciprocity_defect"] > 1e-3


def test_verify_optical_improves_with_degree():
    cfg = str(FIXTURES / "counterexample_complex_t.pscat.json")
    lo = json.loads(ok(["verify", "--config", cfg, "--k", "1", "--quad-degree", "4", "--pairs", "3"]))
    hi = json.loads(ok(["verify", "--config", cfg, "--k", "1", "--quad-degree", "24", "--pairs", "3"]))
    assert hi["optical_residual"] < lo["optical_residual"]


def test_verify_seed_deterministic():
    args = ["verify", "--config", str(FIXTURES / "golden_config.pscat.json"), "--k", "0.5", "--seed", "9",
            "--pairs", "3"]
    assert ok(args, threads=1) == ok(args, threads=4)


# -- synth / lift / invert -------------------------------------------------------


def test_golden_pipeline_reproduces_recorded_files(tmp_path):
    cfg = FIXTURES / "golden_config.pscat.json"
    for threads in (1, 4):
        samples = tmp_path / f"s{threads}.pscat.json"
        result = tmp_path / f"r{threads}.pscat.json"
        ok(["synth", "--config", str(cfg), *MANIFEST["commands"]["synth"], "--out", str(samples)],
           threads=threads)
        assert sha256(samples) == MANIFEST["samples_sha256"]
        ok(["invert", "--samples", str(samples), *MANIFEST["commands"]["invert"], "--out", str(result)],
           threads=threads)
        assert result.read_bytes() == (FIXTURES / "golden_result.pscat.json").read_bytes()
        assert sha256(result) == MANIFEST["result_sha256"]


def test_golden_result_recovers_configuration():
    truth = dio.read_config(FIXTURES / "golden_config.pscat.json")
    got = dio.read_result(FIXTURES / "golden_result.pscat.json")
    lam = 2 * math.pi
    assert got.model_order == 2
    assert np.max(np.linalg.norm(got.xi_hat - truth.xi, axis=1)) < 0.05 * lam
    assert np.linalg.norm(got.tan_half_hat - truth.tan_half_theta) < 0.05 * np.linalg.norm(truth.tan_half_theta)


def test_invert_free_field_order_zero(tmp_path):
    samples = tmp_path / "free.pscat.json"
    out = json.loads(ok(["synth", "--k0", "1", "--grid-side", "30", "--grid-count", "10",
                         "--noise", "1e-5", "--seed", "3", "--out", str(samples)]))
    assert out["pairs"] == 100 * 99
    res = json.loads(ok(["invert", "--samples", str(samples), "--box=-10,10,-10,10,-20,-2"]))
    assert res["model_order"] == 0
    assert res["xi"] == []


def test_lift_free_field(tmp_path):
    # documented defaults R = 60/k0, h = pi/(8 k0); the grid covers the disk around the probe
    h = math.pi / 8
    count = 313
    samples = tmp_path / "free.pscat.json"
    ok(["synth", "--k0", "1", "--grid-side", repr((count - 1) * h), "--grid-count", str(count),
        "--sources", "0,0", "--out", str(samples)])
    cfg = tmp_path / "weak.pscat.json"
    ok(["alpha-to-theta", "--alpha", "1e14", "--xi=0,0,-50", "--half-space", "--out", str(cfg)])
    out = json.loads(ok(["lift", "--samples", str(samples), "--s", "0.5,0.3,1", "--y", "0,0",
                         "--config", str(cfg)]))
    assert out["radius"] == 60 and out["step"] == h and out["taper"] == 20
    assert out["rel_error"] < 1e-2
    g0 = np.exp(1j * math.sqrt(1.34)) / (4 * math.pi * math.sqrt(1.34))
    assert abs(complex(out["w_re"], out["w_im"]) - g0) < 1e-2 * abs(g0)


def test_lift_uncovered_region_exit_2(tmp_path):
    samples = tmp_path / "small.pscat.json"
    ok(["synth", "--k0", "1", "--grid-side", "5", "--grid-count", "5", "--out", str(samples)])
    out = run_cli(["lift", "--samples", str(samples), "--s", "0,0,1", "--y", "0,0"])
    assert out.returncode == 2
    assert "missing region" in out.stderr or "source point" in out.stderr


def test_synth_rejects_bad_grid(tmp_path):
    out = run_cli(["synth", "--k0", "1", "--grid-side", "5", "--grid-count", "0", "--out",
                   str(tmp_path / "x.pscat.json")])
    assert out.returncode == 2
    assert not (tmp_path / "x.pscat.json").exists()


def test_synth_seed_deterministic(tmp_path):
    args = ["synth", "--config", str(FIXTURES / "golden_config.pscat.json"), "--k0", "1",
            "--grid-side", "20", "--grid-count", "5", "--noise", "0.01", "--noise-relative", "--seed", "5"]
    a, b = tmp_path / "a.pscat.json", tmp_path / "b.pscat.json"
    ok(args + ["--out", str(a)], threads=1)
    ok(args + ["--out", str(b)], threads=4)
    assert a.read_bytes() == b.read_bytes()


# -- plotdata / alpha-to-theta ---------------------------------------------------


def test_plotdata_amplitude_constant_for_single_point(local_origin):
    table = rows(ok(["plotdata", "--what", "amplitude", "--config", str(local_origin), "--k", "0.7",
                     "--directions", "64"]))
    assert table[0] == ["ox", "oy", "oz", "a_re", "a_im"]
    body = np.array(table[1:], dtype=float)
    assert len(body) == 64
    assert np.allclose(np.linalg.norm(body[:, :3], axis=1), 1)
    assert np.ptp(body[:, 3]) == 0 and np.ptp(body[:, 4]) == 0


def test_plotdata_indicator_peaks_at_scatterer():
    table = rows(ok(["plotdata", "--what", "indicator", "--config", str(FIXTURES / "single_local.pscat.json"),
                     "--k", "1", "--box=-2,2,-2,2,-3,-0.25", "--step", "0.25"]))
    assert table[0] == ["x1", "x2", "x3", "indicator"]
    body = np.array(table[1:], dtype=float)
    assert body[np.argmax(body[:, 3]), :3].tolist() == [0.0, 0.0, -1.0]


def test_plotdata_wave_slice(local_origin):
    table = rows(ok(["plotdata", "--what", "wave", "--config", str(local_origin), "--k", "1",
                     "--grid-side", "4", "--grid-count", "3", "--height", "2"]))
    assert len(table) == 1 + 9
    assert all(float(r[2]) == 2.0 for r in table[1:])


def test_plotdata_empty_grid_exit_2(local_origin):
    for extra in (["--what", "wave", "--grid-count", "0"], ["--what", "amplitude", "--directions", "0"]):
        out = run_cli(["plotdata", "--config", str(local_origin), "--k", "1", *extra])
        assert out.returncode == 2, extra
        assert "empty grid" in out.stderr


def test_alpha_to_theta_output(tmp_path):
    out = json.loads(ok(["alpha-to-theta", "--alpha", "0.5", "--xi=0,0,-1"]))
    t = out["tan_half_theta"]["re"][0][0]
    assert abs(t - (0.5 + 1 / (4 * math.pi * math.sqrt(2)))) < 1e-15
    assert abs(out["theta"]["re"][0][0] - 2 * math.atan(t)) < 1e-15
    bad = run_cli(["alpha-to-theta", "--alpha", "0.5,0.2", "--xi=0,0,-1"])
    assert bad.returncode == 2


# -- help and documentation ------------------------------------------------------


def _subparsers():
    parser = build_parser()
    action = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    return parser, action.choices


def test_every_flag_has_help_with_units():
    _, subs = _subparsers()
    assert set(subs) == {"forward", "verify", "synth", "lift", "invert", "plotdata", "alpha-to-theta"}
    for name, p in subs.items():
        for a in p._actions:
            if a.option_strings and a.dest != "help":
                assert a.help, f"{name} {a.option_strings}"
                if a.type in (float, int):
                    assert re.search(r"\(.+\)", a.help), f"{name} {a.option_strings} lacks units"


def test_readme_lists_every_flag():
    text = README.read_text()
    _, subs = _subparsers()
    for name, p in subs.items():
        assert f"pointscat {name}" in text, name
        for a in p._actions:
            for flag in a.option_strings:
                if flag.startswith("--") and flag != "--help":
                    assert flag in text, f"{name} {flag} missing from README"


def test_help_runs():
    out = ok(["--help"])
    assert "exit codes" in out
    for name in ("forward", "verify", "synth", "lift", "invert", "plotdata", "alpha-to-theta"):
        assert "usage" in ok([name, "--help"])
