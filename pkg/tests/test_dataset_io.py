import json
import math
import os

import numpy as np
import pytest

from conftest import FIXTURES, random_config, random_hermitian
from pointscat import dataset_io as dio
from pointscat.inverse import PlaneSamples, ReconstructionResult
from pointscat.krein import ConfigurationError, tan_half_to_theta


def random_samples(rng):
    m = int(rng.integers(1, 30))
    x = rng.normal(size=(m, 2)) * 10
    y = x + rng.uniform(0.1, 5, size=(m, 2))
    g = rng.normal(size=m) + 1j * rng.normal(size=m)
    return PlaneSamples(float(rng.uniform(0.1, 5)), x, y, g, float(rng.uniform(0, 1e-2)), int(rng.integers(0, 2**31)))


def random_result(rng):
    n = int(rng.integers(0, 4))
    if n == 0:
        return ReconstructionResult.empty(1.3, float(rng.uniform(0, 1)))
    t = random_hermitian(rng, n)
    p = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    xi = rng.normal(size=(n, 3)) - [0, 0, 5]
    return ReconstructionResult(xi, p, t, tan_half_to_theta(t), float(rng.uniform(0, 1)),
                                float(rng.uniform(0, 1e-12)), n, int(rng.integers(1, 200)),
                                bool(rng.integers(0, 2)), float(rng.uniform(0.5, 2)))


def assert_same_result(a, b):
    for name in ("xi_hat", "p_hat", "tan_half_hat", "theta_hat"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    for name in ("residual_rms", "hermiticity_defect", "model_order", "iterations", "converged", "k0"):
        assert getattr(a, name) == getattr(b, name)


# -- round trips -----------------------------------------------------------------


def test_config_round_trip(rng, tmp_path):
    path = tmp_path / "c.pscat.json"
    for _ in range(100):
        c = random_config(rng, int(rng.integers(1, 5)), real=bool(rng.integers(0, 2)))
        dio.write_config(path, c)
        back = dio.read_config(path)
        assert np.array_equal(back.xi, c.xi)
        assert np.array_equal(back.tan_half_theta, c.tan_half_theta)
        assert back.half_space == c.half_space


def test_samples_round_trip(rng, tmp_path):
    path = tmp_path / "s.pscat.json"
    for _ in range(100):
        s = random_samples(rng)
        dio.write_samples(path, s)
        back = dio.read_samples(path)
        for name in ("x", "y", "g"):
            assert np.array_equal(getattr(back, name), getattr(s, name))
        assert (back.k0, back.noise_sigma, back.seed) == (s.k0, s.noise_sigma, s.seed)


def test_result_round_trip(rng, tmp_path):
    path = tmp_path / "r.pscat.json"
    for _ in range(100):
        r = random_result(rng)
        dio.write_result(path, r)
        assert_same_result(dio.read_result(path), r)


def test_writes_are_byte_stable(rng, tmp_path):
    r = random_result(rng)
    dio.write_result(tmp_path / "a.pscat.json", r)
    dio.write_result(tmp_path / "b.pscat.json", r)
    a = (tmp_path / "a.pscat.json").read_bytes()
    assert a == (tmp_path / "b.pscat.json").read_bytes()
    assert a.endswith(b"\n")
    env = json.loads(a)
    assert env["format_version"] == 1 and env["kind"] == "result"
    assert env["checksum"] == dio.checksum(env["payload"])


def test_float_formatting_is_shortest_round_trip():
    text = dio.canonical_json({"a": 0.1, "b": 1 / 3, "c": 1e-300})
    assert text == '{"a":0.1,"b":0.3333333333333333,"c":1e-300}'


def test_checksum_ignores_whitespace(tmp_path):
    doc = json.loads((FIXTURES / "single_local.pscat.json").read_text())
    text = json.dumps(doc, indent=4)
    assert dio.load_document(text).kind == "config"


# -- validation ------------------------------------------------------------------


def test_nan_residual_rejected_before_write(tmp_path):
    r = ReconstructionResult.empty(1.0, float("nan"))
    path = tmp_path / "r.pscat.json"
    with pytest.raises(dio.SchemaError, match="residual_rms"):
        dio.write_result(path, r)
    assert not path.exists()
    assert os.listdir(tmp_path) == []


def test_checksum_mismatch_rejected(tmp_path):
    text = (FIXTURES / "single_local.pscat.json").read_text()
    env = json.loads(text)
    env["payload"]["alpha_note"] = 1
    with pytest.raises(dio.SchemaError, match="checksum"):
        dio.load_document(json.dumps(env))


def test_version_and_kind_checked():
    payload = {"xi": [[0, 0, -1]], "alpha": [0.5]}
    env = json.loads(dio.dump_document("config", payload))
    env["format_version"] = 2
    with pytest.raises(dio.SchemaError, match="format_version"):
        dio.load_document(json.dumps(env))
    with pytest.raises(dio.SchemaError, match="expected 'result'"):
        dio.load_document(dio.dump_document("config", payload), kind="result")
    with pytest.raises(dio.SchemaError, match="NaN"):
        dio.load_document('{"format_version": NaN}')


def test_strict_rejects_unknown_keys_lenient_preserves_them():
    payload = {"xi": [[0, 0, -1]], "alpha": [0.5], "comment": "bench A"}
    text = dio.dump_document("config", payload)
    with pytest.raises(dio.SchemaError, match="comment"):
        dio.load_document(text)
    doc = dio.load_document(text, strict=False)
    assert doc.extras == {"comment": "bench A"}
    assert "comment" not in doc.payload
    assert doc.dumps() == text

    env = json.loads(dio.dump_document("config", {"xi": [[0, 0, -1]], "alpha": [0.5]}))
    env["origin"] = "lab"
    text = json.dumps(env, sort_keys=True, indent=1) + "\n"
    with pytest.raises(dio.SchemaError, match="origin"):
        dio.load_document(text)
    doc = dio.load_document(text, strict=False)
    assert doc.envelope_extras == {"origin": "lab"}
    assert doc.dumps() == text


def test_alpha_form_conversion(tmp_path):
    path = tmp_path / "a.pscat.json"
    dio.write_document(path, "config", {"xi": [[0, 0, -1]], "alpha": [0.5]})
    c = dio.read_config(path)
    assert c.n == 1
    expected = 0.5 + 1 / (4 * math.pi * math.sqrt(2))
    assert abs(c.tan_half_theta[0, 0] - expected) < 1e-15


def test_duplicate_positions_rejected():
    payload = {"xi": [[0, 0, -1], [0, 0, -1]], "alpha": [0.5, 0.2]}
    with pytest.raises(ConfigurationError, match="distinct"):
        dio.config_from_payload(payload)
    payload = {"xi": [[0, 0, -1], [0, 0, -1]],
               "tan_half_theta": {"re": [[1, 0], [0, 1]], "im": [[0, 0], [0, 0]]}}
    with pytest.raises(ConfigurationError, match="distinct"):
        dio.config_from_payload(payload)


def test_non_hermitian_rejected_with_defect():
    payload = {"xi": [[0, 0, -1], [1, 0, -1]],
               "tan_half_theta": {"re": [[1, 0.5], [0, 1]], "im": [[0, 0], [0, 0]]}}
    with pytest.raises(ConfigurationError, match=r"not Hermitian \(defect 5\.000e-01\)"):
        dio.config_from_payload(payload)


def test_theta_pole_rejected_with_eigenvalue():
    payload = {"xi": [[0, 0, -1]], "theta": {"re": [[math.pi]], "im": [[0]]}}
    with pytest.raises(ConfigurationError, match="eigenvalue 3.14159"):
        dio.config_from_payload(payload)


@pytest.mark.parametrize("payload, field", [
    ({"alpha": [0.5]}, "config.xi"),
    ({"xi": [[0, 0]], "alpha": [0.5]}, "config.xi"),
    ({"xi": [[0, 0, -1]]}, "exactly one"),
    ({"xi": [[0, 0, -1]], "alpha": [0.5], "theta": {"re": [[0]], "im": [[0]]}}, "exactly one"),
    ({"xi": [[0, 0, -1]], "alpha": [0.5, 1.0]}, "config.alpha"),
    ({"xi": [[0, 0, -1]], "tan_half_theta": {"re": [[0]]}}, "config.tan_half_theta"),
    ({"xi": [[0, 0, -1]], "alpha": [0.5], "half_space": "yes"}, "config.half_space"),
])
def test_schema_errors_name_the_field(payload, field):
    with pytest.raises(dio.SchemaError, match=field):
        dio.config_from_payload(payload)


def test_samples_schema_errors():
    with pytest.raises(dio.SchemaError, match=r"pairs\[0\]"):
        dio.samples_from_payload({"k0": 1.0, "pairs": [{"x": [0, 0], "y": [1, 0], "g_re": 1.0}]})
    with pytest.raises(dio.SchemaError, match="samples"):
        dio.samples_from_payload({"k0": 1.0, "pairs": [{"x": [0, 0], "y": [0, 0], "g_re": 1, "g_im": 0}]})
    with pytest.raises(dio.SchemaError, match="samples.k0"):
        dio.samples_from_payload({"pairs": []})


def test_result_model_order_must_match():
    r = dio.result_payload(ReconstructionResult.empty(1.0, 0.1))
    r["model_order"] = 1
    with pytest.raises(dio.SchemaError, match="model_order"):
        dio.result_from_payload(r)


def test_missing_file_error_names_path(tmp_path):
    path = tmp_path / "absent.pscat.json"
    with pytest.raises(FileNotFoundError, match="absent.pscat.json"):
        dio.read_config(path)


def test_write_failure_names_path(tmp_path):
    path = tmp_path / "no_such_dir" / "c.pscat.json"
    with pytest.raises(OSError, match="no_such_dir"):
        dio.write_result(path, ReconstructionResult.empty(1.0, 0.0))
