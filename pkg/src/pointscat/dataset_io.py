"""Versioned JSON persistence for configurations, plane samples and results.

Every file is an envelope

    {"format_version": 1, "kind": ..., "payload": {...}, "checksum": ...}

where ``checksum`` is the SHA-256 of the canonical serialization of the
payload (sorted keys, no whitespace, shortest round-trip floats).  Files are
written atomically and pretty-printed with sorted keys, so identical inputs
give identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .inverse import PlaneSamples, ReconstructionResult
from .krein import Configuration, alpha_to_config, tan_half_to_theta

FORMAT_VERSION = 1
EXTENSION = ".pscat.json"
KINDS = ("config", "samples", "result")

_ENVELOPE_KEYS = {"format_version", "kind", "payload", "checksum"}
_PAYLOAD_KEYS = {
    "config": {"xi", "tan_half_theta", "alpha", "theta", "half_space"},
    "samples": {"k0", "noise_sigma", "seed", "pairs"},
    "result": {
        "xi", "p", "tan_half_theta", "theta", "residual_rms", "hermiticity_defect",
        "model_order", "iterations", "converged", "k0",
    },
}
_PAIR_KEYS = {"x", "y", "g_re", "g_im"}


class SchemaError(ValueError):
    """A document does not match the expected file format."""


@dataclass
class Document:
    """A decoded envelope; ``extras`` holds unknown payload keys kept in lenient mode."""

    kind: str
    payload: dict
    extras: dict = field(default_factory=dict)
    envelope_extras: dict = field(default_factory=dict)

    def dumps(self) -> str:
        """Serialize again, re-emitting any unknown keys kept in lenient mode."""
        return dump_document(self.kind, self.payload, self.extras, self.envelope_extras)


def canonical_json(obj) -> str:
    """Compact, key-sorted JSON with shortest round-trip float formatting."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False, ensure_ascii=True)


def checksum(payload) -> str:
    return hashlib.sha256(canonical_json(payload).encode("ascii")).hexdigest()


def _float(v) -> float:
    v = float(v)
    if not math.isfinite(v):
        raise SchemaError(f"non-finite number {v!r} cannot be stored")
    return v


def encode_complex_matrix(m) -> dict:
    m = np.asarray(m, dtype=complex)
    return {"re": [[_float(v) for v in row] for row in m.real],
            "im": [[_float(v) for v in row] for row in m.imag]}


def _matrix(obj, name, n=None):
    if not isinstance(obj, dict) or set(obj) != {"re", "im"}:
        raise SchemaError(f"{name}: expected an object with keys 're' and 'im'")
    try:
        re = np.array(obj["re"], dtype=float)
        im = np.array(obj["im"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{name}: entries must be numbers ({exc})") from None
    if re.size == 0 and im.size == 0 and (n is None or n == 0):
        return np.zeros((0, 0), dtype=complex)
    if re.ndim != 2 or re.shape != im.shape or re.shape[0] != re.shape[1]:
        raise SchemaError(f"{name}: 're' and 'im' must be equal square matrices")
    if n is not None and re.shape[0] != n:
        raise SchemaError(f"{name}: expected a {n}x{n} matrix, got {re.shape[0]}x{re.shape[1]}")
    return re + 1j * im


def _points(obj, name, dim):
    try:
        pts = np.array(obj, dtype=float)
    except (TypeError, ValueError):
        raise SchemaError(f"{name}: expected a list of {dim}-vectors") from None
    if pts.size == 0:
        return pts.reshape(0, dim)
    if pts.ndim != 2 or pts.shape[1] != dim:
        raise SchemaError(f"{name}: expected a list of {dim}-vectors")
    if not np.all(np.isfinite(pts)):
        raise SchemaError(f"{name}: coordinates must be finite")
    return pts


def _require(payload, key, kind):
    if key not in payload:
        raise SchemaError(f"{kind}.{key}: required field missing")
    return payload[key]


# ----------------------------------------------------------------------------
# envelope


def dump_document(kind: str, payload: dict, extras: dict | None = None,
                  envelope_extras: dict | None = None) -> str:
    """Serialize an envelope to the exact text written to disk.

    ``extras`` are added to the payload (and covered by the checksum);
    ``envelope_extras`` sit next to the standard envelope keys.
    """
    if kind not in KINDS:
        raise SchemaError(f"kind: unknown kind {kind!r}")
    body = dict(payload)
    for k, v in (extras or {}).items():
        if k in body:
            raise SchemaError(f"extra key {k!r} collides with a schema field")
        body[k] = v
    env = {"format_version": FORMAT_VERSION, "kind": kind, "payload": body, "checksum": checksum(body)}
    for k, v in (envelope_extras or {}).items():
        if k in env:
            raise SchemaError(f"extra envelope key {k!r} collides with a standard field")
        env[k] = v
    try:
        return json.dumps(env, sort_keys=True, indent=1, allow_nan=False, ensure_ascii=True) + "\n"
    except ValueError as exc:
        raise SchemaError(f"payload cannot be stored: {exc}") from None


def load_document(text: str, kind: str | None = None, strict: bool = True) -> Document:
    """Parse and validate an envelope; schema-level checks only."""
    try:
        env = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"not valid JSON: {exc}") from None
    if not isinstance(env, dict):
        raise SchemaError("envelope: top level must be an object")
    unknown_env = set(env) - _ENVELOPE_KEYS
    if unknown_env and strict:
        raise SchemaError(f"envelope: unknown keys {sorted(unknown_env)}")
    for key in ("format_version", "kind", "payload", "checksum"):
        _require(env, key, "envelope")
    if env["format_version"] != FORMAT_VERSION:
        raise SchemaError(f"envelope.format_version: unsupported version {env['format_version']!r}")
    if env["kind"] not in KINDS:
        raise SchemaError(f"envelope.kind: unknown kind {env['kind']!r}")
    if kind is not None and env["kind"] != kind:
        raise SchemaError(f"envelope.kind: expected {kind!r}, found {env['kind']!r}")
    payload = env["payload"]
    if not isinstance(payload, dict):
        raise SchemaError("envelope.payload: must be an object")
    if checksum(payload) != env["checksum"]:
        raise SchemaError("envelope.checksum: does not match the payload")
    known = _PAYLOAD_KEYS[env["kind"]]
    extra_keys = set(payload) - known
    if extra_keys and strict:
        raise SchemaError(f"{env['kind']}: unknown keys {sorted(extra_keys)}")
    extras = {k: payload[k] for k in sorted(extra_keys)}
    body = {k: v for k, v in payload.items() if k in known}
    return Document(env["kind"], body, extras, {k: env[k] for k in sorted(unknown_env)})


def _reject_constant(name):
    raise SchemaError(f"non-finite number {name} is not allowed")


def write_text_atomic(path, text: str):
    """Write ``text`` to ``path`` through a temporary file in the same directory."""
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    try:
        fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=directory)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    try:
        with os.fdopen(fd, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_document(path, kind: str | None = None, strict: bool = True) -> Document:
    try:
        text = Path(path).read_text(encoding="ascii")
    except OSError as exc:
        raise type(exc)(f"cannot read {path}: {exc.strerror or exc}") from exc
    except UnicodeDecodeError:
        raise SchemaError(f"{path}: file is not ASCII JSON") from None
    return load_document(text, kind, strict)


def write_document(path, kind: str, payload: dict, extras: dict | None = None):
    write_text_atomic(path, dump_document(kind, payload, extras))


# ----------------------------------------------------------------------------
# configurations


def config_payload(config: Configuration) -> dict:
    return {
        "xi": [[_float(v) for v in p] for p in config.xi],
        "tan_half_theta": encode_complex_matrix(config.tan_half_theta),
        "half_space": bool(config.half_space),
    }


def config_from_payload(payload: dict) -> Configuration:
    """Build a :class:`Configuration` from exactly one of ``tan_half_theta``, ``alpha`` or ``theta``."""
    xi = _points(_require(payload, "xi", "config"), "config.xi", 3)
    if len(xi) == 0:
        raise SchemaError("config.xi: at least one point is required")
    half_space = payload.get("half_space", False)
    if not isinstance(half_space, bool):
        raise SchemaError("config.half_space: must be true or false")
    given = [k for k in ("tan_half_theta", "alpha", "theta") if k in payload]
    if len(given) != 1:
        raise SchemaError("config: exactly one of 'tan_half_theta', 'alpha', 'theta' is required")
    n = len(xi)
    if given[0] == "alpha":
        try:
            alpha = np.array(payload["alpha"], dtype=float)
        except (TypeError, ValueError):
            raise SchemaError("config.alpha: expected a list of real numbers") from None
        if alpha.shape != (n,):
            raise SchemaError(f"config.alpha: expected {n} values")
        return alpha_to_config(alpha, xi, half_space=half_space)
    if given[0] == "theta":
        theta = _matrix(payload["theta"], "config.theta", n)
        return Configuration.from_theta(xi, theta, half_space=half_space)
    t = _matrix(payload["tan_half_theta"], "config.tan_half_theta", n)
    return Configuration(xi, t, half_space=half_space)


def read_config(path, strict: bool = True) -> Configuration:
    """Read a configuration file; invariant violations raise ``ConfigurationError``."""
    return config_from_payload(read_document(path, "config", strict).payload)


def write_config(path, config: Configuration):
    write_document(path, "config", config_payload(config))


# ----------------------------------------------------------------------------
# plane samples


def samples_payload(samples: PlaneSamples) -> dict:
    pairs = [
        {"x": [float(x[0]), float(x[1])], "y": [float(y[0]), float(y[1])],
         "g_re": _float(g.real), "g_im": _float(g.imag)}
        for x, y, g in zip(samples.x, samples.y, samples.g)
    ]
    return {"k0": _float(samples.k0), "noise_sigma": _float(samples.noise_sigma),
            "seed": int(samples.seed), "pairs": pairs}


def samples_from_payload(payload: dict) -> PlaneSamples:
    k0 = _require(payload, "k0", "samples")
    pairs = _require(payload, "pairs", "samples")
    if not isinstance(pairs, list):
        raise SchemaError("samples.pairs: expected a list")
    x = np.empty((len(pairs), 2))
    y = np.empty((len(pairs), 2))
    g = np.empty(len(pairs), dtype=complex)
    for i, pair in enumerate(pairs):
        if not isinstance(pair, dict) or set(pair) != _PAIR_KEYS:
            raise SchemaError(f"samples.pairs[{i}]: expected keys {sorted(_PAIR_KEYS)}")
        try:
            x[i] = pair["x"]
            y[i] = pair["y"]
            g[i] = complex(float(pair["g_re"]), float(pair["g_im"]))
        except (TypeError, ValueError):
            raise SchemaError(f"samples.pairs[{i}]: x and y must be 2-vectors, g_re/g_im numbers") from None
    seed = payload.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise SchemaError("samples.seed: must be an integer")
    try:
        return PlaneSamples(float(k0), x, y, g, float(payload.get("noise_sigma", 0.0)), seed)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"samples: {exc}") from None


def read_samples(path, strict: bool = True) -> PlaneSamples:
    return samples_from_payload(read_document(path, "samples", strict).payload)


def write_samples(path, samples: PlaneSamples):
    write_document(path, "samples", samples_payload(samples))


# ----------------------------------------------------------------------------
# reconstruction results


def result_payload(result: ReconstructionResult) -> dict:
    if not math.isfinite(result.residual_rms):
        raise SchemaError("result.residual_rms: must be finite")
    return {
        "xi": [[_float(v) for v in p] for p in result.xi_hat],
        "p": encode_complex_matrix(result.p_hat),
        "tan_half_theta": encode_complex_matrix(result.tan_half_hat),
        "theta": encode_complex_matrix(result.theta_hat),
        "residual_rms": _float(result.residual_rms),
        "hermiticity_defect": _float(result.hermiticity_defect),
        "model_order": int(result.model_order),
        "iterations": int(result.iterations),
        "converged": bool(result.converged),
        "k0": _float(result.k0),
    }


def result_from_payload(payload: dict) -> ReconstructionResult:
    for key in ("xi", "p", "tan_half_theta", "theta", "residual_rms", "hermiticity_defect", "model_order"):
        _require(payload, key, "result")
    xi = _points(payload["xi"], "result.xi", 3)
    n = len(xi)
    order = payload["model_order"]
    if not isinstance(order, int) or isinstance(order, bool) or order != n:
        raise SchemaError(f"result.model_order: must equal the number of points ({n})")
    rms = float(payload["residual_rms"])
    if not math.isfinite(rms) or rms < 0:
        raise SchemaError("result.residual_rms: must be a finite nonnegative number")
    return ReconstructionResult(
        xi,
        _matrix(payload["p"], "result.p", n),
        _matrix(payload["tan_half_theta"], "result.tan_half_theta", n),
        _matrix(payload["theta"], "result.theta", n),
        rms,
        float(payload["hermiticity_defect"]),
        n,
        int(payload.get("iterations", 0)),
        bool(payload.get("converged", True)),
        float(payload.get("k0", 0.0)),
    )


def read_result(path, strict: bool = True) -> ReconstructionResult:
    return result_from_payload(read_document(path, "result", strict).payload)


def write_result(path, result: ReconstructionResult):
    """Write a result file; a non-finite residual is rejected before anything is written."""
    write_document(path, "result", result_payload(result))


def theta_payload(t) -> dict:
    """``tan(theta/2)`` and its principal-branch ``theta`` as complex matrices."""
    return {"tan_half_theta": encode_complex_matrix(t), "theta": encode_complex_matrix(tan_half_to_theta(t))}
