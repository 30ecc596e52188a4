"""Regenerate the files in tests/fixtures.

Run from the repository root:  python scripts/make_fixtures.py

The golden pipeline files are produced through the command line exactly as
the tests invoke it, so any change in their bytes is a real behavior change.
"""
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from pointscat import dataset_io as dio  # noqa: E402
from pointscat.krein import Configuration, alpha_to_config  # noqa: E402

FIX = ROOT / "tests" / "fixtures"

GOLDEN = {
    "synth": ["--k0", "1", "--grid-side", "31.4", "--grid-count", "12", "--noise", "1e-4", "--seed", "7"],
    "invert": ["--box=-15,15,-15,15,-25,-2", "--max-order", "3"],
    "forward": ["--k", "1", "--x=1,0,0", "--y=0,1,0"],
}


def cli(*args):
    out = subprocess.run([sys.executable, "-m", "pointscat", *args], capture_output=True, text=True,
                         cwd=FIX, env={"PYTHONPATH": str(ROOT / "src"), "PATH": "/usr/bin:/bin"})
    if out.returncode != 0:
        raise SystemExit(f"pointscat {' '.join(args)} failed:\n{out.stderr}")
    return out.stdout


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def main():
    FIX.mkdir(parents=True, exist_ok=True)

    # complex Hermitian T: violates both reciprocity and reality
    dio.write_config(FIX / "counterexample_complex_t.pscat.json", Configuration(
        [[0.0, 0.0, -1.0], [1.2, 0.3, -1.5]], [[0.05, 0.02 - 0.03j], [0.02 + 0.03j, -0.04]]))

    # single local scatterer for the forward golden value
    dio.write_config(FIX / "single_local.pscat.json", alpha_to_config([0.5], [[0.0, 0.0, -1.0]], half_space=True))
    (FIX / "forward_single_local.json").write_text(
        cli("forward", "--config", "single_local.pscat.json", *GOLDEN["forward"]))

    # two scatterers below the plane, real symmetric T
    dio.write_config(FIX / "golden_config.pscat.json", Configuration(
        np.array([[0.5, 0.3, -7.0], [8.0, -2.0, -10.0]]),
        np.array([[0.076, -0.01], [-0.01, 0.046]]), half_space=True))
    cli("synth", "--config", "golden_config.pscat.json", *GOLDEN["synth"], "--out", "golden_samples.pscat.json")
    cli("invert", "--samples", "golden_samples.pscat.json", *GOLDEN["invert"], "--out", "golden_result.pscat.json")
    manifest = {
        "commands": GOLDEN,
        "samples_sha256": sha256(FIX / "golden_samples.pscat.json"),
        "result_sha256": sha256(FIX / "golden_result.pscat.json"),
    }
    (FIX / "golden_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    # the samples file is large; only its digest is kept in the repository
    (FIX / "golden_samples.pscat.json").unlink()
    print(json.dumps(manifest, indent=1))


if __name__ == "__main__":
    main()
