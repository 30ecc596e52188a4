import math
import os
import sys
from pathlib import Path

import numpy as np
import pytest

from pointscat.krein import Configuration

FIXTURES = Path(__file__).parent / "fixtures"


def random_hermitian(rng, n, scale=0.1, real=False):
    a = rng.normal(size=(n, n))
    if not real:
        a = a + 1j * rng.normal(size=(n, n))
    return scale * 0.5 * (a + a.conj().T)


def random_points(rng, n, spread=2.0, min_sep=0.3):
    while True:
        xi = rng.uniform(-spread, spread, size=(n, 3))
        if n == 1:
            return xi
        d = np.linalg.norm(xi[:, None] - xi[None], axis=-1)
        if np.min(d[~np.eye(n, dtype=bool)]) > min_sep:
            return xi


def random_config(rng, n, spread=2.0, real=False, symmetric=False):
    t = random_hermitian(rng, n, real=real or symmetric)
    return Configuration(random_points(rng, n, spread), t)


def halfspace_config(rng, n, k0=1.0, real=False):
    """Random config with separation >= lambda and depth in [lambda/2, 4 lambda]."""
    lam = 2 * math.pi / k0
    while True:
        xi = np.column_stack([
            rng.uniform(-2 * lam, 2 * lam, n),
            rng.uniform(-2 * lam, 2 * lam, n),
            -rng.uniform(0.5 * lam, 4 * lam, n),
        ])
        if n > 1:
            d = np.linalg.norm(xi[:, None] - xi[None], axis=-1)
            if np.min(d[~np.eye(n, dtype=bool)]) < lam:
                continue
        t = random_hermitian(rng, n, scale=0.08, real=real)
        return Configuration(xi, t, half_space=True)


def cli_env(threads=None):
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parents[1] / "src")
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    if threads is not None:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            env[var] = str(threads)
    return env


def run_cli(args, threads=None, cwd=None):
    import subprocess

    return subprocess.run([sys.executable, "-m", "pointscat", *args], capture_output=True, text=True,
                          env=cli_env(threads), cwd=cwd)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
