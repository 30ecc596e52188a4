"""Scattering solutions, amplitude, S-matrix and the physical-constraint checks.

All quantities are evaluated on the real axis ``z = k**2`` with root ``k``;
negative ``k`` is allowed and gives the mirrored boundary value used by the
reality condition.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .greens import FOUR_PI, ComplexEnergy, DomainError, g0_3d
from .krein import Configuration, krein_matrix

DEFAULT_DEGREE = 24


def _unit(v):
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DomainError("direction must be nonzero")
    return v / norm


def _frozen(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SphereQuadrature:
    """Nodes on the unit sphere with positive weights summing to ``4 pi``."""

    nodes: np.ndarray
    weights: np.ndarray
    degree: int
    kind: str

    def __len__(self):
        return len(self.weights)

    def integrate(self, values):
        return np.tensordot(self.weights, values, axes=(0, 0))


def _lebedev(degree):
    try:
        from scipy.integrate import lebedev_rule
    except ImportError:  # scipy < 1.15
        return None
    order = degree if degree % 2 == 1 else degree + 1
    while order <= 131:
        try:
            x, w = lebedev_rule(order)
        except (ValueError, NotImplementedError):
            order += 2
            continue
        if np.any(w <= 0):
            # a few tabulated rules carry negative weights; take the next one
            order += 2
            continue
        return x.T.copy(), w.copy(), order
    return None


def _tensor(degree):
    # Gauss-Legendre in cos(polar) times an equispaced azimuth grid;
    # exact for spherical harmonics up to `degree`
    n_polar = degree // 2 + 1
    n_az = degree + 1
    t, wt = np.polynomial.legendre.leggauss(n_polar)
    phi = 2 * math.pi * np.arange(n_az) / n_az
    st = np.sqrt(1 - t * t)
    nodes = np.stack(
        [np.outer(st, np.cos(phi)), np.outer(st, np.sin(phi)), np.outer(t, np.ones(n_az))], axis=-1
    ).reshape(-1, 3)
    weights = np.outer(wt, np.full(n_az, 2 * math.pi / n_az)).ravel()
    return nodes, weights


@lru_cache(maxsize=None)
def sphere_quadrature(degree: int = DEFAULT_DEGREE, kind: str = "lebedev") -> SphereQuadrature:
    """Quadrature exact for spherical harmonics of degree ``<= degree``.

    ``kind="lebedev"`` uses the smallest tabulated Lebedev rule of at least
    that degree whose weights are all positive, and falls back to the tensor
    rule when none is available.
    """
    if degree < 1:
        raise ValueError("quadrature degree must be >= 1")
    if kind == "lebedev":
        leb = _lebedev(int(degree))
        if leb is not None:
            nodes, weights, order = leb
            return SphereQuadrature(_frozen(nodes), _frozen(weights), order, "lebedev")
        kind = "tensor"
    if kind != "tensor":
        raise ValueError(f"unknown quadrature kind {kind!r}")
    nodes, weights = _tensor(int(degree))
    return SphereQuadrature(_frozen(nodes), _frozen(weights), int(degree), "tensor")


def krein_p(config: Configuration, k: float):
    """``P(k**2)`` on the real axis with root ``k``."""
    return krein_matrix(config, ComplexEnergy.on_shell(k)).p


def scattering_wave(config: Configuration, k: float, omega, x, p=None):
    """``Psi(x, k, omega)``: incident plane wave plus the outgoing scattered part."""
    e = ComplexEnergy.on_shell(k)
    if p is None:
        p = krein_matrix(config, e).p
    omega = _unit(omega)
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x[..., None, :] - config.xi, axis=-1)
    if np.any(r == 0):
        raise DomainError("scattering wave evaluated at a scatterer")
    phase_in = np.exp(1j * k * (config.xi @ omega))
    return np.exp(1j * k * (x @ omega)) + g0_3d(e, r) @ (p @ phase_in)


def amplitude_matrix(config: Configuration, k: float, omega_out, omega_in, p=None):
    """``A(omega_out[a], omega_in[b], k)`` for all pairs; shape (len(out), len(in))."""
    if p is None:
        p = krein_p(config, k)
    out = np.atleast_2d(_unit(omega_out))
    inc = np.atleast_2d(_unit(omega_in))
    u = np.exp(-1j * k * (out @ config.xi.T))
    v = np.exp(1j * k * (inc @ config.xi.T))
    return (u @ p @ v.T) / FOUR_PI


def amplitude(config: Configuration, k: float, omega_out, omega_in, p=None):
    """Scattering amplitude ``A(omega', omega, k)`` for a single direction pair.

    Array inputs of matching shape (..., 3) are evaluated pairwise.
    """
    if p is None:
        p = krein_p(config, k)
    out = _unit(omega_out)
    inc = _unit(omega_in)
    u = np.exp(-1j * k * (out @ config.xi.T))
    v = np.exp(1j * k * (inc @ config.xi.T))
    res = np.einsum("...j,jk,...k->...", u, p, v) / FOUR_PI
    return res[()] if np.ndim(res) == 0 else res


def s_matrix(config: Configuration, k: float, quad: SphereQuadrature, p=None):
    """Discrete S-matrix acting on nodal values of ``quad``."""
    if p is None:
        p = krein_p(config, k)
    e = np.exp(-1j * k * (quad.nodes @ config.xi.T))
    inner = np.conj(e).T * quad.weights
    return np.eye(len(quad), dtype=complex) + (1j * k / (8 * math.pi**2)) * (e @ p @ inner)


def s_matrix_apply(config: Configuration, k: float, f, quad: SphereQuadrature | None = None, p=None):
    """``(S f)(omega)`` on the nodes; the pairing with ``exp(-i k xi . )`` uses ``quad``."""
    quad = quad or sphere_quadrature()
    if p is None:
        p = krein_p(config, k)
    f = np.asarray(f, dtype=complex)
    e = np.exp(-1j * k * (quad.nodes @ config.xi.T))
    coeff = np.conj(e).T @ (quad.weights * f)
    return f + (1j * k / (8 * math.pi**2)) * (e @ (p @ coeff))


def quad_norm(f, quad: SphereQuadrature) -> float:
    return float(np.sqrt(np.sum(quad.weights * np.abs(f) ** 2)))


def unitarity_defect(config: Configuration, k: float, quad: SphereQuadrature, fs, p=None) -> float:
    """``max | ||S f|| / ||f|| - 1 |`` over the columns ``fs`` (nodes x count)."""
    if p is None:
        p = krein_p(config, k)
    fs = np.asarray(fs, dtype=complex).reshape(len(quad), -1)
    worst = 0.0
    for f in fs.T:
        sf = s_matrix_apply(config, k, f, quad, p=p)
        worst = max(worst, abs(quad_norm(sf, quad) / quad_norm(f, quad) - 1.0))
    return worst


def optical_theorem_residual(config: Configuration, k: float, quad: SphereQuadrature, omega_out, omega_in, p=None):
    """Defect of the generalized optical theorem at one direction pair.

    The left side is the kernel imaginary part
    ``[A(w', w) - conj(A(w, w'))] / (2i)``, which reduces to ``Im A`` in the
    forward direction.
    """
    if p is None:
        p = krein_p(config, k)
    wo = _unit(omega_out)
    wi = _unit(omega_in)
    a_fwd = amplitude(config, k, wo, wi, p=p)
    a_rev = amplitude(config, k, wi, wo, p=p)
    lhs = (a_fwd - np.conj(a_rev)) / 2j
    cols = amplitude_matrix(config, k, quad.nodes, np.stack([wi, wo]), p=p)
    rhs = k / FOUR_PI * np.sum(quad.weights * cols[:, 0] * np.conj(cols[:, 1]))
    return float(abs(lhs - rhs))


def reciprocity_defect(config: Configuration, k: float, sample_pairs, p=None) -> float:
    """``max |A(w', w, k) - A(-w, -w', k)|`` over ``(w', w)`` pairs."""
    if p is None:
        p = krein_p(config, k)
    worst = 0.0
    for wo, wi in sample_pairs:
        wo = _unit(wo)
        wi = _unit(wi)
        worst = max(worst, abs(amplitude(config, k, wo, wi, p=p) - amplitude(config, k, -wi, -wo, p=p)))
    return float(worst)


def reality_defect(config: Configuration, k: float, sample_pairs) -> float:
    """``max |conj A(w', w, k) - A(w', w, -k)|`` over ``(w', w)`` pairs."""
    p_pos = krein_p(config, k)
    p_neg = krein_p(config, -k)
    worst = 0.0
    for wo, wi in sample_pairs:
        a = amplitude(config, k, wo, wi, p=p_pos)
        b = amplitude(config, -k, wo, wi, p=p_neg)
        worst = max(worst, abs(np.conj(a) - b))
    return float(worst)


def random_directions(rng, count: int):
    v = rng.normal(size=(count, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_direction_pairs(rng, count: int):
    return list(zip(random_directions(rng, count), random_directions(rng, count)))
