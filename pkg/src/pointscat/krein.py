"""Krein-formula machinery for n generalized point interactions in R^3.

The boundary matrix is stored as ``T = tan(theta/2)`` (Hermitian).  The inverse
Krein matrix is

    P(z)^{-1}_{jj}  = -(4 pi)^{-1} i z^{1/2} - (4 pi)^{-1} 2^{-1/2} + T_jj
    P(z)^{-1}_{jj'} = -G_0(z, xi_j - xi_j') + Re G_0(i, xi_j - xi_j') + T_jj'

and the perturbed Green's function is
``G(z, x, y) = G_0(z, x - y) + sum_jj' P_jj' G_0(z, x - xi_j) G_0(z, y - xi_j')``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sl

from .greens import (
    FOUR_PI,
    INV_SQRT2,
    ComplexEnergy,
    DomainError,
    as_energy,
    g0_3d,
    gram_diag,
    gram_offdiag,
    gram_unit,
    re_g0,
)

HERMITIAN_TOL = 1e-12
POLE_TOL = 1e-9
SINGULAR_TOL = 1e-12


class ConfigurationError(ValueError):
    """A configuration violates one of its invariants."""


class NearResonance(ArithmeticError):
    """``P(z)^{-1}`` is numerically singular at the requested energy."""

    def __init__(self, z, det, measure):
        self.z = z
        self.det = det
        self.measure = measure
        super().__init__(
            f"P^-1 numerically singular at z={z!r}: det={det!r}, "
            f"scaled determinant {measure:.3e} < {SINGULAR_TOL:g}"
        )


def hermiticity_defect(m) -> float:
    m = np.asarray(m, dtype=complex)
    return float(np.max(np.abs(m - m.conj().T), initial=0.0))


def _frozen(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


def _pairwise_distances(xi):
    diff = xi[:, None, :] - xi[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


@dataclass(frozen=True)
class Configuration:
    """Scatterer positions ``xi`` (n x 3) and the Hermitian matrix ``tan(theta/2)``.

    Points are reordered lexicographically on construction and ``T`` is
    permuted along with them.
    """

    xi: np.ndarray
    tan_half_theta: np.ndarray
    half_space: bool = False
    hermitian_ok: bool = field(init=False)
    symmetric: bool = field(init=False)
    real: bool = field(init=False)

    def __post_init__(self):
        xi = np.atleast_2d(np.asarray(self.xi, dtype=float))
        if xi.shape[1] != 3 or xi.shape[0] < 1:
            raise ConfigurationError(f"xi must be a nonempty list of 3-vectors, got shape {xi.shape}")
        n = xi.shape[0]
        t = np.asarray(self.tan_half_theta, dtype=complex)
        if t.size != n * n:
            raise ConfigurationError(f"tan_half_theta must be {n}x{n}")
        t = t.reshape(n, n)
        if not np.all(np.isfinite(xi)) or not np.all(np.isfinite(t)):
            raise ConfigurationError("non-finite entries in configuration")
        if n > 1:
            d = _pairwise_distances(xi)
            dmin = float(np.min(d[~np.eye(n, dtype=bool)]))
            if dmin <= 0:
                raise ConfigurationError("scatterer positions must be pairwise distinct")
        defect = hermiticity_defect(t)
        if defect > HERMITIAN_TOL * max(1.0, float(np.max(np.abs(t)))):
            raise ConfigurationError(f"tan_half_theta is not Hermitian (defect {defect:.3e})")
        if self.half_space and np.any(xi[:, 2] >= 0):
            raise ConfigurationError("half-space configuration needs every xi_3 < 0")
        order = np.lexsort((xi[:, 2], xi[:, 1], xi[:, 0]))
        xi = xi[order]
        t = t[np.ix_(order, order)]
        object.__setattr__(self, "xi", _frozen(xi))
        object.__setattr__(self, "tan_half_theta", _frozen(t))
        object.__setattr__(self, "hermitian_ok", True)
        object.__setattr__(self, "symmetric", bool(np.max(np.abs(t - t.T)) <= HERMITIAN_TOL))
        object.__setattr__(self, "real", bool(np.max(np.abs(t.imag)) <= HERMITIAN_TOL))

    @property
    def n(self) -> int:
        return self.xi.shape[0]

    @property
    def diameter(self) -> float:
        if self.n == 1:
            return 0.0
        return float(np.max(_pairwise_distances(self.xi)))

    @property
    def min_separation(self) -> float:
        if self.n == 1:
            return math.inf
        d = _pairwise_distances(self.xi)
        return float(np.min(d[~np.eye(self.n, dtype=bool)]))

    @classmethod
    def from_theta(cls, xi, theta, half_space=False):
        return cls(xi, theta_to_tan_half(theta), half_space=half_space)

    def theta(self):
        return tan_half_to_theta(self.tan_half_theta)

    def with_tan_half(self, t):
        return Configuration(self.xi, t, half_space=self.half_space)


def _check_theta(theta):
    theta = np.atleast_2d(np.asarray(theta, dtype=complex))
    if theta.shape[0] != theta.shape[1]:
        raise ConfigurationError("theta must be square")
    defect = hermiticity_defect(theta)
    if defect > HERMITIAN_TOL * max(1.0, float(np.max(np.abs(theta), initial=0.0))):
        raise ConfigurationError(f"theta is not Hermitian (defect {defect:.3e})")
    theta = 0.5 * (theta + theta.conj().T)
    evals, evecs = np.linalg.eigh(theta)
    # tan(theta/2) blows up at odd multiples of pi
    m = np.round((evals - math.pi) / (2 * math.pi))
    gap = np.abs(evals - (2 * m + 1) * math.pi)
    if np.any(gap < POLE_TOL):
        bad = evals[np.argmin(gap)]
        raise ConfigurationError(
            f"theta eigenvalue {bad:.12g} within {POLE_TOL:g} of an odd multiple of pi "
            "(pole of tan(theta/2))"
        )
    return evals, evecs


def theta_to_tan_half(theta):
    """``tan(theta/2)`` through the Hermitian eigendecomposition of ``theta``."""
    evals, evecs = _check_theta(theta)
    t = (evecs * np.tan(0.5 * evals)) @ evecs.conj().T
    return 0.5 * (t + t.conj().T)


def tan_half_to_theta(t):
    """Principal inverse of :func:`theta_to_tan_half`; spectrum in ``(-pi, pi)``."""
    t = np.atleast_2d(np.asarray(t, dtype=complex))
    defect = hermiticity_defect(t)
    if defect > HERMITIAN_TOL * max(1.0, float(np.max(np.abs(t), initial=0.0))):
        raise ConfigurationError(f"tan(theta/2) is not Hermitian (defect {defect:.3e})")
    evals, evecs = np.linalg.eigh(0.5 * (t + t.conj().T))
    theta = (evecs * (2.0 * np.arctan(evals))) @ evecs.conj().T
    return 0.5 * (theta + theta.conj().T)


def alpha_to_config(alpha, xi, half_space=False) -> Configuration:
    """Local point interactions with strengths ``alpha`` as a generalized configuration."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    n = xi.shape[0]
    if alpha.shape != (n,):
        raise ConfigurationError(f"need {n} alpha values, got {alpha.shape}")
    t = np.diag(alpha + INV_SQRT2 / FOUR_PI).astype(complex)
    if n > 1:
        d = _pairwise_distances(xi)
        off = ~np.eye(n, dtype=bool)
        if np.any(d[off] <= 0):
            raise ConfigurationError("scatterer positions must be pairwise distinct")
        t[off] -= re_g0(1j, d[off])
    return Configuration(xi, t.real.astype(complex), half_space=half_space)


def gamma_matrix(alpha, xi, z):
    """``Gamma(z)``, whose inverse is the Krein matrix of local interactions."""
    e = as_energy(z)
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    n = xi.shape[0]
    gam = np.diag(-1j * e.root / FOUR_PI + np.asarray(alpha, dtype=float)).astype(complex)
    if n > 1:
        d = _pairwise_distances(xi)
        off = ~np.eye(n, dtype=bool)
        gam[off] = -g0_3d(e, d[off])
    return gam


def green_matrix(xi, z):
    """``M(z)``: the z-dependent part subtracted from ``T`` in ``P(z)^{-1}``."""
    e = as_energy(z)
    n = xi.shape[0]
    m = np.full((n, n), (1j * e.root + INV_SQRT2) / FOUR_PI, dtype=complex)
    if n > 1:
        d = _pairwise_distances(xi)
        off = ~np.eye(n, dtype=bool)
        m[off] = g0_3d(e, d[off]) - re_g0(1j, d[off])
    else:
        m = m.reshape(1, 1)
    return m


def p_inverse(config: Configuration, z):
    """Closed-form ``P(z)^{-1}``."""
    return np.asarray(config.tan_half_theta) - green_matrix(config.xi, z)


def tan_half_from_p(p, xi, z):
    """Invert the closed form: ``T = P^{-1} + M(z)``."""
    return np.linalg.inv(np.asarray(p, dtype=complex)) + green_matrix(np.atleast_2d(xi), z)


@dataclass(frozen=True)
class KreinMatrix:
    z: ComplexEnergy
    p_inverse: np.ndarray
    p: np.ndarray
    det_p_inverse: complex
    condition_estimate: float


def _scaled_det(lu, piv, scale_rows):
    det = complex(np.prod(np.diag(lu)))
    det *= (-1) ** int(np.sum(piv != np.arange(len(piv))))
    if np.any(scale_rows == 0):
        return det, 0.0
    return det, float(abs(det) / np.prod(scale_rows))


def krein_matrix(config: Configuration, z) -> KreinMatrix:
    """Invert ``P(z)^{-1} = T - M(z)`` by LU with one refinement step.

    Raises :class:`NearResonance` when ``|det| / prod_j ||(|T| + |M|)_j||``
    drops below ``SINGULAR_TOL``.  The row scale is taken from the two terms
    separately so that cancellation between them (a resonance) is seen even
    for ``n = 1``, where a plain Hadamard ratio is always one.
    """
    e = as_energy(z)
    t = np.asarray(config.tan_half_theta)
    m = green_matrix(config.xi, e)
    a = t - m
    with warnings.catch_warnings():
        # an exactly singular factor is reported below as NearResonance
        warnings.simplefilter("ignore", sl.LinAlgWarning)
        lu, piv = sl.lu_factor(a)
    det, measure = _scaled_det(lu, piv, np.linalg.norm(np.abs(t) + np.abs(m), axis=1))
    if measure < SINGULAR_TOL:
        raise NearResonance(e.value, det, measure)
    eye = np.eye(a.shape[0], dtype=complex)
    p = sl.lu_solve((lu, piv), eye)
    p = p + sl.lu_solve((lu, piv), eye - a @ p)
    cond = float(np.linalg.norm(a, 1) * np.linalg.norm(p, 1))
    return KreinMatrix(e, _frozen(a), _frozen(p), det, cond)


def perturbed_green(config: Configuration, z, x, y, p=None):
    """``G_{theta,Xi}(z, x, y)``; ``x`` and ``y`` may be (..., 3) arrays."""
    e = as_energy(z)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if p is None:
        p = krein_matrix(config, e).p
    rxy = np.linalg.norm(x - y, axis=-1)
    if np.any(rxy == 0):
        raise DomainError("x and y must differ")
    rx = np.linalg.norm(x[..., None, :] - config.xi, axis=-1)
    ry = np.linalg.norm(y[..., None, :] - config.xi, axis=-1)
    if np.any(rx == 0) or np.any(ry == 0):
        raise DomainError("evaluation point coincides with a scatterer")
    gx = g0_3d(e, rx)
    gy = g0_3d(e, ry)
    scat = np.einsum("...j,jk,...k->...", gx, p, gy)
    return g0_3d(e, rxy) + scat


def local_green(alpha, xi, z, x, y):
    """Perturbed Green's function of local interactions straight from ``Gamma(z)^{-1}``."""
    e = as_energy(z)
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    p = np.linalg.inv(gamma_matrix(alpha, xi, e))
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    gx = g0_3d(e, np.linalg.norm(x[..., None, :] - xi, axis=-1))
    gy = g0_3d(e, np.linalg.norm(y[..., None, :] - xi, axis=-1))
    return g0_3d(e, np.linalg.norm(x - y, axis=-1)) + np.einsum("...j,jk,...k->...", gx, p, gy)


def resolvent_gram(xi, z):
    """``K(z)_{jj'} = (u_j(i), (-Delta - z)^{-1} u_j'(i))`` from the closed forms."""
    n = xi.shape[0]
    k = np.full((n, n), gram_diag(z), dtype=complex)
    if n > 1:
        d = _pairwise_distances(xi)
        off = ~np.eye(n, dtype=bool)
        k[off] = gram_offdiag(z, d[off])
    return k


def unit_gram(xi):
    n = xi.shape[0]
    g = np.full((n, n), gram_unit(), dtype=complex)
    if n > 1:
        d = _pairwise_distances(xi)
        off = ~np.eye(n, dtype=bool)
        g[off] = gram_unit(d[off])
    return g


def deficiency_gram(xi, z1, z2):
    """``(u_j(conj z1), u_j'(z2))`` assembled from the Gram quantities at ``i``.

    Uses ``u(z) = (-Delta - i)(-Delta - z)^{-1} u(i)`` and the first resolvent
    identity, so only :func:`gram_unit` and :func:`resolvent_gram` enter.
    """
    z1 = as_energy(z1).value
    z2 = as_energy(z2).value
    g0 = unit_gram(xi)
    k1 = resolvent_gram(xi, z1)
    k2 = resolvent_gram(xi, z2)
    if z1 == z2:
        raise DomainError("deficiency_gram needs distinct energies")
    cross = (k1 - k2) / (z1 - z2)
    return g0 + (z1 + 1j) * k1 + (z2 - 1j) * k2 + (z1 + 1j) * (z2 - 1j) * cross


def krein_identity_residual(config: Configuration, z1, z2) -> float:
    """Frobenius norm of ``P^{-1}(z1) - P^{-1}(z2) + (z1 - z2) Gram(z1, z2)``."""
    e1 = as_energy(z1)
    e2 = as_energy(z2)
    if e1.value == e2.value:
        return 0.0
    for e in (e1, e2):
        if e.value.imag == 0 and e.value.real >= 0:
            raise DomainError("energies must lie off [0, inf)")
    lhs = p_inverse(config, e1) - p_inverse(config, e2)
    lhs = lhs + (e1.value - e2.value) * deficiency_gram(config.xi, e1, e2)
    return float(np.linalg.norm(lhs))
