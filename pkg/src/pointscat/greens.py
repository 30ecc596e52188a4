"""Free-space Helmholtz Green's functions and closed-form Gram quantities.

Branch convention: ``z**(1/2)`` always has positive imaginary part off the
half line ``[0, inf)``; on the half line the boundary value from the upper
half-plane (``+sqrt(z)``) is used, which is what makes real-energy kernels
outgoing.  Real-axis evaluation with an arbitrary real root (including
negative wave numbers) goes through :meth:`ComplexEnergy.on_shell`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import roots_genlaguerre

FOUR_PI = 4.0 * math.pi
INV_SQRT2 = 1.0 / math.sqrt(2.0)

# ascending series for |w| <= HANKEL_SPLIT (cancellation grows like e^{2 Im w}
# beyond it); the asymptotic expansion, summed through Watson's integral, above
HANKEL_SPLIT = 4.0
# below this distance from +-i the Gram closed forms switch to a Taylor expansion
GRAM_LIMIT_WINDOW = 1e-6

_EULER_GAMMA = 0.57721566490153286061


class DomainError(ValueError):
    """An argument lies outside the domain of a Green's function."""


def sqrt_upper(z):
    """Square root on the upper sheet.

    ``Im(w) > 0`` for ``z`` off ``[0, inf)``; ``w = +sqrt(z)`` on it.
    Works elementwise on arrays.
    """
    w = np.sqrt(np.asarray(z, dtype=complex))
    flip = (w.imag < 0) | ((w.imag == 0) & (w.real < 0))
    w = np.where(flip, -w, w)
    return w[()] if w.ndim == 0 else w


@dataclass(frozen=True)
class ComplexEnergy:
    """A spectral parameter ``z`` together with the root used for it."""

    value: complex
    root: complex

    @classmethod
    def from_z(cls, z) -> "ComplexEnergy":
        if isinstance(z, ComplexEnergy):
            return z
        z = complex(z)
        return cls(z, complex(sqrt_upper(z)))

    @classmethod
    def on_shell(cls, k: float) -> "ComplexEnergy":
        """Real-axis energy ``k**2`` with root exactly ``k`` (``k`` may be negative)."""
        k = float(k)
        if k == 0.0:
            raise DomainError("on-shell wave number must be nonzero")
        return cls(complex(k * k), complex(k))

    @property
    def sqrt_upper(self) -> complex:
        return self.root

    def conjugate(self) -> "ComplexEnergy":
        # conj(z) carries root -conj(w), which keeps Im(root) >= 0
        return ComplexEnergy(self.value.conjugate(), -self.root.conjugate())


def as_energy(z) -> ComplexEnergy:
    return ComplexEnergy.from_z(z)


def _check_positive(r):
    r = np.asarray(r, dtype=float)
    if np.any(~(r > 0)):
        raise DomainError("Green's function evaluated at zero separation")
    return r


def g0_3d(z, r):
    """``exp(i z^{1/2} r) / (4 pi r)``, elementwise in ``r``."""
    w = as_energy(z).root
    r = _check_positive(r)
    out = np.exp(1j * w * r) / (FOUR_PI * r)
    return out[()] if out.ndim == 0 else out


def g0_3d_radial_derivative(z, r):
    """d/dr of :func:`g0_3d`."""
    w = as_energy(z).root
    r = _check_positive(r)
    return (1j * w - 1.0 / r) * np.exp(1j * w * r) / (FOUR_PI * r)


def g0_1d(z, r):
    """``(i/2) z^{-1/2} exp(i z^{1/2} r)``; finite at ``r = 0``."""
    e = as_energy(z)
    if e.value == 0:
        raise DomainError("one-dimensional Green's function has a pole at z = 0")
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise DomainError("distance must be nonnegative")
    out = 0.5j / e.root * np.exp(1j * e.root * r)
    return out[()] if out.ndim == 0 else out


def _hankel0_series(w: complex) -> complex:
    q = -0.25 * w * w
    term = 1.0 + 0j
    j0 = term
    harmonic = 0.0
    ysum = 0j
    m = 0
    while True:
        m += 1
        term *= q / (m * m)
        harmonic += 1.0 / m
        j0 += term
        ysum += harmonic * term
        if abs(term) * max(harmonic, 1.0) < 1e-17 * max(abs(j0), 1e-300) and m > 4:
            break
        if m > 200:
            break
    y0 = (2.0 / math.pi) * ((np.log(0.5 * w) + _EULER_GAMMA) * j0 - ysum)
    return j0 + 1j * y0


_LAGUERRE_NODES, _LAGUERRE_WEIGHTS = roots_genlaguerre(64, -0.5)


def _hankel0_large(w: complex) -> complex:
    # Watson's integral for the Hankel asymptotic series, summed exactly by
    # generalized Gauss-Laguerre quadrature (weight u^{-1/2} e^{-u}).
    u = _LAGUERRE_NODES
    integral = np.sum(_LAGUERRE_WEIGHTS / np.sqrt(1.0 + 0.5j * u / w))
    pref = np.sqrt(2.0 / (math.pi * w)) * np.exp(1j * (w - 0.25 * math.pi))
    return complex(pref * integral / math.sqrt(math.pi))


def hankel1_0(w):
    """Hankel function ``H_0^{(1)}(w)`` for ``Im(w) >= 0``, ``w != 0``."""
    w_arr = np.asarray(w, dtype=complex)
    out = np.empty(w_arr.shape, dtype=complex)
    for idx, val in np.ndenumerate(w_arr):
        if val == 0:
            raise DomainError("H_0^(1) has a logarithmic pole at 0")
        if abs(val) <= HANKEL_SPLIT:
            out[idx] = _hankel0_series(complex(val))
        else:
            out[idx] = _hankel0_large(complex(val))
    return out[()] if out.ndim == 0 else out


def g0_2d(z, r):
    """``(i/4) H_0^{(1)}(z^{1/2} r)``."""
    w = as_energy(z).root
    r = _check_positive(r)
    return 0.25j * hankel1_0(w * r)


_ROOT_MINUS_I = complex(sqrt_upper(-1j))


def _gram_diag_taylor(z: complex, z0: complex) -> complex:
    # numerator N(z) = i w - i w(-i) - (z + i)/sqrt2 vanishes at z0 = +-i
    w0 = complex(sqrt_upper(z0))
    d1 = 0.5j / w0 - INV_SQRT2
    d2 = -0.25j / w0**3
    dz = z - z0
    lead = d1 / (2 * z0)
    slope = (0.5 * d2 - d1 / (2 * z0)) / (2 * z0)
    return (lead + slope * dz) / FOUR_PI


def gram_diag(z) -> complex:
    """``(u_j(i), (-Delta - z)^{-1} u_j(i))`` for ``u_j(i) = G_0(i, . - xi_j)``."""
    e = as_energy(z)
    zv = e.value
    for z0 in (1j, -1j):
        if abs(zv - z0) < GRAM_LIMIT_WINDOW:
            return _gram_diag_taylor(zv, z0)
    num = 1j * e.root - 1j * _ROOT_MINUS_I - INV_SQRT2 * (zv + 1j)
    return num / (FOUR_PI * (zv * zv + 1.0))


def im_g0(z, r):
    """``[G_0(z, r) - G_0(conj z, r)] / (2i)`` with the upper-sheet root for ``conj z``."""
    e = as_energy(z)
    return (g0_3d(e, r) - g0_3d(e.conjugate(), r)) / 2j


def re_g0(z, r):
    e = as_energy(z)
    return (g0_3d(e, r) + g0_3d(e.conjugate(), r)) / 2


def _gram_offdiag_partial(zv: complex, root: complex, r):
    # partial fractions of 1/((s + i)(s - i)(s - z)) in s = p^2
    gz = np.exp(1j * root * r) / (FOUR_PI * r)
    gmi = g0_3d(-1j, r)
    gpi = g0_3d(1j, r)
    return gz / (zv * zv + 1.0) + gmi / (2j * (zv + 1j)) + gpi / (2j * (1j - zv))


def gram_offdiag(z, r):
    """``(u_j(i), (-Delta - z)^{-1} u_j'(i))`` for ``|xi_j - xi_j'| = r > 0``."""
    e = as_energy(z)
    r = _check_positive(r)
    zv = e.value
    for z0 in (1j, -1j):
        if abs(zv - z0) < GRAM_LIMIT_WINDOW:
            # the function is analytic at z0; average symmetric points around it
            h = 1e-3
            pts = [z0 + h * c for c in (1, 1j, -1, -1j)]
            vals = [_gram_offdiag_partial(p, complex(sqrt_upper(p)), r) for p in pts]
            mean = sum(vals) / 4.0
            deriv = sum(v / (p - z0) for v, p in zip(vals, pts)) / 4.0
            return mean + deriv * (zv - z0)
    out = np.asarray(_gram_offdiag_partial(zv, e.root, r))
    return out[()] if out.ndim == 0 else out


def gram_unit(r=None):
    """``(u_j(i), u_j'(i))``: the norm on the diagonal, ``Im G_0(i, r)`` off it."""
    if r is None:
        return 1.0 / (FOUR_PI * math.sqrt(2.0))
    return im_g0(1j, r)
