"""Plane data synthesis, half-space lifting and reconstruction of (Xi, T).

Reconstruction fits the exact forward model

    G(x, y) - G_0(x - y) = sum_jj' P_jj' G_0(x - xi_j) G_0(y - xi_j')

to plane samples.  ``P`` enters linearly and is eliminated by variable
projection; the positions are updated by Levenberg-Marquardt.  Initial
positions come from a back-propagation indicator.  ``T = tan(theta/2)`` is
then read off from ``P`` through the closed-form Krein matrix.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.linalg as sl
from scipy.ndimage import maximum_filter
from scipy.spatial import cKDTree

from .greens import FOUR_PI, ComplexEnergy, DomainError, g0_3d, g0_3d_radial_derivative
from .krein import Configuration, hermiticity_defect, krein_matrix, tan_half_from_p, tan_half_to_theta

log = logging.getLogger(__name__)

# -Z(1/2) for the square lattice: punctured-trapezoid correction for a 1/r singularity
LATTICE_ONE_OVER_R = 3.900264920001956


class CoverageError(ValueError):
    """Plane samples do not cover the region a quadrature needs."""


class RankDeficiency(np.linalg.LinAlgError):
    """The linear stage of the fit cannot determine every entry of ``P``."""


def _frozen(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


def _lift(points2):
    points2 = np.atleast_2d(np.asarray(points2, dtype=float))
    return np.concatenate([points2, np.zeros((len(points2), 1))], axis=1)


def plane_grid(side: float, count: int, center=(0.0, 0.0)):
    """``count x count`` square lattice of plane points with the given side length."""
    if count < 1 or not side > 0:
        raise ValueError("grid needs count >= 1 and side > 0")
    t = np.linspace(-0.5 * side, 0.5 * side, count) if count > 1 else np.zeros(1)
    gx, gy = np.meshgrid(t + center[0], t + center[1], indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


@dataclass(frozen=True)
class PlaneSamples:
    """Values ``g = G(k0**2, (x, 0), (y, 0))`` for pairs of plane points."""

    k0: float
    x: np.ndarray
    y: np.ndarray
    g: np.ndarray
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        g = np.atleast_1d(np.asarray(self.g, dtype=complex))
        if len(g) == 0:
            x = x.reshape(0, 2)
            y = y.reshape(0, 2)
        if x.shape != y.shape or x.shape[1:] != (2,) or g.shape != (len(x),):
            raise ValueError("pairs need x, y of shape (m, 2) and g of shape (m,)")
        if not self.k0 > 0:
            raise ValueError("k0 must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if np.any(np.all(x == y, axis=1)):
            raise DomainError("plane samples need x != y for every pair")
        object.__setattr__(self, "k0", float(self.k0))
        object.__setattr__(self, "noise_sigma", float(self.noise_sigma))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "g", _frozen(g))

    def __len__(self):
        return len(self.g)

    @property
    def wavelength(self) -> float:
        return 2 * math.pi / self.k0

    @property
    def energy(self) -> ComplexEnergy:
        return ComplexEnergy.on_shell(self.k0)

    @cached_property
    def plane_index(self):
        """Unique ``x`` and ``y`` points with the inverse maps of every pair."""
        xs, xinv = np.unique(self.x, axis=0, return_inverse=True)
        ys, yinv = np.unique(self.y, axis=0, return_inverse=True)
        return xs, xinv.ravel(), ys, yinv.ravel()

    def free_field(self):
        return g0_3d(self.energy, np.linalg.norm(self.x - self.y, axis=1))

    def scattered(self):
        return self.g - self.free_field()

    def canonical(self) -> "PlaneSamples":
        """Same samples sorted lexicographically by ``(x, y)``."""
        order = np.lexsort((self.y[:, 1], self.y[:, 0], self.x[:, 1], self.x[:, 0]))
        return replace(self, x=self.x[order], y=self.y[order], g=self.g[order])

    def with_values(self, g) -> "PlaneSamples":
        return replace(self, g=np.asarray(g, dtype=complex))


def synthesize_plane_data(config: Configuration | None, k0: float, grid, noise_sigma: float = 0.0,
                          seed: int = 0, sources=None) -> PlaneSamples:
    """Sample ``G(k0**2, x, y)`` on every ordered pair ``x in grid``, ``y in sources``, ``x != y``.

    ``sources`` defaults to ``grid``.  ``config=None`` gives free-field data.
    Complex Gaussian noise with standard deviation ``noise_sigma`` per
    component is drawn from ``numpy.random.default_rng(seed)``.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    sources = grid if sources is None else np.atleast_2d(np.asarray(sources, dtype=float))
    if grid.size == 0 or sources.size == 0:
        raise ValueError("empty sample grid")
    if not k0 > 0:
        raise ValueError("k0 must be positive")
    e = ComplexEnergy.on_shell(k0)
    xx = np.repeat(grid, len(sources), axis=0)
    yy = np.tile(sources, (len(grid), 1))
    keep = ~np.all(xx == yy, axis=1)
    xx, yy = xx[keep], yy[keep]
    g = g0_3d(e, np.linalg.norm(xx - yy, axis=1))
    if config is not None:
        if np.any(config.xi[:, 2] >= 0):
            raise DomainError("scatterers must lie strictly below the measurement plane")
        p = krein_matrix(config, e).p
        ax = g0_3d(e, np.linalg.norm(_lift(grid)[:, None, :] - config.xi, axis=-1))
        ay = g0_3d(e, np.linalg.norm(_lift(sources)[:, None, :] - config.xi, axis=-1))
        scat = (ax @ p @ ay.T).ravel()[keep]
        g = g + scat
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(len(g)) + 1j * rng.standard_normal(len(g))
        g = g + noise_sigma * noise
    return PlaneSamples(k0, xx, yy, g, noise_sigma, seed)


# ----------------------------------------------------------------------------
# lifting into the upper half-space


@dataclass(frozen=True)
class LiftSpec:
    """Truncated, tapered lattice quadrature of the half-space Poisson integral.

    ``radius`` and ``taper_width`` are lengths; ``step`` is the lattice
    spacing.  The defaults in :meth:`default` are ``R = 60/k0``,
    ``h = pi/(8 k0)`` and a taper of ``20/k0``.
    """

    radius: float
    step: float
    taper_width: float = 0.0

    def validate(self, k0: float):
        if self.radius < 10 / k0 * (1 - 1e-12):
            raise ValueError(f"truncation radius {self.radius} below 10/k0")
        if self.step > math.pi / (4 * k0) * (1 + 1e-12):
            raise ValueError(f"grid step {self.step} above pi/(4 k0)")
        if self.taper_width < 0 or self.taper_width >= self.radius:
            raise ValueError("taper width must lie in [0, radius)")

    @classmethod
    def default(cls, k0: float) -> "LiftSpec":
        return cls(60.0 / k0, math.pi / (8.0 * k0), 20.0 / k0)

    def refined(self) -> "LiftSpec":
        return LiftSpec(2 * self.radius, 0.5 * self.step, 2 * self.taper_width)


def _taper(rho, spec: LiftSpec):
    if spec.taper_width == 0:
        return np.where(rho <= spec.radius, 1.0, 0.0)
    inner = spec.radius - spec.taper_width
    t = np.clip((rho - inner) / spec.taper_width, 0.0, 1.0)
    return np.where(rho <= spec.radius, 0.5 * (1 + np.cos(math.pi * t)), 0.0)


def poisson_kernel(k0: float, sigma, s):
    """``d/d sigma_3 [G_0((sigma, sigma_3) - s) - G_0((sigma, -sigma_3) - s)]`` at ``sigma_3 = 0``."""
    s = np.asarray(s, dtype=float)
    d = _lift(sigma) - s
    r = np.linalg.norm(d, axis=1)
    return 2.0 * s[2] * (1.0 / r - 1j * k0) * np.exp(1j * k0 * r) / (FOUR_PI * r * r)


def _lattice_nodes(spec: LiftSpec, center2, origin2):
    # lattice origin + h*(i, j) inside the disk |sigma - center| <= R
    h = spec.step
    lo = np.floor((center2 - spec.radius - origin2) / h).astype(int)
    hi = np.ceil((center2 + spec.radius - origin2) / h).astype(int)
    i = np.arange(lo[0], hi[0] + 1)
    j = np.arange(lo[1], hi[1] + 1)
    ii, jj = np.meshgrid(i, j, indexing="ij")
    idx = np.stack([ii.ravel(), jj.ravel()], axis=1)
    nodes = origin2 + h * idx
    inside = np.linalg.norm(nodes - center2, axis=1) <= spec.radius
    return nodes[inside], idx[inside]


def _lookup(tree, values, nodes, tol, what):
    dist, pos = tree.query(nodes, distance_upper_bound=tol)
    missing = ~np.isfinite(dist)
    if np.any(missing):
        m = nodes[missing]
        lo = m.min(axis=0)
        hi = m.max(axis=0)
        raise CoverageError(
            f"{what}: {missing.sum()} quadrature nodes have no sample within {tol:.3g}; "
            f"missing region x1 in [{lo[0]:.4g}, {hi[0]:.4g}], x2 in [{lo[1]:.4g}, {hi[1]:.4g}]"
        )
    return values[pos]


def lift_to_halfspace(samples: PlaneSamples, spec: LiftSpec, s, y) -> complex:
    """Extend ``G(k0**2, ., y)`` from the plane to ``s`` in the upper half-space.

    Lattice nodes are ``y + h (i, j)`` inside the disk of radius ``R`` around
    the foot point of ``s``; values come from the nearest sample with source
    ``y``.  The node at ``y`` itself carries the free-space singularity and is
    replaced by the corrected-trapezoid terms for ``1/(4 pi |sigma - y|)``.
    """
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)[:2]
    if not s[2] > 0:
        raise DomainError("lift target must lie strictly above the plane")
    spec.validate(samples.k0)
    scale = max(1.0, float(np.max(np.abs(samples.y), initial=0.0)))
    sel = np.all(np.abs(samples.y - y) <= 1e-9 * scale, axis=1)
    if not np.any(sel):
        raise CoverageError(f"no samples with source point y = {y.tolist()}")
    return _lift_one(cKDTree(samples.x[sel]), samples.g[sel], samples.k0, spec, s, y)


def _lift_one(tree, vals, k0, spec, s, y):
    h = spec.step
    nodes, idx = _lattice_nodes(spec, s[:2], y)
    rest = np.any(idx != 0, axis=1)
    nodes = nodes[rest]
    g = _lookup(tree, vals, nodes, 1e-2 * h, "lift")
    rho = np.linalg.norm(nodes - s[:2], axis=1)
    total = h * h * np.sum(g * poisson_kernel(k0, nodes, s) * _taper(rho, spec))

    # local correction at sigma = y: singular part 1/(4 pi r) plus the regular
    # remainder, extrapolated from rings at distance h and 2h
    rho_y = float(np.linalg.norm(y - s[:2]))
    if rho_y <= spec.radius:
        ky = poisson_kernel(k0, y[None, :], s)[0] * _taper(np.array([rho_y]), spec)[0]
        ring = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]], dtype=float)
        reg = []
        for m in (1, 2):
            pts = y + m * h * ring
            gv = _lookup(tree, vals, pts, 1e-2 * h, "lift (singular correction)")
            reg.append(np.mean(gv) - 1.0 / (FOUR_PI * m * h))
        g_reg = 2 * reg[0] - reg[1]
        total += ky * (LATTICE_ONE_OVER_R * h / FOUR_PI + h * h * g_reg)
    return complex(total)


def lift_pair(samples: PlaneSamples, spec: LiftSpec, x, s) -> complex:
    """``G(k0**2, x, s)`` for ``x, s`` both above the plane by lifting twice.

    First ``x`` is lifted for every lattice node ``sigma`` around the foot of
    ``s`` (each node must be a source point of ``samples``), which by symmetry
    gives the plane trace of ``G(., x)``.  That function is singular at ``x``,
    so the Poisson integral only reproduces ``G(., x)`` minus the half-space
    Dirichlet Green's function ``G_0(. - x) - G_0(. - x*)`` (``x*`` is the
    mirror image of ``x``); that term is added back in closed form.  The
    quadrature errors of both passes compound.
    """
    x = np.asarray(x, dtype=float)
    s = np.asarray(s, dtype=float)
    if not (x[2] > 0 and s[2] > 0):
        raise DomainError("both points must lie strictly above the plane")
    if np.array_equal(x, s):
        raise DomainError("x and s must differ")
    k0 = samples.k0
    spec.validate(k0)
    ys = np.unique(samples.y, axis=0)
    tree = cKDTree(ys)
    origin = ys[np.argmin(np.linalg.norm(ys - s[:2], axis=1))]
    nodes, _ = _lattice_nodes(spec, s[:2], origin)
    _lookup(tree, ys, nodes, 1e-2 * spec.step, "second lift pass")
    _, which = tree.query(nodes)
    # group the pairs by source point once
    _, yinv = np.unique(samples.y, axis=0, return_inverse=True)
    yinv = yinv.ravel()
    order = np.argsort(yinv, kind="stable")
    bounds = np.searchsorted(yinv[order], np.arange(len(ys) + 1))
    first = np.empty(len(nodes), dtype=complex)
    for i, j in enumerate(which):
        grp = order[bounds[j]:bounds[j + 1]]
        first[i] = _lift_one(cKDTree(samples.x[grp]), samples.g[grp], k0, spec, x, ys[j])
    rho = np.linalg.norm(nodes - s[:2], axis=1)
    h = spec.step
    poisson = h * h * np.sum(first * poisson_kernel(k0, nodes, s) * _taper(rho, spec))
    e = samples.energy
    mirror = x * np.array([1.0, 1.0, -1.0])
    dirichlet = g0_3d(e, np.linalg.norm(s - x)) - g0_3d(e, np.linalg.norm(s - mirror))
    return complex(poisson + dirichlet)


# ----------------------------------------------------------------------------
# back-propagation indicator


@dataclass(frozen=True)
class SearchBox:
    """Axis-aligned box ``[x0, x1] x [y0, y1] x [z0, z1]`` below the plane."""

    x0: float
    x1: float
    y0: float
    y1: float
    z0: float
    z1: float

    def __post_init__(self):
        if not (self.x0 <= self.x1 and self.y0 <= self.y1 and self.z0 <= self.z1):
            raise DomainError("search box bounds are inverted")
        if not self.z1 < 0:
            raise DomainError("search box must lie strictly below the plane")

    @classmethod
    def parse(cls, text: str) -> "SearchBox":
        vals = [float(v) for v in text.split(",")]
        if len(vals) != 6:
            raise ValueError("box needs six numbers x0,x1,y0,y1,z0,z1")
        return cls(*vals)

    def axes(self, step: float):
        if not step > 0:
            raise DomainError("grid step must be positive")
        return [np.arange(lo, hi + 0.5 * step, step) for lo, hi in
                ((self.x0, self.x1), (self.y0, self.y1), (self.z0, self.z1))]


def _pair_matrix(samples: PlaneSamples, values):
    xs, xinv, ys, yinv = samples.plane_index
    d = np.zeros((len(xs), len(ys)), dtype=complex)
    d[xinv, yinv] = values
    return xs, ys, d


def backprojection_indicator(samples: PlaneSamples, points, residual=None, chunk: int = 2048):
    """Normalized matched filter ``|sum conj(a_x(p) a_y(p)) r_xy| / (|a_x(p)| |a_y(p)|)``.

    ``a_x(p) = G_0(k0**2, x - p)`` and ``r`` is the scattered part of the data
    (or ``residual`` when given).  For a single noiseless scatterer and
    complete pair data the maximum sits on it by Cauchy-Schwarz; the missing
    ``x = y`` pairs shift it slightly.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    r = samples.scattered() if residual is None else np.asarray(residual, dtype=complex)
    xs, ys, d = _pair_matrix(samples, r)
    same = xs.shape == ys.shape and np.array_equal(xs, ys)
    e = samples.energy
    out = np.empty(len(points))
    for start in range(0, len(points), chunk):
        p = points[start:start + chunk]
        ax = np.conj(g0_3d(e, np.linalg.norm(_lift(xs)[None, :, :] - p[:, None, :], axis=-1)))
        if same:
            ay = ax
        else:
            ay = np.conj(g0_3d(e, np.linalg.norm(_lift(ys)[None, :, :] - p[:, None, :], axis=-1)))
        num = np.abs(np.sum((ax @ d) * ay, axis=1))
        out[start:start + chunk] = num / (np.linalg.norm(ax, axis=1) * np.linalg.norm(ay, axis=1))
    return out


def noise_floor(samples: PlaneSamples) -> float:
    """Indicator level below which peaks are treated as noise."""
    scale = float(np.median(np.abs(samples.g))) if len(samples) else 1.0
    sigma = max(samples.noise_sigma, 1e-13 * scale)
    return 6.0 * math.sqrt(2.0) * sigma


def locate_scatterers(samples: PlaneSamples, search_box: SearchBox, grid_step: float, max_order: int,
                      residual=None, exclude=(), refine: bool = True):
    """Scan the indicator over ``search_box`` and return up to ``max_order`` peaks.

    Peaks are local maxima above :func:`noise_floor`, at least half a
    wavelength apart (and from every point of ``exclude``), sorted by
    decreasing indicator value.  Returns an array of shape (m, 3).
    """
    if max_order < 1:
        return np.zeros((0, 3))
    axes = search_box.axes(grid_step)
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    values = backprojection_indicator(samples, mesh.reshape(-1, 3), residual).reshape(mesh.shape[:3])
    floor = noise_floor(samples)
    peaks = (values == maximum_filter(values, size=3, mode="nearest")) & (values > floor)
    flat = np.flatnonzero(peaks)
    order = flat[np.argsort(-values.ravel()[flat], kind="stable")]
    sep = 0.5 * samples.wavelength
    chosen, merged = [], []
    exclude = [np.asarray(q, dtype=float) for q in exclude]
    pts = mesh.reshape(-1, 3)
    vals = values.ravel()
    for i in order:
        p = pts[i]
        if any(np.linalg.norm(p - q) < sep for q in exclude):
            continue
        close = [c for c in chosen if np.linalg.norm(p - pts[c]) < sep]
        if close:
            if vals[i] >= 0.5 * vals[close[0]]:
                merged.append((pts[close[0]].tolist(), p.tolist()))
            continue
        chosen.append(i)
        if len(chosen) == max_order:
            break
    if merged:
        warnings.warn(f"merged candidates closer than lambda/2: {merged}", stacklevel=2)
    cands = pts[chosen]
    if refine and len(cands):
        cands = np.array([_refine_peak(samples, c, grid_step, residual) for c in cands])
    return cands


def _refine_peak(samples, p, step, residual, levels: int = 3):
    for _ in range(levels):
        t = np.linspace(-step, step, 5)
        cube = np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1).reshape(-1, 3) + p
        cube = cube[cube[:, 2] < 0]
        vals = backprojection_indicator(samples, cube, residual)
        p = cube[int(np.argmax(vals))]
        step *= 0.5
    return p


# ----------------------------------------------------------------------------
# model fitting


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 200
    tol: float = 1e-10
    damping: float = 1e-3


@dataclass(frozen=True)
class ReconstructionResult:
    xi_hat: np.ndarray
    p_hat: np.ndarray
    tan_half_hat: np.ndarray
    theta_hat: np.ndarray
    residual_rms: float
    hermiticity_defect: float
    model_order: int
    iterations: int
    converged: bool = True
    k0: float = 0.0
    diagnostics: dict = field(default_factory=dict, compare=False)

    def configuration(self, half_space: bool = True) -> Configuration:
        return Configuration(self.xi_hat, self.tan_half_hat, half_space=half_space)

    @classmethod
    def empty(cls, k0: float, residual_rms: float, **diag) -> "ReconstructionResult":
        z = np.zeros((0, 0), dtype=complex)
        return cls(np.zeros((0, 3)), z, z, z, residual_rms, 0.0, 0, 0, True, k0, diag)


class _PairGeometry:
    """Green's function values (and gradients) at the current positions, per pair.

    Evaluated once per unique plane point and gathered to the pairs.
    """

    def __init__(self, samples: PlaneSamples):
        self.e = samples.energy
        xs, self.xinv, ys, self.yinv = samples.plane_index
        self.xs3 = _lift(xs)
        self.ys3 = _lift(ys)

    def _at(self, pts, xi, with_grad):
        d = pts[:, None, :] - xi[None, :, :]
        r = np.linalg.norm(d, axis=-1)
        a = g0_3d(self.e, r)
        if not with_grad:
            return a, None
        # d/d xi of G_0(|x - xi|) = -G_0'(r) (x - xi)/r
        return a, -(g0_3d_radial_derivative(self.e, r) / r)[..., None] * d

    def basis(self, xi, with_grad=False):
        ax, gx = self._at(self.xs3, xi, with_grad)
        ay, gy = self._at(self.ys3, xi, with_grad)
        if not with_grad:
            return ax[self.xinv], ay[self.yinv]
        return ax[self.xinv], ay[self.yinv], gx[self.xinv], gy[self.yinv]


def _design(ax, ay):
    m, n = ax.shape
    return (ax[:, :, None] * ay[:, None, :]).reshape(m, n * n)


def _project(a, b):
    q, r = sl.qr(a, mode="economic", overwrite_a=True, check_finite=False)
    qb = q.conj().T @ b
    coef = sl.solve_triangular(r, qb, check_finite=False)
    return q, r, coef, b - q @ qb


def _check_rank(r, n):
    d = np.abs(np.diag(r))
    bad = np.flatnonzero(d <= 1e-12 * max(d.max(initial=0.0), 1e-300))
    if len(bad):
        names = [f"P[{i // n},{i % n}]" for i in bad]
        raise RankDeficiency(f"linear stage cannot resolve {', '.join(names)}")


def solve_linear_stage(samples: PlaneSamples, xi):
    """Least-squares ``P`` for fixed positions ``xi``; returns ``(P, residual)``."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    geom = _PairGeometry(samples)
    ax, ay = geom.basis(xi)
    _, r, coef, res = _project(_design(ax, ay), samples.scattered())
    _check_rank(r, len(xi))
    return coef.reshape(len(xi), len(xi)), res


def fit_model(samples: PlaneSamples, initial_xi, options: FitOptions | None = None) -> ReconstructionResult:
    """Variable-projection Levenberg-Marquardt fit of positions and ``P``.

    Each iteration solves the linear stage for ``P`` at the current
    positions, then takes a damped Gauss-Newton step on the positions with
    the Kaufman Jacobian of the projected residual.
    """
    options = options or FitOptions()
    xi = np.atleast_2d(np.asarray(initial_xi, dtype=float)).copy()
    n = len(xi)
    if np.any(xi[:, 2] >= 0):
        raise DomainError("initial positions must lie below the plane")
    if len(samples) < 2 * (3 * n + n * n):
        raise ValueError(f"{len(samples)} samples below the identifiability floor {2 * (3 * n + n * n)} for n={n}")
    b = samples.scattered()
    geom = _PairGeometry(samples)

    def evaluate(pos, with_grad=False):
        basis = geom.basis(pos, with_grad)
        q, r, coef, res = _project(_design(basis[0], basis[1]), b)
        return basis, q, r, coef, res

    basis, q, r, coef, res = evaluate(xi, True)
    _check_rank(r, n)
    cost = float(np.vdot(res, res).real)
    mu = options.damping
    converged = False
    it = 0
    bnorm = float(np.vdot(b, b).real)
    for it in range(1, options.max_iter + 1):
        ax, ay, gx, gy = basis
        pm = coef.reshape(n, n)
        # d(model)/d xi_l = grad a_l(x) (P a(y))_l + (a(x) P)_l grad a_l(y)
        left = ay @ pm.T
        right = ax @ pm
        dm = gx * left[..., None] + gy * right[..., None]
        dm = dm.reshape(len(b), 3 * n)
        jac = -(dm - q @ (q.conj().T @ dm))
        jtj = (jac.conj().T @ jac).real
        grad = (jac.conj().T @ res).real
        if cost <= 1e-30 * bnorm or np.max(np.abs(grad)) == 0:
            converged = True
            break
        improved = False
        for _ in range(30):
            lhs = jtj + mu * np.diag(np.diag(jtj))
            try:
                step = -np.linalg.solve(lhs, grad)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            trial = xi + step.reshape(n, 3)
            if np.any(trial[:, 2] >= 0):
                mu *= 10
                continue
            tb, tq, tr, tc, tres = evaluate(trial, True)
            tcost = float(np.vdot(tres, tres).real)
            if tcost < cost:
                improved = True
                rel = (cost - tcost) / cost
                xi, basis, q, r, coef, res, cost = trial, tb, tq, tr, tc, tres, tcost
                mu = max(mu / 3, 1e-12)
                break
            mu *= 4
        if not improved or rel < options.tol:
            converged = True
            break
    else:
        converged = False
    _check_rank(r, n)
    return _finish(samples, xi, coef.reshape(n, n), res, it, converged)


def _finish(samples, xi, p, res, iterations, converged):
    t = tan_half_from_p(p, xi, samples.energy)
    defect = hermiticity_defect(t)
    t = 0.5 * (t + t.conj().T)
    theta = tan_half_to_theta(t)
    order = np.lexsort((xi[:, 2], xi[:, 1], xi[:, 0]))
    ix = np.ix_(order, order)
    rms = float(np.sqrt(np.mean(np.abs(res) ** 2)))
    return ReconstructionResult(
        xi[order], p[ix], t[ix], theta[ix], rms, defect, len(xi), iterations, converged, samples.k0
    )


@dataclass(frozen=True)
class ReconstructOptions:
    grid_step: float | None = None
    max_order: int = 4
    drop_factor: float = 10.0
    fit: FitOptions = field(default_factory=FitOptions)


def _residual_floor(samples: PlaneSamples) -> float:
    scale = float(np.median(np.abs(samples.g)))
    m = max(len(samples), 1)
    return 3.0 * math.sqrt(2.0) * samples.noise_sigma * m ** -0.25 + 1e-9 * scale


def _excess(samples: PlaneSamples, rms: float) -> float:
    # residual above the expected noise level, floored at its statistical resolution
    ex = math.sqrt(max(rms * rms - 2.0 * samples.noise_sigma**2, 0.0))
    return max(ex, _residual_floor(samples))


def _beats(larger: float, smaller: float, floor: float, drop: float) -> bool:
    # a larger model wins by a clear residual drop, or by reaching the noise
    # level when the smaller one is clearly above it (a drop to the floor can
    # be smaller than `drop` on noisy data)
    if larger <= smaller / drop:
        return True
    return larger <= floor * (1 + 1e-12) and smaller > 2.0 * floor


def reconstruct(samples: PlaneSamples, search_box: SearchBox, options: ReconstructOptions | None = None):
    """Positions, ``P`` and ``T`` from plane data with automatic model order.

    Orders are explored greedily: each new candidate is the strongest
    indicator peak of the current residual, and all positions are refit.
    The selected order is the smallest ``n`` that no larger explored order
    beats by ``drop_factor`` in noise-corrected residual.
    """
    options = options or ReconstructOptions()
    samples = samples.canonical()
    step = options.grid_step or samples.wavelength / 4
    rms0 = float(np.sqrt(np.mean(np.abs(samples.scattered()) ** 2)))
    floor = _residual_floor(samples)
    results = [ReconstructionResult.empty(samples.k0, rms0)]
    excess = [_excess(samples, rms0)]
    fitted = np.zeros((0, 3))
    residual = None
    while len(fitted) < options.max_order and excess[-1] > floor:
        cand = locate_scatterers(samples, search_box, step, 1, residual=residual, exclude=fitted)
        if len(cand) == 0:
            break
        try:
            res = fit_model(samples, np.vstack([fitted, cand]), options.fit)
        except (RankDeficiency, DomainError) as exc:
            log.info("order %d rejected: %s", len(fitted) + 1, exc)
            break
        if res.model_order > 1 and _min_sep(res.xi_hat) < 0.5 * samples.wavelength:
            log.info("order %d rejected: fitted points closer than lambda/2", res.model_order)
            break
        results.append(res)
        excess.append(_excess(samples, res.residual_rms))
        fitted = res.xi_hat
        ax, ay = _PairGeometry(samples).basis(fitted)
        residual = samples.scattered() - _design(ax, ay) @ res.p_hat.ravel()
    chosen = 0
    for n_sel in range(len(results)):
        if not any(_beats(excess[m], excess[n_sel], floor, options.drop_factor)
                   for m in range(n_sel + 1, len(results))):
            chosen = n_sel
            break
    out = results[chosen]
    diag = {"explored_orders": len(results) - 1, "excess_residuals": excess, "residual_floor": floor}
    return replace(out, diagnostics=diag)


def _min_sep(xi):
    if len(xi) < 2:
        return math.inf
    d = np.linalg.norm(xi[:, None] - xi[None], axis=-1)
    return float(np.min(d[~np.eye(len(xi), dtype=bool)]))
