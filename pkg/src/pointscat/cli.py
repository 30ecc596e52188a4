"""Command-line front end: ``pointscat <subcommand> [flags]``.

JSON results go to stdout, diagnostics to stderr.  Exit codes: 0 success,
2 invalid input, 3 near resonance, 4 fit did not converge, 1 anything else.

Lengths are absolute coordinates in one common (arbitrary) length unit;
wave numbers are in inverse length units and energies in inverse length
squared.  Values that start with a minus sign must be attached with ``=``,
for example ``--x=-1,0,0``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import dataset_io as dio
from .greens import ComplexEnergy, DomainError
from .inverse import (
    CoverageError,
    LiftSpec,
    ReconstructOptions,
    SearchBox,
    backprojection_indicator,
    lift_to_halfspace,
    plane_grid,
    reconstruct,
    synthesize_plane_data,
)
from .krein import ConfigurationError, NearResonance, alpha_to_config, perturbed_green
from .scattering import (
    amplitude_matrix,
    krein_p,
    optical_theorem_residual,
    random_direction_pairs,
    reality_defect,
    reciprocity_defect,
    scattering_wave,
    sphere_quadrature,
    unitarity_defect,
)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_INVALID = 2
EXIT_RESONANCE = 3
EXIT_NOT_CONVERGED = 4

# PASS thresholds of `verify` (absolute)
THRESHOLDS = {
    "optical_residual": 1e-8,
    "unitarity_defect": 1e-8,
    "reciprocity_defect": 1e-12,
    "reality_defect": 1e-12,
}

log = logging.getLogger("pointscat")


class UsageError(ValueError):
    """Invalid flag value detected after parsing."""


def _vector(text: str, dim: int, name: str):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{name}: expected {dim} comma-separated numbers, got {text!r}") from None
    if len(vals) != dim or not all(math.isfinite(v) for v in vals):
        raise UsageError(f"{name}: expected {dim} finite comma-separated numbers, got {text!r}")
    return np.array(vals)


def _vector_list(text: str, dim: int, name: str):
    parts = [p for p in text.split(";") if p.strip()]
    if not parts:
        raise UsageError(f"{name}: empty point list")
    return np.array([_vector(p, dim, name) for p in parts])


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n")


def _complex_json(prefix: str, v: complex) -> dict:
    return {f"{prefix}_re": float(v.real), f"{prefix}_im": float(v.imag)}


def _energy(args) -> ComplexEnergy:
    if args.k is not None:
        if args.k == 0:
            raise UsageError("--k must be nonzero")
        return ComplexEnergy.on_shell(args.k)
    if args.z_re is None:
        raise UsageError("give either --k or --z-re/--z-im")
    return ComplexEnergy.from_z(complex(args.z_re, args.z_im))


def _positive(name, v):
    if not (v > 0 and math.isfinite(v)):
        raise UsageError(f"{name} must be positive, got {v}")
    return v


def _grid(args):
    if args.grid_count < 1:
        raise UsageError("--grid-count must be at least 1 (empty grid)")
    _positive("--grid-side", args.grid_side)
    return plane_grid(args.grid_side, args.grid_count, _vector(args.grid_center, 2, "--grid-center"))


# ----------------------------------------------------------------------------
# subcommands


def cmd_forward(args) -> int:
    config = dio.read_config(args.config)
    e = _energy(args)
    x = _vector(args.x, 3, "--x")
    y = _vector(args.y, 3, "--y")
    g = complex(perturbed_green(config, e, x, y))
    _emit(_complex_json("g", g))
    return EXIT_OK


def cmd_verify(args) -> int:
    config = dio.read_config(args.config)
    k = _positive("--k", args.k)
    if args.pairs < 1:
        raise UsageError("--pairs must be at least 1")
    quad = sphere_quadrature(args.quad_degree)
    rng = np.random.default_rng(args.seed)
    p = krein_p(config, k)
    pairs = random_direction_pairs(rng, args.pairs)
    optical = max(
        max(optical_theorem_residual(config, k, quad, wo, wi, p=p),
            optical_theorem_residual(config, k, quad, wi, wi, p=p))
        for wo, wi in pairs
    )
    fs = rng.standard_normal((len(quad), args.pairs)) + 1j * rng.standard_normal((len(quad), args.pairs))
    report = {
        "k": k,
        "quad_degree": quad.degree,
        "quad_kind": quad.kind,
        "pairs": args.pairs,
        "seed": args.seed,
        "optical_residual": optical,
        "unitarity_defect": unitarity_defect(config, k, quad, fs, p=p),
        "reciprocity_defect": reciprocity_defect(config, k, pairs, p=p),
        "reality_defect": reality_defect(config, k, pairs),
        "thresholds": THRESHOLDS,
    }
    report["status"] = {name: ("PASS" if report[name] < tol else "FAIL") for name, tol in THRESHOLDS.items()}
    _emit(report)
    return EXIT_OK


def cmd_synth(args) -> int:
    config = dio.read_config(args.config) if args.config else None
    k0 = _positive("--k0", args.k0)
    grid = _grid(args)
    sources = _vector_list(args.sources, 2, "--sources") if args.sources else None
    if args.noise < 0:
        raise UsageError("--noise must be nonnegative")
    sigma = args.noise
    if args.noise_relative and sigma > 0:
        clean = synthesize_plane_data(config, k0, grid, sources=sources)
        sigma = sigma * float(np.median(np.abs(clean.g)))
    samples = synthesize_plane_data(config, k0, grid, sigma, args.seed, sources=sources)
    dio.write_samples(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}", file=sys.stderr)
    _emit({"path": str(args.out), "pairs": len(samples), "k0": k0, "noise_sigma": sigma, "seed": args.seed})
    return EXIT_OK


def cmd_lift(args) -> int:
    samples = dio.read_samples(args.samples)
    k0 = samples.k0
    default = LiftSpec.default(k0)
    spec = LiftSpec(
        default.radius if args.radius is None else args.radius,
        default.step if args.step is None else args.step,
        default.taper_width if args.taper is None else args.taper,
    )
    s = _vector(args.s, 3, "--s")
    y = _vector(args.y, 2, "--y")
    w = lift_to_halfspace(samples, spec, s, y)
    out = {"radius": spec.radius, "step": spec.step, "taper": spec.taper_width, **_complex_json("w", w)}
    if args.config:
        config = dio.read_config(args.config)
        ref = complex(perturbed_green(config, ComplexEnergy.on_shell(k0), s, np.r_[y, 0.0]))
        out.update(_complex_json("g", ref))
        out["rel_error"] = abs(w - ref) / abs(ref)
    _emit(out)
    return EXIT_OK


def cmd_invert(args) -> int:
    samples = dio.read_samples(args.samples)
    box = SearchBox.parse(args.box)
    if args.max_order < 0:
        raise UsageError("--max-order must be nonnegative")
    opts = ReconstructOptions(grid_step=args.step, max_order=args.max_order)
    result = reconstruct(samples, box, opts)
    payload = dio.result_payload(result)
    if args.out:
        dio.write_result(args.out, result)
        print(f"wrote result (order {result.model_order}) to {args.out}", file=sys.stderr)
    _emit(payload)
    if not result.converged:
        print("fit did not converge; result flagged", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _fibonacci_sphere(count: int):
    i = np.arange(count) + 0.5
    polar = np.arccos(1 - 2 * i / count)
    az = math.pi * (1 + math.sqrt(5)) * i
    return np.stack([np.sin(polar) * np.cos(az), np.sin(polar) * np.sin(az), np.cos(polar)], axis=1)


def cmd_plotdata(args) -> int:
    writer = csv.writer(sys.stdout, lineterminator="\n")
    if args.what == "amplitude":
        config = dio.read_config(args.config)
        k = _positive("--k", args.k)
        if args.directions < 1:
            raise UsageError("--directions must be at least 1 (empty grid)")
        dirs = _fibonacci_sphere(args.directions)
        omega = _vector(args.omega, 3, "--omega")
        a = amplitude_matrix(config, k, dirs, omega[None, :])[:, 0]
        writer.writerow(["ox", "oy", "oz", "a_re", "a_im"])
        for d, v in zip(dirs, a):
            writer.writerow([repr(float(c)) for c in d] + [repr(float(v.real)), repr(float(v.imag))])
    elif args.what == "wave":
        config = dio.read_config(args.config)
        k = _positive("--k", args.k)
        pts = _grid(args)
        pts = np.concatenate([pts, np.full((len(pts), 1), args.height)], axis=1)
        omega = _vector(args.omega, 3, "--omega")
        psi = scattering_wave(config, k, omega, pts)
        writer.writerow(["x1", "x2", "x3", "psi_re", "psi_im"])
        for p, v in zip(pts, psi):
            writer.writerow([repr(float(c)) for c in p] + [repr(float(v.real)), repr(float(v.imag))])
    else:
        if args.samples:
            samples = dio.read_samples(args.samples)
        else:
            if not args.config:
                raise UsageError("indicator needs --samples or --config")
            samples = synthesize_plane_data(dio.read_config(args.config), _positive("--k", args.k), _grid(args))
        if not args.box:
            raise UsageError("indicator needs --box")
        box = SearchBox.parse(args.box)
        step = _positive("--step", args.step if args.step is not None else samples.wavelength / 4)
        axes = box.axes(step)
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        if len(mesh) == 0:
            raise UsageError("empty indicator grid")
        vals = backprojection_indicator(samples, mesh)
        writer.writerow(["x1", "x2", "x3", "indicator"])
        for p, v in zip(mesh, vals):
            writer.writerow([repr(float(c)) for c in p] + [repr(float(v))])
    return EXIT_OK


def cmd_alpha_to_theta(args) -> int:
    xi = _vector_list(args.xi, 3, "--xi")
    alpha = _vector(args.alpha, len(xi), "--alpha")
    config = alpha_to_config(alpha, xi, half_space=args.half_space)
    out = {"xi": config.xi.tolist(), **dio.theta_payload(config.tan_half_theta)}
    if args.out:
        dio.write_config(args.out, config)
    _emit(out)
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def _add_energy(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--k", type=float, help="real wave number k (1/length); uses z = k^2 with root k")
    g.add_argument("--z-re", type=float, help="real part of the complex energy z (1/length^2)")
    p.add_argument("--z-im", type=float, default=0.0, help="imaginary part of z (1/length^2), default 0")


def _add_grid(p, side_default=None, count_default=None):
    p.add_argument("--grid-side", type=float, default=side_default, required=side_default is None,
                   help="side of the square plane grid (length)")
    p.add_argument("--grid-count", type=int, default=count_default, required=count_default is None,
                   help="points per grid side (count)")
    p.add_argument("--grid-center", default="0,0", help="grid center 'a,b' on the plane (length)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointscat",
        description="Forward and inverse scattering by generalized point interactions in R^3.",
        epilog="exit codes: 0 ok, 2 invalid input, 3 near resonance, 4 not converged, 1 other. "
               "Attach negative values with '=', e.g. --x=-1,0,0.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("forward", help="perturbed Green's function G(z, x, y)")
    p.add_argument("--config", required=True, help="configuration file (.pscat.json)")
    _add_energy(p)
    p.add_argument("--x", required=True, help="first point 'a,b,c' (length)")
    p.add_argument("--y", required=True, help="second point 'a,b,c' (length)")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("verify", help="optical theorem, unitarity, reciprocity and reality defects")
    p.add_argument("--config", required=True, help="configuration file (.pscat.json)")
    p.add_argument("--k", type=float, required=True, help="wave number k > 0 (1/length)")
    p.add_argument("--quad-degree", type=int, default=24, help="sphere quadrature degree L (dimensionless)")
    p.add_argument("--pairs", type=int, default=16, help="random direction pairs and test functions (count)")
    p.add_argument("--seed", type=int, default=0, help="random seed (integer)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("synth", help="synthesize plane data G(k0^2, x, y) on a grid")
    p.add_argument("--config", help="configuration file; omit for free-field data")
    p.add_argument("--k0", type=float, required=True, help="wave number k0 > 0 (1/length)")
    _add_grid(p)
    p.add_argument("--sources", help="source points 'a,b;c,d;...' (length); default: the grid")
    p.add_argument("--noise", type=float, default=0.0, help="noise std per real component (units of G)")
    p.add_argument("--noise-relative", action="store_true",
                   help="interpret --noise as a fraction of the median |G| (dimensionless)")
    p.add_argument("--seed", type=int, default=0, help="noise seed (integer)")
    p.add_argument("--out", required=True, help="output samples file (.pscat.json)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("lift", help="lift plane data to a point s above the plane")
    p.add_argument("--samples", required=True, help="samples file (.pscat.json)")
    p.add_argument("--s", required=True, help="target point 'a,b,c' with c > 0 (length)")
    p.add_argument("--y", required=True, help="source point 'a,b' on the plane (length)")
    p.add_argument("--radius", type=float, help="truncation radius R (length), default 60/k0")
    p.add_argument("--step", type=float, help="quadrature step h (length), default pi/(8 k0)")
    p.add_argument("--taper", type=float, help="taper width (length), default 20/k0")
    p.add_argument("--config", help="configuration file; adds the direct value and relative error")
    p.set_defaults(func=cmd_lift)

    p = sub.add_parser("invert", help="reconstruct positions and tan(theta/2) from plane data")
    p.add_argument("--samples", required=True, help="samples file (.pscat.json)")
    p.add_argument("--box", required=True, help="search box 'x0,x1,y0,y1,z0,z1' with z1 < 0 (length)")
    p.add_argument("--step", type=float, help="indicator scan step (length), default wavelength/4")
    p.add_argument("--max-order", type=int, default=4, help="largest model order tried (count)")
    p.add_argument("--out", help="output result file (.pscat.json)")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("plotdata", help="CSV tables for figures")
    p.add_argument("--what", choices=("amplitude", "wave", "indicator"), required=True, help="table to emit")
    p.add_argument("--config", help="configuration file (.pscat.json)")
    p.add_argument("--samples", help="samples file for the indicator (.pscat.json)")
    p.add_argument("--k", type=float, help="wave number k > 0 (1/length)")
    p.add_argument("--omega", default="0,0,1", help="incident direction 'a,b,c' (unit vector)")
    p.add_argument("--directions", type=int, default=64, help="outgoing directions for amplitude (count)")
    _add_grid(p, 10.0, 21)
    p.add_argument("--height", type=float, default=0.0, help="x3 of the wave slice (length)")
    p.add_argument("--box", help="indicator box 'x0,x1,y0,y1,z0,z1' (length)")
    p.add_argument("--step", type=float, help="indicator grid step (length), default wavelength/4")
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("alpha-to-theta", help="local strengths alpha to tan(theta/2) and theta")
    p.add_argument("--alpha", required=True, help="strengths 'a1,a2,...' (1/length)")
    p.add_argument("--xi", required=True, help="positions 'x,y,z;x,y,z;...' (length)")
    p.add_argument("--half-space", action="store_true", help="tag the configuration as lying in x3 < 0")
    p.add_argument("--out", help="also write the configuration file (.pscat.json)")
    p.set_defaults(func=cmd_alpha_to_theta)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        # a single BLAS thread keeps every output bit-identical whatever the host
        with threadpool_limits(limits=1, user_api="blas"):
            return args.func(args)
    except NearResonance as exc:
        print(f"near resonance: {exc}", file=sys.stderr)
        return EXIT_RESONANCE
    except (UsageError, dio.SchemaError, ConfigurationError, DomainError, CoverageError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        print(f"unexpected failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
