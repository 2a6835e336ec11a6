"""Scenario-driven command line front end.

Scenario files are INI-style text (``configparser``). Sections and keys::

    [mesh]      source = sphere | <path to .off/.obj>
                level = 2            ; sphere only
                base = 111           ; sphere only: icosahedron | <Fibonacci count>
                radius = 0.5         ; sphere radius, also the fit radius
                fit = sphere | none
    [material]  E, nu, rho_s, h, c1, c2
    [fluid]     rho = 1000, c = 1482
    [wave]      ka = 10  (or k = ...), diameter = 1.0, direction = 1 0 0, amplitude = 1
    [study]     kind = rigid | coupled | analytic
    [sampling]  radius = 5, count = auto | <int>, plane = xy
    [solver]    operators = auto | dense | compressed, epsilon = 1e-6, tol = 1e-8,
                restart = 100, maxiter = 1000,
                preconditioner = auto | nearfield | none

``ka`` is converted with ``k = ka / diameter``; for generated spheres the
diameter is ``2 * radius``.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import math
import resource
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analytic import SphereScatterParams, sphere_pressure
from .bem import BemDiscretisation, WaveContext, assemble_operators, evaluate_exterior_pressure
from .coupling import DenseLUPreconditioner, StructureAdmittance, build_transfer, solve_coupled
from .hmatrix import NearFieldPreconditioner, bem_cluster_tree, build_hmatrix, compress_bem
from .mesh import ControlMesh
from .meshio import (Sphere, geometry_error, l2_fit_to_target, load_mesh, make_sphere_control_mesh,
                     save_mesh, write_vtk)
from .shell import ShellMaterial, assemble_mass, assemble_stiffness, build_dynamic_operator

log = logging.getLogger(__name__)

DENSE_LIMIT = 2000


class ScenarioError(ValueError):
    pass


class RunError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# scenario


@dataclass
class Scenario:
    mesh_file: str | None = None
    sphere_level: int | None = 2
    sphere_base: str = "111"
    radius: float = 0.5
    fit: str = "sphere"
    material: ShellMaterial = field(default_factory=ShellMaterial)
    rho_f: float = 1000.0
    c: float = 1482.0
    k: float = 10.0
    diameter: float = 1.0
    direction: tuple[float, float, float] = (1.0, 0.0, 0.0)
    amplitude: float = 1.0
    study: str = "coupled"
    sample_radius: float = 5.0
    sample_count: int | None = None
    plane: str = "xy"
    operators: str = "auto"
    epsilon: float = 1e-6
    gmres_tol: float = 1e-8
    restart: int = 100
    maxiter: int = 1000
    preconditioner: str = "auto"
    seed: int = 0

    def __post_init__(self):
        if (self.mesh_file is None) == (self.sphere_level is None):
            raise ScenarioError("[mesh] needs exactly one source: a sphere level or a mesh file")
        if not self.k > 0:
            raise ScenarioError("[wave] ka must be positive")
        if self.study not in ("rigid", "coupled", "analytic"):
            raise ScenarioError(f"[study] kind: unknown study {self.study!r}")
        if self.fit not in ("sphere", "none"):
            raise ScenarioError(f"[mesh] fit: expected 'sphere' or 'none', got {self.fit!r}")
        if self.plane not in ("xy", "xz", "yz"):
            raise ScenarioError(f"[sampling] plane: unknown plane {self.plane!r}")
        if self.operators not in ("auto", "dense", "compressed"):
            raise ScenarioError(f"[solver] operators: unknown mode {self.operators!r}")
        if self.preconditioner not in ("auto", "nearfield", "none"):
            raise ScenarioError(f"[solver] preconditioner: unknown kind {self.preconditioner!r}")
        d = np.asarray(self.direction, dtype=float)
        if d.shape != (3,) or not np.linalg.norm(d) > 0:
            raise ScenarioError("[wave] direction must be three numbers, not all zero")
        self.direction = tuple(float(x) for x in d / np.linalg.norm(d))
        if self.sample_count is not None and self.sample_count < 1:
            raise ScenarioError("[sampling] count must be positive")

    @property
    def ka(self) -> float:
        return self.k * self.diameter

    @property
    def is_sphere(self) -> bool:
        return self.mesh_file is None or self.fit == "sphere"

    @property
    def has_oracle(self) -> bool:
        """Analytic series apply: sphere geometry, +x incidence, angles in a plane through x."""
        return self.is_sphere and np.allclose(self.direction, (1, 0, 0)) and self.plane in ("xy", "xz")

    def series_params(self) -> SphereScatterParams:
        m = self.material
        return SphereScatterParams(k=self.k, a=2 * self.radius, h=m.h, rho_f=self.rho_f, c=self.c,
                                   rho_s=m.rho_s, E=m.E, nu=m.nu, p0=self.amplitude)

    def n_samples(self) -> int:
        if self.sample_count is not None:
            return self.sample_count
        return max(360, math.ceil(12 * self.k * self.sample_radius))

    def sample_points(self):
        n = self.n_samples()
        theta = 2 * np.pi * np.arange(n) / n
        c, s, z = self.sample_radius * np.cos(theta), self.sample_radius * np.sin(theta), 0 * theta
        pts = {"xy": (c, s, z), "xz": (c, z, s), "yz": (z, c, s)}[self.plane]
        return theta, np.stack(pts, axis=1)


def _floats(text: str, key: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise ScenarioError(f"{key}: expected numbers, got {text!r}") from None


def parse_scenario(text: str) -> Scenario:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ScenarioError(f"malformed scenario: {err}") from None
    known = {"mesh", "material", "fluid", "wave", "study", "sampling", "solver"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ScenarioError(f"unknown section(s): {', '.join(sorted(unknown))}")

    def get(sec, key, conv=str, default=None):
        if not cp.has_option(sec, key):
            return default
        raw = cp.get(sec, key).strip()
        try:
            return conv(raw)
        except ValueError:
            raise ScenarioError(f"[{sec}] {key}: cannot parse {raw!r}") from None

    kw: dict = {}
    source = get("mesh", "source", default="sphere")
    if source == "sphere":
        kw["sphere_level"] = get("mesh", "level", int, 2)
        kw["sphere_base"] = get("mesh", "base", default="111")
    else:
        kw["mesh_file"] = source
        kw["sphere_level"] = None
    kw["radius"] = get("mesh", "radius", float, 0.5)
    kw["fit"] = get("mesh", "fit", default="sphere")

    mat = ShellMaterial()
    mkw = {name: get("material", name, float, getattr(mat, name)) for name in ("E", "nu", "rho_s", "h", "c1", "c2")}
    try:
        kw["material"] = ShellMaterial(**mkw)
    except ValueError as err:
        raise ScenarioError(f"[material] {err}") from None
    kw["rho_f"] = get("fluid", "rho", float, 1000.0)
    kw["c"] = get("fluid", "c", float, 1482.0)

    diameter = get("wave", "diameter", float, None)
    if diameter is None:
        diameter = 2 * kw["radius"] if source == "sphere" else 1.0
    kw["diameter"] = diameter
    ka, k = get("wave", "ka", float), get("wave", "k", float)
    if (ka is None) == (k is None):
        raise ScenarioError("[wave] give exactly one of ka or k")
    kw["k"] = k if k is not None else ka / diameter
    if cp.has_option("wave", "direction"):
        kw["direction"] = _floats(cp.get("wave", "direction"), "[wave] direction")
    kw["amplitude"] = get("wave", "amplitude", float, 1.0)
    kw["study"] = get("study", "kind", default="coupled")

    kw["sample_radius"] = get("sampling", "radius", float, 5.0)
    count = get("sampling", "count", default="auto")
    kw["sample_count"] = None if count == "auto" else get("sampling", "count", int)
    kw["plane"] = get("sampling", "plane", default="xy")

    kw["operators"] = get("solver", "operators", default="auto")
    kw["epsilon"] = get("solver", "epsilon", float, 1e-6)
    kw["gmres_tol"] = get("solver", "tol", float, 1e-8)
    kw["restart"] = get("solver", "restart", int, 100)
    kw["maxiter"] = get("solver", "maxiter", int, 1000)
    kw["preconditioner"] = get("solver", "preconditioner", default="auto")
    return Scenario(**kw)


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ScenarioError(f"{path}: {err.strerror}") from None
    return parse_scenario(text)


# --------------------------------------------------------------------------
# metrics


def compute_max_pointwise_error(numeric, oracle) -> float:
    """max_s ||p_h(s)| - |p(s)|| / |p(s)| over matched samples."""
    numeric = np.asarray(numeric)
    oracle = np.asarray(oracle)
    if numeric.shape != oracle.shape:
        raise ValueError(f"sample sets differ in shape: {numeric.shape} vs {oracle.shape}")
    ref = np.abs(oracle)
    zero = np.flatnonzero(ref == 0)
    if len(zero):
        raise ValueError(f"oracle pressure vanishes at sample {int(zero[0])}; relocate the samples")
    return float(np.max(np.abs(np.abs(numeric) - ref) / ref))


def elements_per_wavelength(disc: BemDiscretisation, k: float) -> float:
    """Wavelength over the mean limit-surface edge length (chord between vertex limit points)."""
    e = disc.mesh.edges
    x = disc.table.points
    h = float(np.mean(np.linalg.norm(x[e[:, 0]] - x[e[:, 1]], axis=1)))
    return 2 * np.pi / k / h


# --------------------------------------------------------------------------
# run


@dataclass
class ResultBundle:
    scenario: Scenario
    theta: np.ndarray
    pressure: np.ndarray
    oracle: np.ndarray | None = None
    max_error: float | None = None
    surface_p: np.ndarray | None = None  # at the vertex limit points
    surface_u: np.ndarray | None = None  # (V, 3)
    mesh: ControlMesh | None = None
    limit_points: np.ndarray | None = None
    iterations: int = 0
    residual: float = 0.0
    elements_per_wavelength: float | None = None
    timings: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)


def build_mesh(sc: Scenario) -> ControlMesh:
    if sc.mesh_file is not None:
        mesh = load_mesh(sc.mesh_file)
    else:
        base = sc.sphere_base if sc.sphere_base == "icosahedron" else int(sc.sphere_base)
        mesh = make_sphere_control_mesh(sc.sphere_level, sc.radius, base)
    if sc.fit == "sphere":
        mesh = l2_fit_to_target(mesh, Sphere(sc.radius))
    return mesh


class _Stage:
    """Times a stage and re-raises failures with the stage name attached."""

    def __init__(self, name, timings):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.name] = time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, (RunError, KeyboardInterrupt)):
            raise RunError(f"{self.name}: {type(exc).__name__}: {exc}") from exc
        return False


def _preconditioner(sc: Scenario, H, dense_ops: bool):
    """Dense LU for dense operators; near-field ILU for compressed rigid solves.

    The coupled operator H - G Y_C is not approximated by the near field of H,
    so ``auto`` leaves compressed coupled solves unpreconditioned.
    """
    kind = sc.preconditioner
    if kind == "auto":
        kind = "nearfield" if dense_ops or sc.study == "rigid" else "none"
    if kind == "none":
        return None
    return DenseLUPreconditioner(H) if dense_ops else NearFieldPreconditioner(H)


def run(sc: Scenario, output_dir=None, dense: bool | None = None, epsilon: float | None = None) -> ResultBundle:
    """Run a scenario; writes CSV, VTK and metadata when ``output_dir`` is given."""
    if epsilon is not None:
        sc.epsilon = epsilon
    if dense is not None:
        sc.operators = "dense" if dense else "compressed"
    timings: dict[str, float] = {}
    theta, pts = sc.sample_points()
    oracle = None
    if sc.has_oracle:
        with _Stage("analytic", timings):
            mode = {"rigid": "rigid", "coupled": "total", "analytic": "total"}[sc.study]
            oracle = sphere_pressure(sc.series_params(), sc.sample_radius, theta, mode)
    if sc.study == "analytic":
        if oracle is None:
            raise RunError("analytic study needs a sphere geometry with +x incidence")
        res = ResultBundle(sc, theta, oracle, timings=timings)
        if output_dir is not None:
            write_outputs(res, output_dir)
        return res

    with _Stage("mesh", timings):
        mesh = build_mesh(sc)
    if not sc.material.thin_shell_ok(sc.diameter / 2):
        log.warning("h / R = %.3g exceeds the thin-shell range", sc.material.h / (sc.diameter / 2))
    ctx = WaveContext(sc.k, c=sc.c, rho_f=sc.rho_f, amplitude=sc.amplitude, direction=sc.direction)
    with _Stage("discretise", timings):
        disc = BemDiscretisation(mesh)
    epw = elements_per_wavelength(disc, sc.k)
    if epw < 6:
        log.warning("only %.1f elements per wavelength (< 6); expect large errors", epw)

    dense_ops = sc.operators == "dense" or (sc.operators == "auto" and disc.n <= DENSE_LIMIT)
    stats: dict = {"vertices": mesh.n_vertices, "triangles": mesh.n_triangles, "operators":
                   "dense" if dense_ops else "compressed"}
    with _Stage("assemble", timings):
        if dense_ops:
            ops = assemble_operators(disc, ctx)
            H, G = ops.H, ops.G
        else:
            H, G = compress_bem(disc, sc.k, sc.epsilon)
            stats["compression_ratio_H"] = H.compression_ratio
            stats["compression_ratio_G"] = G.compression_ratio
    with _Stage("precondition", timings):
        P = _preconditioner(sc, H, dense_ops)
    stats["preconditioner"] = type(P).__name__ if P is not None else "none"

    yc = None
    if sc.study == "coupled":
        with _Stage("shell", timings):
            mat = sc.material
            K = assemble_stiffness(mesh, mat)
            M = assemble_mass(mesh, mat)
            shell = build_dynamic_operator(K, M, mat, ctx.omega)
            yc = StructureAdmittance(shell, build_transfer(mesh, disc.table), sc.rho_f, ctx.omega)
    with _Stage("solve", timings):
        st = solve_coupled(H, G, 0.0, yc, None, ctx.incident(disc.table.points), precond=P,
                           tol=sc.gmres_tol, restart=sc.restart, maxiter=sc.maxiter)
    with _Stage("evaluate", timings):
        p = evaluate_exterior_pressure(disc, ctx, st.p, st.q, pts)
        L = disc.limit_mask_matrix
        surface_p = L @ st.p
        surface_u = (L @ st.u.reshape(-1, 3)) if sc.study == "coupled" else np.zeros((mesh.n_vertices, 3))

    stats["peak_rss_mb"] = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    res = ResultBundle(
        sc, theta, p, oracle,
        max_error=compute_max_pointwise_error(p, oracle) if oracle is not None else None,
        surface_p=surface_p, surface_u=surface_u, mesh=mesh, limit_points=disc.table.points,
        iterations=st.iterations, residual=st.residual, elements_per_wavelength=epw,
        timings=timings, stats=stats,
    )
    if output_dir is not None:
        write_outputs(res, output_dir)
    return res


def write_profile_csv(path, theta, p) -> None:
    data = np.column_stack([theta, p.real, p.imag, np.abs(p)])
    np.savetxt(path, data, delimiter=",", header="theta,re_p,im_p,abs_p", comments="", fmt="%.17g")


def write_outputs(res: ResultBundle, output_dir) -> None:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_profile_csv(out / "profile.csv", res.theta, res.pressure)
    if res.oracle is not None and res.scenario.study != "analytic":
        write_profile_csv(out / "oracle.csv", res.theta, res.oracle)
    if res.mesh is not None:
        u = res.surface_u
        write_vtk(out / "surface.vtk", res.limit_points, res.mesh.triangles, {
            "re_p": res.surface_p.real, "abs_p": np.abs(res.surface_p),
            "abs_u": np.linalg.norm(np.abs(u), axis=1), "re_u": u.real,
        })
    sc = res.scenario
    lines = [f"loopfsi {__version__}", f"study = {sc.study}", f"k = {sc.k!r}", f"ka = {sc.ka!r}",
             f"samples = {len(res.theta)}", f"seed = {sc.seed}"]
    if res.mesh is not None:
        lines += [f"iterations = {res.iterations}", f"residual = {res.residual:.3e}",
                  f"elements_per_wavelength = {res.elements_per_wavelength:.3f}"]
    if res.max_error is not None:
        lines.append(f"max_pointwise_error = {res.max_error:.6e}")
    lines += [f"{k} = {v}" for k, v in res.stats.items()]
    lines += [f"time_{k} = {v:.3f}" for k, v in res.timings.items()]
    mat = asdict(sc.material)
    lines += [f"material_{k} = {v!r}" for k, v in mat.items()]
    (out / "metadata.txt").write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# command line


def _cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    sc.seed = args.seed
    np.random.seed(args.seed)
    res = run(sc, args.output_dir, dense=True if args.dense else None, epsilon=args.epsilon)
    msg = f"{sc.study}: ka={sc.ka:g}"
    if res.mesh is not None:
        msg += f", V={res.mesh.n_vertices}, {res.iterations} GMRES iterations"
    if res.max_error is not None:
        msg += f", max pointwise error {res.max_error:.4%}"
    print(msg)
    return 0


def _sphere_from_args(args) -> ControlMesh:
    base = args.base if args.base == "icosahedron" else int(args.base)
    return make_sphere_control_mesh(args.level, args.radius, base)


def _cmd_mesh(args) -> int:
    if args.mesh_cmd == "gen":
        mesh = _sphere_from_args(args)
        if args.fit:
            mesh = l2_fit_to_target(mesh, Sphere(args.radius))
        save_mesh(mesh, args.output)
        print(f"wrote {args.output}: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles")
    elif args.mesh_cmd == "fit":
        mesh = l2_fit_to_target(load_mesh(args.input), Sphere(args.radius))
        save_mesh(mesh, args.output)
        print(f"wrote {args.output}: geometry error {geometry_error(mesh, Sphere(args.radius)).percent:.3e}%")
    else:
        mesh = load_mesh(args.input)
        val = np.bincount(mesh.valence)
        print(f"vertices {mesh.n_vertices}\ntriangles {mesh.n_triangles}\nedges {mesh.n_edges}\n"
              f"genus {mesh.genus}")
        print("valence " + " ".join(f"{v}:{c}" for v, c in enumerate(val) if c))
        if args.radius is not None:
            print(f"geometry_error_percent {geometry_error(mesh, Sphere(args.radius)).percent:.6e}")
    return 0


def _cmd_analytic(args) -> int:
    if len(args.params) == 1 and Path(args.params[0]).is_file():
        sc = load_scenario(args.params[0])
    else:
        lines = {"wave": [], "study": ["kind = analytic"], "sampling": [], "material": [], "mesh": []}
        where = {"ka": "wave", "k": "wave", "r": "sampling", "count": "sampling", "h": "material",
                 "E": "material", "nu": "material", "rho_s": "material", "radius": "mesh"}
        for tok in args.params:
            key, sep, val = tok.partition("=")
            if not sep or key not in where:
                raise ScenarioError(f"analytic: expected key=value with key in {sorted(where)}, got {tok!r}")
            lines[where[key]].append(f"{'radius' if key == 'r' else key} = {val}")
        if not lines["wave"]:
            lines["wave"].append("ka = 10")
        text = "\n".join(f"[{s}]\n" + "\n".join(v) for s, v in lines.items())
        sc = parse_scenario(text)
    sc.study = "analytic"
    res = run(sc, args.output_dir)
    if args.output_dir is None:
        sys.stdout.write("theta,re_p,im_p,abs_p\n")
        for t, p in zip(res.theta, res.pressure):
            sys.stdout.write(f"{t:.17g},{p.real:.17g},{p.imag:.17g},{abs(p):.17g}\n")
    return 0


def _cmd_hmatrix_diag(args) -> int:
    sc = load_scenario(args.scenario)
    eps = args.epsilon if args.epsilon is not None else sc.epsilon
    disc = BemDiscretisation(build_mesh(sc))
    tree = bem_cluster_tree(disc)
    from .hmatrix import BemKernelOracle

    t0 = time.perf_counter()
    Gc, Hc = disc.corrections(sc.k)
    H = build_hmatrix(BemKernelOracle(disc, sc.k, "H"), tree, eps, correction=Hc)
    dt = time.perf_counter() - t0
    ranks = [b.rank for b in H.blocks if b.U is not None]
    print(f"n={disc.n} depth={tree.depth} blocks={len(H.blocks)} lowrank={len(ranks)} "
          f"max_rank={max(ranks, default=0)} ratio={H.compression_ratio:.4f} time={dt:.1f}s")
    if args.output_dir is not None:
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        H.write_block_csv(out / "blocks.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="loopfsi", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"loopfsi {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("--output-dir", default=None)
        p.add_argument("--epsilon", type=float, default=None, help="H-matrix tolerance")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("run", help="run a scenario file")
    p.add_argument("scenario")
    p.add_argument("--dense", action="store_true", help="force dense operators")
    common(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("mesh", help="generate, fit or inspect control meshes")
    msub = p.add_subparsers(dest="mesh_cmd", required=True)
    g = msub.add_parser("gen")
    g.add_argument("--level", type=int, default=1)
    g.add_argument("--base", default="111")
    g.add_argument("--radius", type=float, default=0.5)
    g.add_argument("--fit", action="store_true")
    g.add_argument("-o", "--output", required=True)
    f = msub.add_parser("fit")
    f.add_argument("input")
    f.add_argument("--radius", type=float, default=0.5)
    f.add_argument("-o", "--output", required=True)
    i = msub.add_parser("info")
    i.add_argument("input")
    i.add_argument("--radius", type=float, default=None, help="report geometry error against this sphere")
    p.set_defaults(func=_cmd_mesh)

    p = sub.add_parser("analytic", help="evaluate the sphere series (key=value params or a scenario)")
    p.add_argument("params", nargs="*")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=_cmd_analytic)

    p = sub.add_parser("hmatrix-diag", help="compress H for a scenario and dump the block structure")
    p.add_argument("scenario")
    common(p)
    p.set_defaults(func=_cmd_hmatrix_diag)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, RunError, OSError, ValueError) as err:
        print(f"loopfsi: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
