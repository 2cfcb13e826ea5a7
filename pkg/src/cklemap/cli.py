"""Command-line orchestration.

Subcommands: generate, fit-gp, build-basis, invert, bench. Each takes a
JSON config (strict schema: unknown keys are rejected) plus an output
directory; datasets and reports are plain text/JSON so reruns with the
same config and seed are byte-identical apart from recorded wall times.

Exit codes: 0 success, 1 input error, 2 non-convergence. The environment
variable CKLEMAP_THREADS caps BLAS/OpenMP parallelism; it must take effect
before numpy loads, so heavy imports happen inside main().
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NOCONV = 2

_TOP_KEYS = {"mesh", "synth", "gp", "ckle", "inverse", "bench"}
_SYNTH_KEYS = {"kernel", "seed", "n_y_obs", "n_u_obs", "well_policy", "trend"}
_KERNEL_KEYS = {"sigma", "length", "nugget"}
_GP_KEYS = {"nugget_scale", "fixed"}
_CKLE_KEYS = {"rtol", "max_terms"}
_INVERSE_KEYS = {"gamma", "ftol", "gtol", "xtol", "max_iterations",
                 "initial_guess", "weight_u", "weight_y"}
_BENCH_KEYS = {"levels", "replicates", "methods", "time_budget_s", "rtol",
               "max_terms", "fit_gp"}


class ConfigError(ValueError):
    pass


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{where}': {sorted(unknown)}")


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"'{where}' is missing required key '{key}'")
    return section[key]


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"malformed JSON in {path} (line {err.lineno}): {err.msg}") from err
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(cfg, _TOP_KEYS, "config")
    for name, keys in (("synth", _SYNTH_KEYS), ("gp", _GP_KEYS), ("ckle", _CKLE_KEYS),
                       ("inverse", _INVERSE_KEYS), ("bench", _BENCH_KEYS)):
        if name in cfg:
            _check_keys(cfg[name], keys, name)
    if "synth" in cfg and "kernel" in cfg["synth"]:
        _check_keys(cfg["synth"]["kernel"], _KERNEL_KEYS, "synth.kernel")
    if "gp" in cfg and isinstance(cfg["gp"].get("fixed"), dict):
        _check_keys(cfg["gp"]["fixed"], _KERNEL_KEYS, "gp.fixed")
    return cfg


def _mesh_spec(cfg: dict, base_dir: str):
    from .mesh import MeshError, spec_from_dict

    try:
        return spec_from_dict(_require(cfg, "mesh", "config"), base_dir)
    except MeshError as err:
        raise ConfigError(str(err)) from err


def _synth_spec(cfg: dict, seed_override=None):
    from .gpr import KernelParams
    from .synth import SynthSpec

    sc = _require(cfg, "synth", "config")
    kd = _require(sc, "kernel", "synth")
    kernel = KernelParams(sigma=float(_require(kd, "sigma", "synth.kernel")),
                          length=float(_require(kd, "length", "synth.kernel")),
                          nugget=float(kd.get("nugget", 0.0)))
    trend = sc.get("trend")
    return SynthSpec(kernel=kernel,
                     seed=int(seed_override if seed_override is not None
                              else _require(sc, "seed", "synth")),
                     n_y_obs=int(_require(sc, "n_y_obs", "synth")),
                     n_u_obs=int(_require(sc, "n_u_obs", "synth")),
                     well_policy=sc.get("well_policy", "random-subset"),
                     trend=tuple(trend) if trend is not None else None)


def _inverse_config(cfg: dict, method: str | None = None, gamma=None):
    from .inverse import InverseConfig

    ic = dict(cfg.get("inverse", {}))
    if method is not None:
        ic["method"] = method
    if gamma is not None:
        ic["gamma"] = gamma
    try:
        return InverseConfig(**ic)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad 'inverse' section: {err}") from err


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _write_manifest(out_dir: str, command: str, seed, files: list[str]) -> None:
    manifest = {
        "command": command,
        "seed": seed,
        "files": {name: _sha256(os.path.join(out_dir, name)) for name in sorted(files)},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_generate(args) -> int:
    from .mesh import build_mesh, spec_to_dict, write_mask_raster
    from .synth import generate_dataset

    cfg = load_config(args.config)
    spec = _mesh_spec(cfg, os.path.dirname(os.path.abspath(args.config)))
    sspec = _synth_spec(cfg, args.seed)
    mesh = build_mesh(spec)
    os.makedirs(args.out, exist_ok=True)

    mask_name = "mask.txt" if spec.active_mask is not None else None
    if mask_name:
        write_mask_raster(os.path.join(args.out, mask_name), spec.active_mask)
    _write_json(os.path.join(args.out, "mesh.json"), spec_to_dict(spec, mask_name))

    files = generate_dataset(mesh, sspec, args.out)
    names = ["mesh.json"] + sorted(os.path.basename(p) for p in files)
    if mask_name:
        names.append(mask_name)
    _write_manifest(args.out, "generate", sspec.seed, names)
    print(f"wrote dataset ({mesh.n} cells, {sspec.n_y_obs} y-obs, "
          f"{sspec.n_u_obs} u-obs) to {args.out}")
    return EXIT_OK


def _load_dataset(data_dir: str):
    from .mesh import build_mesh, spec_from_dict
    from .synth import read_field, read_observations

    mesh_path = os.path.join(data_dir, "mesh.json")
    if not os.path.exists(mesh_path):
        raise ConfigError(f"dataset is missing {mesh_path}")
    with open(mesh_path) as fh:
        mesh = build_mesh(spec_from_dict(json.load(fh), data_dir))
    obs_y = read_observations(os.path.join(data_dir, "obs_y.txt"))
    obs_u = read_observations(os.path.join(data_dir, "obs_u.txt"))
    obs_y.check_against(mesh.n)
    obs_u.check_against(mesh.n)
    y_ref = u_ref = None
    if os.path.exists(os.path.join(data_dir, "y_ref.txt")):
        y_ref = read_field(os.path.join(data_dir, "y_ref.txt"))
        if y_ref.size != mesh.n:
            raise ConfigError("y_ref.txt length disagrees with the mesh")
    if os.path.exists(os.path.join(data_dir, "u_ref.txt")):
        u_ref = read_field(os.path.join(data_dir, "u_ref.txt"))
    return mesh, obs_u, obs_y, y_ref, u_ref


def _fit_gp(cfg: dict, mesh, obs_y):
    from . import gpr

    gp_cfg = cfg.get("gp", {})
    fixed = gp_cfg.get("fixed")
    if fixed:
        return gpr.KernelParams(sigma=float(_require(fixed, "sigma", "gp.fixed")),
                                length=float(_require(fixed, "length", "gp.fixed")),
                                nugget=float(fixed.get("nugget",
                                                       gpr.default_nugget(obs_y.values))))
    nugget = gpr.default_nugget(obs_y.values, float(gp_cfg.get("nugget_scale", 1e-8)))
    return gpr.fit_hyperparameters(mesh.centers[obs_y.indices], obs_y.values,
                                   nugget=nugget)


def _build_basis(cfg: dict, params, mesh, obs_y, rtol=None, n_y=None):
    from . import ckle, gpr

    ckle_cfg = cfg.get("ckle", {})
    posterior = gpr.condition(params, obs_y, mesh)
    if n_y is not None:
        return ckle.build_basis(posterior, n_y=n_y)
    rtol = rtol if rtol is not None else float(ckle_cfg.get("rtol", 1e-8))
    max_terms = ckle_cfg.get("max_terms", 1000)
    return ckle.build_basis(posterior, rtol=rtol,
                            max_terms=int(max_terms) if max_terms is not None else None)


def cmd_fit_gp(args) -> int:
    cfg = load_config(args.config)
    mesh, _, obs_y, _, _ = _load_dataset(args.data)
    params = _fit_gp(cfg, mesh, obs_y)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "gp.json"),
                {"sigma": params.sigma, "length": params.length, "nugget": params.nugget})
    print(f"fitted kernel: sigma={params.sigma:.6g} length={params.length:.6g} "
          f"nugget={params.nugget:.3g}")
    return EXIT_OK


def cmd_build_basis(args) -> int:
    from .ckle import save_basis

    cfg = load_config(args.config)
    mesh, _, obs_y, _, _ = _load_dataset(args.data)
    params = _fit_gp(cfg, mesh, obs_y)
    basis = _build_basis(cfg, params, mesh, obs_y, rtol=args.rtol, n_y=args.ny)
    os.makedirs(args.out, exist_ok=True)
    save_basis(basis, os.path.join(args.out, "basis.txt"))
    _write_json(os.path.join(args.out, "basis.json"),
                {"n": basis.n, "n_y": basis.n_terms,
                 "rtol_achieved": basis.rtol_achieved})
    print(f"basis: {basis.n_terms} terms, tail ratio {basis.rtol_achieved:.3e}")
    return EXIT_OK


def cmd_invert(args) -> int:
    from .inverse import invert
    from .synth import write_field

    cfg = load_config(args.config)
    mesh, obs_u, obs_y, y_ref, _ = _load_dataset(args.data)
    params = _fit_gp(cfg, mesh, obs_y)
    basis = _build_basis(cfg, params, mesh, obs_y, rtol=args.rtol, n_y=args.ny)
    inv_cfg = _inverse_config(cfg, method=args.method, gamma=args.gamma)

    report = invert(inv_cfg, mesh, obs_u, obs_y, basis=basis, reference=y_ref)
    os.makedirs(args.out, exist_ok=True)
    write_field(os.path.join(args.out, "y_hat.txt"), report.y_hat)
    write_field(os.path.join(args.out, "u_hat.txt"), report.u_hat)
    payload = {
        "method": report.method,
        "gamma": report.gamma,
        "n_y": basis.n_terms,
        "rtol_achieved": basis.rtol_achieved,
        "n_unknowns": report.n_unknowns,
        "iterations": report.lsq.iterations,
        "status": report.lsq.status,
        "final_cost": report.lsq.cost_history[-1],
        "wall_time_s": report.lsq.wall_time,
        "rel_l2": report.rel_l2_error,
        "abs_linf": report.abs_linf_error,
    }
    _write_json(os.path.join(args.out, "report.json"), payload)
    err = "" if report.rel_l2_error is None else f" rel_l2={report.rel_l2_error:.4f}"
    print(f"{report.method}: {report.lsq.status} after {report.lsq.iterations} "
          f"iterations ({report.lsq.wall_time:.2f}s){err}")
    return EXIT_OK if report.lsq.status.startswith("converged") else EXIT_NOCONV


def cmd_bench(args) -> int:
    from . import bench

    cfg = load_config(args.config)
    spec = _mesh_spec(cfg, os.path.dirname(os.path.abspath(args.config)))
    sspec = _synth_spec(cfg, args.seed)
    inv_cfg = _inverse_config(cfg)
    bc = dict(cfg.get("bench", {}))
    if args.time_budget_s is not None:
        bc["time_budget_s"] = args.time_budget_s
    if "methods" in bc:
        bc["methods"] = tuple(bc["methods"])
    try:
        bench_cfg = bench.BenchConfig(**bc)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad 'bench' section: {err}") from err

    rows = bench.run_scaling(spec, sspec, inv_cfg, bench_cfg)
    os.makedirs(args.out, exist_ok=True)
    bench.write_scaling_csv(rows, os.path.join(args.out, "scaling.csv"))
    fits = bench.summarize_fits(rows)
    bench.write_fit_json(fits, os.path.join(args.out, "scaling_fit.json"))
    for method, entry in fits.items():
        if "exponent" in entry:
            print(f"{method}: time ~ {entry['coefficient']:.3g} * N^{entry['exponent']:.2f}")
        else:
            print(f"{method}: insufficient completed rows for a fit")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cklemap",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False):
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", required=True, help="output directory")
        # seed overrides synth.seed; inert for the dataset-driven commands,
        # which are deterministic given the dataset
        p.add_argument("--seed", type=int, default=None, help="override synth.seed")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit-gp", help="fit kernel hyperparameters to the y observations")
    common(p, data=True)
    p.set_defaults(func=cmd_fit_gp)

    p = sub.add_parser("build-basis", help="condition the field model and export the basis")
    common(p, data=True)
    p.add_argument("--rtol", type=float, default=None)
    p.add_argument("--ny", type=int, default=None)
    p.set_defaults(func=cmd_build_basis)

    p = sub.add_parser("invert", help="estimate the log-transmissivity field")
    common(p, data=True)
    p.add_argument("--method", required=True,
                   choices=["map", "cklemap", "cklemap-accel"])
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--rtol", type=float, default=None)
    p.add_argument("--ny", type=int, default=None)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("bench", help="scaling sweep over a refinement ladder")
    common(p)
    p.add_argument("--time-budget-s", type=float, default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def _cap_threads() -> None:
    cap = os.environ.get("CKLEMAP_THREADS")
    if cap:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMBA_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def main(argv=None) -> int:
    _cap_threads()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
