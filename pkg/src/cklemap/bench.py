"""Scaling harness over a mesh-refinement ladder.

Runs the estimators on the same synthetic datasets at successive
refinement levels (4x cells per level), records wall time / iterations /
errors per (level, method, replicate) row, and fits log-log power laws
time ~ a * N^s per method. Rows run sequentially so timings are
uncontended; datasets are paired across methods within a replicate.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import ckle, fvtpfa, gpr, inverse, synth
from .mesh import Mesh, MeshSpec, build_mesh

CSV_FIELDS = ("N", "method", "replicate", "time_s", "iterations",
              "rel_l2", "abs_linf", "status")


@dataclass(frozen=True)
class BenchConfig:
    levels: int = 3
    replicates: int = 1
    methods: tuple[str, ...] = ("map", "cklemap", "cklemap-accel")
    time_budget_s: float | None = None
    rtol: float = 1e-8
    max_terms: int | None = 1000
    fit_gp: bool = True   # refit hyperparameters per dataset vs use true kernel

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be at least 1")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")


def _dataset_ladder(mesh0: Mesh, spec: synth.SynthSpec, levels: int):
    """Yield (mesh, y_ref) per level; the base draw is refined upward."""
    mesh = mesh0
    y = synth.sample_gaussian_field(spec.kernel, mesh, spec.seed)
    if spec.trend is not None:
        y = y + synth._trend_values(mesh, spec.trend)
    for level in range(levels):
        yield mesh, y
        if level + 1 < levels:
            mesh, y = synth.refine_mesh(mesh, y)


def run_scaling(mesh_spec: MeshSpec, synth_spec: synth.SynthSpec,
                inv_config: inverse.InverseConfig, bench_config: BenchConfig) -> list[dict]:
    """One row per (level, method, replicate). Failures and timeouts are
    recorded in the row status instead of aborting the sweep."""
    rows = []
    base_mesh = build_mesh(mesh_spec)
    for rep in range(bench_config.replicates):
        rep_spec = replace(synth_spec, seed=synth_spec.seed + rep)
        for level, (mesh, y_ref) in enumerate(
                _dataset_ladder(base_mesh, rep_spec, bench_config.levels)):
            u_ref = fvtpfa.solve_forward(fvtpfa.assemble(mesh, y_ref))
            obs_y = synth.sample_observations(
                y_ref, rep_spec.n_y_obs, (rep_spec.seed, level, 1), rep_spec.well_policy)
            obs_u = synth.sample_observations(
                u_ref, rep_spec.n_u_obs, (rep_spec.seed, level, 2), rep_spec.well_policy)

            if bench_config.fit_gp:
                params = gpr.fit_hyperparameters(mesh.centers[obs_y.indices], obs_y.values)
            else:
                params = replace(rep_spec.kernel,
                                 nugget=gpr.default_nugget(obs_y.values))
            posterior = gpr.condition(params, obs_y, mesh)
            basis = ckle.build_basis(posterior, rtol=bench_config.rtol,
                                     max_terms=bench_config.max_terms)

            for method in bench_config.methods:
                cfg = replace(inv_config, method=method,
                              time_budget_s=bench_config.time_budget_s)
                row = {"N": mesh.n, "method": method, "replicate": rep}
                try:
                    report = inverse.invert(cfg, mesh, obs_u, obs_y,
                                            basis=basis, reference=y_ref)
                    row.update(time_s=report.lsq.wall_time,
                               iterations=report.lsq.iterations,
                               rel_l2=report.rel_l2_error,
                               abs_linf=report.abs_linf_error,
                               status=report.lsq.status)
                except Exception as err:  # keep sweeping; the row records the failure
                    row.update(time_s=math.nan, iterations=0, rel_l2=math.nan,
                               abs_linf=math.nan, status=f"error: {err}")
                rows.append(row)
    return rows


def fit_power_law(points) -> tuple[float, float]:
    """Least-squares fit of time = a * N^s through (N, time) pairs."""
    pts = [(float(n), float(t)) for n, t in points]
    if len(pts) < 2:
        raise ValueError("need at least two points to fit a power law")
    if any(n <= 0 or t <= 0 for n, t in pts):
        raise ValueError("power-law fit requires positive sizes and times")
    logn = np.log([n for n, _ in pts])
    logt = np.log([t for _, t in pts])
    slope, intercept = np.polyfit(logn, logt, 1)
    return float(np.exp(intercept)), float(slope)


def summarize_fits(rows: list[dict]) -> dict:
    """Per-method power-law fit from median times over replicates.

    Timed-out levels are excluded from the fit and re-estimated from it;
    those extrapolations are reported under "extrapolated" and flagged.
    """
    out = {}
    methods = sorted({r["method"] for r in rows})
    for method in methods:
        mrows = [r for r in rows if r["method"] == method]
        sizes = sorted({r["N"] for r in mrows})
        fit_pts, timed_out = [], []
        for n in sizes:
            ok = [r["time_s"] for r in mrows
                  if r["N"] == n and r["status"] not in ("timeout",)
                  and not str(r["status"]).startswith("error")
                  and np.isfinite(r["time_s"])]
            if ok:
                fit_pts.append((n, float(np.median(ok))))
            else:
                timed_out.append(n)
        entry = {"points": [{"N": n, "median_time_s": t} for n, t in fit_pts]}
        if len(fit_pts) >= 2:
            a, s = fit_power_law(fit_pts)
            entry.update(coefficient=a, exponent=s)
            entry["extrapolated"] = [
                {"N": n, "time_s_estimate": a * n**s, "flag": "extrapolated"}
                for n in timed_out
            ]
        out[method] = entry
    return out


def write_scaling_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in CSV_FIELDS})


def read_scaling_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_fit_json(fits: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(fits, fh, indent=2, sort_keys=True)
        fh.write("\n")
