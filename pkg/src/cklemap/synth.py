"""Synthetic experiment generation and mesh-refinement ladders.

Reference log-transmissivity fields are mean-zero Gaussian draws from the
Matern prior at the cell centers (plus an optional linear trend), heads
come from the forward solve, and measurements are sampled without
replacement from the cells. Everything is a pure function of
(mesh, spec, seed).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import fvtpfa
from .gpr import KernelParams, _cov_matrix
from .mesh import BoundaryCondition, BoundaryRule, Mesh, MeshSpec, ObservationSet, build_mesh


@dataclass(frozen=True)
class SynthSpec:
    kernel: KernelParams
    seed: int
    n_y_obs: int
    n_u_obs: int
    well_policy: str = "random-subset"   # "random-subset" | "all-cells"
    trend: tuple[float, float, float] | None = None  # c0 + cx*x + cy*y

    def __post_init__(self):
        if self.well_policy not in ("random-subset", "all-cells"):
            raise ValueError(f"unknown well_policy {self.well_policy!r}")
        if self.n_y_obs < 0 or self.n_u_obs < 0:
            raise ValueError("observation counts must be nonnegative")


def sample_gaussian_field(kernel: KernelParams, mesh: Mesh, seed) -> np.ndarray:
    """Mean-zero draw from the prior covariance at the cell centers.

    The dense covariance is Cholesky-factorized with a stabilizing jitter
    of max(nugget, 1e-10 sigma^2) on the diagonal; deterministic per seed.
    """
    cov = _cov_matrix(mesh.centers, mesh.centers, kernel, nugget_diag=False)
    jitter = max(kernel.nugget, 1e-10 * kernel.sigma**2)
    cov[np.diag_indices_from(cov)] += jitter
    L = np.linalg.cholesky(cov)
    rng = np.random.default_rng(seed)
    return L @ rng.standard_normal(mesh.n)


def _trend_values(mesh: Mesh, trend) -> np.ndarray:
    c0, cx, cy = trend
    return c0 + cx * mesh.centers[:, 0] + cy * mesh.centers[:, 1]


def generate_reference(mesh: Mesh, spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Reference (y, u): sampled field plus trend, then the forward solve."""
    y_ref = sample_gaussian_field(spec.kernel, mesh, spec.seed)
    if spec.trend is not None:
        y_ref = y_ref + _trend_values(mesh, spec.trend)
    u_ref = fvtpfa.solve_forward(fvtpfa.assemble(mesh, y_ref))
    return y_ref, u_ref


def sample_observations(field: np.ndarray, n: int, seed, policy: str = "random-subset",
                        candidates: np.ndarray | None = None) -> ObservationSet:
    """Uniform draw of n cells without replacement; indices sorted ascending."""
    field = np.asarray(field, dtype=np.float64)
    pool = np.arange(field.size) if candidates is None else np.asarray(candidates)
    if policy == "all-cells":
        idx = np.sort(pool)
    else:
        if n > pool.size:
            raise ValueError(f"cannot sample {n} observations from {pool.size} cells")
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(pool, size=n, replace=False))
    return ObservationSet(indices=idx, values=field[idx])


def refine_spec(spec: MeshSpec) -> MeshSpec:
    """Split every lattice cell into 4 equiareal subcells; boundary rule
    ranges double and keep their values (rules are constant per segment,
    so midpoint interpolation is the value itself)."""
    mask = None
    if spec.active_mask is not None:
        mask = np.repeat(np.repeat(spec.active_mask, 2, axis=0), 2, axis=1)
    rules = tuple(
        BoundaryRule(side=r.side, lo=2 * r.lo, hi=2 * r.hi + 1,
                     bc=BoundaryCondition(kind=r.bc.kind, value=r.bc.value))
        for r in spec.boundaries
    )
    return MeshSpec(nx=2 * spec.nx, ny=2 * spec.ny, dx=spec.dx / 2, dy=spec.dy / 2,
                    active_mask=mask, boundaries=rules)


def refine_mesh(mesh: Mesh, field: np.ndarray) -> tuple[Mesh, np.ndarray]:
    """Refined mesh plus the field interpolated to the subcell centers.

    Bilinear interpolation over the coarse cell centers (affine fields are
    reproduced exactly); subcells whose interpolation stencil touches an
    inactive coarse cell fall back to their parent's value.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.shape != (mesh.n,):
        raise ValueError(f"field has shape {field.shape}, expected ({mesh.n},)")
    fine = build_mesh(refine_spec(mesh.spec))
    spec = mesh.spec

    coarse = np.full((spec.ny, spec.nx), np.nan)
    coarse[mesh.cell_ij[:, 1], mesh.cell_ij[:, 0]] = field

    gx = fine.centers[:, 0] / spec.dx - 0.5
    gy = fine.centers[:, 1] / spec.dy - 0.5
    i0 = np.clip(np.floor(gx).astype(np.int64), 0, max(spec.nx - 2, 0))
    j0 = np.clip(np.floor(gy).astype(np.int64), 0, max(spec.ny - 2, 0))
    i1 = np.minimum(i0 + 1, spec.nx - 1)
    j1 = np.minimum(j0 + 1, spec.ny - 1)
    tx = gx - i0
    ty = gy - j0
    v00, v10 = coarse[j0, i0], coarse[j0, i1]
    v01, v11 = coarse[j1, i0], coarse[j1, i1]
    vals = ((1 - tx) * (1 - ty) * v00 + tx * (1 - ty) * v10
            + (1 - tx) * ty * v01 + tx * ty * v11)

    parent = mesh.index_of[fine.cell_ij[:, 1] // 2, fine.cell_ij[:, 0] // 2]
    bad = ~np.isfinite(vals)
    vals[bad] = field[parent[bad]]
    return fine, vals


# -- dataset files ----------------------------------------------------------

def write_field(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(f"{values.size}\n")
        for v in values:
            fh.write(f"{v:.17e}\n")


def read_field(path) -> np.ndarray:
    with open(path) as fh:
        n = int(fh.readline())
        vals = np.array([float(fh.readline()) for _ in range(n)])
    return vals


def write_observations(path, obs: ObservationSet) -> None:
    with open(path, "w") as fh:
        for i, v in zip(obs.indices, obs.values):
            fh.write(f"{i} {v:.17e}\n")


def read_observations(path) -> ObservationSet:
    idx, vals = [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            a, b = line.split()
            idx.append(int(a))
            vals.append(float(b))
    return ObservationSet(indices=np.array(idx, dtype=np.int64),
                          values=np.array(vals))


def generate_dataset(mesh: Mesh, spec: SynthSpec, out_dir) -> dict[str, str]:
    """Write y_ref/u_ref/obs files into out_dir; returns name -> path."""
    os.makedirs(out_dir, exist_ok=True)
    y_ref, u_ref = generate_reference(mesh, spec)
    obs_y = sample_observations(y_ref, spec.n_y_obs, (spec.seed, 1), spec.well_policy)
    obs_u = sample_observations(u_ref, spec.n_u_obs, (spec.seed, 2), spec.well_policy)
    files = {}
    for name, writer, payload in (
        ("y_ref.txt", write_field, y_ref),
        ("u_ref.txt", write_field, u_ref),
        ("obs_y.txt", write_observations, obs_y),
        ("obs_u.txt", write_observations, obs_u),
    ):
        path = os.path.join(out_dir, name)
        writer(path, payload)
        files[name] = path
    return files
