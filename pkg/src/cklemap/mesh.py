"""Structured finite-volume mesh with an active-cell mask.

The domain is a rectangular lattice of ``nx * ny`` quadrilateral cells of
size ``dx * dy``; an optional boolean mask carves out an irregular active
region. Active cells are numbered row-major (outer loop over rows ``iy``,
inner over columns ``ix``), and all field vectors follow that ordering.
Fields are plain 1-D float arrays of length ``Mesh.n``.
"""

from __future__ import annotations

import os
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

DIRICHLET = 0
NEUMANN = 1

_SIDES = ("left", "right", "bottom", "top")


class MeshError(ValueError):
    """Invalid mesh specification (disconnected mask, unmatched boundary face...)."""


@dataclass(frozen=True)
class BoundaryCondition:
    """Prescribed head (dirichlet) or outward-positive flux density (neumann)."""

    kind: str  # "dirichlet" | "neumann"
    value: float

    def __post_init__(self):
        if self.kind not in ("dirichlet", "neumann"):
            raise MeshError(f"unknown boundary kind {self.kind!r}")
        if not np.isfinite(self.value):
            raise MeshError("boundary value must be finite")


@dataclass(frozen=True)
class BoundaryRule:
    """Selects exterior faces by outward direction and lattice range.

    ``side`` is the direction of the face's outward normal ("left" = -x,
    "right" = +x, "bottom" = -y, "top" = +y). ``lo..hi`` (inclusive) spans
    the row index ``iy`` for left/right faces, the column index ``ix`` for
    bottom/top faces. Faces exposed by mask holes match like edge faces.
    """

    side: str
    lo: int
    hi: int
    bc: BoundaryCondition

    def __post_init__(self):
        if self.side not in _SIDES:
            raise MeshError(f"unknown boundary side {self.side!r}")
        if self.lo > self.hi:
            raise MeshError(f"empty boundary range [{self.lo}, {self.hi}]")


@dataclass(frozen=True)
class MeshSpec:
    nx: int
    ny: int
    dx: float
    dy: float
    active_mask: np.ndarray | None = None  # bool, shape (ny, nx); None = all active
    boundaries: tuple[BoundaryRule, ...] = ()

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise MeshError("nx and ny must be positive")
        if self.dx <= 0 or self.dy <= 0:
            raise MeshError("dx and dy must be positive")
        if self.active_mask is not None:
            mask = np.asarray(self.active_mask, dtype=bool)
            if mask.shape != (self.ny, self.nx):
                raise MeshError(
                    f"active_mask shape {mask.shape} != (ny, nx) = {(self.ny, self.nx)}"
                )
            object.__setattr__(self, "active_mask", mask)

    def mask(self) -> np.ndarray:
        if self.active_mask is None:
            return np.ones((self.ny, self.nx), dtype=bool)
        return self.active_mask


@dataclass(frozen=True)
class ObservationSet:
    """Sparse point measurements indexed by cell."""

    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.ndim != 1 or val.ndim != 1 or idx.shape != val.shape:
            raise ValueError("indices and values must be 1-D and equal length")
        if idx.size and idx.min() < 0:
            raise ValueError("negative observation index")
        if np.unique(idx).size != idx.size:
            raise ValueError("duplicate observation indices")
        if not np.all(np.isfinite(val)):
            raise ValueError("non-finite observation value")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    def __len__(self) -> int:
        return self.indices.size

    def check_against(self, n: int) -> None:
        if self.indices.size and self.indices.max() >= n:
            raise ValueError(f"observation index {self.indices.max()} out of range [0, {n})")


@dataclass(frozen=True)
class Mesh:
    """Immutable FV mesh: active cells, interior faces, tagged boundary faces."""

    spec: MeshSpec
    n: int
    centers: np.ndarray          # (n, 2) cell-center coordinates
    cell_ij: np.ndarray          # (n, 2) lattice (ix, iy) per cell
    index_of: np.ndarray         # (ny, nx) cell index, -1 where inactive
    iface_i: np.ndarray          # interior faces: first cell
    iface_j: np.ndarray          # interior faces: second cell
    iface_len: np.ndarray        # face length
    iface_dist: np.ndarray       # center-to-center distance
    bface_cell: np.ndarray       # boundary faces: owning cell
    bface_len: np.ndarray
    bface_dhalf: np.ndarray      # cell center to face distance
    bface_kind: np.ndarray       # DIRICHLET | NEUMANN
    bface_value: np.ndarray
    cell_partition: np.ndarray = field(repr=False)  # 'I' | 'N' | 'D' per cell

    @property
    def n_interior_faces(self) -> int:
        return self.iface_i.size

    @property
    def n_boundary_faces(self) -> int:
        return self.bface_cell.size

    def partition_counts(self) -> dict[str, int]:
        return {lab: int(np.sum(self.cell_partition == lab)) for lab in "IND"}

    def has_dirichlet(self) -> bool:
        return bool(np.any(self.bface_kind == DIRICHLET))


def _match_rule(spec: MeshSpec, side: str, cross: int) -> BoundaryCondition:
    hits = [r for r in spec.boundaries if r.side == side and r.lo <= cross <= r.hi]
    if not hits:
        raise MeshError(f"no boundary rule matches {side} face at index {cross}")
    if len(hits) > 1:
        raise MeshError(f"{len(hits)} boundary rules match {side} face at index {cross}")
    return hits[0].bc


def build_mesh(spec: MeshSpec) -> Mesh:
    """Build the mesh: number active cells row-major, enumerate faces, tag BCs.

    Raises MeshError if the active set is empty or disconnected
    (4-connectivity) or if any exterior face is not matched by exactly one
    boundary rule.
    """
    mask = spec.mask()
    nx, ny, dx, dy = spec.nx, spec.ny, spec.dx, spec.dy

    index_of = -np.ones((ny, nx), dtype=np.int64)
    cells = []
    for iy in range(ny):
        for ix in range(nx):
            if mask[iy, ix]:
                index_of[iy, ix] = len(cells)
                cells.append((ix, iy))
    n = len(cells)
    if n == 0:
        raise MeshError("no active cells")
    cell_ij = np.array(cells, dtype=np.int64)
    centers = np.column_stack(((cell_ij[:, 0] + 0.5) * dx, (cell_ij[:, 1] + 0.5) * dy))

    _check_connected(mask, cells)

    ifi, ifj, iflen, ifdist = [], [], [], []
    bcell, blen, bdh, bkind, bval = [], [], [], [], []
    # (side, lattice step, face length, center distance, half distance)
    stencil = (
        ("left", (-1, 0), dy, dx, dx / 2),
        ("right", (1, 0), dy, dx, dx / 2),
        ("bottom", (0, -1), dx, dy, dy / 2),
        ("top", (0, 1), dx, dy, dy / 2),
    )
    for c, (ix, iy) in enumerate(cells):
        for side, (sx, sy), flen, fdist, dhalf in stencil:
            jx, jy = ix + sx, iy + sy
            inside = 0 <= jx < nx and 0 <= jy < ny
            if inside and mask[jy, jx]:
                if side in ("right", "top"):  # record each interior face once
                    ifi.append(c)
                    ifj.append(index_of[jy, jx])
                    iflen.append(flen)
                    ifdist.append(fdist)
            else:
                cross = iy if side in ("left", "right") else ix
                bc = _match_rule(spec, side, cross)
                bcell.append(c)
                blen.append(flen)
                bdh.append(dhalf)
                bkind.append(DIRICHLET if bc.kind == "dirichlet" else NEUMANN)
                bval.append(bc.value)

    bface_cell = np.array(bcell, dtype=np.int64)
    bface_kind = np.array(bkind, dtype=np.int64)
    partition = np.full(n, "I", dtype="<U1")
    if bface_cell.size:
        partition[bface_cell[bface_kind == NEUMANN]] = "N"
        partition[bface_cell[bface_kind == DIRICHLET]] = "D"  # D wins on mixed cells

    return Mesh(
        spec=spec,
        n=n,
        centers=centers,
        cell_ij=cell_ij,
        index_of=index_of,
        iface_i=np.array(ifi, dtype=np.int64),
        iface_j=np.array(ifj, dtype=np.int64),
        iface_len=np.array(iflen, dtype=np.float64),
        iface_dist=np.array(ifdist, dtype=np.float64),
        bface_cell=bface_cell,
        bface_len=np.array(blen, dtype=np.float64),
        bface_dhalf=np.array(bdh, dtype=np.float64),
        bface_kind=bface_kind,
        bface_value=np.array(bval, dtype=np.float64),
        cell_partition=partition,
    )


def _check_connected(mask: np.ndarray, cells: list[tuple[int, int]]) -> None:
    ny, nx = mask.shape
    seen = np.zeros_like(mask)
    q = deque([cells[0]])
    seen[cells[0][1], cells[0][0]] = True
    count = 0
    while q:
        ix, iy = q.popleft()
        count += 1
        for jx, jy in ((ix - 1, iy), (ix + 1, iy), (ix, iy - 1), (ix, iy + 1)):
            if 0 <= jx < nx and 0 <= jy < ny and mask[jy, jx] and not seen[jy, jx]:
                seen[jy, jx] = True
                q.append((jx, jy))
    if count != len(cells):
        raise MeshError(
            f"active cells are not 4-connected ({count} reachable of {len(cells)})"
        )


def gradient_operator(mesh: Mesh) -> sp.csr_matrix:
    """Difference operator over interior faces: row f = (y_j - y_i) / d_ij.

    Shape (n_interior_faces, n). Applied to a field it returns the per-face
    gradients used by the smoothness penalty.
    """
    nf = mesh.n_interior_faces
    w = 1.0 / mesh.iface_dist
    rows = np.repeat(np.arange(nf), 2)
    cols = np.column_stack((mesh.iface_i, mesh.iface_j)).ravel()
    vals = np.column_stack((-w, w)).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(nf, mesh.n))


def observation_matrix(indices: np.ndarray, n: int) -> sp.csr_matrix:
    """Rows of the n x n identity selected by ``indices``: H @ v == v[indices]."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"observation index out of range [0, {n})")
    m = idx.size
    return sp.csr_matrix((np.ones(m), (np.arange(m), idx)), shape=(m, n))


def validate_field(mesh: Mesh, values: np.ndarray, name: str = "field") -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (mesh.n,):
        raise ValueError(f"{name} has shape {v.shape}, expected ({mesh.n},)")
    if not np.all(np.isfinite(v)):
        warnings.warn(f"{name} contains non-finite entries", RuntimeWarning)
    return v


# -- JSON round trip (config files and dataset mesh.json share this schema) --

def read_mask_raster(path) -> np.ndarray:
    """0/1 text raster, one row of the lattice per line (iy = 0 first)."""
    rows = []
    with open(path) as fh:
        for line in fh:
            toks = line.split()
            if toks:
                rows.append([int(t) for t in toks])
    if not rows or any(len(r) != len(rows[0]) for r in rows):
        raise MeshError(f"ragged or empty mask raster {path}")
    return np.array(rows, dtype=bool)


def write_mask_raster(path, mask: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in np.asarray(mask, dtype=int):
            fh.write(" ".join(str(v) for v in row) + "\n")


def spec_from_dict(d: dict, base_dir: str = ".") -> MeshSpec:
    """Build a MeshSpec from its JSON form; ``active_mask`` is a raster
    path relative to base_dir. Unknown keys are rejected."""
    allowed = {"nx", "ny", "dx", "dy", "active_mask", "boundaries"}
    unknown = set(d) - allowed
    if unknown:
        raise MeshError(f"unknown mesh keys: {sorted(unknown)}")
    for key in ("nx", "ny", "dx", "dy", "boundaries"):
        if key not in d:
            raise MeshError(f"mesh config is missing required key '{key}'")
    mask = None
    if d.get("active_mask") is not None:
        mask = read_mask_raster(os.path.join(base_dir, d["active_mask"]))
    rules = []
    for k, rd in enumerate(d["boundaries"]):
        extra = set(rd) - {"side", "range", "kind", "value"}
        if extra:
            raise MeshError(f"unknown keys in boundaries[{k}]: {sorted(extra)}")
        for key in ("side", "kind", "value"):
            if key not in rd:
                raise MeshError(f"boundaries[{k}] is missing required key '{key}'")
        side = rd["side"]
        if "range" in rd:
            lo, hi = int(rd["range"][0]), int(rd["range"][1])
        else:
            lo, hi = 0, (int(d["ny"]) if side in ("left", "right") else int(d["nx"])) - 1
        rules.append(BoundaryRule(side=side, lo=lo, hi=hi,
                                  bc=BoundaryCondition(kind=rd["kind"],
                                                       value=float(rd["value"]))))
    return MeshSpec(nx=int(d["nx"]), ny=int(d["ny"]), dx=float(d["dx"]),
                    dy=float(d["dy"]), active_mask=mask, boundaries=tuple(rules))


def spec_to_dict(spec: MeshSpec, mask_filename: str | None = None) -> dict:
    """JSON form of a MeshSpec; the caller writes the raster separately
    when a mask is present (its filename goes into the dict)."""
    if spec.active_mask is not None and mask_filename is None:
        raise MeshError("spec has a mask; a mask_filename is required")
    return {
        "nx": spec.nx,
        "ny": spec.ny,
        "dx": spec.dx,
        "dy": spec.dy,
        "active_mask": mask_filename if spec.active_mask is not None else None,
        "boundaries": [
            {"side": r.side, "range": [r.lo, r.hi], "kind": r.bc.kind, "value": r.bc.value}
            for r in spec.boundaries
        ],
    }
