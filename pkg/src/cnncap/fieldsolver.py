"""2-D multi-dielectric electrostatic field solver for capacitance labels.

Finite-volume discretization of div(eps grad phi) = 0 on a rectilinear
grid whose lines are snapped to every conductor edge and dielectric
interface.  Boundary conditions: substrate plane z=0 at 0 V (Dirichlet),
zero normal flux on the left/right/top window boundaries.

Because dielectric interfaces coincide with grid lines, every primal cell
has uniform permittivity and each face conductance is assembled from the
half-cells on either side of the link (the harmonic face average
degenerates to the single cell value).

Capacitances are per unit length.  Internally the geometry is unitless
(µm cancels in 2-D); results are converted to fF/µm via eps0.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .patgen import Structure2D, validate_structure
from .techmodel import TechFile

EPS0_F_PER_M = 8.8541878128e-12
# 2-D capacitance per unit length: C [F/m] = eps0 * (dimensionless sum);
# 1 F/m = 1e9 fF/µm.
_FF_PER_UM = EPS0_F_PER_M * 1e9

FREE = -2
GROUND = -1

_SNAP_TOL = 1e-9
DEFAULT_RESOLUTION = 8
DEFAULT_TOL = 1e-8


class SolverError(RuntimeError):
    pass


@dataclass
class SolverGrid:
    xs: np.ndarray            # node x coordinates, shape (nx,)
    zs: np.ndarray            # node z coordinates, shape (nz,)
    cell_eps: np.ndarray      # relative permittivity per cell, (nz-1, nx-1)
    owner: np.ndarray         # conductor id per node, (nz, nx); FREE/GROUND/-id>=0
    conductor_ids: list[int]  # metal conductor ids present (driveable)

    @property
    def nx(self) -> int:
        return len(self.xs)

    @property
    def nz(self) -> int:
        return len(self.zs)


@dataclass
class CapacitanceResult:
    structure_id: str
    total: float                      # fF/µm, master Maxwell diagonal
    couplings: dict[int, float]       # env conductor id -> fF/µm
    ground_coupling: float            # fF/µm
    maxwell: np.ndarray = field(repr=False, default=None)  # fF/µm, metal ids order
    conductor_ids: list[int] = field(default_factory=list)
    grid_shape: tuple[int, int] = (0, 0)
    residual: float = 0.0
    solve_seconds: float = 0.0


def _refine(breaks: np.ndarray, unit: float, resolution: int) -> np.ndarray:
    """Insert nodes so no interval exceeds unit/resolution, keeping the
    breaks exact.  Per-segment counts are multiples of `resolution`, so the
    grids nest: doubling the resolution doubles every segment's cell count."""
    out = [breaks[:1]]
    for a, b in zip(breaks[:-1], breaks[1:]):
        n = resolution * max(1, int(np.ceil((b - a) / unit - 1e-12)))
        seg = np.linspace(a, b, n + 1)
        out.append(seg[1:])
    return np.concatenate(out)


def _dedupe(values: np.ndarray) -> np.ndarray:
    values = np.sort(np.asarray(values, dtype=float))
    keep = [values[0]]
    for v in values[1:]:
        if v - keep[-1] > _SNAP_TOL:
            keep.append(v)
    return np.array(keep)


def _index_of(coords: np.ndarray, value: float, what: str) -> int:
    i = int(np.searchsorted(coords, value))
    for j in (i - 1, i, i + 1):
        if 0 <= j < len(coords) and abs(coords[j] - value) <= _SNAP_TOL:
            return j
    raise SolverError(f"{what}={value!r} does not coincide with a grid line")


def build_grid(tech: TechFile, structure: Structure2D,
               resolution: int = DEFAULT_RESOLUTION) -> SolverGrid:
    """Rectilinear grid with lines snapped to conductor edges and interfaces.

    `resolution` is the minimum cell count across the smallest design-rule
    spacing and across the thinnest metal layer of the structure's triple.
    """
    if resolution < 2:
        raise SolverError(f"resolution must be >= 2, got {resolution}")
    violations = validate_structure(tech, structure)
    if violations:
        raise SolverError(
            f"structure {structure.id} fails validation: "
            + "; ".join(str(v) for v in violations))

    triple_layers = [tech.layer(i) for i in set(structure.layer_triple)]
    unit_x = min(min(l.s_min, l.w_min) for l in triple_layers)
    unit_z = min(l.thickness for l in triple_layers)

    x_breaks = [0.0, structure.window_width]
    for c in structure.conductors:
        x_breaks += [c.x_left, c.x_right]
    xs = _refine(_dedupe(np.array(x_breaks)), unit_x, resolution)

    z_breaks = [0.0, tech.z_max]
    for slab in tech.dielectrics:
        z_breaks += [slab.z_bottom, slab.z_top]
    for c in structure.conductors:
        layer = tech.layer(c.layer)
        z_breaks += [layer.z_bottom, layer.z_top]
    zs = _refine(_dedupe(np.array(z_breaks)), unit_z, resolution)

    # Per-cell permittivity from the slab containing the cell center.
    z_centers = (zs[:-1] + zs[1:]) / 2
    bounds = np.array([s.z_bottom for s in tech.dielectrics] +
                      [tech.dielectrics[-1].z_top])
    slab_idx = np.clip(np.searchsorted(bounds, z_centers) - 1, 0,
                       len(tech.dielectrics) - 1)
    eps_col = np.array([tech.dielectrics[i].eps_r for i in slab_idx])
    cell_eps = np.repeat(eps_col[:, None], len(xs) - 1, axis=1)

    owner = np.full((len(zs), len(xs)), FREE, dtype=np.int32)
    owner[0, :] = GROUND  # substrate plane
    ids = []
    for c in structure.conductors:
        layer = tech.layer(c.layer)
        i0 = _index_of(xs, c.x_left, "conductor x_left")
        i1 = _index_of(xs, c.x_right, "conductor x_right")
        j0 = _index_of(zs, layer.z_bottom, "layer z_bottom")
        j1 = _index_of(zs, layer.z_top, "layer z_top")
        owner[j0:j1 + 1, i0:i1 + 1] = c.id
        # conductor interior carries no dielectric; value is irrelevant to
        # the exterior field but keep it physical
        ids.append(c.id)
    return SolverGrid(xs=xs, zs=zs, cell_eps=cell_eps, owner=owner,
                      conductor_ids=sorted(ids))


def _links(grid: SolverGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All node-to-node face conductances as flat arrays (a, b, G)."""
    xs, zs, eps = grid.xs, grid.zs, grid.cell_eps
    nx, nz = grid.nx, grid.nz
    dx = np.diff(xs)
    dz = np.diff(zs)

    def node(r, c):
        return r * nx + c

    # horizontal links: (r, c) -- (r, c+1)
    rr, cc = np.meshgrid(np.arange(nz), np.arange(nx - 1), indexing="ij")
    dz_below = np.where(rr > 0, dz[np.maximum(rr - 1, 0)], 0.0)
    dz_above = np.where(rr < nz - 1, dz[np.minimum(rr, nz - 2)], 0.0)
    eps_below = eps[np.maximum(rr - 1, 0), cc]
    eps_above = eps[np.minimum(rr, nz - 2), cc]
    g_h = (np.where(rr > 0, eps_below * dz_below, 0.0)
           + np.where(rr < nz - 1, eps_above * dz_above, 0.0)) / 2 / dx[cc]
    a_h = node(rr, cc).ravel()
    b_h = node(rr, cc + 1).ravel()

    # vertical links: (r, c) -- (r+1, c)
    rr, cc = np.meshgrid(np.arange(nz - 1), np.arange(nx), indexing="ij")
    dx_left = np.where(cc > 0, dx[np.maximum(cc - 1, 0)], 0.0)
    dx_right = np.where(cc < nx - 1, dx[np.minimum(cc, nx - 2)], 0.0)
    eps_left = eps[rr, np.maximum(cc - 1, 0)]
    eps_right = eps[rr, np.minimum(cc, nx - 2)]
    g_v = (np.where(cc > 0, eps_left * dx_left, 0.0)
           + np.where(cc < nx - 1, eps_right * dx_right, 0.0)) / 2 / dz[rr]
    a_v = node(rr, cc).ravel()
    b_v = node(rr + 1, cc).ravel()

    a = np.concatenate([a_h, a_v])
    b = np.concatenate([b_h, b_v])
    g = np.concatenate([g_h.ravel(), g_v.ravel()])
    return a, b, g


class _System:
    """Assembled linear system with one factorization shared across drives."""

    def __init__(self, grid: SolverGrid):
        self.grid = grid
        self.a, self.b, self.g = _links(grid)
        owner_flat = grid.owner.ravel()
        self.owner_flat = owner_flat
        self.free = owner_flat == FREE
        n_all = grid.nx * grid.nz
        self.reduced = -np.ones(n_all, dtype=np.int64)
        free_idx = np.flatnonzero(self.free)
        self.reduced[free_idx] = np.arange(len(free_idx))
        self.n_free = len(free_idx)

        a, b, g = self.a, self.b, self.g
        fa, fb = self.free[a], self.free[b]
        ra, rb = self.reduced[a], self.reduced[b]

        both = fa & fb
        rows = np.concatenate([ra[both], rb[both], ra[fa], rb[fb]])
        cols = np.concatenate([rb[both], ra[both], ra[fa], rb[fb]])
        vals = np.concatenate([-g[both], -g[both], g[fa], g[fb]])
        A = sp.coo_matrix((vals, (rows, cols)),
                          shape=(self.n_free, self.n_free)).tocsr()
        self.A = A
        self.lu = spla.splu(A.tocsc())

        # links from a free node to a Dirichlet node, for RHS assembly
        self.bc_free_a = ra[fa & ~fb]
        self.bc_cond_a = self.owner_flat[b[fa & ~fb]]
        self.bc_g_a = g[fa & ~fb]
        self.bc_free_b = rb[fb & ~fa]
        self.bc_cond_b = self.owner_flat[a[fb & ~fa]]
        self.bc_g_b = g[fb & ~fa]

    def potentials(self, driven_id: int, tol: float) -> tuple[np.ndarray, float]:
        """Full node potential vector for one driven conductor."""
        rhs = np.zeros(self.n_free)
        np.add.at(rhs, self.bc_free_a,
                  np.where(self.bc_cond_a == driven_id, self.bc_g_a, 0.0))
        np.add.at(rhs, self.bc_free_b,
                  np.where(self.bc_cond_b == driven_id, self.bc_g_b, 0.0))
        x = self.lu.solve(rhs)
        denom = np.linalg.norm(rhs)
        residual = (np.linalg.norm(self.A @ x - rhs) / denom) if denom > 0 else 0.0
        if not np.isfinite(residual) or residual > tol:
            raise SolverError(
                f"linear solve did not reach tolerance: residual {residual:.3e} > {tol:.1e}")
        phi = np.zeros(self.grid.nx * self.grid.nz)
        phi[self.free] = x
        phi[self.owner_flat == driven_id] = 1.0
        return phi, residual

    def charges(self, phi: np.ndarray) -> dict[int, float]:
        """Gauss-law induced charge per conductor: flux through the faces
        surrounding its nodes (dimensionless; multiply by eps0 for F/m)."""
        a, b, g = self.a, self.b, self.g
        flux = g * (phi[a] - phi[b])
        oa, ob = self.owner_flat[a], self.owner_flat[b]
        out: dict[int, float] = {}
        for cid in [GROUND] + self.grid.conductor_ids:
            q = flux[(oa == cid) & (ob != cid)].sum() - flux[(ob == cid) & (oa != cid)].sum()
            out[cid] = q
        return out


def solve_potential(grid: SolverGrid, driven_id: int,
                    tol: float = DEFAULT_TOL) -> np.ndarray:
    """Potential field (nz, nx): 1 V on the driven conductor, 0 V elsewhere
    on conductors and the substrate, zero normal flux on the open sides."""
    if driven_id not in grid.conductor_ids:
        raise SolverError(f"driven conductor {driven_id} not present in grid")
    system = _System(grid)
    phi, _ = system.potentials(driven_id, tol)
    return phi.reshape(grid.nz, grid.nx)


def extract_capacitances(tech: TechFile, structure: Structure2D,
                         resolution: int = DEFAULT_RESOLUTION,
                         tol: float = DEFAULT_TOL) -> CapacitanceResult:
    """Drive each conductor once and assemble the Maxwell matrix.

    total = master diagonal entry; coupling(e) = -C[master, e];
    ground_coupling = -C[ground, master] (equal to C[master, ground] by
    reciprocity: the ground plane itself is never driven).
    """
    t0 = time.perf_counter()
    grid = build_grid(tech, structure, resolution)
    system = _System(grid)
    ids = grid.conductor_ids
    n = len(ids)
    col = {cid: k for k, cid in enumerate(ids)}
    maxwell = np.zeros((n, n))
    ground_row = np.zeros(n)
    worst = 0.0
    for cid in ids:
        phi, residual = system.potentials(cid, tol)
        worst = max(worst, residual)
        q = system.charges(phi)
        for other, value in q.items():
            if other == GROUND:
                ground_row[col[cid]] = value * _FF_PER_UM
            else:
                maxwell[col[other], col[cid]] = value * _FF_PER_UM

    m = col[0]  # master
    couplings = {cid: -maxwell[m, col[cid]] for cid in ids if cid != 0}
    return CapacitanceResult(
        structure_id=structure.id,
        total=maxwell[m, m],
        couplings=couplings,
        ground_coupling=-ground_row[m],
        maxwell=maxwell,
        conductor_ids=ids,
        grid_shape=(grid.nz, grid.nx),
        residual=worst,
        solve_seconds=time.perf_counter() - t0,
    )


# --- label table -------------------------------------------------------
# One row per capacitance: structure_id,kind,env_id,value_fF_per_um

def labels_to_rows(result: CapacitanceResult) -> list[str]:
    rows = [f"{result.structure_id},total,,{float(result.total)!r}"]
    for env_id in sorted(result.couplings):
        rows.append(f"{result.structure_id},coupling,{env_id},{float(result.couplings[env_id])!r}")
    rows.append(f"{result.structure_id},ground,,{float(result.ground_coupling)!r}")
    return rows


def save_labels(results: list[CapacitanceResult], path, header: str | None = None) -> None:
    from pathlib import Path
    lines = []
    if header:
        lines.append(f"# {header}")
    for r in results:
        lines.extend(labels_to_rows(r))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_labels(path) -> dict[str, dict]:
    """Label table as {structure_id: {'total': x, 'ground': x, 'couplings': {id: x}}}."""
    from pathlib import Path
    out: dict[str, dict] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        sid, kind, env, value = line.split(",")
        entry = out.setdefault(sid, {"total": None, "ground": None, "couplings": {}})
        if kind == "total":
            entry["total"] = float(value)
        elif kind == "ground":
            entry["ground"] = float(value)
        elif kind == "coupling":
            entry["couplings"][int(env)] = float(value)
        else:
            raise ValueError(f"bad label kind '{kind}' in {path}")
    return out
