"""Structured triangulations and block assembly for the three-field
displacement / total-pressure / pressure consolidation system.

The unit square is meshed with a fixed bottom-left to top-right cell
diagonal so repeated runs produce identical matrices.  Displacements live
on a once-refined copy of the base grid (the P1-iso-P2 pairing), total
pressure is either nodal P1 on the base grid or elementwise constant, and
pressure is nodal P1 on the base grid.  Assembly keeps the per-subdomain
element contributions alongside the assembled blocks; the substructuring
machinery needs both.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.sparse as sp

SIDES = ("left", "right", "bottom", "top")

# exact P1 mass matrix on a triangle, divided by the area
_MASS_LOCAL = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


class ConfigurationError(ValueError):
    """Raised when a requested discretization is inconsistent."""


class MaterialDomainError(ValueError):
    """Raised when material parameters leave the admissible range."""


# ---------------------------------------------------------------------------
# meshes


@dataclass
class StructuredMesh:
    """Uniform triangulation of the unit square.

    Cells are split along the bottom-left to top-right diagonal; triangle
    2*c is the lower-right half of cell c and 2*c+1 the upper-left half.
    Node ids run x-fastest: id = iy*(nx+1) + ix.
    """

    nx: int
    ny: int
    vertices: np.ndarray  # (n_nodes, 2)
    triangles: np.ndarray  # (n_tri, 3), positively oriented
    refined_mesh: "StructuredMesh | None" = None

    @property
    def n_nodes(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def node_ix(self, nodes: np.ndarray) -> np.ndarray:
        return np.asarray(nodes) % (self.nx + 1)

    def node_iy(self, nodes: np.ndarray) -> np.ndarray:
        return np.asarray(nodes) // (self.nx + 1)

    def boundary_node_mask(self, sides: Iterable[str]) -> np.ndarray:
        """Boolean mask over nodes lying on any of the given sides."""
        ids = np.arange(self.n_nodes)
        ix, iy = self.node_ix(ids), self.node_iy(ids)
        mask = np.zeros(self.n_nodes, dtype=bool)
        for side in sides:
            if side == "left":
                mask |= ix == 0
            elif side == "right":
                mask |= ix == self.nx
            elif side == "bottom":
                mask |= iy == 0
            elif side == "top":
                mask |= iy == self.ny
            else:
                raise ConfigurationError(f"unknown side {side!r}")
        return mask


def _grid_mesh(nx: int, ny: int) -> StructuredMesh:
    xs = np.linspace(0.0, 1.0, nx + 1)
    ys = np.linspace(0.0, 1.0, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny))
    ix, iy = ix.ravel(), iy.ravel()
    bl = iy * (nx + 1) + ix
    br = bl + 1
    tl = bl + (nx + 1)
    tr = tl + 1
    tri = np.empty((2 * nx * ny, 3), dtype=np.int64)
    tri[0::2] = np.column_stack([bl, br, tr])  # below the diagonal
    tri[1::2] = np.column_stack([bl, tr, tl])  # above the diagonal
    return StructuredMesh(nx=nx, ny=ny, vertices=vertices, triangles=tri)


def build_mesh(nx: int, subdomain_grid: tuple[int, int], ny: int | None = None) -> StructuredMesh:
    """Base triangulation plus its uniform refinement for the displacement grid."""
    if ny is None:
        ny = nx
    gx, gy = subdomain_grid
    if nx < 1 or ny < 1:
        raise ConfigurationError(f"mesh size must be positive, got nx={nx}, ny={ny}")
    if gx < 1 or gy < 1:
        raise ConfigurationError(f"subdomain grid must be positive, got {subdomain_grid}")
    if nx % gx != 0:
        raise ConfigurationError(f"nx={nx} is not divisible by subdomain count Nx={gx}")
    if ny % gy != 0:
        raise ConfigurationError(f"ny={ny} is not divisible by subdomain count Ny={gy}")
    if nx // gx != ny // gy:
        raise ConfigurationError("subdomains must contain square cell patches")
    mesh = _grid_mesh(nx, ny)
    mesh.refined_mesh = _grid_mesh(2 * nx, 2 * ny)
    _check_orientation(mesh)
    _check_orientation(mesh.refined_mesh)
    return mesh


def _check_orientation(mesh: StructuredMesh) -> None:
    v = mesh.vertices[mesh.triangles]
    d1 = v[:, 1] - v[:, 0]
    d2 = v[:, 2] - v[:, 0]
    areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    if not np.all(areas > 0):
        raise AssertionError("triangulation produced non-positive element areas")


def p1_geometry(mesh: StructuredMesh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Areas and P1 shape-function gradients (b = d/dx, c = d/dy) per triangle."""
    v = mesh.vertices[mesh.triangles]
    x, y = v[..., 0], v[..., 1]
    d1 = v[:, 1] - v[:, 0]
    d2 = v[:, 2] - v[:, 0]
    area = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    two_a = (2.0 * area)[:, None]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1) / two_a
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1) / two_a
    return area, b, c


# ---------------------------------------------------------------------------
# boundary conditions and spaces


@dataclass(frozen=True)
class BoundarySpec:
    """Zero-Dirichlet side lists for displacement and pressure.

    Total pressure never carries boundary conditions.  Homogeneous data is
    assumed throughout, so elimination is symmetric row/column dropping.
    """

    displacement_dirichlet: tuple[str, ...]
    pressure_dirichlet: tuple[str, ...]

    @staticmethod
    def neumann_left() -> "BoundarySpec":
        sides = ("right", "bottom", "top")
        return BoundarySpec(sides, sides)

    @staticmethod
    def all_dirichlet() -> "BoundarySpec":
        return BoundarySpec(SIDES, SIDES)

    def check_wellposed(self) -> None:
        if not self.displacement_dirichlet:
            raise ConfigurationError("displacement needs a nonempty Dirichlet part")
        if not self.pressure_dirichlet:
            raise ConfigurationError("pressure needs a nonempty Dirichlet part")
        for side in self.displacement_dirichlet + self.pressure_dirichlet:
            if side not in SIDES:
                raise ConfigurationError(f"unknown side {side!r}")


@dataclass
class FeSpaceSet:
    """Free-dof numbering for the three fields.

    Displacement: vector P1 on the refined mesh, dofs 2k (x) and 2k+1 (y).
    Total pressure: P1 on the base mesh ("p1", one dof per node, no boundary
    conditions) or piecewise constants ("p0", one dof per base triangle).
    Pressure: P1 on the base mesh with Dirichlet nodes eliminated.
    """

    mesh: StructuredMesh
    total_pressure_variant: str
    bc: BoundarySpec
    u_free_nodes: np.ndarray
    u_dof_of_node: np.ndarray  # refined node -> x-component dof, or -1
    p_free_nodes: np.ndarray
    p_dof_of_node: np.ndarray  # base node -> dof, or -1
    n_u: int
    n_xi: int
    n_p: int

    @property
    def n_total(self) -> int:
        return self.n_u + self.n_xi + self.n_p


def build_spaces(mesh: StructuredMesh, total_pressure_variant: str, bc: BoundarySpec) -> FeSpaceSet:
    if total_pressure_variant not in ("p1", "p0"):
        raise ConfigurationError(f"unknown total pressure variant {total_pressure_variant!r}")
    refined = mesh.refined_mesh
    if refined is None:
        raise ConfigurationError("mesh is missing its refinement; use build_mesh")

    u_fixed = refined.boundary_node_mask(bc.displacement_dirichlet) if bc.displacement_dirichlet else np.zeros(refined.n_nodes, bool)
    u_free = np.flatnonzero(~u_fixed)
    u_dof_of_node = np.full(refined.n_nodes, -1, dtype=np.int64)
    u_dof_of_node[u_free] = 2 * np.arange(u_free.size)

    p_fixed = mesh.boundary_node_mask(bc.pressure_dirichlet) if bc.pressure_dirichlet else np.zeros(mesh.n_nodes, bool)
    p_free = np.flatnonzero(~p_fixed)
    p_dof_of_node = np.full(mesh.n_nodes, -1, dtype=np.int64)
    p_dof_of_node[p_free] = np.arange(p_free.size)

    n_xi = mesh.n_nodes if total_pressure_variant == "p1" else mesh.n_triangles
    return FeSpaceSet(
        mesh=mesh,
        total_pressure_variant=total_pressure_variant,
        bc=bc,
        u_free_nodes=u_free,
        u_dof_of_node=u_dof_of_node,
        p_free_nodes=p_free,
        p_dof_of_node=p_dof_of_node,
        n_u=2 * u_free.size,
        n_xi=n_xi,
        n_p=p_free.size,
    )


# ---------------------------------------------------------------------------
# materials


def derive_lame(E: float, nu: float) -> tuple[float, float]:
    """Lame parameters from Young's modulus and Poisson ratio."""
    if E <= 0.0:
        raise MaterialDomainError(f"Young's modulus must be positive, got {E}")
    if not 0.0 < nu < 0.5:
        raise MaterialDomainError(f"Poisson ratio must lie in (0, 0.5), got {nu}")
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = E / (2.0 * (1.0 + nu))
    return lam, mu


@dataclass
class MaterialField:
    """Per-subdomain constant coefficients and the derived Lame pair."""

    grid: tuple[int, int]
    E: np.ndarray
    nu: np.ndarray
    alpha: np.ndarray
    kappa: np.ndarray
    lam: np.ndarray = field(init=False)
    mu: np.ndarray = field(init=False)
    c0: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        n = self.grid[0] * self.grid[1]
        for name in ("E", "nu", "alpha", "kappa"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ConfigurationError(f"{name} must have one value per subdomain")
            setattr(self, name, arr)
        if np.any(self.kappa <= 0.0):
            raise MaterialDomainError("hydraulic conductivity must be positive")
        if np.any(self.alpha <= 0.0):
            raise MaterialDomainError("coupling coefficient must be positive")
        pairs = [derive_lame(e, v) for e, v in zip(self.E, self.nu)]
        self.lam = np.array([p[0] for p in pairs])
        self.mu = np.array([p[1] for p in pairs])
        self.c0 = self.alpha**2 / self.lam

    @staticmethod
    def uniform(grid: tuple[int, int], E: float, nu: float, alpha: float, kappa: float) -> "MaterialField":
        n = grid[0] * grid[1]
        return MaterialField(grid, np.full(n, E), np.full(n, nu), np.full(n, alpha), np.full(n, kappa))

    @staticmethod
    def checkerboard(
        grid: tuple[int, int],
        E: float,
        nu: float,
        alpha: float,
        kappa: float,
        black: dict[str, float],
    ) -> "MaterialField":
        """Checkerboard layout; subdomain (i, j) is black when i + j is even."""
        gx, gy = grid
        if gx < 2 or gy < 2:
            raise ConfigurationError("checkerboard pattern needs at least a 2x2 subdomain grid")
        unknown = set(black) - {"E", "nu", "alpha", "kappa"}
        if unknown:
            raise ConfigurationError(f"unknown black-cell overrides: {sorted(unknown)}")
        sx, sy = np.meshgrid(np.arange(gx), np.arange(gy))
        is_black = ((sx + sy) % 2 == 0).ravel()
        vals = {"E": E, "nu": nu, "alpha": alpha, "kappa": kappa}
        arrays = {}
        for name, white_val in vals.items():
            arr = np.full(gx * gy, white_val, dtype=float)
            if name in black:
                arr[is_black] = black[name]
            arrays[name] = arr
        return MaterialField(grid, arrays["E"], arrays["nu"], arrays["alpha"], arrays["kappa"])


@dataclass(frozen=True)
class LoadSpec:
    """Right-hand side data: constant body force and constant fluid source."""

    body_force: tuple[float, float] = (0.0, -1.0)
    source: float = 1.0


# ---------------------------------------------------------------------------
# assembled system


@dataclass
class LocalBlocks:
    """One subdomain's element contributions in a compressed local numbering.

    ``udofs``/``xidofs``/``pdofs`` are the sorted global free-dof ids with
    support on the subdomain closure; the matrices are indexed by position
    in those arrays.
    """

    udofs: np.ndarray
    xidofs: np.ndarray
    pdofs: np.ndarray
    A: sp.csr_matrix
    B: sp.csr_matrix
    C: sp.csr_matrix
    D: sp.csr_matrix
    E: sp.csr_matrix
    f: np.ndarray
    g: np.ndarray

    def u_pos(self, dofs: np.ndarray) -> np.ndarray:
        return _positions(self.udofs, dofs, "displacement")

    def xi_pos(self, dofs: np.ndarray) -> np.ndarray:
        return _positions(self.xidofs, dofs, "total pressure")

    def p_pos(self, dofs: np.ndarray) -> np.ndarray:
        return _positions(self.pdofs, dofs, "pressure")


def _positions(haystack: np.ndarray, needles: np.ndarray, what: str) -> np.ndarray:
    needles = np.asarray(needles, dtype=np.int64)
    pos = np.searchsorted(haystack, needles)
    ok = (pos < haystack.size) & (haystack[np.minimum(pos, haystack.size - 1)] == needles)
    if needles.size and not np.all(ok):
        raise KeyError(f"{what} dofs {needles[~ok][:5]} not present in this subdomain")
    return pos


@dataclass
class BlockSystem:
    """Assembled saddle blocks plus retained per-subdomain contributions.

    The full operator is  [[A, B^T, 0], [B, -C, D^T], [0, D, -E]]
    acting on (displacement, total pressure, pressure), with right-hand
    side (f, 0, g).
    """

    spaces: FeSpaceSet
    materials: MaterialField
    bc: BoundarySpec
    load: LoadSpec
    grid: tuple[int, int]
    A: sp.csr_matrix
    B: sp.csr_matrix
    C: sp.csr_matrix
    D: sp.csr_matrix
    E: sp.csr_matrix
    f: np.ndarray
    g: np.ndarray
    local: dict[int, LocalBlocks]
    primal_basis: str = "nodal"

    @property
    def n_dofs(self) -> int:
        return self.spaces.n_total

    def full_matrix(self) -> sp.csr_matrix:
        """The complete indefinite block matrix (used by direct-solve checks)."""
        return sp.bmat(
            [
                [self.A, self.B.T, None],
                [self.B, -self.C, self.D.T],
                [None, self.D, -self.E],
            ],
            format="csr",
        )

    def full_rhs(self) -> np.ndarray:
        return np.concatenate([self.f, np.zeros(self.spaces.n_xi), self.g])


def _element_subdomains(n_cells_x: int, n_cells_y: int, grid: tuple[int, int], per: int) -> np.ndarray:
    """Subdomain id per triangle for a structured mesh with `per` cells per
    subdomain along each axis."""
    gx, _ = grid
    cells = np.arange(n_cells_x * n_cells_y)
    cx = cells % n_cells_x
    cy = cells // n_cells_x
    sub = (cy // per) * gx + (cx // per)
    return np.repeat(sub, 2)


def _entry_split(esub: np.ndarray, entries_per_elem: int) -> np.ndarray:
    return np.repeat(esub, entries_per_elem)


class _BlockAccumulator:
    """Collects (row, col, value, subdomain) element entries for one block."""

    def __init__(self, shape: tuple[int, int]):
        self.shape = shape
        self.rows: list[np.ndarray] = []
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []
        self.subs: list[np.ndarray] = []

    def add(self, rows, cols, vals, subs) -> None:
        rows = np.asarray(rows).ravel()
        cols = np.asarray(cols).ravel()
        vals = np.asarray(vals, dtype=float).ravel()
        subs = np.asarray(subs).ravel()
        keep = (rows >= 0) & (cols >= 0)
        self.rows.append(rows[keep])
        self.cols.append(cols[keep])
        self.vals.append(vals[keep])
        self.subs.append(subs[keep])

    def collect(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        if not self.rows:
            z = np.zeros(0, dtype=np.int64)
            return z, z, np.zeros(0), z
        return (
            np.concatenate(self.rows),
            np.concatenate(self.cols),
            np.concatenate(self.vals),
            np.concatenate(self.subs),
        )


def _local_matrices(
    acc: _BlockAccumulator,
    n_sub: int,
    row_sets: list[np.ndarray],
    col_sets: list[np.ndarray],
) -> tuple[list[sp.csr_matrix], sp.csr_matrix]:
    """Per-subdomain matrices in local indexing plus their exact global sum.

    The global matrix is built from the already-summed local entries,
    concatenated in ascending subdomain order, so it equals the sequential
    sum of the per-subdomain contributions entry for entry.
    """
    rows, cols, vals, subs = acc.collect()
    order = np.argsort(subs, kind="stable")
    rows, cols, vals, subs = rows[order], cols[order], vals[order], subs[order]
    bounds = np.searchsorted(subs, np.arange(n_sub + 1))

    locals_: list[sp.csr_matrix] = []
    grows, gcols, gvals = [], [], []
    for s in range(n_sub):
        lo, hi = bounds[s], bounds[s + 1]
        r_set, c_set = row_sets[s], col_sets[s]
        lr = np.searchsorted(r_set, rows[lo:hi])
        lc = np.searchsorted(c_set, cols[lo:hi])
        m = sp.coo_matrix((vals[lo:hi], (lr, lc)), shape=(r_set.size, c_set.size)).tocsr()
        m.sum_duplicates()
        locals_.append(m)
        mc = m.tocoo()
        grows.append(r_set[mc.row])
        gcols.append(c_set[mc.col])
        gvals.append(mc.data)
    gshape = acc.shape
    if grows:
        g = sp.coo_matrix(
            (np.concatenate(gvals), (np.concatenate(grows), np.concatenate(gcols))), shape=gshape
        ).tocsr()
    else:
        g = sp.csr_matrix(gshape)
    g.sum_duplicates()
    return locals_, g


def assemble_blocks(
    mesh: StructuredMesh,
    spaces: FeSpaceSet,
    materials: MaterialField,
    bc: BoundarySpec,
    load: LoadSpec | None = None,
    *,
    allow_pure_neumann: bool = False,
) -> BlockSystem:
    """Assemble the five blocks and loads, retaining subdomain contributions.

    ``allow_pure_neumann`` admits empty Dirichlet side lists for diagnostic
    assemblies (mass/stiffness identities); production configurations must
    constrain displacement and pressure somewhere.
    """
    if not allow_pure_neumann:
        bc.check_wellposed()
    if load is None:
        load = LoadSpec()
    refined = mesh.refined_mesh
    grid = materials.grid
    gx, gy = grid
    if mesh.nx % gx or mesh.ny % gy:
        raise ConfigurationError("mesh does not align with the material subdomain grid")
    per = mesh.nx // gx
    if mesh.ny // gy != per:
        raise ConfigurationError("subdomains must contain square cell patches")
    n_sub = gx * gy
    p0 = spaces.total_pressure_variant == "p0"

    esub_base = _element_subdomains(mesh.nx, mesh.ny, grid, per)
    esub_ref = _element_subdomains(2 * mesh.nx, 2 * mesh.ny, grid, 2 * per)

    area_b, b_b, c_b = p1_geometry(mesh)
    area_r, b_r, c_r = p1_geometry(refined)

    lam_b = materials.lam[esub_base]
    alpha_b = materials.alpha[esub_base]
    kappa_b = materials.kappa[esub_base]
    mu_r = materials.mu[esub_ref]

    # --- dof id tables per element
    u_nodes = refined.triangles  # (nt, 3)
    u_base = spaces.u_dof_of_node[u_nodes]  # x-component dof or -1
    udof = np.empty((refined.n_triangles, 6), dtype=np.int64)
    udof[:, 0::2] = u_base
    udof[:, 1::2] = np.where(u_base >= 0, u_base + 1, -1)

    xi_rows_b = mesh.triangles if not p0 else None  # P1: xi dof == base node id
    p_rows = spaces.p_dof_of_node[mesh.triangles]

    # --- elastic block on the refined mesh
    Bm = np.zeros((refined.n_triangles, 3, 6))
    Bm[:, 0, 0::2] = b_r
    Bm[:, 1, 1::2] = c_r
    Bm[:, 2, 0::2] = c_r
    Bm[:, 2, 1::2] = b_r
    wgt = area_r[:, None] * np.stack([2 * mu_r, 2 * mu_r, mu_r], axis=1)
    K = np.einsum("tia,ti,tib->tab", Bm, wgt, Bm)

    accA = _BlockAccumulator((spaces.n_u, spaces.n_u))
    r6 = np.repeat(udof, 6, axis=1)  # row index per 6x6 entry
    c6 = np.tile(udof, (1, 6))
    accA.add(r6, c6, K, _entry_split(esub_ref, 36))

    # --- divergence coupling: refined displacement x base total pressure
    div = np.empty((refined.n_triangles, 6))
    div[:, 0::2] = b_r
    div[:, 1::2] = c_r
    centroid = refined.vertices[refined.triangles].mean(axis=1)
    cellx = np.minimum((centroid[:, 0] * mesh.nx).astype(np.int64), mesh.nx - 1)
    celly = np.minimum((centroid[:, 1] * mesh.ny).astype(np.int64), mesh.ny - 1)
    locx = centroid[:, 0] * mesh.nx - cellx
    locy = centroid[:, 1] * mesh.ny - celly
    parent = 2 * (celly * mesh.nx + cellx) + (locy > locx)

    accB = _BlockAccumulator((spaces.n_xi, spaces.n_u))
    if p0:
        bvals = -area_r[:, None] * div
        accB.add(np.repeat(parent[:, None], 6, axis=1), udof, bvals, _entry_split(esub_ref, 6))
    else:
        pv = mesh.vertices[mesh.triangles[parent]]  # (nt, 3, 2) parent vertices
        d1 = pv[:, 1] - pv[:, 0]
        d2 = pv[:, 2] - pv[:, 0]
        twoA = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        q = centroid
        bary = np.empty((refined.n_triangles, 3))
        for k in range(3):
            pa = pv[:, (k + 1) % 3]
            pb = pv[:, (k + 2) % 3]
            bary[:, k] = ((pa[:, 1] - pb[:, 1]) * (q[:, 0] - pb[:, 0]) + (pb[:, 0] - pa[:, 0]) * (q[:, 1] - pb[:, 1])) / twoA
        rows = np.repeat(mesh.triangles[parent], 6, axis=1)  # (nt, 18)
        cols = np.tile(udof, (1, 3))
        vals = -(area_r[:, None, None] * bary[:, :, None] * div[:, None, :])
        accB.add(rows, cols, vals, _entry_split(esub_ref, 18))

    # --- total pressure mass (1/lambda)
    accC = _BlockAccumulator((spaces.n_xi, spaces.n_xi))
    if p0:
        tri_ids = np.arange(mesh.n_triangles)
        accC.add(tri_ids, tri_ids, area_b / lam_b, esub_base)
    else:
        mass = area_b[:, None, None] * _MASS_LOCAL
        r3 = np.repeat(xi_rows_b, 3, axis=1)
        c3 = np.tile(xi_rows_b, (1, 3))
        accC.add(r3, c3, mass / lam_b[:, None, None], _entry_split(esub_base, 9))

    # --- pressure / total pressure coupling (alpha/lambda)
    accD = _BlockAccumulator((spaces.n_p, spaces.n_xi))
    coefD = (alpha_b / lam_b)[:, None, None]
    if p0:
        vals = (alpha_b / lam_b)[:, None] * (area_b[:, None] / 3.0) * np.ones((1, 3))
        accD.add(p_rows, np.repeat(np.arange(mesh.n_triangles)[:, None], 3, axis=1), vals, _entry_split(esub_base, 3))
    else:
        mass = area_b[:, None, None] * _MASS_LOCAL
        r3 = np.repeat(p_rows, 3, axis=1)
        c3 = np.tile(xi_rows_b, (1, 3))
        accD.add(r3, c3, coefD * mass, _entry_split(esub_base, 9))

    # --- pressure block: kappa stiffness + (2 alpha^2 / lambda) mass
    accE = _BlockAccumulator((spaces.n_p, spaces.n_p))
    stiff = (kappa_b * area_b)[:, None, None] * (b_b[:, :, None] * b_b[:, None, :] + c_b[:, :, None] * c_b[:, None, :])
    massE = (2.0 * alpha_b**2 / lam_b)[:, None, None] * area_b[:, None, None] * _MASS_LOCAL
    r3 = np.repeat(p_rows, 3, axis=1)
    c3 = np.tile(p_rows, (1, 3))
    accE.add(r3, c3, stiff + massE, _entry_split(esub_base, 9))

    # --- per-subdomain dof sets
    order_r = np.argsort(esub_ref, kind="stable")
    bounds_r = np.searchsorted(esub_ref[order_r], np.arange(n_sub + 1))
    order_b = np.argsort(esub_base, kind="stable")
    bounds_b = np.searchsorted(esub_base[order_b], np.arange(n_sub + 1))

    usets, xisets, psets = [], [], []
    for s in range(n_sub):
        tri_r = order_r[bounds_r[s] : bounds_r[s + 1]]
        tri_b = order_b[bounds_b[s] : bounds_b[s + 1]]
        ud = udof[tri_r].ravel()
        usets.append(np.unique(ud[ud >= 0]))
        if p0:
            xisets.append(np.sort(tri_b))
        else:
            xisets.append(np.unique(mesh.triangles[tri_b]))
        pd = p_rows[tri_b].ravel()
        psets.append(np.unique(pd[pd >= 0]))

    locA, gA = _local_matrices(accA, n_sub, usets, usets)
    locB, gB = _local_matrices(accB, n_sub, xisets, usets)
    locC, gC = _local_matrices(accC, n_sub, xisets, xisets)
    locD, gD = _local_matrices(accD, n_sub, psets, xisets)
    locE, gE = _local_matrices(accE, n_sub, psets, psets)

    # --- loads
    fx, fy = load.body_force
    fvals = np.empty((refined.n_triangles, 6))
    fvals[:, 0::2] = fx * area_r[:, None] / 3.0
    fvals[:, 1::2] = fy * area_r[:, None] / 3.0
    gvals = load.source * area_b[:, None] / 3.0 * np.ones((1, 3))

    f_global = np.zeros(spaces.n_u)
    g_global = np.zeros(spaces.n_p)
    local: dict[int, LocalBlocks] = {}
    for s in range(n_sub):
        tri_r = order_r[bounds_r[s] : bounds_r[s + 1]]
        tri_b = order_b[bounds_b[s] : bounds_b[s + 1]]
        f_s = np.zeros(usets[s].size)
        ud = udof[tri_r].ravel()
        fv = fvals[tri_r].ravel()
        keep = ud >= 0
        np.add.at(f_s, np.searchsorted(usets[s], ud[keep]), fv[keep])
        g_s = np.zeros(psets[s].size)
        pd = p_rows[tri_b].ravel()
        gv = gvals[tri_b].ravel()
        keep = pd >= 0
        np.add.at(g_s, np.searchsorted(psets[s], pd[keep]), gv[keep])
        np.add.at(f_global, usets[s], f_s)
        np.add.at(g_global, psets[s], g_s)
        local[s] = LocalBlocks(
            udofs=usets[s],
            xidofs=xisets[s],
            pdofs=psets[s],
            A=locA[s],
            B=locB[s],
            C=locC[s],
            D=locD[s],
            E=locE[s],
            f=f_s,
            g=g_s,
        )

    return BlockSystem(
        spaces=spaces,
        materials=materials,
        bc=bc,
        load=load,
        grid=grid,
        A=gA,
        B=gB,
        C=gC,
        D=gD,
        E=gE,
        f=f_global,
        g=g_global,
        local=local,
    )


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class SaddleReport:
    trials: int
    min_ratio: float
    violations: int


_SADDLE_COEF = (3.0 - np.sqrt(5.0)) / 2.0


def check_saddle_inequalities(system: BlockSystem, trials: int = 1000, seed: int = 0) -> SaddleReport:
    """Spot-check the coupled positivity bound on random vector pairs.

    For pairs (eta, q) the quadratic form of [[C, -D^T], [-D, E]] must
    dominate (3 - sqrt(5))/2 times the decoupled form; the report carries
    the minimum observed ratio.
    """
    rng = np.random.RandomState(seed)
    C, D, E = system.C, system.D, system.E
    min_ratio = np.inf
    violations = 0
    for _ in range(trials):
        eta = rng.standard_normal(C.shape[0])
        q = rng.standard_normal(E.shape[0])
        base = eta @ (C @ eta) + q @ (E @ q)
        coupled = base - 2.0 * (q @ (D @ eta))
        ratio = coupled / (_SADDLE_COEF * base)
        min_ratio = min(min_ratio, ratio)
        if ratio < 1.0 - 1e-12:
            violations += 1
    return SaddleReport(trials=trials, min_ratio=float(min_ratio), violations=violations)


def stokes_stability_witness(system: BlockSystem) -> float:
    """Smallest nonzero generalized singular value of the divergence coupling.

    Dense diagnostic for small meshes: eigenvalues of B A^{-1} B^T against
    the total-pressure Gram block; returns the square root of the smallest
    nonzero one.  Strictly positive for a stable pairing.
    """
    A = system.A.toarray()
    B = system.B.toarray()
    C = system.C.toarray()
    S = B @ np.linalg.solve(A, B.T)
    import scipy.linalg as sla

    w = sla.eigh(S, C, eigvals_only=True)
    w = np.sort(w)
    cutoff = 1e-10 * max(w[-1], 1.0)
    nonzero = w[w > cutoff]
    if nonzero.size == 0:
        return 0.0
    return float(np.sqrt(nonzero[0]))


def measure_apriori_constant(system: BlockSystem) -> float:
    """Measured stability constant of the solved system: energy of the
    solution over the dual norms of the loads (dense, small meshes only)."""
    M = system.full_matrix().toarray()
    rhs = system.full_rhs()
    sol = np.linalg.solve(M, rhs)
    nu_, nxi = system.spaces.n_u, system.spaces.n_xi
    u = sol[:nu_]
    eta = sol[nu_ : nu_ + nxi]
    q = sol[nu_ + nxi :]
    A, C, D, E = system.A.toarray(), system.C.toarray(), system.D.toarray(), system.E.toarray()
    lhs = u @ (A @ u) + eta @ (C @ eta) - 2.0 * (q @ (D @ eta)) + q @ (E @ q)
    lam = float(system.materials.lam.max())
    f, g = system.f, system.g
    rhs_norm = f @ np.linalg.solve(A, f)
    if np.linalg.norm(g) > 0:
        rhs_norm += g @ np.linalg.solve(E, g)
    wload = np.zeros(nxi)
    rhs_norm += wload @ np.linalg.solve(lam * C, wload)
    return float(lhs / rhs_norm)


def dump_blocks_coo(system: BlockSystem, path: str) -> None:
    """Write all five blocks in `block row col value` text form."""
    with open(path, "w") as fh:
        for name in "ABCDE":
            m = getattr(system, name).tocoo()
            for r, c, v in zip(m.row, m.col, m.data):
                fh.write(f"{name} {r} {c} {float(v)!r}\n")
