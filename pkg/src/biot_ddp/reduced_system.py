"""Reduction of the torn block system to an interface problem.

Displacement unknowns are duplicated along subdomain boundaries (dual
copies) and constrained by signed jump multipliers, while coarse primal
displacement dofs stay continuous.  Eliminating all subdomain-local
unknowns and the primal coarse solve leaves a symmetric positive definite
operator on the continuous total pressure trace, the continuous pressure
trace, and the multipliers.  That operator is only ever applied
matrix-free: one factorized local saddle solve per subdomain plus one
dense coarse solve per application.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .decomposition import DofClassification, InternalError, JumpOperator, TornLayout
from .mesh_fem import BlockSystem, ConfigurationError

_DENSE_FACTOR_CUTOFF = 400


class SaddleFactor:
    """LU factorization of one subdomain's local saddle block.

    Uses dense LAPACK below a size cutoff and sparse LU above it.  A
    random solve probe guards against silently singular blocks (a floating
    subdomain without enough primal constraints, for instance).
    """

    def __init__(self, K: sp.spmatrix, label: str, probe_tol: float = 1e-8):
        self.n = K.shape[0]
        if self.n == 0:
            self._dense = None
            self._sparse = None
            return
        if self.n < _DENSE_FACTOR_CUTOFF:
            self._dense = sla.lu_factor(K.toarray())
            self._sparse = None
        else:
            self._dense = None
            self._sparse = spla.splu(K.tocsc())
        rng = np.random.default_rng(12345)
        x = rng.standard_normal(self.n)
        b = K @ x
        r = K @ self.solve(b) - b
        scale = float(np.linalg.norm(b)) or 1.0
        rel = float(np.linalg.norm(r)) / scale
        if not np.isfinite(rel) or rel > probe_tol:
            raise ConfigurationError(
                f"{label}: local saddle solve failed its residual probe ({rel:.2e}); "
                "the block is singular or near singular, typically an unconstrained subdomain"
            )

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.zeros_like(b)
        if self._dense is not None:
            return sla.lu_solve(self._dense, b)
        if b.ndim == 1:
            return self._sparse.solve(b)
        return np.column_stack([self._sparse.solve(np.ascontiguousarray(b[:, j])) for j in range(b.shape[1])])


@dataclass
class SubdomainFactor:
    """Factorized local saddle block with its primal coupling."""

    factor: SaddleFactor
    A_rP: sp.csr_matrix  # local (uI, xiI, pI, uD) rows x local primal cols
    A_PP: np.ndarray
    primal_idx: np.ndarray  # positions of the local primal dofs in the global primal set
    X: np.ndarray  # K_rr^{-1} A_rP, retained so applications need one solve


class CoarseProblem:
    """Dense Cholesky of the primal Schur complement."""

    def __init__(self, S: np.ndarray):
        self.n = S.shape[0]
        if self.n == 0:
            self._cho = None
            return
        asym = float(np.max(np.abs(S - S.T)))
        scale = float(np.max(np.abs(S))) or 1.0
        # Roundoff from hundreds of accumulated subdomain solves; anything
        # beyond this hints at an indexing bug rather than floating point.
        if asym > 1e-6 * scale:
            raise InternalError(f"coarse matrix asymmetry {asym:.2e} exceeds tolerance")
        S = 0.5 * (S + S.T)
        try:
            self._cho = sla.cho_factor(S)
        except sla.LinAlgError as err:
            raise ConfigurationError(
                "coarse displacement problem is not positive definite; "
                "the primal constraint set does not control all subdomain rigid motions"
            ) from err

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.zeros_like(b)
        return sla.cho_solve(self._cho, b)


def _sub(M: sp.spmatrix, rows: np.ndarray, cols: np.ndarray) -> sp.csr_matrix:
    return M.tocsr()[rows][:, cols]


@dataclass
class ReducedSystem:
    """Matrix-free interface operator with everything needed to apply it,
    build its right-hand side, and recover the three fields."""

    system: BlockSystem
    cls: DofClassification
    jump: JumpOperator
    B_C: sp.csr_matrix  # interface rows x torn columns
    C_hat: sp.csr_matrix  # positive semidefinite interface coupling
    f_w: np.ndarray
    h: np.ndarray
    factors: dict[int, SubdomainFactor]
    coarse: CoarseProblem

    @property
    def layout(self) -> TornLayout:
        return self.cls.layout

    @property
    def n(self) -> int:
        return self.B_C.shape[0]

    @property
    def segments(self) -> tuple[int, int, int]:
        lay = self.layout
        return lay.xi_iface.size, lay.p_iface.size, lay.n_lambda

    def split(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n_xi, n_p, _ = self.segments
        return y[:n_xi], y[n_xi : n_xi + n_p], y[n_xi + n_p :]

    # -- torn operator ----------------------------------------------------

    def apply_torn_inverse(self, b: np.ndarray) -> np.ndarray:
        """Solve the partially assembled torn block via local factorizations
        and the coarse problem."""
        lay = self.layout
        x = np.zeros_like(b)
        z = {}
        t_P = np.array(b[lay.primal_slice], copy=True)
        for s in range(lay.n_sub):
            fac = self.factors[s]
            z_s = fac.factor.solve(b[lay.r_indices[s]])
            z[s] = z_s
            if fac.primal_idx.size:
                t_P[fac.primal_idx] -= fac.A_rP.T @ z_s
        z_P = self.coarse.solve(t_P)
        for s in range(lay.n_sub):
            fac = self.factors[s]
            x_s = z[s]
            if fac.primal_idx.size:
                x_s = x_s - fac.X @ z_P[fac.primal_idx]
            x[lay.r_indices[s]] = x_s
        x[lay.primal_slice] = z_P
        return x

    def apply(self, y: np.ndarray) -> np.ndarray:
        """One application of the reduced interface operator."""
        t = self.B_C.T @ y
        return self.B_C @ self.apply_torn_inverse(t) + self.C_hat @ y

    def rhs(self) -> np.ndarray:
        return self.B_C @ self.apply_torn_inverse(self.f_w) - self.h

    # -- diagnostics ------------------------------------------------------

    def dense_operator(self) -> np.ndarray:
        """The reduced operator assembled column by column (small runs only)."""
        n = self.n
        G = np.empty((n, n))
        e = np.zeros(n)
        for k in range(n):
            e[k] = 1.0
            G[:, k] = self.apply(e)
            e[k] = 0.0
        return G

    def torn_matrix(self) -> sp.csr_matrix:
        """The full torn saddle system (diagnostic; built sparse)."""
        lay = self.layout
        rows, cols, vals = [], [], []
        for s in range(lay.n_sub):
            fac = self.factors[s]
            idx = lay.r_indices[s]
            K = _rebuild_local_saddle(self, s).tocoo()
            rows.append(idx[K.row])
            cols.append(idx[K.col])
            vals.append(K.data)
            AP = fac.A_rP.tocoo()
            gP = lay.primal_slice.start + fac.primal_idx
            rows.extend([idx[AP.row], gP[AP.col]])
            cols.extend([gP[AP.col], idx[AP.row]])
            vals.extend([AP.data, AP.data])
            PP = sp.coo_matrix(fac.A_PP)
            rows.append(gP[PP.row])
            cols.append(gP[PP.col])
            vals.append(PP.data)
        At = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(lay.n_w, lay.n_w),
        )
        return sp.bmat([[At, self.B_C.T], [self.B_C, -self.C_hat]], format="csr")

    def torn_rhs(self) -> np.ndarray:
        return np.concatenate([self.f_w, self.h])

    # -- recovery ---------------------------------------------------------

    def recover(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
        """Fields (u, xi, p) in the assembled numbering plus the residual
        jump norm across dual copies.  Coefficients stay in whatever basis
        the system was assembled in; callers undo any change of basis."""
        lay = self.layout
        cls = self.cls
        spaces = self.system.spaces
        w = self.apply_torn_inverse(self.f_w - self.B_C.T @ y)
        y_xi, y_p, _ = self.split(y)

        u = np.zeros(spaces.n_u)
        mask = lay.u_int_pos >= 0
        u[mask] = w[lay.u_int_pos[mask]]
        u[cls.u_primal] = w[lay.primal_slice]
        dual = w[lay.dual_slice]
        jump_norm = float(np.linalg.norm(self.jump.jump @ dual)) if dual.size else 0.0
        counts = np.zeros(cls.u_dual.size)
        for s in range(lay.n_sub):
            ids = cls.u_sub_dual[s]
            if not ids.size:
                continue
            pos = np.searchsorted(cls.u_dual, ids)
            off = lay.dual_offset[s]
            u[ids] += dual[off : off + ids.size]
            counts[pos] += 1.0
        if cls.u_dual.size:
            u[cls.u_dual] /= counts

        xi = np.zeros(spaces.n_xi)
        mask = lay.xi_int_pos >= 0
        xi[mask] = w[lay.xi_int_pos[mask]]
        xi[lay.xi_iface] = y_xi

        p = np.zeros(spaces.n_p)
        mask = lay.p_int_pos >= 0
        p[mask] = w[lay.p_int_pos[mask]]
        p[lay.p_iface] = y_p
        return u, xi, p, jump_norm


def _local_index_sets(cls: DofClassification, s: int, lb) -> dict[str, np.ndarray]:
    return {
        "uI": lb.u_pos(cls.u_interior[s]),
        "uD": lb.u_pos(cls.u_sub_dual[s]),
        "uP": lb.u_pos(cls.u_sub_primal[s]),
        "xiI": lb.xi_pos(cls.xi_interior[s]),
        "xiG": lb.xi_pos(cls.xi_sub_interface[s]),
        "pI": lb.p_pos(cls.p_interior[s]),
        "pG": lb.p_pos(cls.p_sub_interface[s]),
    }


def _local_saddle(lb, ix: dict[str, np.ndarray]) -> sp.csc_matrix:
    A_II = _sub(lb.A, ix["uI"], ix["uI"])
    A_ID = _sub(lb.A, ix["uI"], ix["uD"])
    A_DD = _sub(lb.A, ix["uD"], ix["uD"])
    B_II = _sub(lb.B, ix["xiI"], ix["uI"])
    B_ID = _sub(lb.B, ix["xiI"], ix["uD"])
    C_II = _sub(lb.C, ix["xiI"], ix["xiI"])
    D_II = _sub(lb.D, ix["pI"], ix["xiI"])
    E_II = _sub(lb.E, ix["pI"], ix["pI"])
    return sp.bmat(
        [
            [A_II, B_II.T, None, A_ID],
            [B_II, -C_II, D_II.T, B_ID],
            [None, D_II, -E_II, None],
            [A_ID.T, B_ID.T, None, A_DD],
        ],
        format="csc",
    )


def _rebuild_local_saddle(red: ReducedSystem, s: int) -> sp.csc_matrix:
    lb = red.system.local[s]
    return _local_saddle(lb, _local_index_sets(red.cls, s, lb))


def build_reduced_system(system: BlockSystem, cls: DofClassification, jump: JumpOperator) -> ReducedSystem:
    lay = cls.layout
    n_xi_g = lay.xi_iface.size
    n_p_g = lay.p_iface.size
    n_y = n_xi_g + n_p_g + lay.n_lambda

    primal_of_dof = np.full(system.spaces.n_u, -1, dtype=np.int64)
    primal_of_dof[cls.u_primal] = np.arange(cls.u_primal.size)

    factors: dict[int, SubdomainFactor] = {}
    n_P = cls.u_primal.size
    S_PP = np.zeros((n_P, n_P))
    rows_bc: list[np.ndarray] = []
    cols_bc: list[np.ndarray] = []
    vals_bc: list[np.ndarray] = []

    for s in sorted(system.local):
        lb = system.local[s]
        ix = _local_index_sets(cls, s, lb)
        K = _local_saddle(lb, ix)
        fac = SaddleFactor(K, label=f"subdomain {s}")

        A_rP = sp.vstack(
            [
                _sub(lb.A, ix["uI"], ix["uP"]),
                _sub(lb.B, ix["xiI"], ix["uP"]),
                sp.csr_matrix((ix["pI"].size, ix["uP"].size)),
                _sub(lb.A, ix["uD"], ix["uP"]),
            ],
            format="csr",
        )
        A_PP = _sub(lb.A, ix["uP"], ix["uP"]).toarray()
        primal_idx = primal_of_dof[cls.u_sub_primal[s]]
        X = fac.solve(A_rP.toarray()) if ix["uP"].size else np.zeros((K.shape[0], 0))
        factors[s] = SubdomainFactor(factor=fac, A_rP=A_rP, A_PP=A_PP, primal_idx=primal_idx, X=X)
        if primal_idx.size:
            S_PP[np.ix_(primal_idx, primal_idx)] += A_PP - A_rP.T @ X

        # interface rows of this subdomain's contribution to the coupling
        wcol_u = lay.u_int_pos[lb.udofs].copy()
        m_primal = lay.primal_pos[lb.udofs] >= 0
        wcol_u[m_primal] = lay.primal_pos[lb.udofs[m_primal]]
        m_dual = wcol_u < 0
        if np.any(m_dual):
            dual_ids = lb.udofs[m_dual]
            k = np.searchsorted(cls.u_sub_dual[s], dual_ids)
            if np.any(k >= cls.u_sub_dual[s].size) or not np.array_equal(cls.u_sub_dual[s][k], dual_ids):
                raise InternalError(f"subdomain {s}: unclassified displacement dofs in local block")
            base = lay.dual_slice.start + lay.dual_offset[s]
            wcol_u[m_dual] = base + k
        wcol_xi = lay.xi_int_pos[lb.xidofs]
        wcol_p = lay.p_int_pos[lb.pdofs]
        yrow_xi = np.full(lb.xidofs.size, -1, dtype=np.int64)
        if ix["xiG"].size:
            yrow_xi[ix["xiG"]] = lay.xi_iface_pos(cls.xi_sub_interface[s])
        yrow_p = np.full(lb.pdofs.size, -1, dtype=np.int64)
        if ix["pG"].size:
            yrow_p[ix["pG"]] = n_xi_g + lay.p_iface_pos(cls.p_sub_interface[s])

        Bc = lb.B.tocoo()
        m = yrow_xi[Bc.row] >= 0
        rows_bc.append(yrow_xi[Bc.row[m]])
        cols_bc.append(wcol_u[Bc.col[m]])
        vals_bc.append(Bc.data[m])

        Cc = lb.C.tocoo()
        m = (yrow_xi[Cc.row] >= 0) & (wcol_xi[Cc.col] >= 0)
        rows_bc.append(yrow_xi[Cc.row[m]])
        cols_bc.append(wcol_xi[Cc.col[m]])
        vals_bc.append(-Cc.data[m])

        Dc = lb.D.tocoo()
        m = (wcol_p[Dc.row] >= 0) & (yrow_xi[Dc.col] >= 0)  # transposed coupling
        rows_bc.append(yrow_xi[Dc.col[m]])
        cols_bc.append(wcol_p[Dc.row[m]])
        vals_bc.append(Dc.data[m])
        m = (yrow_p[Dc.row] >= 0) & (wcol_xi[Dc.col] >= 0)
        rows_bc.append(yrow_p[Dc.row[m]])
        cols_bc.append(wcol_xi[Dc.col[m]])
        vals_bc.append(Dc.data[m])

        Ec = lb.E.tocoo()
        m = (yrow_p[Ec.row] >= 0) & (wcol_p[Ec.col] >= 0)
        rows_bc.append(yrow_p[Ec.row[m]])
        cols_bc.append(wcol_p[Ec.col[m]])
        vals_bc.append(-Ec.data[m])

    # multiplier rows attach the jump operator to the broken dual segment
    Jc = jump.jump.tocoo()
    rows_bc.append(n_xi_g + n_p_g + Jc.row)
    cols_bc.append(lay.dual_slice.start + Jc.col)
    vals_bc.append(Jc.data)

    B_C = sp.csr_matrix(
        (np.concatenate(vals_bc), (np.concatenate(rows_bc), np.concatenate(cols_bc))),
        shape=(n_y, lay.n_w),
    )

    xiG = cls.xi_interface
    pG = lay.p_iface
    C_GG = _sub(system.C, xiG, xiG)
    D_GG = _sub(system.D, pG, xiG)
    E_GG = _sub(system.E, pG, pG)
    C_hat = sp.bmat(
        [
            [C_GG, -D_GG.T, None],
            [-D_GG, E_GG, None],
            [None, None, sp.csr_matrix((lay.n_lambda, lay.n_lambda))],
        ],
        format="csr",
    )

    f_w = np.zeros(lay.n_w)
    mask = lay.u_int_pos >= 0
    f_w[lay.u_int_pos[mask]] = system.f[mask]
    maskp = lay.p_int_pos >= 0
    f_w[lay.p_int_pos[maskp]] = system.g[maskp]
    f_w[lay.primal_slice] = system.f[cls.u_primal]
    for s in sorted(system.local):
        lb = system.local[s]
        iuD = lb.u_pos(cls.u_sub_dual[s])
        off = lay.dual_slice.start + lay.dual_offset[s]
        f_w[off : off + iuD.size] = lb.f[iuD]

    h = np.zeros(n_y)
    h[n_xi_g : n_xi_g + n_p_g] = system.g[pG]

    return ReducedSystem(
        system=system,
        cls=cls,
        jump=jump,
        B_C=B_C,
        C_hat=C_hat,
        f_w=f_w,
        h=h,
        factors=factors,
        coarse=CoarseProblem(S_PP),
    )


def dump_reduced_coo(red: ReducedSystem, path: str) -> None:
    """Write the probed reduced operator as `row col value` lines."""
    G = red.dense_operator()
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(G.shape[0]):
            for j in range(G.shape[1]):
                if G[i, j] != 0.0:
                    fh.write(f"{i} {j} {G[i, j]!r}\n")
