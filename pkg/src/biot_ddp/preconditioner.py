"""Block diagonal preconditioner for the reduced interface operator.

Three independent blocks, one per interface segment:

* total pressure trace: scaled sum of inverted local mass Schur
  complements, each weighted by the subdomain's ratio of first Lame
  parameter to shear modulus;
* pressure trace: balancing (BDDC) preconditioner built from local flow
  Schur complements, with broken dual values and a shared coarse primal
  block eliminated exactly;
* multipliers: scaled jumps through either the local elastic Dirichlet
  Schur complement (applied matrix-free, one interior solve per
  subdomain per application) or its lumped stiffness shortcut.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .decomposition import (
    DofClassification,
    InternalError,
    JumpOperator,
    RestrictionSet,
)
from .mesh_fem import BlockSystem, ConfigurationError

_DENSE_SOLVE_CUTOFF = 400


class _InteriorSolver:
    """Factorized SPD-ish interior block, dense below a cutoff."""

    def __init__(self, M: sp.spmatrix):
        self.n = M.shape[0]
        if self.n == 0:
            self._cho = self._lu = None
        elif self.n < _DENSE_SOLVE_CUTOFF:
            self._cho = sla.cho_factor(M.toarray())
            self._lu = None
        else:
            self._cho = None
            self._lu = spla.splu(M.tocsc())

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.zeros_like(b)
        if self._cho is not None:
            return sla.cho_solve(self._cho, b)
        if b.ndim == 1:
            return self._lu.solve(b)
        return np.column_stack([self._lu.solve(np.ascontiguousarray(b[:, j])) for j in range(b.shape[1])])


def _dense_schur(M: sp.spmatrix, gamma: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """Boundary block minus the interior-eliminated coupling, densely."""
    Mc = M.tocsr()
    S = Mc[gamma][:, gamma].toarray()
    if inner.size and gamma.size:
        Mgi = Mc[gamma][:, inner].toarray()
        inv = _InteriorSolver(Mc[inner][:, inner])
        S -= Mgi @ inv.solve(Mgi.T)
    return S


@dataclass
class TotalPressureSolver:
    """Additive sum of scaled local inverse mass Schur complements."""

    factors: dict[int, tuple]
    restrict: dict[int, sp.csr_matrix]
    n: int

    def apply(self, r: np.ndarray) -> np.ndarray:
        out = np.zeros_like(r)
        for s, R in sorted(self.restrict.items()):
            if R.shape[0] == 0:
                continue
            out += R.T @ sla.cho_solve(self.factors[s], R @ r)
        return out


def build_xi_solver(system: BlockSystem, cls: DofClassification, restrictions: RestrictionSet) -> TotalPressureSolver:
    mats = system.materials
    factors = {}
    for s in sorted(system.local):
        lb = system.local[s]
        gamma = lb.xi_pos(cls.xi_sub_interface[s])
        if gamma.size == 0:
            continue
        inner = lb.xi_pos(cls.xi_interior[s])
        S = _dense_schur(lb.C, gamma, inner)
        ratio = float(mats.lam[s] / mats.mu[s])
        factors[s] = sla.cho_factor(ratio * S)
    return TotalPressureSolver(
        factors=factors,
        restrict={s: restrictions.xi_local_scaled[s] for s in factors},
        n=cls.xi_interface.size,
    )


@dataclass
class PressureBddc:
    """Balancing preconditioner on the pressure trace.

    The partially assembled Schur complement is never formed; its inverse
    is applied through per-subdomain dual factorizations and one dense
    coarse solve.
    """

    inject_scaled: sp.csr_matrix  # assembled trace -> partially assembled
    dual_cho: dict[int, tuple]
    Y: dict[int, np.ndarray]  # dual block inverse times primal coupling
    primal_idx: dict[int, np.ndarray]
    dual_slices: dict[int, slice]
    coarse_cho: tuple | None
    n_dual_broken: int
    n_primal: int

    def apply(self, r: np.ndarray) -> np.ndarray:
        rt = self.inject_scaled @ r
        r_dual = rt[: self.n_dual_broken]
        t_P = np.array(rt[self.n_dual_broken :], copy=True)
        v = {}
        for s, sl in sorted(self.dual_slices.items()):
            if sl.stop == sl.start:
                v[s] = np.zeros(0)
                continue
            v[s] = sla.cho_solve(self.dual_cho[s], r_dual[sl])
            if self.primal_idx[s].size:
                t_P[self.primal_idx[s]] -= self.Y[s].T @ r_dual[sl]
        x = np.empty_like(rt)
        x_P = sla.cho_solve(self.coarse_cho, t_P) if self.n_primal else t_P
        x[self.n_dual_broken :] = x_P
        for s, sl in sorted(self.dual_slices.items()):
            xs = v[s]
            if xs.size and self.primal_idx[s].size:
                xs = xs - self.Y[s] @ x_P[self.primal_idx[s]]
            x[sl] = xs
        return self.inject_scaled.T @ x


def build_p_bddc(system: BlockSystem, cls: DofClassification, restrictions: RestrictionSet) -> PressureBddc:
    n_primal = cls.p_primal.size
    primal_rank = {int(d): k for k, d in enumerate(cls.p_primal)}
    dual_cho = {}
    Y = {}
    primal_idx = {}
    dual_slices = {}
    F = np.zeros((n_primal, n_primal))
    off = 0
    for s in sorted(system.local):
        lb = system.local[s]
        ids = cls.p_sub_interface[s]
        gamma = lb.p_pos(ids)
        inner = lb.p_pos(cls.p_interior[s])
        S = _dense_schur(lb.E, gamma, inner)
        is_dual = np.isin(ids, cls.p_dual)
        nd = int(np.count_nonzero(is_dual))
        d_loc = np.flatnonzero(is_dual)
        p_loc = np.flatnonzero(~is_dual)
        pidx = np.array([primal_rank[int(d)] for d in ids[~is_dual]], dtype=np.int64)
        S_dd = S[np.ix_(d_loc, d_loc)]
        S_dp = S[np.ix_(d_loc, p_loc)]
        S_pp = S[np.ix_(p_loc, p_loc)]
        cho = sla.cho_factor(S_dd) if nd else None
        Ys = sla.cho_solve(cho, S_dp) if nd and pidx.size else np.zeros((nd, pidx.size))
        dual_cho[s] = cho
        Y[s] = Ys
        primal_idx[s] = pidx
        dual_slices[s] = slice(off, off + nd)
        if pidx.size:
            F[np.ix_(pidx, pidx)] += S_pp - S_dp.T @ Ys
        off += nd
    coarse = sla.cho_factor(F) if n_primal else None
    return PressureBddc(
        inject_scaled=restrictions.p_inject_scaled,
        dual_cho=dual_cho,
        Y=Y,
        primal_idx=primal_idx,
        dual_slices=dual_slices,
        coarse_cho=coarse,
        n_dual_broken=off,
        n_primal=n_primal,
    )


@dataclass
class LagrangeSolver:
    """Scaled-jump preconditioner for the multiplier block."""

    kind: str
    jump_scaled: sp.csr_matrix
    dual_slices: dict[int, slice]
    A_DD: dict[int, sp.csr_matrix]
    A_DI: dict[int, sp.csr_matrix]
    interior: dict[int, _InteriorSolver]

    def apply(self, r: np.ndarray) -> np.ndarray:
        t = self.jump_scaled.T @ r
        out = np.zeros_like(t)
        for s, sl in sorted(self.dual_slices.items()):
            ts = t[sl]
            if ts.size == 0:
                continue
            Ht = self.A_DD[s] @ ts
            if self.kind == "dirichlet":
                Ht = Ht - self.A_DI[s] @ self.interior[s].solve(self.A_DI[s].T @ ts)
            out[sl] = Ht
        return self.jump_scaled @ out


def build_lambda_solver(
    system: BlockSystem, cls: DofClassification, jump: JumpOperator, kind: str
) -> LagrangeSolver:
    if kind not in ("dirichlet", "lumped"):
        raise ConfigurationError(f"unknown multiplier preconditioner {kind!r}")
    lay = cls.layout
    A_DD = {}
    A_DI = {}
    interior = {}
    dual_slices = {}
    for s in sorted(system.local):
        lb = system.local[s]
        iD = lb.u_pos(cls.u_sub_dual[s])
        iI = lb.u_pos(cls.u_interior[s])
        Ac = lb.A.tocsr()
        A_DD[s] = Ac[iD][:, iD]
        dual_slices[s] = slice(lay.dual_offset[s], lay.dual_offset[s] + iD.size)
        if kind == "dirichlet":
            A_DI[s] = Ac[iD][:, iI]
            interior[s] = _InteriorSolver(Ac[iI][:, iI])
    return LagrangeSolver(
        kind=kind,
        jump_scaled=jump.jump_scaled,
        dual_slices=dual_slices,
        A_DD=A_DD,
        A_DI=A_DI,
        interior=interior,
    )


@dataclass
class BlockPreconditioner:
    """Concatenation of the three segment preconditioners."""

    xi: TotalPressureSolver | None
    pressure: PressureBddc | None
    multiplier: LagrangeSolver
    segments: tuple[int, int, int]

    def apply(self, r: np.ndarray) -> np.ndarray:
        n_xi, n_p, n_lam = self.segments
        if r.size != n_xi + n_p + n_lam:
            raise InternalError("preconditioner applied to a vector of the wrong size")
        parts = []
        if n_xi:
            parts.append(self.xi.apply(r[:n_xi]))
        if n_p:
            parts.append(self.pressure.apply(r[n_xi : n_xi + n_p]))
        parts.append(self.multiplier.apply(r[n_xi + n_p :]))
        return np.concatenate(parts) if parts else np.zeros(0)


def build_preconditioner(
    system: BlockSystem,
    cls: DofClassification,
    jump: JumpOperator,
    restrictions: RestrictionSet,
    multiplier_kind: str = "dirichlet",
) -> BlockPreconditioner:
    lay = cls.layout
    n_xi = lay.xi_iface.size
    n_p = lay.p_iface.size
    xi = build_xi_solver(system, cls, restrictions) if n_xi else None
    bddc = build_p_bddc(system, cls, restrictions) if n_p else None
    lam = build_lambda_solver(system, cls, jump, multiplier_kind)
    return BlockPreconditioner(xi=xi, pressure=bddc, multiplier=lam, segments=(n_xi, n_p, lay.n_lambda))
