"""Shared oracles for the test suite.

Dense reconstructions of matrix-free operators, assembled interface Schur
complements, and generalized spectra of preconditioned blocks.  Everything
here goes through an independent route (dense factorizations, explicit
column probing) so the solver modules are checked against something they
do not share code with.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from biot_ddp.preconditioner import _dense_schur


def dense_from_apply(apply, n: int) -> np.ndarray:
    """Probe a linear operator column by column."""
    out = np.zeros((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        out[:, j] = apply(e)
    return out


def preconditioned_spectrum(apply_minv, S: np.ndarray) -> np.ndarray:
    """Eigenvalues of M^-1 S via the symmetric pencil L^T S L, L L^T = M^-1."""
    n = S.shape[0]
    if n == 0:
        return np.zeros(0)
    Minv = dense_from_apply(apply_minv, n)
    Minv = 0.5 * (Minv + Minv.T)
    L = np.linalg.cholesky(Minv)
    return np.linalg.eigvalsh(L.T @ S @ L)


def assembled_pressure_schur(pipe) -> np.ndarray:
    """Schur complement of the pressure stiffness block on its interface.

    Interior pressure dofs never couple across subdomains, so eliminating
    them from the assembled block equals assembling the per-subdomain
    Schur complements.
    """
    cls = pipe.cls
    gamma = cls.p_interface
    inner = np.concatenate([cls.p_interior[s] for s in range(cls.n_subdomains)])
    return _dense_schur(pipe.system.E, gamma, np.sort(inner))


def assembled_total_pressure_schur(pipe) -> np.ndarray:
    """Sum of stiffness-weighted local mass Schur complements on the
    shared total pressure dofs."""
    cls = pipe.cls
    mats = pipe.materials
    n_gamma = len(cls.xi_interface)
    S = np.zeros((n_gamma, n_gamma))
    for s in range(cls.n_subdomains):
        lb = pipe.system.local[s]
        gamma = lb.xi_pos(np.asarray(cls.xi_sub_interface[s], dtype=np.int64))
        inner = lb.xi_pos(np.asarray(cls.xi_interior[s], dtype=np.int64))
        S_loc = _dense_schur(lb.C, gamma, inner)
        rows = pipe.cls.layout.xi_iface_pos(np.asarray(cls.xi_sub_interface[s], dtype=np.int64))
        weight = mats.lam[s] / mats.mu[s]
        S[np.ix_(rows, rows)] += weight * S_loc
    return S


def dense_torn_solution(red) -> np.ndarray:
    """Interface unknowns from one sparse solve of the full torn saddle
    system, bypassing the reduction entirely."""
    K = red.torn_matrix().tocsc()
    rhs = red.torn_rhs()
    x = sp.linalg.spsolve(K, rhs)
    return x[red.layout.n_w :]


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    scale = float(np.max(np.abs(want))) if want.size else 0.0
    diff = float(np.max(np.abs(np.asarray(got) - np.asarray(want)))) if want.size else 0.0
    return diff / scale if scale > 0.0 else diff


def dense_generalized_eigs(G: np.ndarray, Minv: np.ndarray) -> np.ndarray:
    """Spectrum of M^-1 G from dense symmetric pencils."""
    Minv = 0.5 * (Minv + Minv.T)
    L = np.linalg.cholesky(Minv)
    return np.linalg.eigvalsh(L.T @ (0.5 * (G + G.T)) @ L)


def random_spd(n: int, cond: float, rng: np.random.Generator) -> np.ndarray:
    """Random SPD matrix with prescribed condition number."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    vals = np.geomspace(1.0, cond, n)
    return (Q * vals) @ Q.T
