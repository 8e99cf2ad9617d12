"""Torn saddle assembly and the reduced interface operator.

The reduced operator is matrix free, so every check here rebuilds it by an
independent route: the sparse torn matrix (reassembled from local blocks),
dense elimination of the torn unknowns, or explicit column probing.
"""

import numpy as np
import pytest
import scipy.sparse as sp

import biot_ddp as bd
from biot_ddp.reduced_system import CoarseProblem, SaddleFactor
from helpers import dense_from_apply, dense_torn_solution, rel_err


def build(variant="p1", primal="vertex", pattern="uniform", **kw):
    cfg = bd.ExperimentConfig(
        nx=8,
        subdomains=(2, 2),
        total_pressure=variant,
        primal=primal,
        pattern=pattern,
        E=kw.pop("E", 1.0),
        nu=kw.pop("nu", 0.3),
        alpha=kw.pop("alpha", 0.9),
        kappa=kw.pop("kappa", 1.0),
        **kw,
    )
    return bd.build_pipeline(cfg)


class TestOperator:
    def test_symmetric_positive_definite(self):
        for variant in ("p1", "p0"):
            for primal in ("vertex", "vertex-edge"):
                red = build(variant, primal).reduced
                G = red.dense_operator()
                scale = np.abs(G).max()
                assert np.abs(G - G.T).max() < 1e-11 * scale
                assert np.linalg.eigvalsh(0.5 * (G + G.T)).min() > 0.0

    def test_matches_torn_elimination(self):
        # rebuild G = B_C A~^-1 B_C^T + C_hat from the sparse torn matrix,
        # a code path that shares nothing with apply()
        red = build(pattern="checkerboard", black={"E": 1e3}).reduced
        n_w = red.layout.n_w
        K = red.torn_matrix().toarray()
        A_t = K[:n_w, :n_w]
        B_C = red.B_C.toarray()
        G_ref = B_C @ np.linalg.solve(A_t, B_C.T) + red.C_hat.toarray()
        G = dense_from_apply(red.apply, red.n)
        assert rel_err(G, G_ref) < 1e-9

    def test_torn_blocks_match_fields(self):
        red = build().reduced
        K = red.torn_matrix()
        n_w = red.layout.n_w
        np.testing.assert_allclose(
            K[n_w:, :n_w].toarray(), red.B_C.toarray(), atol=1e-14
        )
        np.testing.assert_allclose(
            K[n_w:, n_w:].toarray(), -red.C_hat.toarray(), atol=1e-14
        )
        # the torn saddle matrix is symmetric as assembled
        assert (K - K.T).count_nonzero() == 0

    def test_segments_reference_case(self):
        red = build().reduced
        assert red.segments == (17, 14, 56)
        assert red.n == 87

    def test_split_roundtrip(self):
        red = build().reduced
        y = np.arange(float(red.n))
        xi, p, lam = red.split(y)
        assert (xi.size, p.size, lam.size) == red.segments
        np.testing.assert_array_equal(np.concatenate([xi, p, lam]), y)


class TestTornInverse:
    def test_solves_torn_stiffness(self):
        red = build(pattern="checkerboard", black={"E": 1e4, "kappa": 1e-2}).reduced
        n_w = red.layout.n_w
        A_t = red.torn_matrix().tocsr()[:n_w, :n_w]
        rng = np.random.default_rng(7)
        b = rng.standard_normal(n_w)
        x = red.apply_torn_inverse(b)
        res = np.linalg.norm(A_t @ x - b) / np.linalg.norm(b)
        assert res < 1e-9

    def test_rhs_matches_dense_elimination(self):
        red = build().reduced
        n_w = red.layout.n_w
        A_t = red.torn_matrix().toarray()[:n_w, :n_w]
        want = red.B_C.toarray() @ np.linalg.solve(A_t, red.f_w) - red.h
        assert rel_err(red.rhs(), want) < 1e-10


class TestSolveAndRecover:
    def test_reduction_consistent_with_monolithic_solve(self):
        red = build().reduced
        y = dense_torn_solution(red)
        assert rel_err(red.apply(y), red.rhs()) < 1e-8

    def test_recover_has_continuous_traces(self):
        red = build(pattern="checkerboard", black={"E": 100.0}).reduced
        G = red.dense_operator()
        y = np.linalg.solve(G, red.rhs())
        u, xi, p, jump_norm = red.recover(y)
        assert jump_norm < 1e-9
        assert u.size == red.cls.u_dual.size + sum(
            len(v) for v in red.cls.u_interior.values()
        ) + red.cls.u_primal.size

    def test_recovered_fields_solve_nodal_system(self):
        pipe = build()
        red = pipe.reduced
        y = np.linalg.solve(red.dense_operator(), red.rhs())
        u, xi, p, _ = red.recover(y)
        sys_ = pipe.nodal_system
        x = np.concatenate([u, xi, p])
        rhs = sys_.full_rhs()
        r = sys_.full_matrix() @ x - rhs
        assert np.linalg.norm(r) / np.linalg.norm(rhs) < 1e-8


class TestLocalFactors:
    @pytest.mark.filterwarnings("ignore::scipy.linalg.LinAlgWarning")
    def test_singular_block_rejected(self):
        # a matrix with a nullspace fails the residual probe
        K = sp.csr_matrix(np.ones((6, 6)))
        with pytest.raises(bd.ConfigurationError):
            SaddleFactor(K, "test block")

    def test_wellposed_block_accepted(self):
        rng = np.random.default_rng(2)
        Q = rng.standard_normal((8, 8))
        K = sp.csr_matrix(Q @ Q.T + 8 * np.eye(8))
        fac = SaddleFactor(K, "test block")
        b = rng.standard_normal(8)
        assert np.linalg.norm(K @ fac.solve(b) - b) < 1e-10

    def test_empty_block(self):
        fac = SaddleFactor(sp.csr_matrix((0, 0)), "empty")
        assert fac.solve(np.zeros(0)).size == 0


class TestCoarseProblem:
    def test_asymmetric_input_rejected(self):
        S = np.array([[2.0, 1.0], [0.0, 2.0]])
        with pytest.raises(bd.InternalError):
            CoarseProblem(S)

    def test_solves_spd_system(self):
        rng = np.random.default_rng(3)
        Q = rng.standard_normal((5, 5))
        S = Q @ Q.T + 5 * np.eye(5)
        coarse = CoarseProblem(S)
        b = rng.standard_normal(5)
        np.testing.assert_allclose(S @ coarse.solve(b), b, atol=1e-10)
