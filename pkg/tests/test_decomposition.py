"""Partitioning, dof classification, scalings, jump, and restrictions.

The reference case is the 8-cell unit square cut into 2x2 subdomains with
the traction boundary on the left: there the interface cross carries two
coarse vertices (the center and the left edge midpoint), which pins every
count below.
"""

import json

import numpy as np
import pytest

import biot_ddp as bd


def classify(nx=8, grid=(2, 2), variant="p1", primal="vertex", bc=None):
    mesh = bd.build_mesh(nx, grid)
    part = bd.partition(mesh, grid)
    bc = bc or bd.BoundarySpec.neumann_left()
    spaces = bd.build_spaces(mesh, variant, bc)
    return part, spaces, bd.classify_dofs(part, spaces, primal)


class TestPartition:
    def test_element_counts(self):
        mesh = bd.build_mesh(8, (2, 2))
        part = bd.partition(mesh, (2, 2))
        assert part.n_subdomains == 4
        assert sorted(len(v) for v in part.base_elements.values()) == [32] * 4
        assert sorted(len(v) for v in part.refined_elements.values()) == [128] * 4

    def test_elements_partition_the_mesh(self):
        mesh = bd.build_mesh(12, (3, 3))
        part = bd.partition(mesh, (3, 3))
        all_base = np.sort(np.concatenate(list(part.base_elements.values())))
        np.testing.assert_array_equal(all_base, np.arange(mesh.triangles.shape[0]))

    def test_diameters(self):
        mesh = bd.build_mesh(8, (2, 2))
        part = bd.partition(mesh, (2, 2))
        assert np.allclose(part.diameters, np.hypot(0.5, 0.5))


class TestClassification:
    def test_reference_counts(self):
        _, _, cls = classify()
        assert sorted(len(cls.u_interior[s]) for s in range(4)) == [98, 98, 112, 112]
        assert cls.u_dual.size == 56
        assert cls.u_primal.size == 4
        assert cls.xi_interface.size == 17
        assert cls.p_dual.size == 12
        assert cls.p_primal.size == 2
        lay = cls.layout
        assert (lay.n_w, lay.n_y, lay.n_lambda) == (642, 87, 56)

    def test_classification_partitions_dofs(self):
        for variant in ("p1", "p0"):
            for primal in ("vertex", "vertex-edge"):
                _, spaces, cls = classify(12, (3, 3), variant, primal)
                n_sub = cls.n_subdomains
                u_all = np.concatenate(
                    [cls.u_interior[s] for s in range(n_sub)]
                    + [cls.u_dual, cls.u_primal]
                )
                assert np.unique(u_all).size == u_all.size == spaces.n_u
                xi_all = np.concatenate(
                    [cls.xi_interior[s] for s in range(n_sub)] + [cls.xi_interface]
                )
                assert np.unique(xi_all).size == xi_all.size == spaces.n_xi
                p_all = np.concatenate(
                    [cls.p_interior[s] for s in range(n_sub)]
                    + [cls.p_dual, cls.p_primal]
                )
                assert np.unique(p_all).size == p_all.size == spaces.n_p

    def test_dual_lists_sorted_and_paired(self):
        _, _, cls = classify(12, (3, 3))
        assert np.all(np.diff(cls.u_dual) > 0)
        assert np.all(cls.u_dual_pairs[:, 0] < cls.u_dual_pairs[:, 1])

    def test_p0_total_pressure_has_no_interface(self):
        _, _, cls = classify(variant="p0")
        assert cls.xi_interface.size == 0
        assert sorted(len(v) for v in cls.xi_interior.values()) == [32] * 4

    def test_traction_boundary_cross_point_is_primal(self):
        # the left edge midpoint of the 2x2 split sits on the traction
        # boundary; it is shared by two subdomains and must be coarse
        _, spaces, cls = classify()
        node = 8 * 17  # refined-mesh node at (0, 0.5)
        dof = spaces.u_dof_of_node[node]
        assert dof in cls.u_primal and dof + 1 in cls.u_primal

    def test_all_dirichlet_leaves_center_only(self):
        _, _, cls = classify(bc=bd.BoundarySpec.all_dirichlet())
        assert cls.u_primal.size == 2
        assert cls.p_primal.size == 1

    def test_vertex_edge_counts(self):
        _, _, cls = classify(primal="vertex-edge")
        assert cls.u_primal.size == 12  # 2 vertices + 4 edges x 2 components
        assert cls.p_primal.size == 6
        assert cls.u_transform is not None and cls.p_transform is not None

    def test_vertex_only_needs_no_transform(self):
        _, _, cls = classify(primal="vertex")
        assert cls.u_transform is None and cls.p_transform is None

    def test_edge_average_transform_invertible(self):
        _, spaces, cls = classify(primal="vertex-edge")
        T = cls.u_transform.toarray()
        assert T.shape == (spaces.n_u, spaces.n_u)
        assert abs(np.linalg.det(T)) > 1e-12

    def test_edge_average_column_structure(self):
        # each edge group has one all-ones column (the average) and
        # zero-mean columns for the remaining local dofs
        _, _, cls = classify(primal="vertex-edge")
        T = cls.p_transform.toarray()
        multi = np.where((T != 0).sum(axis=0) > 1)[0]
        assert multi.size == 12  # 4 edges x (1 average + 2 deviations)
        n_avg = 0
        for c in multi:
            col = T[:, c]
            if np.all(col[col != 0] == 1.0):
                n_avg += 1
            else:
                assert col.sum() == pytest.approx(0.0, abs=1e-14)
        assert n_avg == 4

    def test_to_json_roundtrip(self):
        _, _, cls = classify()
        data = json.loads(cls.to_json())
        assert data["variant"] == "vertex"
        assert len(data["displacement"]["dual"]) == 56
        assert len(data["total_pressure"]["interface"]) == 17

    def test_unknown_primal_variant_rejected(self):
        part, spaces, _ = classify()
        with pytest.raises(bd.ConfigurationError):
            bd.classify_dofs(part, spaces, "corner")


class TestScalings:
    def test_partition_of_unity_exact(self):
        mats = bd.MaterialField.checkerboard(
            (3, 3), E=1.0, nu=0.3, alpha=1.0, kappa=1.0,
            black={"E": 1e4, "kappa": 1e-3},
        )
        _, _, cls = classify(12, (3, 3))
        sc = bd.build_scalings(cls, mats)
        for dof, pair in zip(cls.u_dual, cls.u_dual_pairs):
            total = sum(sc.weight("disp", int(dof), int(s)) for s in pair)
            assert total == 1.0  # exact by construction, not approx
        for dof in cls.xi_interface:
            subs = cls.xi_sharing[int(dof)]
            assert sum(sc.weight("total_pressure", int(dof), s) for s in subs) == 1.0
        for dof in np.concatenate([cls.p_dual, cls.p_primal]):
            subs = cls.p_sharing[int(dof)]
            assert sum(sc.weight("pressure", int(dof), s) for s in subs) == 1.0

    def test_weights_follow_material_contrast(self):
        # displacement weights scale with mu, total pressure with 1/mu,
        # pressure with kappa
        mats = bd.MaterialField.checkerboard(
            (2, 2), E=1.0, nu=0.3, alpha=1.0, kappa=1.0,
            black={"E": 99.0, "kappa": 4.0},
        )
        _, _, cls = classify()
        sc = bd.build_scalings(cls, mats)
        dof = int(cls.u_dual[0])
        s0, s1 = cls.u_dual_pair(dof)
        ratio = sc.weight("disp", dof, s0) / sc.weight("disp", dof, s1)
        assert ratio == pytest.approx(mats.mu[s0] / mats.mu[s1])
        xd = int(cls.xi_interface[0])
        t0, t1 = cls.xi_sharing[xd][:2]
        ratio = sc.weight("total_pressure", xd, t0) / sc.weight("total_pressure", xd, t1)
        assert ratio == pytest.approx(mats.mu[t1] / mats.mu[t0])
        pd = int(cls.p_dual[0])
        q0, q1 = cls.p_sharing[pd][:2]
        ratio = sc.weight("pressure", pd, q0) / sc.weight("pressure", pd, q1)
        assert ratio == pytest.approx(mats.kappa[q0] / mats.kappa[q1])


class TestJump:
    @staticmethod
    def build(grid=(2, 2), nx=8, black=None):
        mats = (
            bd.MaterialField.checkerboard(grid, E=1.0, nu=0.3, alpha=1.0, kappa=1.0, black=black)
            if black
            else bd.MaterialField.uniform(grid, E=1.0, nu=0.3, alpha=1.0, kappa=1.0)
        )
        _, _, cls = classify(nx, grid)
        sc = bd.build_scalings(cls, mats)
        return cls, bd.build_jump(cls, sc)

    def test_rows_are_signed_pairs(self):
        cls, jump = self.build()
        B = jump.jump.tocsr()
        assert jump.n_multipliers == cls.u_dual.size
        for k in range(B.shape[0]):
            row = B.getrow(k)
            assert row.nnz == 2
            assert sorted(row.data) == [-1.0, 1.0]

    def test_scaled_jump_identity_exact(self):
        _, jump = self.build(black={"E": 1e3})
        prod = (jump.jump @ jump.jump_scaled.T).toarray()
        np.testing.assert_array_equal(prod, np.eye(jump.n_multipliers))

    def test_jump_annihilates_continuous_traces(self):
        cls, jump = self.build()
        B = jump.jump.tocsr()
        rng = np.random.default_rng(0)
        w = np.zeros(B.shape[1])
        for k in range(B.shape[0]):
            w[B.getrow(k).indices] = rng.standard_normal()
        assert np.max(np.abs(B @ w)) == 0.0


class TestRestrictions:
    @staticmethod
    def build(black=None):
        mats = (
            bd.MaterialField.checkerboard((2, 2), E=1.0, nu=0.3, alpha=1.0, kappa=1.0, black=black)
            if black
            else bd.MaterialField.uniform((2, 2), E=1.0, nu=0.3, alpha=1.0, kappa=1.0)
        )
        _, _, cls = classify()
        sc = bd.build_scalings(cls, mats)
        return cls, bd.build_restrictions(cls, sc)

    def test_averaging_operators_are_projections(self):
        _, rs = self.build(black={"E": 50.0})
        P = rs.averaging_xi().toarray()
        np.testing.assert_allclose(P @ P, P, atol=1e-14)
        Pp = rs.averaging_p().toarray()
        np.testing.assert_allclose(Pp @ Pp, Pp, atol=1e-14)

    def test_break_then_average_is_identity(self):
        cls, rs = self.build(black={"E": 50.0})
        rng = np.random.default_rng(1)
        xg = rng.standard_normal(cls.xi_interface.size)
        err = rs.xi_break_scaled.T @ (rs.xi_break @ xg) - xg
        assert np.max(np.abs(err)) < 1e-14
        pg = rng.standard_normal(cls.p_interface.size)
        err = rs.p_inject_scaled.T @ (rs.p_inject @ pg) - pg
        assert np.max(np.abs(err)) < 1e-14


class TestTransformSystem:
    @staticmethod
    def assemble(primal):
        mesh = bd.build_mesh(8, (2, 2))
        bc = bd.BoundarySpec.neumann_left()
        mats = bd.MaterialField.uniform((2, 2), E=1.0, nu=0.3, alpha=1.0, kappa=1.0)
        spaces = bd.build_spaces(mesh, "p1", bc)
        system = bd.assemble_blocks(mesh, spaces, mats, bc, bd.LoadSpec())
        part = bd.partition(mesh, (2, 2))
        cls = bd.classify_dofs(part, spaces, primal)
        return system, cls

    def test_vertex_variant_untouched(self):
        system, cls = self.assemble("vertex")
        assert bd.transform_system(system, cls) is system

    def test_edge_average_congruence(self):
        system, cls = self.assemble("vertex-edge")
        out = bd.transform_system(system, cls)
        Tu = cls.u_transform.toarray()
        Tp = cls.p_transform.toarray()
        np.testing.assert_allclose(
            out.A.toarray(), Tu.T @ system.A.toarray() @ Tu, atol=1e-12
        )
        np.testing.assert_allclose(
            out.E.toarray(), Tp.T @ system.E.toarray() @ Tp, atol=1e-12
        )
        np.testing.assert_allclose(
            out.B.toarray(), system.B.toarray() @ Tu, atol=1e-12
        )

    def test_recover_nodal_applies_transform(self):
        _, cls = self.assemble("vertex-edge")
        rng = np.random.default_rng(5)
        ut = rng.standard_normal(cls.u_transform.shape[1])
        pt = rng.standard_normal(cls.p_transform.shape[1])
        ur, pr = bd.recover_nodal(cls, ut, pt)
        np.testing.assert_allclose(ur, cls.u_transform @ ut, atol=1e-14)
        np.testing.assert_allclose(pr, cls.p_transform @ pt, atol=1e-14)

    def test_recover_nodal_identity_for_vertex(self):
        _, cls = self.assemble("vertex")
        u = np.arange(4.0)
        ur, pr = bd.recover_nodal(cls, u, u + 1)
        np.testing.assert_array_equal(ur, u)
        np.testing.assert_array_equal(pr, u + 1)
