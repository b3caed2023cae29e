"""Tests for the DNS solver: affine BCs, Newton convergence, stabilized
damage post, and response extraction."""

import numpy as np
import pytest

from porocal import material, voigt
from porocal.errors import ConfigError, ConstitutiveError
from porocal.material import DamageParams, MaterialProps, PointState
from porocal.microstructure import PoreSet, VoxelMesh, voxelize
from porocal.rve_solver import (
    MacroLoad,
    MacroState,
    ResponseCurve,
    apply_macro_bc,
    extract_responses,
    load_curve,
    macro_damage,
    run_dns,
    save_curve,
    solve_reference_rve,
    stabilized_damage_post,
    uniaxial_stretch,
)


def homogeneous_mesh(res):
    return VoxelMesh(resolution=res, side_length=1.0,
                     indicator=np.zeros((res,) * 3, dtype=np.uint8))


def porous_mesh(res=8):
    centers = np.array([[0.3, 0.4, 0.5], [0.7, 0.6, 0.5]])
    pores = PoreSet(centers=centers, semiaxes=np.full((2, 3), 0.16),
                    quats=np.tile([1.0, 0.0, 0.0, 0.0], (2, 1)))
    return voxelize(pores, res)


EQ36 = np.diag([1.1, 0.95, 0.95])


class TestMacroLoad:
    def test_identity_gives_zero_strain(self):
        load = MacroLoad(np.eye(3))
        assert np.all(load.strain_voigt(1.0) == 0.0)

    def test_proportional_strain(self):
        load = MacroLoad(EQ36)
        e = load.strain_voigt(0.5)
        np.testing.assert_allclose(e, [0.05, -0.025, -0.025, 0, 0, 0],
                                   atol=1e-15)

    def test_negative_determinant_rejected(self):
        with pytest.raises(ConfigError):
            MacroLoad(np.diag([-1.0, 1.0, 1.0]))


class TestApplyMacroBc:
    def test_identity_gradient_zero_displacement(self):
        bc = apply_macro_bc(homogeneous_mesh(8), np.eye(3))
        assert np.all(bc.values == 0.0)

    def test_axial_corner(self):
        bc = apply_macro_bc(homogeneous_mesh(8), EQ36)
        i = np.nonzero((bc.coords == [1.0, 0.0, 0.0]).all(axis=1))[0][0]
        np.testing.assert_allclose(bc.values[i], [0.1, 0.0, 0.0], atol=1e-15)

    def test_lateral_corner(self):
        bc = apply_macro_bc(homogeneous_mesh(8), EQ36)
        i = np.nonzero((bc.coords == [0.0, 1.0, 1.0]).all(axis=1))[0][0]
        np.testing.assert_allclose(bc.values[i], [0.0, -0.05, -0.05],
                                   atol=1e-15)

    def test_covers_all_boundary_nodes(self):
        res = 6
        bc = apply_macro_bc(homogeneous_mesh(res), EQ36)
        assert len(bc.node_ids) == (res + 1) ** 3 - (res - 1) ** 3


class TestSolveReference:
    def test_zero_load_zero_fields(self):
        res = solve_reference_rve(homogeneous_mesh(4), MaterialProps(),
                                  MacroLoad(np.eye(3), n_steps=2))
        assert np.all(res.u_hist == 0.0)
        assert np.all(res.sig_hist == 0.0)
        assert np.all(res.eqpl_hist == 0.0)

    def test_homogeneous_elastic_uniform_strain(self):
        # affine BC on a homogeneous body: every IP sees sym(f - I)
        props = MaterialProps()
        f = np.eye(3) + np.array([[0.0005, 0.0002, 0.0],
                                  [0.0, 0.0001, 0.0003],
                                  [0.0, 0.0, -0.0004]])
        load = MacroLoad(f, n_steps=2)
        res = solve_reference_rve(homogeneous_mesh(4), props, load)
        c = material.elastic_tangent(props)
        expect = c @ load.strain_voigt(1.0)
        np.testing.assert_allclose(
            res.sig_hist[-1].reshape(-1, 6),
            np.broadcast_to(expect, (res.grid.n_elems * 8, 6)),
            rtol=1e-9, atol=1e-12)
        # interior displacement is the affine field
        g = res.grid
        expect_u = (g.node_coords @ (f - np.eye(3)).T).ravel()
        np.testing.assert_allclose(res.u_hist[-1], expect_u, atol=1e-12)

    def test_homogeneous_plastic_matches_point_oracle(self):
        props = MaterialProps()
        load = MacroLoad(np.diag([1.03, 0.99, 0.99]), n_steps=6)
        res = solve_reference_rve(homogeneous_mesh(4), props, load)
        state = PointState()
        w = (res.grid.h / 2.0) ** 3
        vol = res.grid.side_length ** 3
        for step, t in enumerate(res.ts):
            strain = load.strain_voigt(t)
            stress, state, _ = material.j2_return_map(state, strain, props)
            s_avg = w * res.sig_hist[step].sum(axis=(0, 1)) / vol
            np.testing.assert_allclose(s_avg, stress,
                                       rtol=1e-6, atol=1e-8)
        assert res.eqpl_hist[-1].max() > 0  # the path actually yields

    def test_newton_converges_quadratically_ish(self):
        load = MacroLoad(np.diag([1.03, 0.99, 0.99]), n_steps=6)
        res = solve_reference_rve(porous_mesh(8), MaterialProps(), load)
        saw_plastic_step = False
        for hist in res.newton_log:
            if len(hist) >= 3:
                saw_plastic_step = True
                first_ratio = hist[1] / hist[0]
                last_ratio = hist[-1] / hist[-2]
                assert last_ratio < first_ratio
        assert saw_plastic_step

    def test_deterministic(self):
        load = MacroLoad(np.diag([1.02, 0.995, 0.995]), n_steps=3)
        a = solve_reference_rve(porous_mesh(8), MaterialProps(), load)
        b = solve_reference_rve(porous_mesh(8), MaterialProps(), load)
        assert np.array_equal(a.u_hist, b.u_hist)
        assert np.array_equal(a.sig_hist, b.sig_hist)


class TestMacroDamage:
    def test_endpoints_exact(self):
        s1 = np.array([100.0, 3.0, 2.0, 1.0, 0.0, 0.5])
        assert macro_damage(s1, s1) == 0.0
        assert macro_damage(np.zeros(6), s1) == 1.0

    def test_zero_reference_rejected(self):
        with pytest.raises(ConstitutiveError):
            macro_damage(np.zeros(6), np.zeros(6))


class TestStabilizedDamagePost:
    def test_no_plasticity_means_no_damage(self):
        props = MaterialProps()
        load = MacroLoad(np.diag([1.001, 1.0, 1.0]), n_steps=2)
        res = solve_reference_rve(homogeneous_mesh(4), props, load)
        post = stabilized_damage_post(res, DamageParams())
        for s in post.states:
            assert s.d_macro == 0.0
            np.testing.assert_allclose(s.sd, s.s1, rtol=1e-14)

    def test_uniform_damage_scales_stress(self):
        # fabricate a uniform plastic field: uniform eq_pl -> uniform D
        props = MaterialProps()
        load = MacroLoad(np.diag([1.03, 0.99, 0.99]), n_steps=4)
        res = solve_reference_rve(homogeneous_mesh(4), props, load)
        params = DamageParams(e_cr=0.001, alpha=50.0)
        post = stabilized_damage_post(res, params)
        eq = res.eqpl_hist[-1]
        assert eq.std() < 1e-10 * max(eq.mean(), 1e-30)
        d = float(material.damage_value(eq.ravel()[0], params))
        state = post.states[-1]
        np.testing.assert_allclose(state.sd, (1 - d) * state.s1,
                                   rtol=1e-12, atol=1e-12)
        assert abs(state.d_macro - d) < 1e-12

    def test_damage_field_access(self):
        props = MaterialProps()
        load = MacroLoad(np.diag([1.03, 0.99, 0.99]), n_steps=3)
        res = solve_reference_rve(porous_mesh(8), props, load)
        post = stabilized_damage_post(res, DamageParams(e_cr=0.005))
        d = post.damage_field(2)
        s3 = post.damaged_stress(2)
        assert d.shape == res.eqpl_hist[2].shape
        assert np.all(d >= 0) and np.all(d <= 1)
        np.testing.assert_allclose(
            s3, (1 - d)[..., None] * res.sig_hist[2], rtol=1e-14)


class TestResponseCurve:
    def test_triangle_toughness(self):
        curve = ResponseCurve(step=np.array([1, 2]),
                              strain=np.array([0.0, 0.02]),
                              stress_undamaged=np.array([0.0, 150.0]),
                              stress_damaged=np.array([0.0, 150.0]),
                              d_macro=np.zeros(2))
        assert abs(curve.uts - 150.0) < 1e-12
        assert abs(curve.toughness - 150.0 * 0.02 / 2.0) < 1e-12

    def test_origin_prepended_when_missing(self):
        curve = ResponseCurve(step=np.array([1, 2]),
                              strain=np.array([0.01, 0.02]),
                              stress_undamaged=np.array([100.0, 200.0]),
                              stress_damaged=np.array([100.0, 200.0]),
                              d_macro=np.zeros(2))
        # areas: 0.5*100*0.01 + 0.5*(100+200)*0.01
        assert abs(curve.toughness - (0.5 + 1.5)) < 1e-12

    def test_non_monotone_strain_rejected(self):
        with pytest.raises(ConfigError):
            ResponseCurve(step=np.array([1, 2]),
                          strain=np.array([0.02, 0.01]),
                          stress_undamaged=np.zeros(2),
                          stress_damaged=np.zeros(2),
                          d_macro=np.zeros(2))

    def test_too_few_steps_rejected(self):
        with pytest.raises(ConfigError):
            extract_responses(uniaxial_stretch(n_steps=1), np.array([1.0]),
                              [MacroState(np.ones(6), np.ones(6),
                                          np.zeros(6), 0.0)])

    def test_csv_roundtrip(self, tmp_path):
        curve = ResponseCurve(step=np.array([1, 2, 3]),
                              strain=np.array([0.01, 0.02, 0.03]),
                              stress_undamaged=np.array([10.0, 19.0, 27.0]),
                              stress_damaged=np.array([10.0, 18.0, 24.0]),
                              d_macro=np.array([0.0, 0.05, 0.11]))
        p = tmp_path / "c.csv"
        save_curve(curve, p)
        back = load_curve(p)
        assert np.array_equal(back.step, curve.step)
        assert np.array_equal(back.strain, curve.strain)
        assert np.array_equal(back.stress_damaged, curve.stress_damaged)
        assert back.uts == curve.uts
        assert back.toughness == curve.toughness
        lines = p.read_text().splitlines()
        assert lines[0] == "step,strain,stress_undamaged,stress_damaged,d_macro"
        assert lines[-2] == "uts,toughness"


class TestRunDns:
    def test_pore_free_elastic_no_damage(self):
        load = MacroLoad(np.diag([1.002, 0.999, 0.999]), n_steps=3)
        curve = run_dns(homogeneous_mesh(4), MaterialProps(),
                        DamageParams(), load)
        assert np.all(curve.d_macro == 0.0)
        np.testing.assert_allclose(curve.stress_damaged,
                                   curve.stress_undamaged, rtol=1e-14)

    def test_deterministic(self):
        load = MacroLoad(np.diag([1.02, 0.995, 0.995]), n_steps=3)
        a = run_dns(porous_mesh(8), MaterialProps(), DamageParams(), load)
        b = run_dns(porous_mesh(8), MaterialProps(), DamageParams(), load)
        assert np.array_equal(a.stress_damaged, b.stress_damaged)
        assert a.uts == b.uts and a.toughness == b.toughness

    def test_damage_monotone_and_bounded(self):
        load = MacroLoad(EQ36, n_steps=8)
        curve = run_dns(porous_mesh(8), MaterialProps(),
                        DamageParams(e_cr=0.01, alpha=60.0), load)
        assert np.all(curve.d_macro >= 0.0)
        assert np.all(curve.d_macro <= 1.0)
        assert np.all(np.diff(curve.d_macro) >= -1e-12)
        assert curve.d_macro[-1] > 0.01  # the load actually damages
        # damaged stress never exceeds undamaged
        assert np.all(curve.stress_damaged
                      <= curve.stress_undamaged + 1e-9)

    def test_toughness_non_increasing_in_alpha(self):
        load = MacroLoad(EQ36, n_steps=6)
        mesh = porous_mesh(8)
        tough = []
        for alpha in (10.0, 50.0, 100.0):
            curve = run_dns(mesh, MaterialProps(),
                            DamageParams(e_cr=0.01, alpha=alpha), load)
            tough.append(curve.toughness)
        assert tough[0] >= tough[1] >= tough[2]
        assert tough[0] > tough[2]  # alpha genuinely matters
