from unittest import TestCase

import numpy as np

from breakguard import (ChanceConfig, Field, ForwardModel, FunctionSpace,
    Geometry, MaterialParams, ShapeError, build_rect_mesh, chance_function,
    p_norm_stress, plain_rect_mesh, porosity_map, von_mises_stress)
from breakguard.forward_model import PNormStress

from tests.utils import BGTestCase, DELTA, GRADIENT_DELTA, relative_error


class TestStressFunctions(TestCase):

    def test_von_mises_uniaxial(self):
        self.assertAlmostEqual(von_mises_stress(5.0, 0.0, 0.0), 5.0,
            delta=DELTA)

    def test_von_mises_shear(self):
        self.assertAlmostEqual(von_mises_stress(0.0, 0.0, 1.0), np.sqrt(3),
            delta=DELTA)

    def test_von_mises_hydrostatic(self):
        self.assertAlmostEqual(von_mises_stress(2.0, 2.0, 0.0, 2.0), 0.0,
            delta=DELTA)

    def test_p_norm(self):
        values = np.array([1.0, 2.0])
        areas = np.array([0.5, 0.5])
        expected = (0.5 * 1.0 + 0.5 * 2.0**8)**(1 / 8)
        self.assertAlmostEqual(p_norm_stress(values, 8, areas), expected,
            delta=DELTA)

    def test_p_norm_approaches_max(self):
        values = np.array([1.0, 3.0, 2.0])
        areas = np.ones(3)
        self.assertAlmostEqual(p_norm_stress(values, 400, areas), 3.0,
            delta=1e-2)

    def test_p_norm_zero(self):
        self.assertEqual(p_norm_stress(np.zeros(4), 8, np.ones(4)), 0.0)

    def test_p_norm_exponent(self):
        self.assertRaises(ValueError, lambda: p_norm_stress([1.0], 1, [1.0]))


class TestPorosityMap(TestCase):

    def setUp(self):
        self.space = FunctionSpace(plain_rect_mesh(2, 2))

    def test_zero_argument(self):
        zero = Field.constant(self.space, 0.0)
        phi = porosity_map(zero, zero)
        np.testing.assert_array_equal(phi.values, np.full(9, 0.5))

    def test_symmetry(self):
        t = np.linspace(-3, 3, 9)
        zero = Field.constant(self.space, 0.0)
        a = porosity_map(Field(self.space, t), zero)
        b = porosity_map(Field(self.space, -t), zero)
        np.testing.assert_allclose(a.values + b.values, 1.0, atol=DELTA)
        np.testing.assert_allclose(a.phi_s.coefficients, b.values, atol=DELTA)

    def test_space_mismatch(self):
        other = FunctionSpace(plain_rect_mesh(2, 2))
        self.assertRaises(ShapeError, lambda: porosity_map(
            Field.constant(self.space, 0.0), Field.constant(other, 0.0)))


class TestParams(TestCase):

    def test_positive(self):
        self.assertRaises(ValueError, lambda: MaterialParams(kappa_s=0))
        self.assertRaises(ValueError, lambda: MaterialParams(D=-1))

    def test_vectors(self):
        self.assertRaises(ValueError, lambda: MaterialParams(u_bar=(0, 0, 0)))
        # lists from json become tuples
        self.assertEqual(MaterialParams(traction=[1, 2]).traction, (1.0, 2.0))

    def test_compliance_form(self):
        self.assertRaises(ValueError,
            lambda: MaterialParams(compliance_form="cubic"))

    def test_plane_stress_lame(self):
        p = MaterialParams(plane_strain=False)
        self.assertAlmostEqual(p.plane_lame(1.0, 1.0), 2 / 3, delta=DELTA)
        self.assertEqual(MaterialParams().plane_lame(1.0, 1.0), 1.0)

    def test_chance_orientation(self):
        self.assertAlmostEqual(ChanceConfig().constraint(25e6), 2.5e6,
            delta=1e-6)
        below = ChanceConfig(orientation="below")
        self.assertAlmostEqual(below.constraint(25e6), -2.5e6, delta=1e-6)
        self.assertRaises(ValueError, lambda: ChanceConfig(alpha_c=1.0))
        self.assertRaises(ValueError, lambda: ChanceConfig(p=1.5))


class TestUniformAmbient(TestCase):
    """
    A single ambient temperature equal to the reference temperature has the
    constant temperature and zero displacement as its solution.
    """
    T = 280.0

    @classmethod
    def setUpClass(cls):
        params = MaterialParams(theta_amb=cls.T, theta_amb_interior=cls.T,
            theta_0=cls.T, compliance_form="squared")
        cls.model = ForwardModel(build_rect_mesh(Geometry(), 5, 4), params)
        cls.state = cls.model.solve_state(np.full(cls.model.n_param, 0.6))

    def test_constant_temperature(self):
        np.testing.assert_allclose(self.state.temperature, self.T, rtol=1e-10)

    def test_no_displacement(self):
        np.testing.assert_allclose(self.state.displacement.coefficients, 0,
            atol=1e-12)
        # pascal
        self.assertLess(self.model.p_norm(self.state, 8), 1e-3)

    def test_squared_compliance_vanishes(self):
        Q = self.model.thermal_compliance(self.state)
        scale = 0.5 * self.model.ambient_energy()
        self.assertLess(abs(Q), 1e-10 * scale)


class TestPlainInsulator(TestCase):

    def test_no_beam(self):
        model = ForwardModel(plain_rect_mesh(3, 3))
        self.assertFalse(model.has_beam)
        self.assertEqual(model.n_param, 16)
        self.assertEqual(model.n_thermal, 32)
        state = model.solve_state(np.full(16, 0.5))
        theta = state.temperature
        # close to the band between the two ambients
        self.assertGreater(theta.min(), 250.0)
        self.assertLess(theta.max(), 300.0)


class TestForwardModel(BGTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.phi = cls.bg.porosity().values
        cls.state = cls.model.solve_state(cls.phi)

    def test_dof_layout(self):
        model = self.model
        self.assertEqual(model.n_param, 30)
        # one shared dof on each interface vertex
        n_ins = model.n_param - len(model.interface_vertices)
        n_beam = len(model.beam_vertices)
        self.assertEqual(model.n_thermal, 2 * n_ins + n_beam)
        self.assertEqual(len(model.interface_vertices), 6)

    def test_porosity_shape(self):
        self.assertRaises(ShapeError,
            lambda: self.model.solve_state(np.full(3, 0.5)))
        self.assertRaises(ValueError,
            lambda: self.model.solve_state(np.full(self.model.n_param, 1.5)))

    def test_residual_vanishes(self):
        model = self.model
        r_T, r_M = model.split(model.residual(self.state.x, self.phi))
        load_T = model.thermal_load(self.phi)
        theta = self.state.temperature
        self.assertLess(np.linalg.norm(r_T), 1e-9 * np.linalg.norm(load_T))
        self.assertLess(np.linalg.norm(r_M),
            1e-9 * np.linalg.norm(model.coupling @ theta))

    def test_jacobian_solves(self):
        J = self.state.jacobian
        r = self.rng.standard_normal(self.model.n_state)
        self.assertLess(relative_error(J.apply(J.solve(r)), r), 1e-8)
        # <J^-T a, J y> = <a, y>
        a = self.rng.standard_normal(self.model.n_state)
        y = self.rng.standard_normal(self.model.n_state)
        lhs = J.solve_transpose(a) @ J.apply(y)
        self.assertLess(abs(lhs - a @ y),
            1e-6 * np.linalg.norm(a) * np.linalg.norm(y))

    def test_residual_affine_in_porosity(self):
        model = self.model
        delta = 0.05 * self.rng.standard_normal(model.n_param)
        x = self.state.x
        diff = model.residual(x, self.phi + delta) - model.residual(x, self.phi)
        self.assertLess(relative_error(model.residual_phi(x, delta), diff),
            1e-8)

    def test_jacobian_affine_in_porosity(self):
        model = self.model
        delta = 0.05 * self.rng.standard_normal(model.n_param)
        y = self.rng.standard_normal(model.n_state)
        J0 = model.jacobian(self.phi)
        J1 = model.jacobian(self.phi + delta)
        diff = J1.apply(y) - J0.apply(y)
        self.assertLess(relative_error(model.jacobian_lin_apply(delta, y),
            diff), 1e-8)

    def test_rho_and_tau(self):
        model = self.model
        delta = self.rng.standard_normal(model.n_param)
        a = self.rng.standard_normal(model.n_state)
        y = self.rng.standard_normal(model.n_state)
        x = self.state.x
        self.assertAlmostEqual(delta @ model.rho(a, x) /
            (a @ model.residual_phi(x, delta)), 1.0, delta=1e-8)
        self.assertAlmostEqual(delta @ model.tau(a, y) /
            (a @ model.jacobian_lin_apply(delta, y)), 1.0, delta=1e-8)

    def test_compliance_quadrature(self):
        Q = self.model.thermal_compliance(self.state)
        Q_quad = self.model.thermal_compliance(self.state, "quadrature")
        self.assertAlmostEqual(Q_quad / Q, 1.0, delta=1e-8)
        self.assertRaises(ValueError,
            lambda: self.model.thermal_compliance(self.state, "exact"))

    def test_nodal_fields(self):
        fields = self.state.nodal_fields()
        n = self.model.mesh.n_vertices
        for name in ("theta_s", "theta_f", "phi_f", "pressure"):
            self.assertEqual(fields[name].shape, (n,))
        self.assertEqual(fields["displacement"].shape, (n, 2))
        beam = self.model.beam_vertices
        np.testing.assert_allclose(fields["theta_s"][beam],
            fields["theta_f"][beam])

    def test_state_parts(self):
        state = self.state
        model = self.model
        displacement = state.nodal_fields()["displacement"]
        np.testing.assert_array_equal(state.u_s,
            displacement[model.param_vertices])
        np.testing.assert_array_equal(state.u_b,
            displacement[model.beam_vertices])
        np.testing.assert_allclose(state.phi.phi_s.coefficients,
            1 - state.phi.values)

    def test_clamped_edges(self):
        u = self.state.displacement.coefficients
        np.testing.assert_allclose(u[self.model.dirichlet_dofs], 0.0)

    def test_p_norm_stress_value(self):
        p = self.bg.config.chance.p
        pnorm = PNormStress(self.model, p)
        u = self.model.displacement(self.state.x)
        self.assertAlmostEqual(pnorm.value(u) / self.model.p_norm(self.state,
            p), 1.0, delta=1e-10)
        f = chance_function(self.state, self.bg.config.chance)
        self.assertAlmostEqual(f, self.bg.config.chance.T_cr -
            self.model.p_norm(self.state, p), delta=1e-6)

    def test_p_norm_stress_derivatives(self):
        pnorm = PNormStress(self.model, self.bg.config.chance.p)
        u = self.model.displacement(self.state.x)
        y = self.rng.standard_normal(len(u)) * np.abs(u).max()
        errors = []
        for eps in (1e-3, 1e-4, 1e-5):
            fd = (pnorm.value(u + eps * y) - pnorm.value(u - eps * y)) / \
                (2 * eps)
            errors.append(abs(fd - pnorm.gradient(u) @ y) / abs(fd))
        self.assertLess(min(errors), GRADIENT_DELTA)

        fd = (pnorm.gradient(u + 1e-4 * y) - pnorm.gradient(u - 1e-4 * y)) / \
            2e-4
        self.assertLess(relative_error(pnorm.hessian_apply(u, y), fd), 1e-4)

        fd = (pnorm.hessian_apply(u + 1e-4 * y, y) -
            pnorm.hessian_apply(u - 1e-4 * y, y)) / 2e-4
        self.assertLess(relative_error(pnorm.third_apply(u, y), fd), 1e-4)
