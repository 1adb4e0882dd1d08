import logging
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.sparse import coo_matrix

from breakguard.exceptions import ShapeError
from breakguard.fem import (CELL_MASS, EDGE_MASS, EDGE_TRIPLE, CellBatch,
    EdgeBatch, ElasticityKernel, Factorization, Field, FunctionSpace,
    TractionKernel, assemble, dirichlet_free_dofs, scatter_vector)
from breakguard.mesh import Boundary, Subdomain
from breakguard.utils import check_param, sigmoid, TRACE

log = logging.getLogger(__name__)

# sigma^T V sigma is the squared von Mises stress of (sx, sy, sz, txy)
VON_MISES_FORM = np.array([
    [ 1.0, -0.5, -0.5, 0.0],
    [-0.5,  1.0, -0.5, 0.0],
    [-0.5, -0.5,  1.0, 0.0],
    [ 0.0,  0.0,  0.0, 3.0]
])


@dataclass(frozen=True)
class MaterialParams:
    """
    Material constants and boundary data of the thermomechanical model, in SI
    units. Defaults are the reference values of the beam-insulator benchmark.

    ``theta_amb`` is the exterior ambient temperature on the top edge,
    ``theta_amb_interior`` the interior one on the bottom edges. Give both the
    same value for a single ambient.
    """
    kappa_s: float = 0.477
    kappa_f: float = 0.085
    kappa_b: float = 5.0
    h: float = 81059.0
    h_air: float = 10.0
    theta_amb: float = 263.15
    theta_amb_interior: float = 293.15
    theta_0: float = 293.15
    D: float = 0.25e-8
    lam: float = 6.77e9
    mu: float = 3.38e9
    lam_b: float = 17.3e9
    mu_b: float = 11.5e9
    alpha_T: float = 1e-5
    u_bar: tuple = (0.0, 0.0)
    traction: tuple = (0.0, 0.0)
    plane_strain: bool = True
    compliance_form: str = "pairing"

    def __post_init__(self):
        positive = ["kappa_s", "kappa_f", "kappa_b", "h", "h_air", "D", "lam",
            "mu", "lam_b", "mu_b"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got "
                    f"{getattr(self, name)}")
        if self.alpha_T < 0:
            raise ValueError(f"alpha_T must be nonnegative, got {self.alpha_T}")
        if len(self.u_bar) != 2 or len(self.traction) != 2:
            raise ValueError("u_bar and traction must be 2-vectors")
        # tuples survive a json round trip as lists
        object.__setattr__(self, "u_bar", tuple(float(v) for v in self.u_bar))
        object.__setattr__(self, "traction",
            tuple(float(v) for v in self.traction))
        check_param(self.compliance_form, ["pairing", "squared"])

    def plane_lame(self, lam, mu):
        """
        The first Lamé constant of the 2D model: unchanged in plane strain,
        reduced in plane stress.
        """
        if self.plane_strain:
            return lam
        return 2 * lam * mu / (lam + 2 * mu)

    @property
    def thermal_coefficient(self):
        """
        Beam stress per kelvin of temperature rise.
        """
        lam, mu = self.lam_b, self.mu_b
        if self.plane_strain:
            return self.alpha_T * (3 * lam + 2 * mu)
        return self.alpha_T * 2 * mu * (3 * lam + 2 * mu) / (lam + 2 * mu)


@dataclass(frozen=True)
class ChanceConfig:
    """
    The stress chance constraint.

    ``orientation="exceedance"`` bounds the probability that the p-norm stress
    exceeds ``T_cr`` (constraint function ``T_pn - T_cr``).
    ``orientation="below"`` uses ``f = T_cr - T_pn`` and bounds ``P(f >= 0)``.
    """
    T_cr: float = 22.5e6
    p: float = 8.0
    alpha_c: float = 0.05
    orientation: str = "exceedance"

    def __post_init__(self):
        if not self.T_cr > 0:
            raise ValueError(f"T_cr must be positive, got {self.T_cr}")
        if not self.p >= 2:
            raise ValueError(f"p-norm exponent must be at least 2, got "
                f"{self.p}")
        if not 0 < self.alpha_c < 1:
            raise ValueError(f"alpha_c must lie in (0, 1), got {self.alpha_c}")
        check_param(self.orientation, ["exceedance", "below"])

    @property
    def sign(self):
        """
        Multiplies ``T_cr - T_pn`` into the constraint function.
        """
        return -1.0 if self.orientation == "exceedance" else 1.0

    def constraint(self, T_pn):
        return self.sign * (self.T_cr - T_pn)


class PorosityField:
    """
    The fluid volume fraction ``phi_f`` on the insulator, as a nodal field.
    The solid fraction is ``1 - phi_f``.
    """
    def __init__(self, field):
        c = field.coefficients
        # sigmoid saturates to exactly 0 or 1 for |d + m| beyond ~37
        if np.any(c < 0) or np.any(c > 1) or not np.all(np.isfinite(c)):
            raise ValueError("porosity must lie in [0, 1]")
        self.phi_f = field

    @classmethod
    def uniform(cls, space, value):
        return cls(Field.constant(space, value))

    @property
    def values(self):
        return self.phi_f.coefficients

    @property
    def phi_s(self):
        return Field(self.phi_f.space, 1 - self.values)


def porosity_map(d, m):
    """
    ``phi_f = sigmoid(d + m)`` nodewise.

    Parameters
    ----------
    d: :class:`~.Field`
        The design field.
    m: :class:`~.Field`
        The uncertain parameter, on the same space as ``d``.

    Returns
    -------
    :class:`PorosityField`
    """
    d.check_space(m)
    return PorosityField(Field(d.space, sigmoid(d.coefficients +
        m.coefficients)))


def von_mises_stress(sx, sy, txy, sz=0.0):
    """
    The von Mises stress of a stress state with in-plane components
    ``sx, sy, txy`` and out-of-plane normal stress ``sz``.

    Examples
    --------
    >>> von_mises_stress(5.0, 0.0, 0.0)
    5.0
    """
    sx, sy, txy, sz = np.broadcast_arrays(*[np.asarray(v, dtype=float)
        for v in (sx, sy, txy, sz)])
    return np.sqrt(0.5 * ((sx - sy)**2 + (sy - sz)**2 + (sz - sx)**2)
        + 3 * txy**2)


def p_norm_stress(values, p, areas):
    """
    ``(sum_c areas_c values_c^p)^(1/p)`` for cellwise ``values``, with the
    maximum factored out before exponentiation.
    """
    values = np.abs(np.asarray(values, dtype=float))
    if p < 2:
        raise ValueError(f"p-norm exponent must be at least 2, got {p}")
    vmax = values.max() if len(values) else 0.0
    if vmax == 0:
        return 0.0
    return vmax * np.sum(np.asarray(areas) * (values / vmax)**p)**(1 / p)


def _power(q, exponent):
    # zero where q vanishes and the exponent is negative
    if exponent >= 0:
        return q**exponent
    out = np.zeros_like(q)
    mask = q > 0
    out[mask] = q[mask]**exponent
    return out


def _sum_local(parts, shape):
    """
    Builds one sparse matrix from a list of ``(local, row_dofs, col_dofs)``
    element contributions.
    """
    rows, cols, vals = [], [], []
    for local, rdofs, cdofs in parts:
        rows.append(np.broadcast_to(rdofs[:, :, None], local.shape).ravel())
        cols.append(np.broadcast_to(cdofs[:, None, :], local.shape).ravel())
        vals.append(local.ravel())
    if not parts:
        return coo_matrix(shape).tocsr()
    return coo_matrix((np.concatenate(vals), (np.concatenate(rows),
        np.concatenate(cols))), shape=shape).tocsr()


class StateJacobian:
    """
    The block lower-triangular Jacobian ``[[K_T, 0], [-C, K_M]]`` of the
    state residual at fixed porosity, with both diagonal blocks factorized.
    Solves against it and its transpose share the two factorizations.
    """
    def __init__(self, model, phi):
        self.model = model
        self.K_T = model.thermal_matrix(phi)
        self.K_M = model.mechanics_matrix(phi)
        free = model.free_dofs
        self.K_M_ff = self.K_M[free][:, free]
        self.thermal = Factorization(self.K_T, "thermal")
        self.mechanics = Factorization(self.K_M_ff, "mechanics")

    def solve(self, r):
        """
        ``J^-1 r``: thermal block first, then mechanics.
        """
        model = self.model
        r_T, r_M = model.split(r)
        y_T = self.thermal.solve(r_T)
        y_M = self.mechanics.solve(r_M + model.coupling @ y_T)
        return np.concatenate([y_T, y_M])

    def solve_transpose(self, r):
        """
        ``J^-T r``: mechanics block first, then thermal.
        """
        model = self.model
        r_T, r_M = model.split(r)
        z_M = self.mechanics.solve(r_M)
        z_T = self.thermal.solve(r_T + model.coupling.T @ z_M)
        return np.concatenate([z_T, z_M])

    def apply(self, y):
        y_T, y_M = self.model.split(y)
        return np.concatenate([self.K_T @ y_T,
            self.K_M_ff @ y_M - self.model.coupling @ y_T])


class StateSolution:
    """
    The solved state at one porosity field. The reduced state vector ``x``
    stacks the thermal dofs and the free displacement dofs; everything else
    is derived from it.
    """
    def __init__(self, model, phi, x, jacobian=None):
        self.model = model
        self.phi = phi
        self.x = np.asarray(x, dtype=float)
        self.jacobian = jacobian

    @property
    def temperature(self):
        return self.model.split(self.x)[0]

    @property
    def theta_s(self):
        m = self.model
        return Field(m.param_space, self.temperature[m.idx_s[m.param_vertices]])

    @property
    def theta_f(self):
        m = self.model
        return Field(m.param_space, self.temperature[m.idx_f[m.param_vertices]])

    @property
    def theta_b(self):
        """
        Beam temperatures at :attr:`ForwardModel.beam_vertices`.
        """
        m = self.model
        return self.temperature[m.idx_b[m.beam_vertices]]

    @property
    def displacement(self):
        m = self.model
        return Field(m.vector_space, m.displacement(self.x))

    @property
    def u_s(self):
        m = self.model
        return m.displacement(self.x).reshape(-1, 2)[m.param_vertices]

    @property
    def u_b(self):
        m = self.model
        return m.displacement(self.x).reshape(-1, 2)[m.beam_vertices]

    @property
    def pressure(self):
        """
        Cellwise pore pressure ``-div(u_s) / D`` on the insulator cells.
        """
        m = self.model
        return -m.insulator_divergence(m.displacement(self.x)) / m.params.D

    def nodal_fields(self):
        """
        Full-mesh nodal fields for export. Beam vertices carry the beam
        temperature in both the solid and the fluid temperature fields, and
        pore pressure is the area-weighted mean of the adjacent cells.
        """
        m = self.model
        n = m.mesh.n_vertices
        theta = self.temperature
        theta_s = np.zeros(n)
        theta_f = np.zeros(n)
        theta_s[m.beam_vertices] = theta_f[m.beam_vertices] = self.theta_b
        theta_s[m.param_vertices] = self.theta_s.coefficients
        theta_f[m.param_vertices] = self.theta_f.coefficients
        porosity = np.zeros(n)
        porosity[m.param_vertices] = self.phi.values

        ins = m.ins
        weights = np.repeat(ins.area, 3)
        total = np.bincount(ins.vertex_ids.ravel(), weights=weights,
            minlength=n)
        p = np.bincount(ins.vertex_ids.ravel(),
            weights=weights * np.repeat(self.pressure, 3), minlength=n)
        pressure = np.divide(p, total, out=np.zeros(n), where=total > 0)
        return {
            "theta_s": theta_s,
            "theta_f": theta_f,
            "phi_f": porosity,
            "pressure": pressure,
            "displacement": m.displacement(self.x).reshape(-1, 2)
        }


class ForwardModel:
    """
    The steady thermomechanical model of an insulator around a beam.

    Heat transfer in the insulator uses a solid and a fluid temperature with
    interphase exchange, conduction weighted by the solid and fluid volume
    fractions, and convection on the top and bottom edges. The beam conducts
    and convects on its exposed bottom edge. Temperatures are continuous
    across the insulator-beam interface.

    The insulator is poro-elastic with the pore pressure eliminated, which
    gives an effective first Lamé constant ``lam + (1 - 2 phi_f) / D``. The
    beam is thermoelastic. Displacements are clamped to ``u_bar`` on the top
    edge and the beam bottom.

    Parameters
    ----------
    mesh: :class:`~.Mesh`
        A mesh tagged with :class:`~.Subdomain` and :class:`~.Boundary`.
    params: :class:`MaterialParams`
        Material constants and boundary data.

    Notes
    -----
    Design and uncertain fields live on :attr:`param_space`, the scalar P1
    space of the insulator submesh. Everything the model depends on porosity
    through is affine in ``phi_f``, which the derivative helpers rely on.
    """
    def __init__(self, mesh, params=None):
        self.mesh = mesh
        self.params = params or MaterialParams()
        p = self.params

        self.param_mesh, self.param_vertices = mesh.submesh(Subdomain.INSULATOR)
        self.param_space = FunctionSpace(self.param_mesh)
        self.n_param = len(self.param_vertices)
        param_index = -np.ones(mesh.n_vertices, dtype=np.int64)
        param_index[self.param_vertices] = np.arange(self.n_param)

        self.has_beam = len(mesh.cells_in(Subdomain.BEAM)) > 0
        self.beam_vertices = mesh.vertices_of(Subdomain.BEAM) if \
            self.has_beam else np.zeros(0, dtype=np.int64)

        # thermal dofs: two per insulator vertex, one per beam vertex, one per
        # interface vertex
        in_ins = np.zeros(mesh.n_vertices, dtype=bool)
        in_ins[self.param_vertices] = True
        in_beam = np.zeros(mesh.n_vertices, dtype=bool)
        in_beam[self.beam_vertices] = True
        shared = in_ins & in_beam
        width = np.where(in_ins & ~shared, 2, 1)
        start = np.concatenate([[0], np.cumsum(width)[:-1]])
        self.idx_s = np.where(in_ins, start, -1)
        self.idx_f = np.where(in_ins, start + (~shared), -1)
        self.idx_b = np.where(in_beam, start, -1)
        self.n_thermal = int(width.sum())
        self.interface_vertices = np.flatnonzero(shared)

        self.ins = CellBatch(mesh, mesh.cells_in(Subdomain.INSULATOR))
        self._ins_param = param_index[self.ins.vertex_ids]
        self._ins_G = np.einsum("nid,njd->nij", self.ins.grads, self.ins.grads)

        edge_ids = mesh.edges_in(Boundary.GAMMA1, Boundary.GAMMA4)
        self._ins_edges = EdgeBatch(mesh, edge_ids)
        self._edge_param = param_index[self._ins_edges.vertex_ids]
        self._edge_amb = np.where(mesh.edge_tags[edge_ids] == Boundary.GAMMA1,
            p.theta_amb, p.theta_amb_interior)

        if self.has_beam:
            self.beam = CellBatch(mesh, mesh.cells_in(Subdomain.BEAM))
            self._beam_edges = EdgeBatch(mesh, mesh.edges_in(Boundary.GAMMA3))

        self._setup_mechanics()
        log.debug("forward model with %d thermal dofs, %d free displacement "
            "dofs and %d design dofs", self.n_thermal, len(self.free_dofs),
            self.n_param)

    def _setup_mechanics(self):
        mesh = self.mesh
        p = self.params
        self.vector_space = FunctionSpace(mesh, 2)
        n_u = self.vector_space.dim
        ins = self.ins

        self._ins_udofs = self.vector_space.cell_dofs(ins.cell_ids)
        self._ins_div = ins.divergence_row()
        self._ins_strain = ins.strain_matrix()
        lam_s = p.plane_lame(p.lam, p.mu)
        parts = [(ElasticityKernel(lam_s + 1 / p.D, p.mu).local_matrices(ins),
            self._ins_udofs, self._ins_udofs)]
        self._ins_divdiv = ins.area[:, None, None] * \
            self._ins_div[:, :, None] * self._ins_div[:, None, :]

        coupling_parts = []
        load = np.zeros(n_u)
        if self.has_beam:
            beam = self.beam
            udofs = self.vector_space.cell_dofs(beam.cell_ids)
            lam_b = p.plane_lame(p.lam_b, p.mu_b)
            parts.append((ElasticityKernel(lam_b, p.mu_b).local_matrices(beam),
                udofs, udofs))
            c = p.thermal_coefficient
            div = beam.divergence_row()
            # int c theta div(w), theta linear and div(w) constant per cell
            local = (c * beam.area / 3)[:, None, None] * \
                np.broadcast_to(div[:, :, None], (len(beam), 6, 3))
            coupling_parts.append((local, udofs, self.idx_b[beam.vertex_ids]))
            load += scatter_vector(-p.theta_0 * c * beam.area[:, None] * div,
                udofs, n_u)
            self._beam_udofs = udofs

        self._K_M_const = _sum_local(parts, (n_u, n_u))
        if any(p.traction):
            _, traction = assemble(self.vector_space,
                TractionKernel((Boundary.GAMMA2,), p.traction))
            load += traction.coefficients
        self._mech_load = load

        clamped = self.mesh.boundary_vertices(Boundary.GAMMA1, Boundary.GAMMA3)
        self.dirichlet_dofs = (2 * clamped[:, None] + np.arange(2)).ravel()
        self.free_dofs = dirichlet_free_dofs(n_u, self.dirichlet_dofs)
        self._lift = np.zeros(n_u)
        self._lift[self.dirichlet_dofs] = np.tile(p.u_bar, len(clamped))

        coupling = _sum_local(coupling_parts, (n_u, self.n_thermal))
        self.coupling = coupling[self.free_dofs]

    # state vector plumbing

    @property
    def n_state(self):
        return self.n_thermal + len(self.free_dofs)

    def split(self, x):
        return x[:self.n_thermal], x[self.n_thermal:]

    def join(self, x_T, x_M):
        return np.concatenate([x_T, x_M])

    def displacement(self, x):
        """
        The full displacement vector of state ``x``, Dirichlet values
        included.
        """
        u = self._lift.copy()
        u[self.free_dofs] = self.split(x)[1]
        return u

    def extend(self, y_M):
        """
        Zero-extends free displacement dofs to the full vector space.
        """
        u = np.zeros(self.vector_space.dim)
        u[self.free_dofs] = y_M
        return u

    def insulator_divergence(self, u):
        return np.einsum("ni,ni->n", self._ins_div, u[self._ins_udofs])

    def insulator_strains(self, u):
        return np.einsum("nij,nj->ni", self._ins_strain, u[self._ins_udofs])

    def _phi(self, phi):
        if isinstance(phi, PorosityField):
            return phi.values
        if isinstance(phi, Field):
            return phi.coefficients
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (self.n_param,):
            raise ShapeError(f"expected {self.n_param} porosity values, got "
                f"shape {phi.shape}")
        return phi

    # thermal operators

    def _thermal_matrix(self, ws, wf, exchange=True, beam=True):
        """
        The thermal operator with solid and fluid conduction/convection
        weighted by the nodal fractions ``ws`` and ``wf``.
        """
        p = self.params
        ins = self.ins
        parts = []
        for kappa, w, idx in ((p.kappa_s, ws, self.idx_s),
            (p.kappa_f, wf, self.idx_f)):
            dofs = idx[ins.vertex_ids]
            k = kappa * ins.area * w[self._ins_param].mean(axis=1)
            parts.append((k[:, None, None] * self._ins_G, dofs, dofs))

            e = self._ins_edges
            edofs = idx[e.vertex_ids]
            T = np.einsum("nk,kab->nab", w[self._edge_param], EDGE_TRIPLE)
            parts.append((p.h_air * e.length[:, None, None] * T, edofs, edofs))

        if exchange:
            s = self.idx_s[ins.vertex_ids]
            f = self.idx_f[ins.vertex_ids]
            M = p.h * ins.area[:, None, None] * CELL_MASS
            parts += [(M, s, s), (M, f, f), (-M, s, f), (-M, f, s)]

        if beam and self.has_beam:
            b = self.idx_b[self.beam.vertex_ids]
            G = np.einsum("nid,njd->nij", self.beam.grads, self.beam.grads)
            parts.append(((p.kappa_b * self.beam.area)[:, None, None] * G, b, b))
            e = self._beam_edges
            edofs = self.idx_b[e.vertex_ids]
            parts.append((p.h_air * e.length[:, None, None] * EDGE_MASS, edofs,
                edofs))
        return _sum_local(parts, (self.n_thermal, self.n_thermal))

    def _thermal_load(self, ws, wf, beam=True):
        p = self.params
        e = self._ins_edges
        b = np.zeros(self.n_thermal)
        coef = p.h_air * self._edge_amb * e.length
        for w, idx in ((ws, self.idx_s), (wf, self.idx_f)):
            local = coef[:, None] * (w[self._edge_param] @ EDGE_MASS)
            b += scatter_vector(local, idx[e.vertex_ids], self.n_thermal)
        if beam and self.has_beam:
            e = self._beam_edges
            local = (p.h_air * p.theta_amb_interior * 0.5 * e.length)[:, None] \
                * np.ones(2)
            b += scatter_vector(local, self.idx_b[e.vertex_ids], self.n_thermal)
        return b

    def thermal_matrix(self, phi):
        phi = self._phi(phi)
        return self._thermal_matrix(1 - phi, phi)

    def thermal_load(self, phi):
        phi = self._phi(phi)
        return self._thermal_load(1 - phi, phi)

    def thermal_matrix_lin(self, delta):
        """
        The porosity-linear part of the thermal operator, at ``delta``.
        """
        return self._thermal_matrix(-delta, delta, exchange=False, beam=False)

    def thermal_load_lin(self, delta):
        return self._thermal_load(-delta, delta, beam=False)

    def compliance_matrix(self, phi):
        """
        The insulator conduction and convection operator ``W`` of the thermal
        compliance.
        """
        phi = self._phi(phi)
        return self._thermal_matrix(1 - phi, phi, exchange=False, beam=False)

    def compliance_load(self, phi):
        phi = self._phi(phi)
        return self._thermal_load(1 - phi, phi, beam=False)

    def tau_thermal(self, a, y):
        """
        ``d/dphi (a^T K_T(phi) y)`` as a nodal vector on the insulator.
        """
        p = self.params
        ins = self.ins
        e = self._ins_edges
        out = np.zeros(self.n_param)
        for kappa, idx, sign in ((p.kappa_s, self.idx_s, -1.0),
            (p.kappa_f, self.idx_f, 1.0)):
            dofs = idx[ins.vertex_ids]
            g = np.einsum("ni,nij,nj->n", a[dofs], self._ins_G, y[dofs])
            val = sign * kappa * ins.area * g / 3
            out += np.bincount(self._ins_param.ravel(),
                weights=np.repeat(val, 3), minlength=self.n_param)

            edofs = idx[e.vertex_ids]
            r = np.einsum("kab,na,nb->nk", EDGE_TRIPLE, a[edofs], y[edofs])
            out += np.bincount(self._edge_param.ravel(),
                weights=(sign * p.h_air * e.length[:, None] * r).ravel(),
                minlength=self.n_param)
        return out

    def beta_thermal(self, a):
        """
        ``d/dphi (a^T b_T(phi))`` as a nodal vector on the insulator.
        """
        p = self.params
        e = self._ins_edges
        out = np.zeros(self.n_param)
        coef = p.h_air * self._edge_amb * e.length
        for idx, sign in ((self.idx_s, -1.0), (self.idx_f, 1.0)):
            local = sign * coef[:, None] * (a[idx[e.vertex_ids]] @ EDGE_MASS)
            out += np.bincount(self._edge_param.ravel(), weights=local.ravel(),
                minlength=self.n_param)
        return out

    # mechanics operators

    def mechanics_matrix(self, phi):
        phi = self._phi(phi)
        return self._K_M_const + self._mechanics_lin_matrix(phi)

    def _mechanics_lin_matrix(self, delta):
        coef = -2 / self.params.D * delta[self._ins_param].mean(axis=1)
        return _sum_local([(coef[:, None, None] * self._ins_divdiv,
            self._ins_udofs, self._ins_udofs)],
            (self.vector_space.dim, self.vector_space.dim))

    def _mechanics_lin_apply(self, delta, u):
        coef = -2 / self.params.D * delta[self._ins_param].mean(axis=1) * \
            self.ins.area * self.insulator_divergence(u)
        return scatter_vector(coef[:, None] * self._ins_div, self._ins_udofs,
            self.vector_space.dim)

    def tau_mechanics(self, a, u):
        """
        ``d/dphi (a^T K_M(phi) u)`` for full displacement vectors ``a, u``.
        """
        val = -2 / (3 * self.params.D) * self.ins.area * \
            self.insulator_divergence(a) * self.insulator_divergence(u)
        return np.bincount(self._ins_param.ravel(), weights=np.repeat(val, 3),
            minlength=self.n_param)

    # residual and its porosity derivatives

    def state_rhs(self, phi, jacobian):
        free = self.free_dofs
        r_M = self._mech_load[free] - (jacobian.K_M @ self._lift)[free]
        return self.join(self.thermal_load(phi), r_M)

    def residual(self, x, phi):
        phi = self._phi(phi)
        theta, _ = self.split(x)
        u = self.displacement(x)
        r_T = self.thermal_matrix(phi) @ theta - self.thermal_load(phi)
        r_M = (self.mechanics_matrix(phi) @ u - self._mech_load)[
            self.free_dofs] - self.coupling @ theta
        return self.join(r_T, r_M)

    def residual_phi(self, x, delta):
        """
        The porosity derivative of the state residual at ``x``, in direction
        ``delta``.
        """
        theta, _ = self.split(x)
        r_T = self.thermal_matrix_lin(delta) @ theta - \
            self.thermal_load_lin(delta)
        r_M = self._mechanics_lin_apply(delta, self.displacement(x))[
            self.free_dofs]
        return self.join(r_T, r_M)

    def jacobian_lin_apply(self, delta, y):
        """
        The porosity derivative of the Jacobian in direction ``delta``,
        applied to a state direction ``y``.
        """
        y_T, y_M = self.split(y)
        r_T = self.thermal_matrix_lin(delta) @ y_T
        r_M = self._mechanics_lin_apply(delta, self.extend(y_M))[
            self.free_dofs]
        return self.join(r_T, r_M)

    def rho(self, a, x):
        """
        ``d/dphi (a^T R(x, phi))`` for an adjoint-like vector ``a``.
        """
        a_T, a_M = self.split(a)
        theta, _ = self.split(x)
        return (self.tau_thermal(a_T, theta) - self.beta_thermal(a_T) +
            self.tau_mechanics(self.extend(a_M), self.displacement(x)))

    def tau(self, a, y):
        """
        ``d/dphi (a^T J(phi) y)`` for state directions ``a`` and ``y``.
        """
        a_T, a_M = self.split(a)
        y_T, y_M = self.split(y)
        return (self.tau_thermal(a_T, y_T) +
            self.tau_mechanics(self.extend(a_M), self.extend(y_M)))

    # solves and quantities of interest

    def jacobian(self, phi):
        return StateJacobian(self, self._phi(phi))

    def solve_state(self, phi):
        """
        Solves the state problem at porosity ``phi``.

        Parameters
        ----------
        phi: :class:`PorosityField` or ndarray
            Nodal fluid fraction on :attr:`param_space`.

        Returns
        -------
        :class:`StateSolution`
        """
        if not isinstance(phi, PorosityField):
            phi = PorosityField(Field(self.param_space, self._phi(phi)))
        jacobian = self.jacobian(phi)
        x = jacobian.solve(self.state_rhs(phi, jacobian))
        log.log(TRACE, "solved state, temperature range [%.6g, %.6g]",
            x[:self.n_thermal].min(), x[:self.n_thermal].max())
        return StateSolution(self, phi, x, jacobian)

    def thermal_compliance(self, state, method="operator"):
        """
        The thermal compliance of ``state`` over the insulator and its
        convective boundary.

        Parameters
        ----------
        state: :class:`StateSolution`
            A solved state.
        method: {"operator", "quadrature"}
            ``"operator"`` evaluates the assembled quadratic form,
            ``"quadrature"`` integrates cell and edge contributions directly.
            The two agree to round-off.
        """
        check_param(method, ["operator", "quadrature"])
        if method == "quadrature":
            return self._compliance_quadrature(state)
        phi = state.phi.values
        theta = state.temperature
        W = self.compliance_matrix(phi)
        w = self.compliance_load(phi)
        value = 0.5 * theta @ (W @ theta)
        if self.params.compliance_form == "pairing":
            return value - 0.5 * w @ theta
        return value - w @ theta + 0.5 * self.ambient_energy()

    def ambient_energy(self):
        """
        ``sum_i int phi_i h_air theta_amb^2`` over the convective insulator
        edges. Porosity independent since the fractions sum to one.
        """
        e = self._ins_edges
        return np.sum(self.params.h_air * self._edge_amb**2 * e.length)

    def _compliance_quadrature(self, state):
        p = self.params
        ins = self.ins
        phi = state.phi.values
        theta = state.temperature
        total = 0.0
        points, weights = leggauss(2)
        t = 0.5 * (points + 1)
        e = self._ins_edges
        for kappa, w, idx in ((p.kappa_s, 1 - phi, self.idx_s),
            (p.kappa_f, phi, self.idx_f)):
            grad = ins.gradient(theta[idx[ins.vertex_ids]])
            w_bar = w[self._ins_param].mean(axis=1)
            total += np.sum(kappa * ins.area * w_bar * np.sum(grad**2, axis=1))

            we = w[self._edge_param]
            te = theta[idx[e.vertex_ids]]
            for tq, wq in zip(t, weights):
                wv = (1 - tq) * we[:, 0] + tq * we[:, 1]
                tv = (1 - tq) * te[:, 0] + tq * te[:, 1]
                other = tv if p.compliance_form == "pairing" else \
                    tv - self._edge_amb
                total += np.sum(0.5 * wq * e.length * p.h_air * wv *
                    (tv - self._edge_amb) * other)
        return 0.5 * total

    def stress_matrix(self, lam, mu):
        """
        The ``(4, 3)`` map from strain ``(exx, eyy, gxy)`` to stress
        ``(sx, sy, sz, txy)``.
        """
        lam_z = lam if self.params.plane_strain else 0.0
        return np.array([
            [lam + 2 * mu, lam,          0.0],
            [lam,          lam + 2 * mu, 0.0],
            [lam_z,        lam_z,        0.0],
            [0.0,          0.0,          mu ]
        ])

    def insulator_stress_form(self):
        """
        ``A`` with ``e^T A e`` the squared von Mises stress of the effective
        solid stress at insulator strain ``e``.
        """
        p = self.params
        S = self.stress_matrix(p.plane_lame(p.lam, p.mu), p.mu)
        return S.T @ VON_MISES_FORM @ S

    def von_mises(self, state):
        """
        Cellwise von Mises stress over all cells of the mesh: the effective
        solid stress in the insulator and the thermoelastic stress in the
        beam.
        """
        p = self.params
        u = self.displacement(state.x)
        out = np.zeros(self.mesh.n_cells)

        S = self.stress_matrix(p.plane_lame(p.lam, p.mu), p.mu)
        sigma = self.insulator_strains(u) @ S.T
        out[self.ins.cell_ids] = von_mises_stress(sigma[:, 0], sigma[:, 1],
            sigma[:, 3], sigma[:, 2])

        if self.has_beam:
            beam = self.beam
            strains = np.einsum("nij,nj->ni", beam.strain_matrix(),
                u[self._beam_udofs])
            S = self.stress_matrix(p.plane_lame(p.lam_b, p.mu_b), p.mu_b)
            sigma = strains @ S.T
            theta = state.temperature[self.idx_b[beam.vertex_ids]].mean(axis=1)
            thermal = p.thermal_coefficient * (theta - p.theta_0)
            sigma[:, 0] -= thermal
            sigma[:, 1] -= thermal
            if p.plane_strain:
                sigma[:, 2] -= thermal
            out[beam.cell_ids] = von_mises_stress(sigma[:, 0], sigma[:, 1],
                sigma[:, 3], sigma[:, 2])
        return out

    def p_norm(self, state, p):
        vm = self.von_mises(state)[self.ins.cell_ids]
        return p_norm_stress(vm, p, self.ins.area)


class PNormStress:
    """
    The p-norm of the insulator von Mises stress as a function of the full
    displacement vector, with its first three derivatives.

    Derivatives are evaluated at strains rescaled by the largest cell value,
    which keeps the powers bounded. Cells with zero stress contribute
    nothing.
    """
    def __init__(self, model, p):
        if p < 2:
            raise ValueError(f"p-norm exponent must be at least 2, got {p}")
        self.model = model
        self.p = float(p)
        self.r = self.p / 2
        self.kappa = 1 / self.p
        self.A = model.insulator_stress_form()
        self.area = model.ins.area

    def _scaled(self, u):
        e = self.model.insulator_strains(u)
        q = np.einsum("ni,ij,nj->n", e, self.A, e)
        qmax = q.max() if len(q) else 0.0
        if qmax <= 0:
            return None
        c = 1 / np.sqrt(qmax)
        return c, c * e, q / qmax

    def _to_dofs(self, cell_vectors):
        m = self.model
        local = np.einsum("nij,ni->nj", m._ins_strain, cell_vectors)
        return scatter_vector(local, m._ins_udofs, m.vector_space.dim)

    def _first(self, E, q):
        r, a = self.r, self.area
        S = np.sum(a * q**r)
        # dS = sum_c w1_c * 2 s_c(z), s_c(z) = e_c(z)^T A E_c
        w1 = a * r * _power(q, r - 1)
        return S, w1

    def value(self, u):
        scaled = self._scaled(u)
        if scaled is None:
            return 0.0
        c, E, q = scaled
        return np.sum(self.area * q**self.r)**self.kappa / c

    def gradient(self, u):
        scaled = self._scaled(u)
        if scaled is None:
            return np.zeros(len(u))
        c, E, q = scaled
        S, w1 = self._first(E, q)
        dS = self._to_dofs(2 * w1[:, None] * (E @ self.A))
        return self.kappa * S**(self.kappa - 1) * dS

    def hessian_apply(self, u, y):
        scaled = self._scaled(u)
        if scaled is None:
            return np.zeros(len(u))
        c, E, q = scaled
        r, k, a = self.r, self.kappa, self.area
        S, w1 = self._first(E, q)
        AE = E @ self.A
        ey = self.model.insulator_strains(y)
        s_y = np.einsum("ni,ni->n", ey, AE)

        dS_y = np.sum(2 * w1 * s_y)
        dS = self._to_dofs(2 * w1[:, None] * AE)
        w2 = 4 * a * r * (r - 1) * _power(q, r - 2)
        d2S = self._to_dofs((w2 * s_y)[:, None] * AE +
            (2 * w1)[:, None] * (ey @ self.A))
        out = k * (k - 1) * S**(k - 2) * dS_y * dS + k * S**(k - 1) * d2S
        return c * out

    def third_apply(self, u, y):
        """
        The third derivative with two arguments fixed to ``y``.
        """
        scaled = self._scaled(u)
        if scaled is None:
            return np.zeros(len(u))
        c, E, q = scaled
        r, k, a = self.r, self.kappa, self.area
        S, w1 = self._first(E, q)
        AE = E @ self.A
        ey = self.model.insulator_strains(y)
        Aey = ey @ self.A
        s_y = np.einsum("ni,ni->n", ey, AE)
        h_yy = np.einsum("ni,ni->n", ey, Aey)

        w2 = 4 * a * r * (r - 1) * _power(q, r - 2)
        w3 = 8 * a * r * (r - 1) * (r - 2) * _power(q, r - 3)

        dS_y = np.sum(2 * w1 * s_y)
        d2S_yy = np.sum(w2 * s_y**2 + 2 * w1 * h_yy)
        dS = self._to_dofs(2 * w1[:, None] * AE)
        d2S_y = self._to_dofs((w2 * s_y)[:, None] * AE + (2 * w1)[:, None] * Aey)
        d3S = self._to_dofs((w3 * s_y**2 + w2 * h_yy)[:, None] * AE +
            (2 * w2 * s_y)[:, None] * Aey)

        out = (k * (k - 1) * (k - 2) * S**(k - 3) * dS_y**2 * dS +
            k * (k - 1) * S**(k - 2) * (2 * dS_y * d2S_y + d2S_yy * dS) +
            k * S**(k - 1) * d3S)
        return c**2 * out


def solve_state(model, phi):
    return model.solve_state(phi)


def thermal_compliance(state, method="operator"):
    return state.model.thermal_compliance(state, method)


def chance_function(state, cfg):
    """
    ``T_cr - T_pn`` at ``state``.
    """
    return cfg.T_cr - state.model.p_norm(state, cfg.p)
