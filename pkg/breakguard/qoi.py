from abc import ABC, abstractmethod

import numpy as np

from breakguard.forward_model import ChanceConfig, PNormStress


class QuantityOfInterest(ABC):
    """
    A scalar functional ``F(x, phi)`` of the reduced state ``x`` and the
    nodal porosity ``phi``, with the partial derivatives the adjoint
    machinery needs.

    Derivatives with respect to ``x`` are vectors of length
    ``model.n_state``; derivatives with respect to ``phi`` are nodal vectors
    on the insulator. Mixed terms that vanish for a given functional keep the
    zero default.
    """
    name = None

    def __init__(self, model):
        self.model = model

    @abstractmethod
    def value(self, x, phi):
        pass

    @abstractmethod
    def grad_x(self, x, phi):
        pass

    def grad_phi(self, x, phi):
        return np.zeros(self.model.n_param)

    @abstractmethod
    def hess_xx(self, x, phi, y):
        pass

    def hess_xphi(self, x, phi, delta):
        """
        ``F_x phi [delta]``, a state vector.
        """
        return np.zeros(self.model.n_state)

    def hess_phix(self, x, phi, y):
        """
        ``F_phi x [y]``, a porosity vector.
        """
        return np.zeros(self.model.n_param)

    def third_xxx(self, x, phi, y):
        """
        ``F_xxx [y, y, .]``.
        """
        return np.zeros(self.model.n_state)

    def third_xxphi(self, x, phi, y1, y2):
        """
        ``F_xx phi [y1, y2, .]``, a porosity vector.
        """
        return np.zeros(self.model.n_param)

    def third_xphix(self, x, phi, y, delta):
        """
        ``F_xx phi [y, ., delta]``, a state vector.
        """
        return np.zeros(self.model.n_state)


class ThermalCompliance(QuantityOfInterest):
    """
    The thermal compliance ``0.5 theta^T W(phi) theta - 0.5 w(phi)^T theta``
    (or its ``"squared"`` variant) as a functional of the state. Only the
    thermal block of the state enters.
    """
    name = "Q"

    def __init__(self, model):
        super().__init__(model)
        # weight of the ambient load: 1/2 for the pairing form, 1 for the
        # squared form
        self.load_weight = 0.5 if model.params.compliance_form == "pairing" \
            else 1.0

    def _pad(self, v_T):
        return self.model.join(v_T, np.zeros(len(self.model.free_dofs)))

    def value(self, x, phi):
        m = self.model
        theta, _ = m.split(x)
        value = 0.5 * theta @ (m.compliance_matrix(phi) @ theta) - \
            self.load_weight * m.compliance_load(phi) @ theta
        if m.params.compliance_form == "squared":
            value += 0.5 * m.ambient_energy()
        return value

    def grad_x(self, x, phi):
        m = self.model
        theta, _ = m.split(x)
        return self._pad(m.compliance_matrix(phi) @ theta -
            self.load_weight * m.compliance_load(phi))

    def grad_phi(self, x, phi):
        m = self.model
        theta, _ = m.split(x)
        return 0.5 * m.tau_thermal(theta, theta) - \
            self.load_weight * m.beta_thermal(theta)

    def hess_xx(self, x, phi, y):
        m = self.model
        return self._pad(m.compliance_matrix(phi) @ m.split(y)[0])

    def hess_xphi(self, x, phi, delta):
        m = self.model
        theta, _ = m.split(x)
        return self._pad(m.thermal_matrix_lin(delta) @ theta -
            self.load_weight * m.thermal_load_lin(delta))

    def hess_phix(self, x, phi, y):
        m = self.model
        theta, _ = m.split(x)
        y_T, _ = m.split(y)
        return m.tau_thermal(theta, y_T) - self.load_weight * \
            m.beta_thermal(y_T)

    def third_xxphi(self, x, phi, y1, y2):
        m = self.model
        return m.tau_thermal(m.split(y1)[0], m.split(y2)[0])

    def third_xphix(self, x, phi, y, delta):
        m = self.model
        return self._pad(m.thermal_matrix_lin(delta) @ m.split(y)[0])


class StressConstraint(QuantityOfInterest):
    """
    The chance constraint function of the p-norm stress,
    ``sign * (T_cr - T_pn(u))``, with ``sign`` from
    :attr:`ChanceConfig.sign`. Depends on the state through the displacement
    only, and not explicitly on porosity.
    """
    name = "f"

    def __init__(self, model, cfg=None):
        super().__init__(model)
        self.cfg = cfg or ChanceConfig()
        self.stress = PNormStress(model, self.cfg.p)

    def _pad(self, v_full):
        m = self.model
        return m.join(np.zeros(m.n_thermal), v_full[m.free_dofs])

    def p_norm(self, x):
        return self.stress.value(self.model.displacement(x))

    def value(self, x, phi):
        return self.cfg.constraint(self.p_norm(x))

    def grad_x(self, x, phi):
        u = self.model.displacement(x)
        return self._pad(-self.cfg.sign * self.stress.gradient(u))

    def hess_xx(self, x, phi, y):
        m = self.model
        u = m.displacement(x)
        return self._pad(-self.cfg.sign *
            self.stress.hessian_apply(u, m.extend(m.split(y)[1])))

    def third_xxx(self, x, phi, y):
        m = self.model
        u = m.displacement(x)
        return self._pad(-self.cfg.sign *
            self.stress.third_apply(u, m.extend(m.split(y)[1])))
