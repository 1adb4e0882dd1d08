import logging
import threading
from dataclasses import dataclass

import numpy as np

from breakguard.exceptions import ShapeError
from breakguard.fem import Field
from breakguard.utils import sigmoid, sigmoid_derivatives, TRACE

log = logging.getLogger(__name__)


class SolveCounter:
    """
    Counts forward-model solves by kind, plus covariance applies. Safe to
    share between threads.
    """
    KINDS = ("state", "adjoint", "incremental_state", "incremental_adjoint",
        "linear_state", "linear_adjoint")

    def __init__(self):
        self._lock = threading.Lock()
        self.counts = dict.fromkeys(self.KINDS, 0)
        self.covariance_applies = 0
        self.factorizations = 0

    def add(self, kind, n=1):
        if kind not in self.counts:
            raise ValueError(f"Expected one of {','.join(self.KINDS)}. Got "
                f"{kind}")
        with self._lock:
            self.counts[kind] += n

    def add_covariance(self, n=1):
        with self._lock:
            self.covariance_applies += n

    def add_factorizations(self, n):
        with self._lock:
            self.factorizations += n

    @property
    def total(self):
        return sum(self.counts.values())

    def snapshot(self):
        with self._lock:
            return dict(self.counts)

    def since(self, snapshot):
        """
        Solves per kind since ``snapshot`` was taken.
        """
        now = self.snapshot()
        return {kind: now[kind] - snapshot[kind] for kind in self.KINDS}

    def __repr__(self):
        counts = ", ".join(f"{k}={v}" for k, v in self.counts.items() if v)
        return f"SolveCounter({counts or 'empty'})"


class LinearizationPoint:
    """
    The state at ``s = d + m`` with the factorized state Jacobian, and the
    sigmoid derivatives at ``s``. Adjoints are solved on demand and cached
    per quantity of interest.

    Parameters
    ----------
    model: :class:`~.ForwardModel`
        The forward model.
    s: ndarray
        ``d + m`` on the model's parameter space.
    counter: :class:`SolveCounter`
        Receives one state solve and two factorizations, plus every later
        solve against this point.
    """
    def __init__(self, model, s, counter=None):
        s = np.asarray(s, dtype=float)
        if s.shape != (model.n_param,):
            raise ShapeError(f"expected {model.n_param} parameter values, got "
                f"shape {s.shape}")
        self.model = model
        self.s = s
        self.counter = counter or SolveCounter()
        self.phi = sigmoid(s)
        self.d1, self.d2, self.d3 = sigmoid_derivatives(self.phi)

        self.counter.add_factorizations(2)
        self.state = model.solve_state(self.phi)
        self.counter.add("state")
        self.jacobian = self.state.jacobian
        self.x = self.state.x
        self._adjoints = {}
        self._lock = threading.Lock()

    @classmethod
    def at(cls, model, d, m, counter=None):
        """
        The linearization point at design ``d`` and parameter ``m``, both
        fields or arrays on the parameter space.
        """
        if isinstance(d, Field) and isinstance(m, Field):
            d.check_space(m)
        d = d.coefficients if isinstance(d, Field) else np.asarray(d)
        m = m.coefficients if isinstance(m, Field) else np.asarray(m)
        return cls(model, d + m, counter)

    def solve(self, r, kind):
        self.counter.add(kind)
        log.log(TRACE, "%s solve", kind)
        return self.jacobian.solve(r)

    def solve_transpose(self, r, kind):
        self.counter.add(kind)
        log.log(TRACE, "%s solve", kind)
        return self.jacobian.solve_transpose(r)

    def adjoint(self, qoi):
        """
        ``v`` with ``J^T v = -F_x``, cached by ``qoi.name``.
        """
        with self._lock:
            if qoi.name in self._adjoints:
                return self._adjoints[qoi.name]
        v = self.solve_transpose(-qoi.grad_x(self.x, self.phi), "adjoint")
        with self._lock:
            self._adjoints[qoi.name] = v
        return v

    def value(self, qoi):
        return qoi.value(self.x, self.phi)


def solve_adjoint(lin, qoi):
    return lin.adjoint(qoi)


def _porosity_gradient(lin, qoi):
    """
    ``F_phi + rho(v, x)``, the total porosity derivative of ``qoi``.
    """
    v = lin.adjoint(qoi)
    return qoi.grad_phi(lin.x, lin.phi) + lin.model.rho(v, lin.x)


def grad_m(lin, qoi):
    """
    The gradient of ``qoi`` with respect to the uncertain parameter (equal
    to the design gradient, since both enter through ``d + m``).
    """
    return lin.d1 * _porosity_gradient(lin, qoi)


class HessianActionHandle:
    """
    Hessian actions of one quantity of interest at a linearization point.
    Safe to call from several threads at once.
    """
    def __init__(self, lin, qoi):
        self.lin = lin
        self.qoi = qoi

    @property
    def dim(self):
        return self.lin.model.n_param

    def incremental(self, direction):
        """
        The incremental state and adjoint in ``direction``.

        Returns
        -------
        (ndarray, ndarray)
            ``u_hat`` and ``v_hat``.
        """
        lin, qoi, model = self.lin, self.qoi, self.lin.model
        x, phi = lin.x, lin.phi
        v = lin.adjoint(qoi)
        dphi = lin.d1 * direction
        u_hat = lin.solve(-model.residual_phi(x, dphi), "incremental_state")
        rhs = (qoi.hess_xx(x, phi, u_hat) + qoi.hess_xphi(x, phi, dphi) +
            model.jacobian_lin_apply(dphi, v))
        v_hat = lin.solve_transpose(-rhs, "incremental_adjoint")
        return u_hat, v_hat

    def apply(self, direction):
        """
        ``H direction``, two solves.
        """
        direction = np.asarray(direction, dtype=float)
        if direction.ndim == 2:
            return np.column_stack([self.apply(col) for col in direction.T])
        lin, qoi, model = self.lin, self.qoi, self.lin.model
        x, phi = lin.x, lin.phi
        v = lin.adjoint(qoi)
        u_hat, v_hat = self.incremental(direction)
        first = model.rho(v_hat, x) + model.tau(v, u_hat) + \
            qoi.hess_phix(x, phi, u_hat)
        return lin.d1 * first + lin.d2 * direction * \
            _porosity_gradient(lin, qoi)

    __call__ = apply


def hess_action(handle, m_hat):
    values = m_hat.coefficients if isinstance(m_hat, Field) else m_hat
    out = handle.apply(values)
    return Field(m_hat.space, out) if isinstance(m_hat, Field) else out


def second_order_gradient(handle, a=None, directions=(), weights=()):
    """
    The gradient with respect to ``s`` of

        ``<a, grad F(s)> + sum_j w_j <psi_j, hess F(s) psi_j>``

    with ``a``, the directions ``psi_j`` and the weights ``w_j`` held fixed.

    Costs two solves per direction plus one linear state and one linear
    adjoint solve. Returns zeros without solving if there is nothing to
    differentiate.

    Parameters
    ----------
    handle: :class:`HessianActionHandle`
        The quantity of interest and its linearization point.
    a: ndarray
        The gradient weight, or ``None``.
    directions: ndarray, shape (n, k)
        The directions ``psi_j`` as columns.
    weights: ndarray, shape (k,)
        The weights ``w_j``.
    """
    lin, qoi, model = handle.lin, handle.qoi, handle.lin.model
    x, phi = lin.x, lin.phi
    d1, d2, d3 = lin.d1, lin.d2, lin.d3
    directions = np.asarray(directions, dtype=float).reshape(model.n_param, -1)
    weights = np.asarray(weights, dtype=float).ravel()
    if directions.shape[1] != len(weights):
        raise ShapeError(f"{directions.shape[1]} directions but "
            f"{len(weights)} weights")
    if a is None and len(weights) == 0:
        return np.zeros(model.n_param)

    v = lin.adjoint(qoi)
    grad_phi = _porosity_gradient(lin, qoi)
    a = np.zeros(model.n_param) if a is None else np.asarray(a, dtype=float)

    pairs = [handle.incremental(psi) for psi in directions.T]
    # porosity weight of the explicit second-order terms
    E = d1 * a
    state_rhs = np.zeros(model.n_state)
    adjoint_rhs = np.zeros(model.n_state)
    for psi, c, (u_hat, v_hat) in zip(directions.T, weights, pairs):
        dphi = d1 * psi
        E = E + c * d2 * psi**2
        state_rhs += 2 * c * model.jacobian_lin_apply(dphi, u_hat)
        adjoint_rhs += c * (qoi.third_xxx(x, phi, u_hat) +
            2 * qoi.third_xphix(x, phi, u_hat, dphi))
        adjoint_rhs += 2 * c * model.jacobian_lin_apply(dphi, v_hat)

    state_rhs += model.residual_phi(x, E)
    p = lin.solve(-state_rhs, "linear_state")
    adjoint_rhs += (qoi.hess_xphi(x, phi, E) + model.jacobian_lin_apply(E, v)
        + qoi.hess_xx(x, phi, p))
    q = lin.solve_transpose(-adjoint_rhs, "linear_adjoint")

    first = (model.tau(v, p) + qoi.hess_phix(x, phi, p) + model.rho(q, x))
    out = d2 * a * grad_phi
    for psi, c, (u_hat, v_hat) in zip(directions.T, weights, pairs):
        first += c * qoi.third_xxphi(x, phi, u_hat, u_hat) + \
            2 * c * model.tau(v_hat, u_hat)
        out += 2 * c * d2 * psi * (qoi.hess_phix(x, phi, u_hat) +
            model.tau(v, u_hat) + model.rho(v_hat, x))
        out += c * d3 * psi**2 * grad_phi
    return out + d1 * first


@dataclass
class FDResult:
    """
    Relative errors of a directional finite difference check over a sweep of
    step sizes.
    """
    eps: np.ndarray
    errors: np.ndarray
    analytic: float

    @property
    def best(self):
        """
        The smallest error over the sweep, the bottom of the V-curve.
        """
        return float(np.min(self.errors))

    @property
    def best_eps(self):
        return float(self.eps[np.argmin(self.errors)])


DEFAULT_EPS = np.logspace(-2, -8, 13)


def finite_difference_check(fun, grad, x, directions, eps=None):
    """
    Compares ``<grad, eta>`` with central differences of ``fun`` along each
    direction ``eta``.

    Parameters
    ----------
    fun: callable
        Scalar (or vector) function of ``x``.
    grad: ndarray
        Its gradient at ``x`` (or the Jacobian-vector products, one per
        direction, as the columns of an array).
    x: ndarray
        The point to check at.
    directions: iterable[ndarray]
        The directions ``eta``.
    eps: ndarray
        The step sizes to sweep.

    Returns
    -------
    list[:class:`FDResult`]
        One result per direction.
    """
    eps = DEFAULT_EPS if eps is None else np.asarray(eps, dtype=float)
    results = []
    for i, eta in enumerate(directions):
        if np.ndim(grad) == 1:
            analytic = np.dot(grad, eta)
        else:
            analytic = grad[:, i]
        errors = []
        for e in eps:
            fd = (np.asarray(fun(x + e * eta)) - np.asarray(fun(x - e * eta))) \
                / (2 * e)
            scale = max(np.linalg.norm(analytic), 1e-300)
            errors.append(np.linalg.norm(fd - analytic) / scale)
        results.append(FDResult(eps, np.array(errors), analytic))
        log.debug("fd check direction %d: best relative error %.3e at eps "
            "%.1e", i, results[-1].best, results[-1].best_eps)
    return results
