import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from breakguard.exceptions import BreakguardException, SolverError
from breakguard.fem import MassKernel, StiffnessKernel, assemble
from breakguard.forward_model import ChanceConfig
from breakguard.qoi import StressConstraint, ThermalCompliance
from breakguard.risk_estimators import (EigOptions, build_taylor_model,
    chance_prob, taylor_moments)
from breakguard.sensitivity import (LinearizationPoint, SolveCounter,
    second_order_gradient)
from breakguard.utils import (check_param, deterministic_mean, logistic,
    logistic_prime, quadratic_penalty, quadratic_penalty_prime)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostConfig:
    """
    Weights of the design cost

        ``E[Q] + beta_V Var[Q] + beta_R R(d) + S_gamma(P_omega - alpha_c)``

    with moments and chance from the quadratic Taylor models. ``omega``
    defaults to ``4 / T_cr``.
    """
    beta_V: float = 0.1
    beta_R: float = 1e-5
    regularizer: str = "tikhonov"
    chance: ChanceConfig = field(default_factory=ChanceConfig)
    gamma: float = 10.0
    omega: Optional[float] = None

    def __post_init__(self):
        if self.beta_V < 0 or self.beta_R < 0:
            raise ValueError(f"beta_V and beta_R must be nonnegative, got "
                f"{self.beta_V} and {self.beta_R}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.omega is not None and not self.omega > 0:
            raise ValueError(f"omega must be positive, got {self.omega}")
        check_param(self.regularizer, ["tikhonov", "mass"])

    @property
    def smoothing(self):
        return self.omega if self.omega is not None else 4 / self.chance.T_cr


@dataclass(frozen=True)
class ContinuationConfig:
    omega_0: Optional[float] = None
    gamma_0: float = 10.0
    sigma_omega: float = 2.0
    sigma_gamma: float = 2.0
    k_max: int = 10
    eps_out: float = 1e-3
    eps_in: float = 1e-6

    def __post_init__(self):
        if not (self.sigma_omega > 1 and self.sigma_gamma > 1):
            raise ValueError("growth factors must exceed 1, got "
                f"{self.sigma_omega} and {self.sigma_gamma}")
        if self.k_max < 1:
            raise ValueError(f"k_max must be at least 1, got {self.k_max}")
        if self.omega_0 is not None and not self.omega_0 > 0:
            raise ValueError(f"omega_0 must be positive, got {self.omega_0}")
        if not self.gamma_0 > 0:
            raise ValueError(f"gamma_0 must be positive, got {self.gamma_0}")


@dataclass(frozen=True)
class IncgOptions:
    max_iter: int = 200
    rel_tol: float = 1e-6
    abs_tol: float = 1e-12
    c_armijo: float = 1e-4
    max_backtracking: int = 30
    cg_coarse_tolerance: float = 0.5
    cg_max_iter: int = 100
    fd_eps: float = 1e-6
    bounds: Optional[tuple] = (0.0, 1.0)

    def __post_init__(self):
        if self.max_iter < 1 or self.max_backtracking < 1:
            raise ValueError("max_iter and max_backtracking must be positive")
        if not 0 < self.c_armijo < 1:
            raise ValueError(f"c_armijo must lie in (0, 1), got "
                f"{self.c_armijo}")
        if self.bounds is not None:
            lo, hi = self.bounds
            if not lo < hi:
                raise ValueError(f"empty bounds {self.bounds}")
            object.__setattr__(self, "bounds", (float(lo), float(hi)))

    def project(self, d):
        if self.bounds is None:
            return d
        return np.clip(d, *self.bounds)


def analytic_solve_count(eig_q, eig_f, n_param=None):
    """
    Forward-model solves of one cost evaluation (``"value"``) and of the
    design gradient on top of it (``"gradient"``).

    The value costs one state solve, the adjoints of both quantities of
    interest, and two Hessian actions of two solves each per sketch column.
    Every sparse solve is counted, so a Hessian action (incremental state
    plus incremental adjoint) adds two. Counting Hessian actions instead of
    solves halves the sketch terms to ``2 k`` per quantity of interest.
    The gradient costs an incremental pair per eigenvector, the Hessian
    action of the variance term, and a linear state and adjoint per
    quantity of interest.
    """
    def width(opts):
        k = opts.n_eig + opts.n_oversample
        return k if n_param is None else min(k, n_param)

    n_q = min(eig_q.n_eig, width(eig_q))
    n_f = min(eig_f.n_eig, width(eig_f))
    value = 1 + 2 + 4 * width(eig_q) + 4 * width(eig_f)
    gradient = 2 * (n_q + n_f + 3)
    return {"value": value, "gradient": gradient, "total": value + gradient}


@dataclass
class CostEvaluation:
    d: np.ndarray
    cost: float
    gradient: Optional[np.ndarray]
    parts: dict
    chance: float
    constraint_samples: np.ndarray
    n_pde_solves: int


class DesignProblem:
    """
    The design cost and its gradient with respect to the design field.

    Moments of the thermal compliance and the chance of the stress
    constraint come from quadratic Taylor models at the mean parameter. The
    chance uses a fixed set of parameter samples for the whole run; their
    coordinates in the eigenbasis of the constraint Hessian are frozen at the
    first evaluation after each :meth:`freeze`, which makes the cost a
    deterministic smooth function of ``d``.

    Parameters
    ----------
    model: :class:`~.ForwardModel`
        The forward model.
    field: :class:`~.MaternField`
        The uncertain parameter.
    cost: :class:`CostConfig`
        Cost weights and chance settings.
    eig_q, eig_f: :class:`~.EigOptions`
        Eigensolver settings for the compliance and the constraint.
    n_chance_samples: int
        Size of the chance sample set.
    seed: int
        Seed of the chance sample set.
    counter: :class:`~.SolveCounter`
        Receives every solve.
    """
    def __init__(self, model, field, cost=None, eig_q=None, eig_f=None,
        n_chance_samples=100, seed=0, counter=None):
        self.model = model
        self.field = field
        self.cost_config = cost or CostConfig()
        self.eig_q = eig_q or EigOptions()
        self.eig_f = eig_f or EigOptions()
        self.counter = counter or SolveCounter()
        if field.counter is None:
            field.counter = self.counter

        self.Q = ThermalCompliance(model)
        self.f = StressConstraint(model, self.cost_config.chance)

        kernel = StiffnessKernel() if self.cost_config.regularizer == \
            "tikhonov" else MassKernel()
        K_R, _ = assemble(model.param_space, kernel)
        self.K_R = K_R.matrix

        if n_chance_samples < 1:
            raise ValueError(f"need at least one chance sample, got "
                f"{n_chance_samples}")
        self.m_tilde = field.samples(seed, n_chance_samples) - field.mean
        self.omega = self.cost_config.smoothing
        self.gamma = self.cost_config.gamma
        self._eta = None
        self._frozen_basis = None
        self._cache = None
        self.last = None

    @property
    def n_param(self):
        return self.model.n_param

    def set_smoothing(self, omega, gamma):
        self.omega = omega
        self.gamma = gamma

    def freeze(self):
        """
        Re-freeze the chance sample coordinates at the next evaluation.
        """
        self._eta = None

    def regularization(self, d):
        return 0.5 * d @ (self.K_R @ d)

    def taylor_models(self, d):
        """
        The linearization point and the Taylor models of the compliance and
        the constraint at design ``d``. The last result is cached.
        """
        d = np.asarray(d, dtype=float)
        key = d.tobytes()
        if self._cache is not None and self._cache[0] == key:
            return self._cache[1]
        lin = LinearizationPoint(self.model, d + self.field.mean, self.counter)
        try:
            tm_Q = build_taylor_model(lin, self.Q, self.field, self.eig_q)
            tm_f = build_taylor_model(lin, self.f, self.field, self.eig_f)
        except SolverError as e:
            raise SolverError(str(e), stage="eval_cost") from e
        models = (lin, tm_Q, tm_f)
        self._cache = (key, models)
        return models

    def _constraint_samples(self, tm_f):
        """
        Taylor values of the constraint at the chance samples, their frozen
        coordinates, and the indices of the current eigenpairs those
        coordinates belong to.

        Eigenvalues can change order between designs, so each frozen
        coordinate is paired with the current eigenvector it overlaps most in
        the ``C^-1`` inner product rather than with the same index.
        """
        if self._eta is None:
            self._frozen_basis = tm_f.covariance.apply_precision(
                tm_f.eigenvectors)
            self._eta = self.m_tilde @ self._frozen_basis
        overlap = np.abs(self._frozen_basis.T @ tm_f.eigenvectors)
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        order = np.argsort(cols)
        rows, cols = rows[order], cols[order]
        eta = self._eta[:, rows]
        values = tm_f.value + self.m_tilde @ tm_f.gradient + \
            0.5 * eta**2 @ tm_f.eigenvalues[cols]
        return values, eta, cols

    def evaluate(self, d, gradient=True):
        """
        The cost at ``d``, and its gradient if ``gradient``.

        Returns
        -------
        :class:`CostEvaluation`
        """
        d = np.asarray(d, dtype=float)
        before = self.counter.total
        cfg = self.cost_config
        lin, tm_Q, tm_f = self.taylor_models(d)

        moments = taylor_moments(tm_Q, cfg.beta_V)
        f_values, eta, cols = self._constraint_samples(tm_f)
        chance = deterministic_mean(logistic(f_values, self.omega))
        excess = chance - cfg.chance.alpha_c
        parts = {
            "mean": moments.mean,
            "variance": moments.variance,
            "regularization": self.regularization(d),
            "penalty": quadratic_penalty(excess, self.gamma)
        }
        cost = (parts["mean"] + cfg.beta_V * parts["variance"] +
            cfg.beta_R * parts["regularization"] + parts["penalty"])

        grad = None
        if gradient:
            try:
                grad = self._gradient(d, tm_Q, tm_f, f_values, eta, cols,
                    excess)
            except SolverError as e:
                raise SolverError(str(e), stage="design_gradient") from e

        evaluation = CostEvaluation(d, cost, grad, parts, chance, f_values,
            self.counter.total - before)
        self.last = evaluation
        log.debug("cost %.10g (mean %.6g, variance %.6g, chance %.4f)", cost,
            parts["mean"], parts["variance"], chance)
        return evaluation

    def _gradient(self, d, tm_Q, tm_f, f_values, eta, cols, excess):
        cfg = self.cost_config
        hQ, hf = tm_Q.hessian, tm_f.hessian

        grad = tm_Q.gradient.copy()
        grad += 2 * cfg.beta_V * hQ.apply(tm_Q.cov_gradient)
        grad += second_order_gradient(hQ, None, tm_Q.eigenvectors,
            0.5 + cfg.beta_V * tm_Q.eigenvalues)
        grad += cfg.beta_R * (self.K_R @ d)

        # computed even when the penalty is inactive so every evaluation
        # costs the same number of solves
        w = logistic_prime(f_values, self.omega) / len(f_values)
        chance_grad = np.sum(w) * tm_f.gradient + second_order_gradient(hf,
            w @ self.m_tilde, tm_f.eigenvectors[:, cols], 0.5 * (w @ eta**2))
        grad += quadratic_penalty_prime(excess, self.gamma) * chance_grad
        return grad

    def cost(self, d):
        return self.evaluate(d, gradient=False).cost

    def cost_and_gradient(self, d):
        evaluation = self.evaluate(d)
        return evaluation.cost, evaluation.gradient

    def chance_estimate(self, d, mode="indicator"):
        """
        The Taylor-accelerated chance at ``d``, with the sample coordinates
        recomputed in the current eigenbasis.
        """
        _, _, tm_f = self.taylor_models(d)
        samples = self.field.mean + self.m_tilde
        return chance_prob(tm_f, samples, mode=mode, omega=self.omega)


def eval_cost(problem, d):
    return problem.cost(d)


def design_gradient(problem, d):
    return problem.evaluate(d).gradient


@dataclass
class IncgResult:
    d: np.ndarray
    cost: float
    grad_norm: float
    iterations: int
    converged: bool
    stalled: bool
    reason: str
    history: list


class OptimizerState:
    """
    The current iterate of a run and its per-iteration history.
    """
    def __init__(self, d, counter=None):
        self.d = np.asarray(d, dtype=float)
        self.counter = counter
        self.history = []

    def record(self, **entry):
        if self.counter is not None:
            entry["n_pde_solves"] = self.counter.total
        self.history.append(entry)
        return entry


class Incg:
    """
    Inexact Newton-CG with Armijo backtracking and projection onto box
    bounds.

    Hessian-vector products are finite differences of the gradient. CG stops
    at the Eisenstat-Walker tolerance ``min(0.5, sqrt(|g| / |g_0|))`` or on
    negative curvature.
    """
    termination_reasons = [
        "Maximum number of Iteration reached",
        "Norm of the gradient less than tolerance",
        "Maximum number of backtracking reached",
        "Projected step vanished"
    ]

    def __init__(self, problem, options=None, callback=None):
        self.problem = problem
        self.options = options or IncgOptions()
        self.callback = callback

    def _projected_gradient(self, d, g):
        return d - self.options.project(d - g)

    def _cg(self, d, g, tol):
        """
        Approximately solves ``H p = -g``.
        """
        opts = self.options
        problem = self.problem

        def hess(v):
            eps = opts.fd_eps * max(1.0, np.linalg.norm(d)) / \
                max(np.linalg.norm(v), 1e-300)
            _, g_eps = problem.cost_and_gradient(d + eps * v)
            return (g_eps - g) / eps

        p = np.zeros_like(g)
        r = -g
        z = r.copy()
        rr = r @ r
        r0 = np.sqrt(rr)
        for i in range(opts.cg_max_iter):
            Hz = hess(z)
            curvature = z @ Hz
            if curvature <= 0:
                if i == 0:
                    log.debug("negative curvature in the first CG iteration, "
                        "using steepest descent")
                    return -g, 1
                return p, i
            alpha = rr / curvature
            p = p + alpha * z
            r = r - alpha * Hz
            rr_new = r @ r
            if np.sqrt(rr_new) <= tol * r0:
                return p, i + 1
            z = r + (rr_new / rr) * z
            rr = rr_new
        return p, opts.cg_max_iter

    def solve(self, d0):
        opts = self.options
        problem = self.problem
        d = opts.project(np.asarray(d0, dtype=float))
        state = OptimizerState(d, getattr(problem, "counter", None))

        cost, g = problem.cost_and_gradient(d)
        g_norm = np.linalg.norm(self._projected_gradient(d, g))
        g_norm_0 = g_norm
        tol = max(opts.abs_tol, opts.rel_tol * g_norm_0)
        state.record(iter=0, cost=cost, grad_norm=g_norm, step=0.0, cg_iter=0)

        reason = 0
        stalled = False
        iteration = 0
        while iteration < opts.max_iter:
            if g_norm <= tol:
                reason = 1
                break
            iteration += 1
            tolcg = min(opts.cg_coarse_tolerance, np.sqrt(g_norm / g_norm_0))
            p, cg_iter = self._cg(d, g, tolcg)

            alpha = 1.0
            accepted = False
            for _ in range(opts.max_backtracking):
                d_new = opts.project(d + alpha * p)
                step = d_new - d
                descent = g @ step
                if not np.any(step):
                    break
                if descent < 0:
                    cost_new = problem.cost(d_new)
                    if cost_new <= cost + opts.c_armijo * descent:
                        accepted = True
                        break
                alpha *= 0.5

            if not accepted:
                stalled = True
                reason = 2 if np.any(step) else 3
                log.warning("line search stalled at iteration %d: %s",
                    iteration, self.termination_reasons[reason])
                break

            d = d_new
            cost, g = problem.cost_and_gradient(d)
            g_norm = np.linalg.norm(self._projected_gradient(d, g))
            entry = state.record(iter=iteration, cost=cost, grad_norm=g_norm,
                step=alpha, cg_iter=cg_iter)
            log.info("incg iteration %d: cost %.10g, |g| %.3e, step %.3g, "
                "%d cg iterations", iteration, cost, g_norm, alpha, cg_iter)
            if self.callback is not None:
                self.callback(entry)

        state.d = d
        return IncgResult(d, cost, g_norm, iteration, reason == 1, stalled,
            self.termination_reasons[reason], state.history)


def incg_solve(problem, d0, options=None, callback=None):
    """
    Minimizes ``problem`` from ``d0`` by inexact Newton-CG.

    Parameters
    ----------
    problem: object
        Provides ``cost(d)`` and ``cost_and_gradient(d)``.
    d0: ndarray
        The starting design.
    options: :class:`IncgOptions`
        Tolerances and line search settings.
    callback: callable
        Called with the history entry of every accepted iteration.

    Returns
    -------
    :class:`IncgResult`
    """
    return Incg(problem, options, callback).solve(d0)


def _tagged(callback, **tags):
    """
    ``callback`` with ``tags`` added to every history entry it receives.
    """
    if callback is None:
        return None
    return lambda entry: callback({**tags, **entry})


@dataclass
class ContinuationStep:
    k: int
    omega: float
    gamma: float
    chance: float
    cost: float
    change: float
    iterations: int
    stalled: bool

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class ContinuationResult:
    d: np.ndarray
    steps: list
    inner: list


def adaptive_optimize(problem, d0, continuation=None, options=None,
    callback=None):
    """
    Solves a sequence of smoothed penalized problems with growing smoothing
    ``omega`` and penalty ``gamma``, warm starting each from the last, until
    the design stops changing by more than ``eps_out`` or ``k_max`` steps
    ran.

    Returns
    -------
    :class:`ContinuationResult`
        The final design, one :class:`ContinuationStep` per outer step and
        the inner :class:`IncgResult` of each.
    """
    cont = continuation or ContinuationConfig()
    options = replace(options or IncgOptions(), rel_tol=cont.eps_in)
    omega = cont.omega_0 if cont.omega_0 is not None else \
        4 / problem.cost_config.chance.T_cr
    gamma = cont.gamma_0
    d_prev = np.asarray(d0, dtype=float)
    steps, inner = [], []

    for k in range(1, cont.k_max + 1):
        problem.set_smoothing(omega, gamma)
        problem.freeze()
        try:
            result = incg_solve(problem, d_prev, options,
                _tagged(callback, k=k, omega=omega, gamma=gamma))
        except BreakguardException as e:
            raise SolverError(f"continuation step {k} failed: {e}",
                stage="adaptive_optimize") from e
        chance = problem.chance_estimate(result.d)
        change = float(np.linalg.norm(result.d - d_prev))
        step = ContinuationStep(k, omega, gamma, chance, result.cost, change,
            result.iterations, result.stalled)
        steps.append(step)
        inner.append(result)
        log.info("continuation step %d: omega %.3g, gamma %.3g, chance %.4f, "
            "|d_k - d_k-1| %.3e%s", k, omega, gamma, chance, change,
            " (stalled)" if result.stalled else "")
        d_prev = result.d
        if change <= cont.eps_out:
            break
        omega *= cont.sigma_omega
        gamma *= cont.sigma_gamma

    return ContinuationResult(d_prev, steps, inner)
