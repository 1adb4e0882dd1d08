import logging
from dataclasses import replace

import numpy as np
from scipy.linalg import cholesky, eigh
from scipy.special import logit

from breakguard.config import RunConfig
from breakguard.exceptions import ShapeError, SolverError
from breakguard.fem import Field
from breakguard.forward_model import ForwardModel, porosity_map
from breakguard.mesh import build_rect_mesh
from breakguard.optimizer import DesignProblem, adaptive_optimize
from breakguard.qoi import StressConstraint, ThermalCompliance
from breakguard.random_field import MaternField
from breakguard.risk_estimators import (DiagonalCovariance, EigOptions,
    TaylorModel, build_taylor_model, chance_prob, cv_moments, generalized_eig,
    mc_moments, taylor_moments)
from breakguard.sensitivity import (HessianActionHandle, LinearizationPoint,
    SolveCounter, finite_difference_check, grad_m)
from breakguard.utils import check_param, sigmoid

# the eigensolver and design gradient suites build dense operators, which is
# only sensible up to this many parameters
MAX_DENSE_DIM = 500
DESIGN_EPS = np.logspace(-3, -7, 5)


class Breakguard:
    """
    Breakguard is the main entry point for using breakguard. It builds the
    mesh, forward model and uncertain parameter described by a
    :class:`~breakguard.config.RunConfig`, and provides:

    * :meth:`~.sample_fields` - samples of the uncertain parameter.
    * :meth:`~.solve_forward` - the state at a design and parameter.
    * :meth:`~.taylor_model` - the quadratic Taylor model of a quantity of
      interest at the mean parameter.
    * :meth:`~.moments` - mean and variance by Taylor, Monte Carlo or control
      variate Monte Carlo.
    * :meth:`~.chance` - the probability that the stress constraint is
      violated.
    * :meth:`~.problem` - the design problem the optimizer works on.
    * :meth:`~.optimize` - the continuation optimizer.
    * :meth:`~.verify` - the derivative, eigensolver and moment checks.

    Parameters
    ----------
    config: :class:`~breakguard.config.RunConfig` or dict
        The run configuration. A dict is read with
        :meth:`RunConfig.from_dict <breakguard.config.RunConfig.from_dict>`.
        Defaults are used if ``None``.
    workers: int
        Threads used to evaluate Monte Carlo samples.
    """
    def __init__(self, config=None, workers=1):
        self.log = logging.getLogger(__name__)
        if not isinstance(config, RunConfig):
            config = RunConfig.from_dict(config)
        self.config = config
        self.workers = workers
        self.counter = SolveCounter()

        self.mesh = build_rect_mesh(config.geometry, config.mesh["nx"],
            config.mesh["ny"])
        self.model = ForwardModel(self.mesh, config.material)
        self.field = MaternField(self.model.param_space, config.matern,
            self.counter)
        self.Q = ThermalCompliance(self.model)
        self.f = StressConstraint(self.model, config.chance)
        self.log.info("built model with %d design dofs on a %dx%d mesh",
            self.model.n_param, config.mesh["nx"], config.mesh["ny"])

    @property
    def n_param(self):
        return self.model.n_param

    def default_design(self):
        """
        ``forward.design`` if set, else the design that gives
        ``forward.porosity`` at the mean parameter.
        """
        design = self.config.forward["design"]
        if design is not None:
            return self.design(design)
        return logit(self.config.forward["porosity"]) - self.field.mean

    def design(self, d=None):
        """
        ``d`` as an array over the parameter space. Accepts ``None`` (the
        default design), a scalar, a :class:`~breakguard.fem.Field` or an
        array.
        """
        if d is None:
            return self.default_design()
        if isinstance(d, Field):
            self.field.mean_field.check_space(d)
            return d.coefficients.copy()
        if np.isscalar(d):
            return np.full(self.n_param, float(d))
        d = np.asarray(d, dtype=float)
        if d.shape != (self.n_param,):
            raise ShapeError(f"expected {self.n_param} design values, got "
                f"shape {d.shape}")
        return d

    def qoi(self, name):
        check_param(name, ["Q", "f"])
        return self.Q if name == "Q" else self.f

    def eig_options(self, name):
        return self.config.eig if name == "Q" else self.config.eig_f

    def sample_fields(self, n, seed=None):
        """
        ``n`` samples of the uncertain parameter as the rows of an array.
        """
        seed = self.config.sampling["seed"] if seed is None else seed
        return self.field.samples(seed, n)

    def porosity(self, d=None, m=None):
        space = self.model.param_space
        m = self.field.mean if m is None else m
        return porosity_map(Field(space, self.design(d)), Field(space, m))

    def solve_forward(self, d=None, m=None):
        """
        The state at design ``d`` and parameter ``m`` (the mean if
        ``None``).

        Returns
        -------
        :class:`~breakguard.forward_model.StateSolution`
        """
        state = self.model.solve_state(self.porosity(d, m))
        self.counter.add("state")
        return state

    def evaluator(self, name, d=None):
        """
        A function of the parameter that solves the state and returns the
        quantity of interest ``name`` at design ``d``. Safe to call from
        several threads.
        """
        qoi = self.qoi(name)
        d = self.design(d)

        def evaluate(m):
            phi = sigmoid(d + m)
            state = self.model.solve_state(phi)
            self.counter.add("state")
            return qoi.value(state.x, phi)
        return evaluate

    def linearization(self, d=None):
        return LinearizationPoint(self.model, self.design(d) + self.field.mean,
            self.counter)

    def taylor_model(self, name="Q", d=None, options=None):
        """
        The quadratic Taylor model of ``name`` at design ``d``.

        Returns
        -------
        :class:`~breakguard.risk_estimators.TaylorModel`
        """
        options = options or self.eig_options(name)
        return build_taylor_model(self.linearization(d), self.qoi(name),
            self.field, options)

    def moments(self, estimator="quad", name="Q", d=None, n_samples=None,
        seed=None, n_eig=None):
        """
        Mean and variance of ``name`` at design ``d``.

        Parameters
        ----------
        estimator: {"quad", "mc", "cv"}
            Taylor moments, plain Monte Carlo, or Monte Carlo with the
            Taylor model as control variate.
        name: {"Q", "f"}
            The quantity of interest.
        d: ndarray
            The design. The default design if ``None``.
        n_samples: int
            Monte Carlo sample size, ``sampling.n_samples`` by default.
        seed: int
            Sample seed, ``sampling.seed`` by default.
        n_eig: int
            Overrides the number of eigenpairs.

        Returns
        -------
        :class:`~breakguard.risk_estimators.MomentEstimate`
            With the Taylor model (if one was built) in ``extra["model"]``.
        """
        check_param(estimator, ["quad", "mc", "cv"])
        sampling = self.config.sampling
        n_samples = sampling["n_samples"] if n_samples is None else n_samples
        seed = sampling["seed"] if seed is None else seed
        options = self.eig_options(name)
        if n_eig is not None:
            options = EigOptions(n_eig, options.n_oversample, options.seed)

        before = self.counter.total
        model = None
        if estimator in ("quad", "cv"):
            model = self.taylor_model(name, d, options)
        if estimator == "quad":
            estimate = taylor_moments(model, self.config.cost.beta_V)
        elif estimator == "mc":
            estimate = mc_moments(self.evaluator(name, d), self.field,
                n_samples, seed, self.workers)
        else:
            estimate = cv_moments(self.evaluator(name, d), model, self.field,
                n_samples, seed, self.workers)
        estimate.n_pde_solves = self.counter.total - before
        estimate.extra["model"] = model
        self.log.info("%s %s moments: mean %.10g, variance %.10g, %d solves",
            estimator, name, estimate.mean, estimate.variance,
            estimate.n_pde_solves)
        return estimate

    def chance(self, d=None, estimator="quad", mode="indicator",
        n_samples=None, seed=None, omega=None):
        """
        The probability that the stress constraint function is nonnegative
        at design ``d``, from the Taylor model of the constraint
        (``estimator="quad"``) or from full solves (``"mc"``).
        """
        check_param(estimator, ["quad", "mc"])
        sampling = self.config.sampling
        n_samples = sampling["n_chance_samples"] if n_samples is None else \
            n_samples
        seed = sampling["seed"] if seed is None else seed
        samples = self.field.samples(seed, n_samples)
        omega = omega or self.config.cost.smoothing
        source = self.taylor_model("f", d) if estimator == "quad" else \
            self.evaluator("f", d)
        return chance_prob(source, samples, mode=mode, omega=omega,
            workers=self.workers)

    def problem(self, cost=None):
        """
        The design problem of this configuration.

        Returns
        -------
        :class:`~breakguard.optimizer.DesignProblem`
        """
        sampling = self.config.sampling
        return DesignProblem(self.model, self.field, cost or self.config.cost,
            self.config.eig, self.config.eig_f, sampling["n_chance_samples"],
            sampling["seed"], self.counter)

    def optimize(self, d0=None, callback=None, problem=None):
        """
        Runs the continuation optimizer from ``d0``.

        Returns
        -------
        :class:`~breakguard.optimizer.ContinuationResult`
        """
        problem = problem or self.problem()
        return adaptive_optimize(problem, self.design(d0),
            self.config.continuation, self.config.incg, callback)

    def verify(self, suites=None):
        """
        Runs the verification suites and reports the measured errors.

        Parameters
        ----------
        suites: list[str]
            Which of :data:`VERIFICATION_SUITES` to run. All if ``None``.

        Returns
        -------
        dict
            ``{"passed": bool, "suites": {name: {"passed": bool, "errors":
            [...], "tolerance": float, ...}}, "n_pde_solves": int}``.
        """
        suites = VERIFICATION_SUITES if suites is None else suites
        for name in suites:
            check_param(name, VERIFICATION_SUITES)
        verifier = Verifier(self)
        before = self.counter.total
        report = {"suites": {}}
        for name in suites:
            self.log.info("running verification suite %s", name)
            result = getattr(verifier, name)()
            report["suites"][name] = result
            self.log.info("suite %s %s (worst error %.3e, tolerance %.1e)",
                name, "passed" if result["passed"] else "FAILED",
                max(result["errors"], default=0.0), result["tolerance"])
        report["passed"] = all(r["passed"] for r in report["suites"].values())
        report["n_pde_solves"] = self.counter.total - before
        return report

    def convergence_graph(self, eigenvalues=None, steps=None, figure=None):
        """
        Uses matplotlib to plot eigenvalue decay and the chance estimate of
        each continuation step.

        Parameters
        ----------
        eigenvalues: dict[str, ndarray]
            Eigenvalue sequences by label.
        steps: list[:class:`~breakguard.optimizer.ContinuationStep`]
            Continuation history.
        figure: :class:`matplotlib.figure.Figure`
            Drawn into if passed, else a new figure is created.

        Returns
        -------
        :class:`matplotlib.figure.Figure`
        """
        # raises ImportError without matplotlib, so only import it here
        from breakguard.convergence_graph import ConvergenceGraph
        graph = ConvergenceGraph(eigenvalues, steps, figure,
            self.config.chance.alpha_c)
        return graph.figure


VERIFICATION_SUITES = ["gradient", "hessian", "eigensolver", "moments",
    "design_gradient"]


class Verifier:
    """
    The verification suites. Each returns a dict with the measured
    ``errors``, the ``tolerance`` and whether all errors are within it.
    """
    def __init__(self, bg):
        self.bg = bg
        self.model = bg.model
        self.options = bg.config.verify
        self.rng = np.random.default_rng(self.options["seed"])
        self.s0 = bg.design() + bg.field.mean

    def _directions(self, k):
        eta = self.rng.standard_normal((k, self.model.n_param))
        return eta / np.linalg.norm(eta, axis=1)[:, None]

    def _lin(self, s):
        return LinearizationPoint(self.model, s, self.bg.counter)

    @staticmethod
    def _sweeps(name, results):
        return [{"qoi": name, "direction": i, "eps": float(e),
            "rel_error": float(error)} for i, r in enumerate(results)
            for e, error in zip(r.eps, r.errors)]

    @staticmethod
    def _result(errors, tolerance, **extra):
        errors = [float(e) for e in errors]
        passed = bool(np.all(np.isfinite(errors))) and \
            all(e <= tolerance for e in errors)
        return {"passed": passed, "errors": errors, "tolerance": tolerance,
            **extra}

    def gradient(self):
        """
        Adjoint gradients of both quantities of interest against central
        differences.
        """
        directions = self._directions(self.options["n_directions"])
        lin = self._lin(self.s0)
        errors, by_qoi, sweeps = [], {}, []
        for qoi in (self.bg.Q, self.bg.f):
            results = finite_difference_check(
                lambda s, qoi=qoi: self._lin(s).value(qoi),
                grad_m(lin, qoi), self.s0, directions)
            by_qoi[qoi.name] = [r.best for r in results]
            errors.extend(by_qoi[qoi.name])
            sweeps.extend(self._sweeps(qoi.name, results))
        return self._result(errors, self.options["gradient_tol"],
            by_qoi=by_qoi, sweeps=sweeps)

    def hessian(self):
        """
        Symmetry of the Hessian action, and agreement with central
        differences of the gradient.
        """
        k = self.options["n_directions"]
        directions = self._directions(k)
        lin = self._lin(self.s0)
        errors, symmetry, sweeps = [], [], []
        for qoi in (self.bg.Q, self.bg.f):
            handle = HessianActionHandle(lin, qoi)
            u, v = self._directions(2)
            a, b = u @ handle.apply(v), v @ handle.apply(u)
            symmetry.append(abs(a - b) / max(abs(a), abs(b), 1e-300))
            columns = handle.apply(directions.T)
            results = finite_difference_check(
                lambda s, qoi=qoi: grad_m(self._lin(s), qoi), columns,
                self.s0, directions)
            errors.extend(r.best for r in results)
            sweeps.extend(self._sweeps(qoi.name, results))
        passed = all(e <= self.options["symmetry_tol"] for e in symmetry)
        result = self._result(errors, self.options["hessian_tol"],
            symmetry=[float(e) for e in symmetry],
            symmetry_tolerance=self.options["symmetry_tol"], sweeps=sweeps)
        result["passed"] = result["passed"] and passed
        return result

    def eigensolver(self):
        """
        Top eigenvalues of the randomized solver against a dense generalized
        eigendecomposition of the compliance Hessian.
        """
        n = self.model.n_param
        tolerance = self.options["eigen_tol"]
        if n > MAX_DENSE_DIM:
            return {"passed": True, "skipped": True, "errors": [],
                "tolerance": tolerance}
        handle = HessianActionHandle(self._lin(self.s0), self.bg.Q)
        H = handle.apply(np.eye(n))
        H = 0.5 * (H + H.T)
        C = self.bg.field.covariance_matrix()
        L = cholesky(0.5 * (C + C.T), lower=True)
        dense = eigh(L.T @ H @ L, eigvals_only=True)
        dense = dense[np.argsort(-np.abs(dense), kind="stable")]

        k = min(10, n)
        lam, _, residual = generalized_eig(handle, self.bg.field, n,
            EigOptions(k, n - k, self.options["seed"]))
        scale = abs(dense[0])
        errors = []
        for i in range(len(lam)):
            gaps = np.abs(dense[i] - np.delete(dense, i))
            # modes without a spectral gap are not uniquely determined
            if np.min(gaps, initial=np.inf) <= 1e-6 * scale:
                continue
            errors.append(abs(lam[i] - dense[i]) / max(abs(dense[i]),
                1e-6 * scale))
        return self._result(errors, tolerance, eigenvalues=lam.tolist(),
            dense=dense[:k].tolist(), orth_residual=residual)

    def moments(self):
        """
        Taylor moments of an exactly quadratic function with diagonal
        covariance and Hessian against the closed form traces.
        """
        n = 50
        rng = np.random.default_rng(self.options["seed"])
        c = rng.uniform(0.1, 1.0, n)
        h = rng.standard_normal(n)
        g = rng.standard_normal(n)
        value = 1.3
        covariance = DiagonalCovariance(c)
        lam, psi, residual = generalized_eig(lambda v: h * v, covariance, n,
            EigOptions(n, 0, self.options["seed"]))
        model = TaylorModel(value, g, lam, psi, covariance.mean, covariance,
            orth_residual=residual)
        estimate = taylor_moments(model)
        mean = value + 0.5 * np.sum(c * h)
        variance = np.sum(c * g**2) + 0.5 * np.sum((c * h)**2)
        errors = [abs(estimate.mean - mean) / abs(mean),
            abs(estimate.variance - variance) / abs(variance)]
        return self._result(errors, self.options["moment_tol"])

    def design_gradient(self):
        """
        The design gradient against central differences of the cost at
        several designs, one of them with an active chance penalty.
        """
        bg = self.bg
        n = self.model.n_param
        tolerance = self.options["design_tol"]
        if n > MAX_DENSE_DIM:
            return {"passed": True, "skipped": True, "errors": [],
                "tolerance": tolerance}
        # full sketch width so the eigenvalue derivatives are exact
        eig_q = EigOptions(min(bg.config.eig.n_eig, n),
            n - min(bg.config.eig.n_eig, n), bg.config.eig.seed)
        eig_f = EigOptions(min(bg.config.eig_f.n_eig, n),
            n - min(bg.config.eig_f.n_eig, n), bg.config.eig_f.seed)
        cost = bg.config.cost
        active = replace(cost, chance=replace(cost.chance, alpha_c=1e-6))

        d0 = bg.design()
        points = [(d0, cost), (d0 + 0.1 * self._directions(1)[0], cost),
            (d0, active)]
        points = points[:self.options["design_points"]]
        errors, penalty_active = [], []
        for d, cost_config in points:
            problem = DesignProblem(self.model, bg.field, cost_config, eig_q,
                eig_f, bg.config.sampling["n_chance_samples"],
                bg.config.sampling["seed"], bg.counter)
            try:
                evaluation = problem.evaluate(d)
            except SolverError as e:
                raise SolverError(str(e), stage="verify") from e
            penalty_active.append(bool(evaluation.parts["penalty"] > 0))
            results = finite_difference_check(problem.cost,
                evaluation.gradient, d, self._directions(1), DESIGN_EPS)
            errors.extend(r.best for r in results)
        return self._result(errors, tolerance, penalty_active=penalty_active)


def set_options(*, loglevel=None):
    """
    Set global options for breakguard.

    Parameters
    ---------
    loglevel: int
        What level to log at. Breakguard follows standard python logging
        levels, with an added level of TRACE with a value of 5 (lower than
        debug, which is 10). The value passed to loglevel is passed directly to
        the setLevel function of the breakguard root logger. WARNING by
        default. For more information on log levels, see the standard python
        logging lib.
    """
    if loglevel is not None:
        logging.getLogger("breakguard").setLevel(loglevel)
