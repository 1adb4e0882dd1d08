import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cholesky, eigh, qr, solve_triangular

from breakguard.exceptions import BreakguardException, SolverError
from breakguard.fem import Field
from breakguard.utils import (check_param, deterministic_mean, indicator,
    logistic)

log = logging.getLogger(__name__)

# sketch columns whose QR diagonal falls below this fraction of the largest
# are treated as linearly dependent
RANK_TOLERANCE = 1e-10


@dataclass(frozen=True)
class EigOptions:
    n_eig: int = 25
    n_oversample: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_eig < 1:
            raise ValueError(f"n_eig must be at least 1, got {self.n_eig}")
        if self.n_oversample < 0:
            raise ValueError(f"n_oversample must be nonnegative, got "
                f"{self.n_oversample}")


@dataclass
class TaylorModel:
    """
    The quadratic Taylor model of a quantity of interest at the mean
    parameter.

    ``eigenvectors`` are ``C^-1``-orthonormal columns. ``covariance`` is
    anything with ``apply_covariance`` and ``apply_precision`` (usually a
    :class:`~.MaternField`). ``hessian`` is the exact Hessian action, kept
    for :func:`eval_quad` with ``exact=True``.
    """
    value: float
    gradient: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    mean: np.ndarray
    covariance: object
    cov_gradient: Optional[np.ndarray] = None
    orth_residual: float = 0.0
    hessian: Optional[object] = None
    name: str = "Q"

    def __post_init__(self):
        if self.cov_gradient is None:
            self.cov_gradient = self.covariance.apply_covariance(self.gradient)

    @property
    def n_eig(self):
        return len(self.eigenvalues)

    @property
    def trace(self):
        return float(np.sum(self.eigenvalues))

    @property
    def trace_squared(self):
        return float(np.sum(self.eigenvalues**2))

    @property
    def trace_history(self):
        """
        Partial traces ``sum_{i <= j} lambda_i`` for ``j = 1..n_eig``.
        """
        return np.cumsum(self.eigenvalues)

    @property
    def linear_variance(self):
        return float(self.gradient @ self.cov_gradient)

    def coordinates(self, m_tilde):
        """
        ``<psi_j, C^-1 m_tilde>`` for each row of ``m_tilde``, shape
        ``(n_samples, n_eig)``.
        """
        Cpsi = self.covariance.apply_precision(self.eigenvectors)
        return np.atleast_2d(m_tilde) @ Cpsi


@dataclass
class MomentEstimate:
    mean: float
    variance: float
    estimator: str
    n: int
    stderr: Optional[float] = None
    n_failed: int = 0
    n_pde_solves: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def risk(self, beta_V):
        """
        ``mean + beta_V variance``.
        """
        return self.mean + beta_V * self.variance

    def to_dict(self):
        return {
            "estimator": self.estimator,
            "mean": self.mean,
            "variance": self.variance,
            "stderr": self.stderr,
            "n": self.n,
            "n_failed": self.n_failed,
            "n_pde_solves": self.n_pde_solves
        }


def _apply_columns(operator, X):
    apply = operator.apply if hasattr(operator, "apply") else operator
    return np.column_stack([apply(col) for col in X.T])


def generalized_eig(hessian, covariance, n, options=None):
    """
    Dominant eigenpairs of ``H psi = lambda C^-1 psi`` by the double pass
    randomized algorithm.

    Parameters
    ----------
    hessian: callable or :class:`~.HessianActionHandle`
        Symmetric operator ``H`` on vectors of length ``n``.
    covariance: object
        Provides ``apply_covariance`` and ``apply_precision``; both accept
        ``(n, k)`` arrays.
    n: int
        The parameter dimension.
    options: :class:`EigOptions`
        Number of pairs, oversampling and sketch seed.

    Returns
    -------
    (ndarray, ndarray, float)
        Eigenvalues sorted by decreasing magnitude (signs kept), the
        ``C^-1``-orthonormal eigenvectors as columns, and the orthonormality
        residual ``max|Psi^T C^-1 Psi - I|``.

    Notes
    -----
    Costs ``2 (n_eig + n_oversample)`` Hessian actions. If the sketch is
    rank deficient, fewer pairs are returned.
    """
    options = options or EigOptions()
    k = options.n_eig + options.n_oversample
    if k > n:
        log.warning("sketch width %d exceeds dimension %d, using %d", k, n, n)
        k = n
    rng = np.random.default_rng(options.seed)
    omega = rng.standard_normal((n, k))

    Y = covariance.apply_covariance(_apply_columns(hessian, omega))
    Z, R = qr(Y, mode="economic")
    diag = np.abs(np.diag(R))
    keep = diag > RANK_TOLERANCE * max(diag.max(), 1e-300)
    if not np.all(keep):
        log.warning("rank deficient sketch: keeping %d of %d columns",
            int(keep.sum()), k)
        Z = Z[:, keep]
    # C^-1 orthonormalize
    try:
        Rz = cholesky(Z.T @ covariance.apply_precision(Z), lower=False)
    except np.linalg.LinAlgError as e:
        raise SolverError(f"sketch orthonormalization failed: {e}",
            stage="eigensolver") from e
    Q = solve_triangular(Rz, Z.T, trans="T", lower=False).T

    T = Q.T @ _apply_columns(hessian, Q)
    T = 0.5 * (T + T.T)
    lam, U = eigh(T)
    order = np.argsort(-np.abs(lam), kind="stable")[:options.n_eig]
    lam = lam[order]
    psi = Q @ U[:, order]

    gram = psi.T @ covariance.apply_precision(psi)
    residual = float(np.max(np.abs(gram - np.eye(len(lam))))) if len(lam) \
        else 0.0
    log.debug("eigensolver: %d pairs, |lambda| in [%.3e, %.3e], "
        "orthonormality residual %.2e", len(lam),
        np.abs(lam).min() if len(lam) else 0, np.abs(lam).max() if len(lam)
        else 0, residual)
    return lam, psi, residual


def build_taylor_model(lin, qoi, covariance, options=None, name=None):
    """
    The Taylor model of ``qoi`` at the linearization point ``lin``, which
    must sit at the mean parameter.
    """
    from breakguard.sensitivity import HessianActionHandle, grad_m

    handle = HessianActionHandle(lin, qoi)
    value = lin.value(qoi)
    gradient = grad_m(lin, qoi)
    lam, psi, residual = generalized_eig(handle, covariance,
        lin.model.n_param, options)
    mean = np.asarray(getattr(covariance, "mean", np.zeros(lin.model.n_param)))
    return TaylorModel(value, gradient, lam, psi, mean, covariance,
        orth_residual=residual, hessian=handle, name=name or qoi.name)


def eval_quad(model, m, exact=False):
    """
    The quadratic Taylor model at ``m``. The curvature term uses the stored
    eigenpairs, or the exact Hessian action if ``exact``.
    """
    m = m.coefficients if isinstance(m, Field) else np.asarray(m, float)
    m_tilde = m - model.mean
    linear = model.gradient @ m_tilde
    if exact:
        apply = model.hessian.apply if hasattr(model.hessian, "apply") else \
            model.hessian
        curvature = m_tilde @ apply(m_tilde)
    else:
        eta = model.coordinates(m_tilde)[0]
        curvature = np.sum(model.eigenvalues * eta**2)
    return model.value + linear + 0.5 * curvature


def quad_values(model, samples):
    """
    :func:`eval_quad` over the rows of ``samples``, using the eigenpairs.
    """
    m_tilde = np.atleast_2d(samples) - model.mean
    eta = model.coordinates(m_tilde)
    return model.value + m_tilde @ model.gradient + \
        0.5 * eta**2 @ model.eigenvalues


def taylor_moments(model, beta_V=0.0):
    """
    Mean ``Q + tr(H_c) / 2`` and variance ``<g, C g> + tr(H_c^2) / 2`` of the
    quadratic model, with traces from the eigenvalues.
    """
    mean = model.value + 0.5 * model.trace
    variance = model.linear_variance + 0.5 * model.trace_squared
    estimate = MomentEstimate(mean, variance, "quad", model.n_eig)
    estimate.extra["risk"] = estimate.risk(beta_V)
    return estimate


def reported_n_eig(model, rtol=0.01):
    """
    The smallest ``N`` after which adding an eigenvalue changes the partial
    trace by less than ``rtol`` relative.
    """
    history = model.trace_history
    for j in range(1, len(history)):
        scale = max(abs(history[j - 1]), 1e-300)
        if abs(history[j] - history[j - 1]) < rtol * scale:
            return j
    return len(history)


def _evaluate_samples(evaluator, samples, workers):
    """
    ``evaluator`` on each row of ``samples``. Failed samples come back as
    ``nan``; the result order matches ``samples``.
    """
    def run(m):
        try:
            return float(evaluator(m))
        except BreakguardException as e:
            log.warning("sample evaluation failed, skipping: %s", e)
            return np.nan

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(run, samples))
    else:
        values = [run(m) for m in samples]
    return np.array(values)


def _draw(sampler, M, seed):
    samples = sampler(seed, M) if callable(sampler) else \
        sampler.samples(seed, M)
    return np.atleast_2d(samples)


def mc_moments(evaluator, sampler, M, seed, workers=1):
    """
    Plain Monte Carlo mean and variance of ``evaluator`` over ``M`` samples.

    Parameters
    ----------
    evaluator: callable
        Maps a parameter vector to the quantity of interest.
    sampler: :class:`~.MaternField` or callable
        Draws samples; a callable is called as ``sampler(seed, M)``.
    M: int
        The number of samples, at least 2.
    seed: int
        Sample seed.
    workers: int
        Evaluate samples on this many threads. Results do not depend on it.
    """
    if M < 2:
        raise ValueError(f"need at least 2 samples, got {M}")
    values = _evaluate_samples(evaluator, _draw(sampler, M, seed), workers)
    ok = values[np.isfinite(values)]
    n_failed = len(values) - len(ok)
    if len(ok) < 2:
        raise SolverError(f"{n_failed} of {M} samples failed", stage="mc")
    mean = deterministic_mean(ok)
    variance = deterministic_mean(ok**2) - mean**2
    variance = max(variance, 0.0)
    estimate = MomentEstimate(mean, variance, "mc", len(ok),
        stderr=float(np.sqrt(variance / len(ok))), n_failed=n_failed)
    estimate.extra["values"] = values
    return estimate


def cv_moments(evaluator, model, sampler, M, seed, workers=1):
    """
    Monte Carlo with the quadratic Taylor model as control variate. The same
    samples correct both the mean and the variance.
    """
    if M < 1:
        raise ValueError(f"need at least 1 sample, got {M}")
    samples = _draw(sampler, M, seed)
    values = _evaluate_samples(evaluator, samples, workers)
    ok = np.isfinite(values)
    n_failed = int(np.sum(~ok))
    if not np.any(ok):
        raise SolverError(f"all {M} samples failed", stage="cv")
    values, samples = values[ok], samples[ok]

    m_tilde = samples - model.mean
    eta = model.coordinates(m_tilde)
    linear = m_tilde @ model.gradient
    curvature = 0.5 * eta**2 @ model.eigenvalues
    residual = values - model.value - linear - curvature

    half_trace = 0.5 * model.trace
    mean = model.value + half_trace + deterministic_mean(residual)

    centered = values - model.value
    second = (model.linear_variance + half_trace**2 +
        0.5 * model.trace_squared +
        deterministic_mean(centered**2 - (linear + curvature)**2))
    variance = second - (half_trace + deterministic_mean(residual))**2

    n = len(values)
    stderr = float(np.std(residual) / np.sqrt(n)) if n > 1 else None
    estimate = MomentEstimate(mean, variance, "cv", n, stderr=stderr,
        n_failed=n_failed)
    estimate.extra["values"] = values
    return estimate


def chance_prob(source, samples=None, mode="indicator", omega=None,
    workers=1):
    """
    The probability that the constraint function is nonnegative, estimated
    over samples.

    Parameters
    ----------
    source: ndarray, callable or :class:`TaylorModel`
        Constraint values themselves, an evaluator of the constraint
        function, or a Taylor model of it (no PDE solves per sample).
    samples: ndarray
        Parameter samples as rows, unless ``source`` already holds values.
    mode: {"indicator", "smoothed"}
        Average the indicator of ``[0, inf)`` or the logistic ``l_omega``.
    omega: float
        Logistic sharpness, required for ``mode="smoothed"``.
    """
    check_param(mode, ["indicator", "smoothed"])
    if isinstance(source, TaylorModel):
        values = quad_values(source, samples)
    elif callable(source):
        values = _evaluate_samples(source, np.atleast_2d(samples), workers)
        values = values[np.isfinite(values)]
    else:
        values = np.asarray(source, dtype=float)
    if len(values) == 0:
        raise ValueError("need at least one sample")
    if mode == "indicator":
        return deterministic_mean(indicator(values))
    if omega is None or omega <= 0:
        raise ValueError(f"smoothed mode needs a positive omega, got {omega}")
    return deterministic_mean(logistic(values, omega))


def moment_convergence(evaluator, sampler, sizes, seed, reference=None,
    workers=1):
    """
    Absolute error of the Monte Carlo mean against ``reference`` for each
    sample size in ``sizes``, all from nested prefixes of one sample set.
    ``reference`` defaults to the mean over the largest set.

    Returns
    -------
    (list[tuple], float)
        ``(M, mean, error)`` rows and the least-squares log-log slope of
        error against ``M``.
    """
    sizes = sorted(sizes)
    values = _evaluate_samples(evaluator, _draw(sampler, sizes[-1], seed),
        workers)
    if reference is None:
        reference = deterministic_mean(values[np.isfinite(values)])
    rows = []
    for M in sizes:
        prefix = values[:M]
        mean = deterministic_mean(prefix[np.isfinite(prefix)])
        rows.append((M, mean, abs(mean - reference)))
    errors = np.array([r[2] for r in rows])
    if len(rows) > 1 and np.all(errors > 0):
        slope = float(np.polyfit(np.log(sizes), np.log(errors), 1)[0])
    else:
        slope = float("nan")
    return rows, slope


class DiagonalCovariance:
    """
    A Gaussian ``N(mean, diag(c))``. Stands in for a :class:`~.MaternField`
    wherever only covariance applies and samples are needed.
    """
    def __init__(self, diagonal, mean=None):
        self.diagonal = np.asarray(diagonal, dtype=float)
        if np.any(self.diagonal <= 0):
            raise ValueError("covariance diagonal must be positive")
        self.mean = np.zeros(len(self.diagonal)) if mean is None else \
            np.asarray(mean, dtype=float)

    @property
    def dim(self):
        return len(self.diagonal)

    def _scale(self, v, factor):
        v = np.asarray(v, dtype=float)
        return factor[:, None] * v if v.ndim == 2 else factor * v

    def apply_covariance(self, v):
        return self._scale(v, self.diagonal)

    def apply_precision(self, v):
        return self._scale(v, 1 / self.diagonal)

    def samples(self, seed, n):
        rng = np.random.default_rng(seed)
        xi = rng.standard_normal((n, self.dim))
        return self.mean + np.sqrt(self.diagonal) * xi


def taylor_solve_count(options, n_param=None):
    """
    Forward-model solves of :func:`build_taylor_model` at a fresh
    linearization point: the state, the adjoint, and two Hessian actions of
    two solves each per sketch column.
    """
    k = options.n_eig + options.n_oversample
    if n_param is not None:
        k = min(k, n_param)
    return 2 + 4 * k
