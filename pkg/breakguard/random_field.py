import logging
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.linalg import cholesky
from scipy.sparse import coo_matrix
from scipy.special import kv

from breakguard.exceptions import ShapeError
from breakguard.fem import (CELL_MASS, Factorization, Field, MassKernel,
    RobinKernel, StiffnessKernel, assemble)
from breakguard.utils import check_param

log = logging.getLogger(__name__)

# boundary length scale of the Robin condition m + 1.42 grad(m).n = 0
ROBIN_LENGTH = 1.42
ANISOTROPY_FLOOR = 1e-4


def params_from_stats(sigma, correlation_length):
    """
    The SPDE coefficients ``(gamma, delta)`` of a field with marginal
    standard deviation ``sigma`` and correlation length
    ``correlation_length``.

    Examples
    --------
    >>> gamma, delta = params_from_stats(0.5, 0.25)
    >>> round(gamma, 5), round(delta, 3)
    (0.04987, 6.383)
    """
    if not (sigma > 0 and correlation_length > 0):
        raise ValueError(f"sigma and correlation length must be positive, got "
            f"{sigma} and {correlation_length}")
    gamma = correlation_length / (sigma * np.sqrt(32 * np.pi))
    delta = 8 * gamma / correlation_length**2
    return gamma, delta


def stats_from_params(gamma, delta):
    """
    Inverse of :func:`params_from_stats`: ``(sigma, correlation_length)``.
    """
    if not (gamma > 0 and delta > 0):
        raise ValueError(f"gamma and delta must be positive, got {gamma} and "
            f"{delta}")
    sigma = 1 / np.sqrt(4 * np.pi * delta * gamma)
    return sigma, np.sqrt(8 * gamma / delta)


def anisotropy_tensor(theta_x, theta_y, angle):
    """
    The symmetric positive definite tensor with eigenvalues ``theta_x`` and
    ``theta_y``, principal axes rotated by ``angle`` radians.
    """
    s, c = np.sin(angle), np.cos(angle)
    off = (theta_x - theta_y) * s * c
    return np.array([
        [theta_x * s**2 + theta_y * c**2, off],
        [off, theta_x * c**2 + theta_y * s**2]
    ])


@dataclass(frozen=True)
class MaternConfig:
    """
    Coefficients of the SPDE ``-gamma div(Theta grad m) + delta m = noise``
    with a Robin boundary condition.

    ``mean`` is a scalar or a nodal array over the parameter space.
    ``robin_form="coefficient"`` uses boundary mass coefficient
    ``sqrt(delta gamma) / 1.42``, ``"length"`` uses ``gamma / 1.42``.
    """
    gamma: float
    delta: float
    theta_x: float = 1.0
    theta_y: float = 1.0
    angle: float = 0.0
    mean: Union[float, tuple] = 0.0
    robin_form: str = "coefficient"

    def __post_init__(self):
        for name in ["gamma", "delta", "theta_x", "theta_y"]:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got "
                    f"{getattr(self, name)}")
        for name in ["theta_x", "theta_y"]:
            if getattr(self, name) < ANISOTROPY_FLOOR:
                log.warning("%s=%g is below the anisotropy floor, using %g",
                    name, getattr(self, name), ANISOTROPY_FLOOR)
                object.__setattr__(self, name, ANISOTROPY_FLOOR)
        if not np.isscalar(self.mean):
            object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        check_param(self.robin_form, ["coefficient", "length"])

    @classmethod
    def from_stats(cls, sigma, correlation_length, **kwargs):
        gamma, delta = params_from_stats(sigma, correlation_length)
        return cls(gamma, delta, **kwargs)

    @property
    def sigma(self):
        return stats_from_params(self.gamma, self.delta)[0]

    @property
    def correlation_length(self):
        return stats_from_params(self.gamma, self.delta)[1]

    @property
    def tensor(self):
        return anisotropy_tensor(self.theta_x, self.theta_y, self.angle)

    @property
    def robin_coefficient(self):
        if self.robin_form == "coefficient":
            return np.sqrt(self.delta * self.gamma) / ROBIN_LENGTH
        return self.gamma / ROBIN_LENGTH


class MaternField:
    """
    A Gaussian random field ``N(mean, C)`` with ``C = A^-1 M A^-1``, where
    ``A`` is the SPDE operator and ``M`` the mass matrix of ``space``.

    White noise is realized as ``L xi`` with ``L`` the cellwise Cholesky
    factor of the mass matrix, so ``L L^T = M`` exactly and ``L`` stays
    sparse.

    Parameters
    ----------
    space: :class:`~.FunctionSpace`
        A scalar space.
    config: :class:`MaternConfig`
        The SPDE coefficients and mean.
    counter: :class:`~.SolveCounter`
        Counts covariance and precision applies, if given.
    """
    def __init__(self, space, config, counter=None):
        if space.components != 1:
            raise ShapeError("a Matérn field needs a scalar space")
        self.space = space
        self.config = config
        self.counter = counter
        mesh = space.mesh

        boundaries = tuple(np.unique(mesh.edge_tags))
        A, _ = assemble(space, [
            StiffnessKernel(config.gamma, config.tensor),
            MassKernel(config.delta),
            RobinKernel(boundaries, config.robin_coefficient)
        ])
        M, _ = assemble(space, MassKernel())
        self.A = A.matrix
        self.M = M.matrix
        self._A = Factorization(self.A, "matern operator")
        self._M = Factorization(self.M, "mass")

        # per cell: M_e = L_e L_e^T
        area = mesh.signed_areas()
        L_e = cholesky(CELL_MASS, lower=True)
        local = np.sqrt(area)[:, None, None] * L_e
        rows = np.broadcast_to(mesh.cells[:, :, None], local.shape)
        cols = np.arange(3 * mesh.n_cells).reshape(-1, 1, 3)
        cols = np.broadcast_to(cols, local.shape)
        self.L = coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())),
            shape=(space.dim, 3 * mesh.n_cells)).tocsr()

        mean = config.mean
        if np.isscalar(mean):
            self.mean = np.full(space.dim, float(mean))
        else:
            self.mean = np.asarray(mean, dtype=float)
            if self.mean.shape != (space.dim,):
                raise ShapeError(f"mean has {len(self.mean)} values, space has "
                    f"{space.dim} dofs")

    @property
    def dim(self):
        return self.space.dim

    @property
    def mean_field(self):
        return Field(self.space, self.mean)

    def _count(self, n=1):
        if self.counter is not None:
            self.counter.add_covariance(n)

    def sample(self, seed):
        """
        One sample ``mean + A^-1 L xi``.
        """
        return Field(self.space, self.samples(seed, 1)[0])

    def samples(self, seed, n):
        """
        ``n`` samples as the rows of an ``(n, dim)`` array. The same seed
        always gives the same samples.
        """
        if n == 0:
            return np.zeros((0, self.dim))
        rng = np.random.default_rng(seed)
        xi = rng.standard_normal((self.L.shape[1], n))
        return (self.mean[:, None] + self._A.solve(self.L @ xi)).T

    def _values(self, v):
        if isinstance(v, Field):
            self.mean_field.check_space(v)
            return v.coefficients
        return np.asarray(v, dtype=float)

    def apply_covariance(self, v):
        """
        ``C v``. Accepts a :class:`~.Field`, a vector, or an ``(dim, k)``
        array of columns; returns the same kind.
        """
        values = self._values(v)
        self._count(1 if values.ndim == 1 else values.shape[1])
        out = self._A.solve(self.M @ self._A.solve(values))
        return Field(self.space, out) if isinstance(v, Field) else out

    def apply_precision(self, v):
        """
        ``C^-1 v = A M^-1 A v``.
        """
        values = self._values(v)
        self._count(1 if values.ndim == 1 else values.shape[1])
        out = self.A @ self._M.solve(self.A @ values)
        return Field(self.space, out) if isinstance(v, Field) else out

    def covariance_matrix(self):
        """
        ``C`` as a dense array. Only sensible on small meshes.
        """
        return self.apply_covariance(np.eye(self.dim))

    def marginal_variance(self, nodes=None):
        """
        ``diag(C)``, at all nodes or only at ``nodes``. Each node costs one
        covariance apply.
        """
        nodes = np.arange(self.dim) if nodes is None else np.asarray(nodes)
        E = np.zeros((self.dim, len(nodes)))
        E[nodes, np.arange(len(nodes))] = 1.0
        return np.einsum("ij,ij->j", E, self.apply_covariance(E))

    def lumped_areas(self):
        return np.asarray(self.M.sum(axis=1)).ravel()


def sample(field, seed):
    return field.sample(seed)


def apply_covariance(field, v):
    return field.apply_covariance(v)


def apply_precision(field, v):
    return field.apply_precision(v)


def marginal_variance(field, nodes=None):
    return field.marginal_variance(nodes)


def empirical_variance(field, n, seed):
    """
    The nodewise sample variance of ``n`` samples and its standard error.

    Returns
    -------
    (ndarray, ndarray)
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    m = field.samples(seed, n)
    centered = m - m.mean(axis=0)
    var = np.sum(centered**2, axis=0) / (n - 1)
    # standard error of the sample variance
    m4 = np.mean(centered**4, axis=0)
    stderr = np.sqrt(np.maximum(m4 - var**2 * (n - 3) / (n - 1), 0) / n)
    return var, stderr


def boundary_region_fraction(field, variance, tol=0.1):
    """
    The share of the domain area where ``variance`` deviates from the
    nominal ``sigma^2`` by more than ``tol`` relative.
    """
    sigma2 = field.config.sigma**2
    weights = field.lumped_areas()
    deviating = np.abs(np.asarray(variance) / sigma2 - 1) > tol
    return float(np.sum(weights[deviating]) / np.sum(weights))


def correlation_profile(field, samples, origin, axis, distances):
    """
    Empirical correlation between the node closest to ``origin`` and the
    nodes closest to ``origin + r e_axis`` for each ``r`` in ``distances``.
    """
    vertices = field.space.mesh.vertices
    origin = np.asarray(origin, dtype=float)

    def nearest(point):
        return int(np.argmin(np.sum((vertices - point)**2, axis=1)))

    i0 = nearest(origin)
    out = []
    for r in distances:
        point = origin.copy()
        point[axis] += r
        i = nearest(point)
        out.append(np.corrcoef(samples[:, i0], samples[:, i])[0, 1])
    return np.array(out)


def correlation_length_estimate(field, samples, origin, axis, distances):
    """
    The first distance at which the empirical correlation drops below the
    Matérn correlation at one correlation length. ``inf`` if it never does.
    """
    level = np.sqrt(8) * kv(1, np.sqrt(8))
    profile = correlation_profile(field, samples, origin, axis, distances)
    below = np.flatnonzero(profile < level)
    return float(distances[below[0]]) if len(below) else float("inf")
