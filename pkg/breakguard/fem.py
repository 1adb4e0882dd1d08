import logging
from abc import ABC

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.linalg import splu

from breakguard.exceptions import AssemblyError, ShapeError, SolverError
from breakguard.utils import TRACE

log = logging.getLogger(__name__)

# integrals of products of P1 basis functions, divided by the cell area
# (triangles) or edge length (edges)
CELL_MASS = np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 12
EDGE_MASS = np.array([[2, 1], [1, 2]]) / 6
# CELL_TRIPLE[k, i, j] = int N_k N_i N_j / area
CELL_TRIPLE = np.empty((3, 3, 3))
for _k in range(3):
    for _i in range(3):
        for _j in range(3):
            _distinct = len({_k, _i, _j})
            CELL_TRIPLE[_k, _i, _j] = {1: 1 / 10, 2: 1 / 30, 3: 1 / 60}[_distinct]
# EDGE_TRIPLE[k, a, b] = int N_k N_a N_b / length
EDGE_TRIPLE = np.empty((2, 2, 2))
for _k in range(2):
    for _a in range(2):
        for _b in range(2):
            EDGE_TRIPLE[_k, _a, _b] = 1 / 4 if _k == _a == _b else 1 / 12


class FunctionSpace:
    """
    A P1 space on ``mesh`` with ``components`` values per vertex. Dofs are
    numbered vertex-major: the dof of component ``c`` at vertex ``v`` is
    ``v * components + c``.
    """
    def __init__(self, mesh, components=1):
        if components not in (1, 2):
            raise ValueError(f"Expected 1 or 2 components. Got {components}")
        self.mesh = mesh
        self.components = components
        self.dim = mesh.n_vertices * components

    @property
    def value_rank(self):
        return "scalar" if self.components == 1 else "vector"

    @property
    def dof_map(self):
        return np.arange(self.dim).reshape(self.mesh.n_vertices,
            self.components)

    def cell_dofs(self, cell_ids=None):
        """
        Local-to-global dof indices, shape ``(n, 3 * components)``, ordered
        vertex-major within each cell.
        """
        cells = self.mesh.cells if cell_ids is None else \
            self.mesh.cells[cell_ids]
        return self.dof_map[cells].reshape(len(cells), -1)

    def edge_dofs(self, edge_ids):
        edges = self.mesh.boundary_edges[edge_ids]
        return self.dof_map[edges].reshape(len(edges), -1)

    def __eq__(self, other):
        return (isinstance(other, FunctionSpace) and self.mesh is other.mesh
            and self.components == other.components)

    def __hash__(self):
        return hash((id(self.mesh), self.components))

    def __repr__(self):
        return (f"FunctionSpace({self.value_rank}, {self.mesh.n_vertices} "
            "vertices)")


class Field:
    """
    A coefficient vector on a :class:`FunctionSpace`.
    """
    def __init__(self, space, coefficients):
        coefficients = np.array(coefficients, dtype=float)
        if coefficients.shape != (space.dim,):
            raise ShapeError(f"expected {space.dim} coefficients, got shape "
                f"{coefficients.shape}")
        coefficients.setflags(write=False)
        self.space = space
        self.coefficients = coefficients

    @classmethod
    def constant(cls, space, value):
        return cls(space, np.full(space.dim, float(value)))

    def check_space(self, other):
        if self.space != other.space:
            raise ShapeError(f"{other.space!r} does not match {self.space!r}")

    def __add__(self, other):
        self.check_space(other)
        return Field(self.space, self.coefficients + other.coefficients)

    def __sub__(self, other):
        self.check_space(other)
        return Field(self.space, self.coefficients - other.coefficients)

    def __mul__(self, a):
        return Field(self.space, a * self.coefficients)

    __rmul__ = __mul__

    def __len__(self):
        return len(self.coefficients)

    def __repr__(self):
        return f"Field({self.space!r})"


class SparseOperator:
    """
    A compressed sparse matrix with the shape checks the rest of the library
    relies on.
    """
    def __init__(self, matrix):
        self.matrix = csr_matrix(matrix)

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, x):
        if isinstance(x, Field):
            return self.matrix @ x.coefficients
        return self.matrix @ x

    def __add__(self, other):
        return SparseOperator(self.matrix + other.matrix)

    @property
    def T(self):
        return SparseOperator(self.matrix.T)

    def symmetry_error(self):
        """
        ``max|A - A^T| / max|A|``.
        """
        diff = abs(self.matrix - self.matrix.T)
        scale = abs(self.matrix).max()
        if scale == 0:
            return 0.0
        return (diff.max() if diff.nnz else 0.0) / scale

    def todense(self):
        return self.matrix.toarray()


class CellBatch:
    """
    Geometry of a batch of triangles: area and the (constant) gradients of
    the three barycentric basis functions.
    """
    def __init__(self, mesh, cell_ids):
        self.cell_ids = np.asarray(cell_ids)
        self.vertex_ids = mesh.cells[self.cell_ids]
        p = mesh.vertices[self.vertex_ids]
        self.points = p
        x, y = p[..., 0], p[..., 1]
        two_area = ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0])
            - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
        self.area = 0.5 * two_area
        # grad N_i = (y_j - y_k, x_k - x_j) / 2A for cyclic (i, j, k)
        grads = np.empty((len(self.cell_ids), 3, 2))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            grads[:, i, 0] = (y[:, j] - y[:, k]) / two_area
            grads[:, i, 1] = (x[:, k] - x[:, j]) / two_area
        self.grads = grads

    def __len__(self):
        return len(self.cell_ids)

    def gradient(self, values):
        """
        Cellwise gradient of a P1 field given its values at the batch
        vertices, shape ``(n, 3)`` -> ``(n, 2)``.
        """
        return np.einsum("ni,nid->nd", values, self.grads)

    def strain_matrix(self):
        """
        The ``(n, 3, 6)`` map from local displacement dofs (vertex-major,
        x then y) to engineering strain ``(exx, eyy, gxy)``.
        """
        B = np.zeros((len(self), 3, 6))
        B[:, 0, 0::2] = self.grads[:, :, 0]
        B[:, 1, 1::2] = self.grads[:, :, 1]
        B[:, 2, 0::2] = self.grads[:, :, 1]
        B[:, 2, 1::2] = self.grads[:, :, 0]
        return B

    def divergence_row(self):
        """
        The ``(n, 6)`` map from local displacement dofs to the divergence.
        """
        div = np.empty((len(self), 6))
        div[:, 0::2] = self.grads[:, :, 0]
        div[:, 1::2] = self.grads[:, :, 1]
        return div


class EdgeBatch:
    def __init__(self, mesh, edge_ids):
        self.edge_ids = np.asarray(edge_ids)
        self.vertex_ids = mesh.boundary_edges[self.edge_ids]
        p = mesh.vertices[self.vertex_ids]
        self.length = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)

    def __len__(self):
        return len(self.edge_ids)


def _coefficient_mean(coefficient, vertex_ids):
    """
    The mean of a coefficient over each element, where ``coefficient`` is a
    scalar, a per-element array, or a nodal array over all mesh vertices.
    """
    if np.isscalar(coefficient):
        return np.full(len(vertex_ids), float(coefficient))
    coefficient = np.asarray(coefficient, dtype=float)
    if coefficient.ndim == 1 and len(coefficient) == len(vertex_ids):
        return coefficient
    return coefficient[vertex_ids].mean(axis=1)


class ElementKernel(ABC):
    """
    A per-cell or per-edge contribution to a bilinear and/or linear form.

    Subclasses claim a region with ``subdomain`` (cell kernels) or
    ``boundaries`` (edge kernels) and return local matrices and vectors for a
    batch of elements. ``None`` claims every cell.
    """
    on = "cells"

    def __init__(self, subdomain=None, boundaries=None):
        self.subdomain = subdomain
        self.boundaries = tuple(boundaries) if boundaries else None

    def element_ids(self, mesh):
        if self.on == "cells":
            if self.subdomain is None:
                return np.arange(mesh.n_cells)
            ids = mesh.cells_in(self.subdomain)
            if len(ids) == 0:
                raise AssemblyError(f"{type(self).__name__} claims subdomain "
                    f"{self.subdomain!r}, which tags no cells")
            return ids
        ids = mesh.edges_in(*self.boundaries)
        if len(ids) == 0:
            raise AssemblyError(f"{type(self).__name__} claims boundaries "
                f"{self.boundaries!r}, which tag no edges")
        return ids

    def batch(self, mesh):
        ids = self.element_ids(mesh)
        if self.on == "cells":
            return CellBatch(mesh, ids)
        return EdgeBatch(mesh, ids)

    def local_matrices(self, batch):
        return None

    def local_vectors(self, batch):
        return None


class MassKernel(ElementKernel):
    """
    ``int c u v`` over cells, with ``c`` a scalar or nodal coefficient.
    """
    def __init__(self, coefficient=1.0, subdomain=None):
        super().__init__(subdomain=subdomain)
        self.coefficient = coefficient

    def local_matrices(self, batch):
        if np.isscalar(self.coefficient):
            return self.coefficient * batch.area[:, None, None] * CELL_MASS
        c = np.asarray(self.coefficient)[batch.vertex_ids]
        return batch.area[:, None, None] * np.einsum("nk,kij->nij", c,
            CELL_TRIPLE)


class StiffnessKernel(ElementKernel):
    """
    ``int c (T grad u) . grad v`` over cells, with an optional constant
    symmetric 2x2 tensor ``T``.
    """
    def __init__(self, coefficient=1.0, tensor=None, subdomain=None):
        super().__init__(subdomain=subdomain)
        self.coefficient = coefficient
        self.tensor = np.eye(2) if tensor is None else np.asarray(tensor)

    def local_matrices(self, batch):
        c = _coefficient_mean(self.coefficient, batch.vertex_ids)
        G = np.einsum("nid,de,nje->nij", batch.grads, self.tensor, batch.grads)
        return (c * batch.area)[:, None, None] * G


class SourceKernel(ElementKernel):
    """
    ``int f v`` over cells for a nodal source ``f`` (interpolated) or a
    callable ``f(x, y)`` evaluated at the edge midpoints of each cell.
    """
    def __init__(self, source, subdomain=None):
        super().__init__(subdomain=subdomain)
        self.source = source

    def local_vectors(self, batch):
        if callable(self.source):
            p = batch.points
            mids = 0.5 * (p + np.roll(p, -1, axis=1))
            f = self.source(mids[..., 0], mids[..., 1])
            # midpoint rule, exact for quadratics: basis i is 1/2 at the two
            # midpoints of its edges
            contrib = np.stack([0.5 * (f[:, 0] + f[:, 2]),
                0.5 * (f[:, 0] + f[:, 1]), 0.5 * (f[:, 1] + f[:, 2])], axis=1)
            return batch.area[:, None] * contrib / 3
        f = np.asarray(self.source)[batch.vertex_ids]
        return batch.area[:, None] * (f @ CELL_MASS)


class RobinKernel(ElementKernel):
    """
    ``int_e c u v`` on boundary edges (matrix) and ``int_e c g v`` (vector),
    with ``c`` a scalar or nodal coefficient and ``g`` a scalar.
    """
    on = "edges"

    def __init__(self, boundaries, coefficient=1.0, value=None):
        super().__init__(boundaries=boundaries)
        self.coefficient = coefficient
        self.value = value

    def _weights(self, batch):
        if np.isscalar(self.coefficient):
            return self.coefficient * np.broadcast_to(EDGE_MASS,
                (len(batch), 2, 2))
        c = np.asarray(self.coefficient)[batch.vertex_ids]
        return np.einsum("nk,kab->nab", c, EDGE_TRIPLE)

    def local_matrices(self, batch):
        return batch.length[:, None, None] * self._weights(batch)

    def local_vectors(self, batch):
        if self.value is None:
            return None
        return self.value * batch.length[:, None] * \
            self._weights(batch).sum(axis=2)


class ElasticityKernel(ElementKernel):
    """
    ``int (lam div u div v + 2 mu eps(u) : eps(v))`` over cells, with
    per-cell or scalar Lamé constants.
    """
    def __init__(self, lam, mu, subdomain=None):
        super().__init__(subdomain=subdomain)
        self.lam = lam
        self.mu = mu

    def local_matrices(self, batch):
        lam = _coefficient_mean(self.lam, batch.vertex_ids)
        mu = _coefficient_mean(self.mu, batch.vertex_ids)
        D = np.zeros((len(batch), 3, 3))
        D[:, 0, 0] = D[:, 1, 1] = lam + 2 * mu
        D[:, 0, 1] = D[:, 1, 0] = lam
        D[:, 2, 2] = mu
        B = batch.strain_matrix()
        return batch.area[:, None, None] * np.einsum("nai,nab,nbj->nij", B, D, B)


class TractionKernel(ElementKernel):
    """
    ``int_e t . v`` on boundary edges for a constant traction vector ``t``.
    """
    on = "edges"

    def __init__(self, boundaries, traction):
        super().__init__(boundaries=boundaries)
        self.traction = np.asarray(traction, dtype=float)

    def local_vectors(self, batch):
        half = 0.5 * batch.length[:, None]
        return np.concatenate([half * self.traction, half * self.traction],
            axis=1)


def scatter_matrix(local, row_dofs, col_dofs, shape):
    """
    Sums local ``(n, r, c)`` matrices into a global sparse matrix.
    """
    rows = np.broadcast_to(row_dofs[:, :, None], local.shape)
    cols = np.broadcast_to(col_dofs[:, None, :], local.shape)
    return coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())),
        shape=shape).tocsr()


def scatter_vector(local, dofs, size):
    return np.bincount(dofs.ravel(), weights=local.ravel(), minlength=size)


def assemble(space, kernels):
    """
    The global matrix and vector of the sum of ``kernels`` on ``space``.

    Parameters
    ----------
    space: :class:`FunctionSpace`
        The (test and trial) space.
    kernels: :class:`ElementKernel` or list[:class:`ElementKernel`]
        The element contributions to sum.

    Returns
    -------
    (:class:`SparseOperator`, :class:`Field`)
    """
    if isinstance(kernels, ElementKernel):
        kernels = [kernels]
    mesh = space.mesh
    A = csr_matrix((space.dim, space.dim))
    b = np.zeros(space.dim)
    for kernel in kernels:
        batch = kernel.batch(mesh)
        if kernel.on == "cells":
            dofs = space.cell_dofs(batch.cell_ids)
        else:
            dofs = space.edge_dofs(batch.edge_ids)
        local = kernel.local_matrices(batch)
        if local is not None:
            A = A + scatter_matrix(local, dofs, dofs, A.shape)
        local = kernel.local_vectors(batch)
        if local is not None:
            b = b + scatter_vector(local, dofs, space.dim)
    return SparseOperator(A), Field(space, b)


class Factorization:
    """
    A sparse LU factorization that counts its solves.

    Parameters
    ----------
    matrix: sparse matrix
        The square matrix to factorize.
    name: str
        Used in log messages and error stages.
    """
    # pivots below this fraction of the largest pivot are treated as singular
    PIVOT_TOLERANCE = 1e-14

    def __init__(self, matrix, name="matrix"):
        self.name = name
        self.shape = matrix.shape
        self.n_solves = 0
        try:
            self.lu = splu(csr_matrix(matrix).tocsc())
        except RuntimeError as e:
            raise SolverError(f"factorization of {name} failed: {e}",
                stage=name) from e
        pivots = np.abs(self.lu.U.diagonal())
        self.pivot_ratio = pivots.min() / pivots.max() if pivots.max() > 0 \
            else 0.0
        if self.pivot_ratio < self.PIVOT_TOLERANCE:
            raise SolverError(f"{name} is numerically singular", stage=name,
                pivot_ratio=self.pivot_ratio)
        log.log(TRACE, "factorized %s (%d dofs, pivot ratio %.3e)", name,
            self.shape[0], self.pivot_ratio)

    def solve(self, b, transpose=False):
        self.n_solves += 1
        return self.lu.solve(np.asarray(b, dtype=float),
            trans="T" if transpose else "N")


def solve_sparse(A, b, dirichlet=None):
    """
    Solves ``A x = b`` with ``x[dofs] = values`` imposed by elimination.

    Parameters
    ----------
    A: :class:`SparseOperator`
        The system matrix.
    b: :class:`Field` or ndarray
        The right hand side.
    dirichlet: (ndarray, ndarray)
        Constrained dof indices and their values. ``None`` for no constraints.

    Returns
    -------
    :class:`Field` if ``b`` is a field, else ndarray.
    """
    rhs = b.coefficients if isinstance(b, Field) else np.asarray(b, float)
    matrix = A.matrix
    n = matrix.shape[0]
    x = np.zeros(n)
    free = np.ones(n, dtype=bool)
    if dirichlet is not None:
        dofs, values = dirichlet
        dofs = np.asarray(dofs, dtype=np.int64)
        free[dofs] = False
        x[dofs] = values
    free_ids = np.flatnonzero(free)
    rhs_free = rhs[free_ids] - matrix[free_ids] @ x
    system = matrix[free_ids][:, free_ids]
    x[free_ids] = Factorization(system, "linear system").solve(rhs_free)

    scale = np.linalg.norm(rhs_free)
    residual = np.linalg.norm(system @ x[free_ids] - rhs_free)
    if residual > 1e-10 * max(scale, 1e-300) and residual > 1e-14:
        log.warning("sparse solve residual %.3e relative to %.3e", residual,
            scale)
    if isinstance(b, Field):
        return Field(b.space, x)
    return x


def dirichlet_free_dofs(n, dofs):
    free = np.ones(n, dtype=bool)
    free[np.asarray(dofs, dtype=np.int64)] = False
    return np.flatnonzero(free)
