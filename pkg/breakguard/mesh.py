from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

import numpy as np

from breakguard.exceptions import InvalidGeometryError


class Boundary(IntEnum):
    """
    Boundary labels of the beam-insulator layout.

    :data:`~.Boundary.GAMMA1` is the exterior (top) edge, convective and
    clamped. :data:`~.Boundary.GAMMA2` are the lateral edges, adiabatic.
    :data:`~.Boundary.GAMMA3` is the exposed bottom edge of the beam,
    convective and clamped. :data:`~.Boundary.GAMMA4` is the insulator part of
    the bottom edge, convective.

    :data:`~.Boundary.INTERFACE` only appears on meshes extracted with
    :meth:`Mesh.submesh`, and marks edges shared with the removed subdomain.
    """
    GAMMA1    = 1
    GAMMA2    = 2
    GAMMA3    = 3
    GAMMA4    = 4
    INTERFACE = 5


class Subdomain(IntEnum):
    INSULATOR = 1
    BEAM      = 2


@dataclass(frozen=True)
class Geometry:
    """
    A rectangular domain of size ``width`` x ``height``, optionally with a
    beam occupying ``[beam_x0, beam_x1] x [0, beam_height]`` and rising from
    the bottom edge. The rest of the domain is insulator.

    Leave all beam fields as ``None`` for a plain insulator rectangle.
    """
    width: float = 1.0
    height: float = 1.0
    beam_x0: Optional[float] = 0.4
    beam_x1: Optional[float] = 0.6
    beam_height: Optional[float] = 0.5

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidGeometryError("domain dimensions must be positive, "
                f"got {self.width} x {self.height}")
        beam = (self.beam_x0, self.beam_x1, self.beam_height)
        if all(v is None for v in beam):
            return
        if any(v is None for v in beam):
            raise InvalidGeometryError("beam_x0, beam_x1 and beam_height must "
                "be given together")
        if not 0 < self.beam_x0 < self.beam_x1 < self.width:
            raise InvalidGeometryError("the beam must lie strictly inside the "
                f"domain width, got [{self.beam_x0}, {self.beam_x1}]")
        if not 0 < self.beam_height < self.height:
            raise InvalidGeometryError("the beam height must be positive and "
                f"below the domain height, got {self.beam_height}")

    @classmethod
    def plain(cls, width=1.0, height=1.0):
        return cls(width, height, None, None, None)

    @property
    def has_beam(self):
        return self.beam_x0 is not None

    @property
    def area(self):
        return self.width * self.height


class Mesh:
    """
    A conforming triangulation with tagged cells and boundary edges.

    Parameters
    ----------
    vertices: ndarray, shape (n, 2)
        Vertex coordinates.
    cells: ndarray, shape (m, 3)
        Counterclockwise vertex indices of each triangle.
    cell_tags: ndarray, shape (m,)
        The :class:`Subdomain` of each cell.
    boundary_edges: ndarray, shape (k, 2)
        Vertex indices of each boundary edge.
    edge_tags: ndarray, shape (k,)
        The :class:`Boundary` of each boundary edge.

    Notes
    -----
    Meshes are treated as immutable after construction. All arrays are set
    read-only.
    """
    def __init__(self, vertices, cells, cell_tags, boundary_edges, edge_tags):
        self.vertices = np.asarray(vertices, dtype=float)
        self.cells = np.asarray(cells, dtype=np.int64)
        self.cell_tags = np.asarray(cell_tags, dtype=np.int64)
        self.boundary_edges = np.asarray(boundary_edges, dtype=np.int64)
        self.edge_tags = np.asarray(edge_tags, dtype=np.int64)

        if len(self.cell_tags) != len(self.cells):
            raise InvalidGeometryError("every cell needs exactly one tag")
        if len(self.edge_tags) != len(self.boundary_edges):
            raise InvalidGeometryError("every boundary edge needs exactly "
                "one tag")
        if np.any(self.signed_areas() <= 0):
            raise InvalidGeometryError("all cells must have positive signed "
                "area")

        for arr in (self.vertices, self.cells, self.cell_tags,
            self.boundary_edges, self.edge_tags):
            arr.setflags(write=False)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    def signed_areas(self):
        p = self.vertices[self.cells]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def cells_in(self, subdomain):
        """
        Indices of the cells tagged ``subdomain``.
        """
        return np.flatnonzero(self.cell_tags == subdomain)

    def edges_in(self, *boundaries):
        """
        Indices of the boundary edges tagged with any of ``boundaries``.
        """
        return np.flatnonzero(np.isin(self.edge_tags, boundaries))

    def vertices_of(self, subdomain):
        """
        Sorted indices of all vertices touching a cell tagged ``subdomain``.
        """
        return np.unique(self.cells[self.cells_in(subdomain)])

    def boundary_vertices(self, *boundaries):
        return np.unique(self.boundary_edges[self.edges_in(*boundaries)])

    def submesh(self, subdomain):
        """
        The mesh made of the cells tagged ``subdomain``.

        Returns
        -------
        (Mesh, ndarray)
            The extracted mesh, and the map from its vertex indices to the
            vertex indices of this mesh.
        """
        cell_ids = self.cells_in(subdomain)
        if len(cell_ids) == 0:
            raise InvalidGeometryError(f"no cells tagged {subdomain!r}")
        vertex_map = np.unique(self.cells[cell_ids])
        local = -np.ones(self.n_vertices, dtype=np.int64)
        local[vertex_map] = np.arange(len(vertex_map))
        cells = local[self.cells[cell_ids]]

        parent_tags = {}
        for (a, b), tag in zip(self.boundary_edges, self.edge_tags):
            parent_tags[(min(a, b), max(a, b))] = tag

        edges, tags = [], []
        for a, b in _single_edges(cells):
            pa, pb = vertex_map[a], vertex_map[b]
            key = (min(pa, pb), max(pa, pb))
            edges.append((a, b))
            tags.append(parent_tags.get(key, Boundary.INTERFACE))

        mesh = Mesh(self.vertices[vertex_map], cells, self.cell_tags[cell_ids],
            edges, tags)
        return mesh, vertex_map


def _single_edges(cells):
    """
    Edges that belong to exactly one cell, in a deterministic order.
    """
    counts = {}
    for cell in cells:
        for i in range(3):
            a, b = cell[i], cell[(i + 1) % 3]
            key = (min(a, b), max(a, b))
            counts[key] = counts.get(key, 0) + 1
    return sorted(key for key, count in counts.items() if count == 1)


def _segment_counts(breaks, n):
    """
    Distributes ``n`` cells over the segments between ``breaks``
    proportionally to segment length, with at least one cell per segment.
    """
    lengths = np.diff(breaks)
    n_segments = len(lengths)
    if n < n_segments:
        raise InvalidGeometryError(f"need at least {n_segments} cells along "
            f"this direction to resolve the layout, got {n}")
    counts = np.maximum(1, np.round(n * lengths / lengths.sum())).astype(int)
    # fix up rounding on the longest segment
    counts[np.argmax(lengths)] += n - counts.sum()
    if np.any(counts < 1):
        raise InvalidGeometryError(f"cannot resolve the layout with {n} cells")
    return counts


def _axis(breaks, n):
    counts = _segment_counts(breaks, n)
    pieces = [np.linspace(breaks[i], breaks[i + 1], counts[i] + 1)[:-1]
        for i in range(len(counts))]
    return np.concatenate(pieces + [[breaks[-1]]])


def build_rect_mesh(geometry, nx, ny):
    """
    A structured right-angled triangulation of ``geometry`` with ``nx`` cells
    across and ``ny`` cells up. Grid lines follow the beam outline, so the
    subdomain split is conforming.

    Parameters
    ----------
    geometry: :class:`Geometry`
        The layout to mesh.
    nx: int
        Number of cell columns.
    ny: int
        Number of cell rows.

    Returns
    -------
    :class:`Mesh`

    Examples
    --------
    >>> mesh = build_rect_mesh(Geometry.plain(), 1, 1)
    >>> mesh.n_cells, mesh.n_vertices
    (2, 4)
    """
    if nx < 1 or ny < 1:
        raise InvalidGeometryError(f"cell counts must be positive, got "
            f"{nx} x {ny}")

    g = geometry
    if g.has_beam:
        xs = _axis([0.0, g.beam_x0, g.beam_x1, g.width], nx)
        ys = _axis([0.0, g.beam_height, g.height], ny)
    else:
        xs = np.linspace(0.0, g.width, nx + 1)
        ys = np.linspace(0.0, g.height, ny + 1)

    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def v(i, j):
        return j * (nx + 1) + i

    cells = []
    for j in range(ny):
        for i in range(nx):
            v00, v10, v01, v11 = v(i, j), v(i + 1, j), v(i, j + 1), v(i + 1, j + 1)
            cells.append((v00, v10, v11))
            cells.append((v00, v11, v01))
    cells = np.array(cells, dtype=np.int64)

    centroids = vertices[cells].mean(axis=1)
    cell_tags = np.full(len(cells), Subdomain.INSULATOR, dtype=np.int64)
    if g.has_beam:
        in_beam = ((centroids[:, 0] > g.beam_x0) & (centroids[:, 0] < g.beam_x1)
            & (centroids[:, 1] < g.beam_height))
        cell_tags[in_beam] = Subdomain.BEAM

    edges, tags = [], []
    for i in range(nx):
        a, b = v(i, 0), v(i + 1, 0)
        mid = 0.5 * (xs[i] + xs[i + 1])
        on_beam = g.has_beam and g.beam_x0 < mid < g.beam_x1
        edges.append((a, b))
        tags.append(Boundary.GAMMA3 if on_beam else Boundary.GAMMA4)
    for i in range(nx):
        edges.append((v(i + 1, ny), v(i, ny)))
        tags.append(Boundary.GAMMA1)
    for j in range(ny):
        edges.append((v(0, j + 1), v(0, j)))
        tags.append(Boundary.GAMMA2)
        edges.append((v(nx, j), v(nx, j + 1)))
        tags.append(Boundary.GAMMA2)

    return Mesh(vertices, cells, cell_tags, edges, tags)


def plain_rect_mesh(nx, ny, width=1.0, height=1.0):
    """
    :func:`build_rect_mesh` on a plain insulator rectangle.
    """
    return build_rect_mesh(Geometry.plain(width, height), nx, ny)
