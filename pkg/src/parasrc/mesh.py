"""Geometric discretizations: interval meshes, structured congruent-triangle
meshes of rectangles and uniform time grids, plus classification of cells
against the observation subdomain.

All meshes are immutable after construction and safe for concurrent reads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TimeGrid",
    "SpaceMesh1D",
    "TriMesh",
    "MeshAlignmentError",
    "build_time_grid",
    "build_mesh_1d",
    "build_trimesh_congruent",
    "classify_omega_cells",
]

_REL_TOL = 1e-12


class MeshAlignmentError(ValueError):
    """Raised when the observation subdomain does not align with mesh lines."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of the observation window (t0 - zeta, t0 + zeta)."""

    t0: float
    zeta: float
    n_intervals: int
    nodes: np.ndarray
    tau: float

    @property
    def t_start(self) -> float:
        return self.t0 - self.zeta

    @property
    def t_end(self) -> float:
        return self.t0 + self.zeta

    @property
    def length(self) -> float:
        return 2.0 * self.zeta

    def t0_is_node(self) -> bool:
        return self.n_intervals % 2 == 0

    def t0_node_index(self) -> int:
        if not self.t0_is_node():
            raise ValueError(
                "t0 is not a grid node: an even number of time intervals is "
                "required for evaluation at t0"
            )
        return self.n_intervals // 2


def build_time_grid(t0: float, zeta: float, n: int) -> TimeGrid:
    """Divide I = (t0 - zeta, t0 + zeta) into n uniform subintervals."""
    if zeta <= 0.0:
        raise ValueError("zeta must be positive")
    if n < 2:
        raise ValueError("at least 2 time intervals required")
    tau = 2.0 * zeta / n
    nodes = t0 - zeta + tau * np.arange(n + 1)
    nodes[-1] = t0 + zeta
    return TimeGrid(t0=t0, zeta=zeta, n_intervals=n, nodes=nodes, tau=tau)


@dataclass(frozen=True)
class SpaceMesh1D:
    """Uniform mesh of the interval (a, b) with observation window omega."""

    a: float
    b: float
    n_cells: int
    nodes: np.ndarray
    h: float
    omega: tuple

    @property
    def length(self) -> float:
        return self.b - self.a


def build_mesh_1d(a: float, b: float, n: int, omega) -> SpaceMesh1D:
    """Uniform 1D mesh with omega strictly inside (a, b)."""
    if not a < b:
        raise ValueError("require a < b")
    if n < 2:
        raise ValueError("at least 2 cells required")
    w0, w1 = float(omega[0]), float(omega[1])
    if not (a < w0 < w1 < b):
        raise ValueError("omega must be strictly inside (a, b)")
    h = (b - a) / n
    nodes = a + h * np.arange(n + 1)
    nodes[-1] = b
    return SpaceMesh1D(a=a, b=b, n_cells=n, nodes=nodes, h=h, omega=(w0, w1))


@dataclass(frozen=True)
class TriMesh:
    """Criss-cross triangulation of a rectangle grid.

    Each grid cell is split along its antidiagonal into a lower-left and an
    upper-right triangle, giving exactly two congruence orientations
    (orientation tags 0 and 1).  Edge normals follow the global convention:
    rotate the direction from the lower to the higher global vertex index by
    +90 degrees, identical for every edge of a given class.
    """

    nx: int
    ny: int
    hx: float
    hy: float
    vertices: np.ndarray            # (nv, 2)
    triangles: np.ndarray           # (nt, 3) vertex ids, ccw
    orientation: np.ndarray         # (nt,) 0 = lower-left, 1 = upper-right
    edges: np.ndarray               # (ne, 2) vertex ids, low < high
    edge_midpoints: np.ndarray      # (ne, 2)
    edge_normals: np.ndarray        # (ne, 2) unit, global convention
    tri_edges: np.ndarray           # (nt, 3) edge ids for (v0v1, v1v2, v2v0)
    edge_tris: np.ndarray           # (ne, 2) adjacent triangles, -1 = none
    boundary_vertex_flags: np.ndarray
    omega_box: tuple

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def cell_anchor(self, tri_index) -> np.ndarray:
        """Lower-left corner of the grid cell containing the triangle."""
        cell = np.asarray(tri_index) // 2
        j, i = np.divmod(cell, self.nx)
        return np.stack([i * self.hx, j * self.hy], axis=-1)

    def tri_area(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.abs(
            (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
            - (v[:, 2, 0] - v[:, 0, 0]) * (v[:, 1, 1] - v[:, 0, 1])
        )


def build_trimesh_congruent(nx: int, ny: int, omega_box, lx: float = 1.0,
                            ly: float = 1.0) -> TriMesh:
    """Structured congruent-triangle mesh of (0, lx) x (0, ly).

    Parameters
    ----------
    nx, ny : int
        Grid cells per direction; the mesh has 2*nx*ny triangles.
    omega_box : ((x0, x1), (y0, y1)) or (x0, x1)
        Observation sub-rectangle; a single interval is used for both axes.
    """
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be at least 1")
    box = np.asarray(omega_box, dtype=float)
    if box.ndim == 1:
        box = np.stack([box, box])
    (wx0, wx1), (wy0, wy1) = box
    if not (0.0 < wx0 < wx1 < lx and 0.0 < wy0 < wy1 < ly):
        raise ValueError("omega_box must be strictly inside the domain")
    hx, hy = lx / nx, ly / ny

    xs = hx * np.arange(nx + 1)
    ys = hy * np.arange(ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    orientation = np.empty(2 * nx * ny, dtype=np.int8)
    t = 0
    for j in range(ny):
        for i in range(nx):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            triangles[t] = (v00, v10, v01)        # lower-left
            orientation[t] = 0
            triangles[t + 1] = (v11, v01, v10)    # upper-right
            orientation[t + 1] = 1
            t += 2

    edge_index: dict = {}
    edges = []
    tri_edges = np.empty((triangles.shape[0], 3), dtype=np.int64)
    for t, tri in enumerate(triangles):
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            key = (min(a, b), max(a, b))
            e = edge_index.get(key)
            if e is None:
                e = len(edges)
                edge_index[key] = e
                edges.append(key)
            tri_edges[t, k] = e
    edges = np.asarray(edges, dtype=np.int64)

    edge_tris = -np.ones((edges.shape[0], 2), dtype=np.int64)
    for t in range(triangles.shape[0]):
        for e in tri_edges[t]:
            if edge_tris[e, 0] < 0:
                edge_tris[e, 0] = t
            else:
                edge_tris[e, 1] = t

    pa = vertices[edges[:, 0]]
    pb = vertices[edges[:, 1]]
    midpoints = 0.5 * (pa + pb)
    tang = pb - pa
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    normals = np.column_stack([-tang[:, 1], tang[:, 0]])

    bx = (np.isclose(vertices[:, 0], 0.0) | np.isclose(vertices[:, 0], lx)
          | np.isclose(vertices[:, 1], 0.0) | np.isclose(vertices[:, 1], ly))

    return TriMesh(
        nx=nx, ny=ny, hx=hx, hy=hy,
        vertices=vertices, triangles=triangles, orientation=orientation,
        edges=edges, edge_midpoints=midpoints, edge_normals=normals,
        tri_edges=tri_edges, edge_tris=edge_tris,
        boundary_vertex_flags=bx, omega_box=((wx0, wx1), (wy0, wy1)),
    )


def _aligned(value: float, origin: float, h: float) -> bool:
    k = (value - origin) / h
    return abs(k - round(k)) <= 1e-9 * max(1.0, abs(k))


def classify_omega_cells(mesh, omega=None, strict=None) -> np.ndarray:
    """Flag cells inside the observation subdomain.

    For 1D meshes omega must align with mesh nodes (default strict=True,
    matching the error contract); cells strictly inside are flagged.  For
    triangle meshes the flag is centroid containment in the omega box, which
    coincides with exact containment whenever the box aligns with grid lines.
    The tabulated 2D runs use h values for which omega does not align, so
    strictness there defaults to off; pass ``strict=True`` to enforce it.

    Returns a boolean array over cells (1D) or triangles (2D).
    """
    if isinstance(mesh, SpaceMesh1D):
        if strict is None:
            strict = True
        w0, w1 = mesh.omega if omega is None else omega
        if strict and not (_aligned(w0, mesh.a, mesh.h) and _aligned(w1, mesh.a, mesh.h)):
            raise MeshAlignmentError(
                f"omega ({w0}, {w1}) does not align with the mesh of width {mesh.h}"
            )
        centers = 0.5 * (mesh.nodes[:-1] + mesh.nodes[1:])
        return (centers > w0) & (centers < w1)
    if isinstance(mesh, TriMesh):
        box = mesh.omega_box if omega is None else omega
        box = np.asarray(box, dtype=float)
        if box.ndim == 1:
            box = np.stack([box, box])
        (wx0, wx1), (wy0, wy1) = box
        if strict:
            ok = (_aligned(wx0, 0.0, mesh.hx) and _aligned(wx1, 0.0, mesh.hx)
                  and _aligned(wy0, 0.0, mesh.hy) and _aligned(wy1, 0.0, mesh.hy))
            if not ok:
                raise MeshAlignmentError(
                    f"omega box {box.tolist()} does not align with the grid"
                )
        cen = mesh.vertices[mesh.triangles].mean(axis=1)
        return ((cen[:, 0] > wx0) & (cen[:, 0] < wx1)
                & (cen[:, 1] > wy0) & (cen[:, 1] < wy1))
    raise TypeError(f"unsupported mesh type {type(mesh)!r}")
