"""Global finite element spaces and L2 projections.

Degree-of-freedom management for the H2-conforming state spaces (cubic
Hermite on intervals and time grids, Argyris on triangle meshes), the linear
source space, the essential-boundary-condition variants, and the space-time
tensor spaces.  Coefficients of the tensor spaces are space-major: the global
index of (space dof i, time dof a) is i * n_time + a, so assembled operators
are sums of Kronecker products kron(space factor, time factor).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .basis import (
    QuadratureRule,
    _HERMITE_MONO,
    _polyval_rows,
    build_argyris_basis,
    gauss_rule_1d,
    triangle_rule,
)
from .mesh import SpaceMesh1D, TimeGrid, TriMesh

__all__ = [
    "DofSpace",
    "FeFunction",
    "TensorSpace",
    "SpaceTables",
    "hermite_space",
    "p1_space",
    "argyris_space",
    "apply_dirichlet_constraints",
    "project_l2",
    "tensor_eval",
]


@dataclass(frozen=True)
class SpaceTables:
    """Basis tables of one space at the points of a quadrature rule.

    Cells are grouped into at most two congruence classes; within a class the
    anchor-relative quadrature points, weights and basis tables are shared.
    """

    rule: QuadratureRule
    cell_class: np.ndarray     # (ncells,)
    local_points: list         # per class: (nq, dim), relative to cell anchor
    weights: list              # per class: (nq,) physical weights
    tables: list               # per class: {order: (nloc, nq, ncomp)}
    anchors: np.ndarray        # (ncells, dim)

    def points(self, cells: np.ndarray) -> np.ndarray:
        """Physical quadrature points for the given cells, (nc, nq, dim)."""
        cls = self.cell_class[cells]
        if len(self.local_points) == 1 or np.all(cls == cls[0]):
            return self.anchors[cells][:, None, :] + self.local_points[cls[0]][None]
        out = np.empty((len(cells), self.local_points[0].shape[0],
                        self.anchors.shape[1]))
        for c in range(len(self.local_points)):
            m = cls == c
            out[m] = self.anchors[cells[m]][:, None, :] + self.local_points[c][None]
        return out


class DofSpace:
    """Global DOF map for one element family on one mesh."""

    def __init__(self, mesh, family, n_dofs, cell_dofs, dim, classes,
                 constrained=None):
        self.mesh = mesh
        self.family = family
        self.n_dofs = int(n_dofs)
        self.cell_dofs = np.asarray(cell_dofs, dtype=np.int64)
        self.dim = dim
        self._classes = classes            # family-specific geometry payload
        con = np.asarray([] if constrained is None else constrained, dtype=np.int64)
        self.constrained = np.unique(con)
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.constrained] = False
        self.free = np.nonzero(mask)[0]
        self._full_to_free = -np.ones(self.n_dofs, dtype=np.int64)
        self._full_to_free[self.free] = np.arange(len(self.free))

    @property
    def n_cells(self) -> int:
        return self.cell_dofs.shape[0]

    @property
    def n_free(self) -> int:
        return len(self.free)

    def full_to_free(self, full: np.ndarray) -> np.ndarray:
        return self._full_to_free[full]

    def expand(self, free_vec: np.ndarray) -> np.ndarray:
        """Zero-padded full coefficient vector from free coefficients."""
        out = np.zeros(self.n_dofs)
        out[self.free] = free_vec
        return out

    # -- tabulation ----------------------------------------------------------
    def tabulate(self, rule: QuadratureRule, max_order: int = 2) -> SpaceTables:
        if self.family in ("hermite", "p1") and self.dim == 1:
            return self._tabulate_1d(rule, max_order)
        if self.family == "p1" and self.dim == 2:
            return self._tabulate_p1_tri(rule, max_order)
        if self.family == "argyris":
            return self._tabulate_argyris(rule, max_order)
        raise ValueError(self.family)  # pragma: no cover

    def _tabulate_1d(self, rule, max_order):
        h, origin, ncells = self._classes
        xi = rule.points[:, 0]
        mono = _HERMITE_MONO if self.family == "hermite" else np.array(
            [[1.0, -1.0], [0.0, 1.0]])
        dof_scale = np.array([1.0, h, 1.0, h]) if self.family == "hermite" \
            else np.ones(2)
        tables = {}
        for order in range(max_order + 1):
            ref = _polyval_rows(mono, xi, order)
            tables[order] = (dof_scale[:, None] * ref / h**order)[:, :, None]
        anchors = (origin + h * np.arange(ncells)).reshape(-1, 1)
        return SpaceTables(
            rule=rule,
            cell_class=np.zeros(ncells, dtype=np.int8),
            local_points=[xi.reshape(-1, 1) * h],
            weights=[rule.weights * h],
            tables=[tables],
            anchors=anchors,
        )

    def _class_local_points(self, rule):
        mesh: TriMesh = self.mesh
        hx, hy = mesh.hx, mesh.hy
        p = rule.points
        lower = np.column_stack([p[:, 0] * hx, p[:, 1] * hy])
        upper = np.column_stack([hx * (1.0 - p[:, 0]), hy * (1.0 - p[:, 1])])
        return [lower, upper]

    def _tabulate_p1_tri(self, rule, max_order):
        mesh: TriMesh = self.mesh
        pts_cls = self._class_local_points(rule)
        tables = []
        for verts in self._classes:
            # linear basis lambda_j with lambda_j(v_k) = delta_jk
            A = np.column_stack([np.ones(3), verts])
            C = np.linalg.solve(A, np.eye(3))     # column j = coeffs of lambda_j
            pts = pts_cls[len(tables)]
            tab = {}
            ones = np.ones(pts.shape[0])
            tab[0] = (np.column_stack([ones, pts]) @ C).T[:, :, None]
            if max_order >= 1:
                g = C[1:, :].T                     # (3, 2)
                tab[1] = np.repeat(g[:, None, :], pts.shape[0], axis=1)
            if max_order >= 2:
                tab[2] = np.zeros((3, pts.shape[0], 3))
            tables.append(tab)
        w = rule.weights * mesh.hx * mesh.hy
        return SpaceTables(
            rule=rule,
            cell_class=mesh.orientation.astype(np.int8),
            local_points=pts_cls,
            weights=[w, w],
            tables=tables,
            anchors=mesh.cell_anchor(np.arange(mesh.n_triangles)),
        )

    def _tabulate_argyris(self, rule, max_order):
        mesh: TriMesh = self.mesh
        pts_cls = self._class_local_points(rule)
        tables = []
        for elem, pts in zip(self._classes, pts_cls):
            tables.append({o: elem.tabulate(pts, o) for o in range(max_order + 1)})
        w = rule.weights * mesh.hx * mesh.hy
        return SpaceTables(
            rule=rule,
            cell_class=mesh.orientation.astype(np.int8),
            local_points=pts_cls,
            weights=[w, w],
            tables=tables,
            anchors=mesh.cell_anchor(np.arange(mesh.n_triangles)),
        )

    # -- pointwise evaluation --------------------------------------------
    def locate(self, points: np.ndarray) -> np.ndarray:
        """Cell index containing each physical point."""
        if self.dim == 1:
            h, origin, ncells = self._classes
            x = np.asarray(points, dtype=float).reshape(-1)
            return np.clip(((x - origin) / h).astype(int), 0, ncells - 1)
        mesh: TriMesh = self.mesh
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        i = np.clip((p[:, 0] / mesh.hx).astype(int), 0, mesh.nx - 1)
        j = np.clip((p[:, 1] / mesh.hy).astype(int), 0, mesh.ny - 1)
        lx = p[:, 0] / mesh.hx - i
        ly = p[:, 1] / mesh.hy - j
        upper = lx + ly > 1.0 + 1e-13
        return 2 * (j * mesh.nx + i) + upper

    def eval_in_cell(self, cell: int, points: np.ndarray, order: int) -> np.ndarray:
        """Local basis derivative tables at physical points, (nloc, npts, ncomp)."""
        pts = np.asarray(points, dtype=float)
        if self.dim == 1:
            h, origin, _ = self._classes
            anchor = origin + h * cell
            xi = (pts.reshape(-1) - anchor) / h
            mono = _HERMITE_MONO if self.family == "hermite" else np.array(
                [[1.0, -1.0], [0.0, 1.0]])
            dof_scale = np.array([1.0, h, 1.0, h]) if self.family == "hermite" \
                else np.ones(2)
            ref = _polyval_rows(mono, xi, order)
            return (dof_scale[:, None] * ref / h**order)[:, :, None]
        mesh: TriMesh = self.mesh
        anchor = mesh.cell_anchor(cell)
        local = pts.reshape(-1, 2) - anchor
        cls = int(mesh.orientation[cell])
        if self.family == "argyris":
            return self._classes[cls].tabulate(local, order)
        verts = self._classes[cls]
        A = np.column_stack([np.ones(3), verts])
        C = np.linalg.solve(A, np.eye(3))
        n = local.shape[0]
        if order == 0:
            return (np.column_stack([np.ones(n), local]) @ C).T[:, :, None]
        if order == 1:
            return np.repeat(C[1:, :].T[:, None, :], n, axis=1)
        return np.zeros((3, n, 3))

    def eval_function(self, coeffs: np.ndarray, points, order: int = 0) -> np.ndarray:
        """Evaluate a coefficient vector at physical points.

        The result has the batch shape of ``points`` plus a trailing
        derivative-component axis.
        """
        pts = np.asarray(points, dtype=float)
        lead = pts.shape if self.dim == 1 else pts.shape[:-1]
        flat = pts.reshape(-1) if self.dim == 1 else pts.reshape(-1, 2)
        cells = self.locate(flat)
        npts = cells.shape[0]
        ncomp = {0: 1, 1: self.dim, 2: (1 if self.dim == 1 else 3)}[order]
        out = np.empty((npts, ncomp))
        for cell in np.unique(cells):
            m = cells == cell
            tab = self.eval_in_cell(int(cell), flat[m], order)
            out[m] = np.einsum("i,ipc->pc", coeffs[self.cell_dofs[cell]], tab)
        return out.reshape(lead + (ncomp,))


def hermite_space(mesh) -> DofSpace:
    """Cubic Hermite space on a 1D mesh or a time grid (DOFs v, v' per node)."""
    if isinstance(mesh, TimeGrid):
        n, h, origin = mesh.n_intervals, mesh.tau, mesh.t_start
    elif isinstance(mesh, SpaceMesh1D):
        n, h, origin = mesh.n_cells, mesh.h, mesh.a
    else:
        raise TypeError("hermite_space needs a 1D mesh or time grid")
    cell_dofs = 2 * np.arange(n)[:, None] + np.arange(4)[None, :]
    return DofSpace(mesh, "hermite", 2 * (n + 1), cell_dofs, 1, (h, origin, n))


def p1_space(mesh) -> DofSpace:
    """Continuous piecewise-linear space (the source space W_h)."""
    if isinstance(mesh, SpaceMesh1D):
        n = mesh.n_cells
        cell_dofs = np.arange(n)[:, None] + np.arange(2)[None, :]
        return DofSpace(mesh, "p1", n + 1, cell_dofs, 1, (mesh.h, mesh.a, n))
    if isinstance(mesh, TriMesh):
        hx, hy = mesh.hx, mesh.hy
        classes = [
            np.array([[0.0, 0.0], [hx, 0.0], [0.0, hy]]),
            np.array([[hx, hy], [0.0, hy], [hx, 0.0]]),
        ]
        return DofSpace(mesh, "p1", mesh.n_vertices, mesh.triangles, 2, classes)
    raise TypeError("p1_space needs a 1D mesh or triangle mesh")


def argyris_space(mesh: TriMesh) -> DofSpace:
    """Argyris space on a congruent criss-cross triangle mesh.

    Global DOFs: six per vertex (v, v_x, v_y, v_xx, v_xy, v_yy) followed by
    one normal derivative per edge midpoint with the mesh's global normal.
    """
    hx, hy = mesh.hx, mesh.hy
    diag = np.array([-hy, -hx]) / np.hypot(hx, hy)
    normals = [np.array([0.0, 1.0]), diag, np.array([-1.0, 0.0])]
    lower = build_argyris_basis(
        np.array([[0.0, 0.0], [hx, 0.0], [0.0, hy]]), normals)
    upper = build_argyris_basis(
        np.array([[hx, hy], [0.0, hy], [hx, 0.0]]), normals)
    nv = mesh.n_vertices
    tri = mesh.triangles
    cell_dofs = np.concatenate(
        [
            (6 * tri[:, :, None] + np.arange(6)[None, None, :]).reshape(-1, 18),
            6 * nv + mesh.tri_edges,
        ],
        axis=1,
    )
    return DofSpace(mesh, "argyris", 6 * nv + mesh.n_edges, cell_dofs, 2,
                    [lower, upper])


def apply_dirichlet_constraints(space: DofSpace) -> DofSpace:
    """Constrain the DOFs that control boundary values (v = 0 on the boundary).

    1D Hermite: the two endpoint value DOFs. Argyris: per boundary vertex the
    value, the tangential first derivative and the tangential-tangential
    second derivative (all of v, v_x, v_y, v_xx, v_yy at corners; v_xy stays
    free); edge-normal DOFs stay free everywhere.
    """
    mesh = space.mesh
    if space.family == "hermite" and isinstance(mesh, SpaceMesh1D):
        constrained = [0, space.n_dofs - 2]
    elif space.family == "argyris":
        tm: TriMesh = mesh
        lx, ly = tm.nx * tm.hx, tm.ny * tm.hy
        constrained = []
        for v in np.nonzero(tm.boundary_vertex_flags)[0]:
            x, y = tm.vertices[v]
            constrained.append(6 * v)
            on_h = np.isclose(y, 0.0) or np.isclose(y, ly)
            on_v = np.isclose(x, 0.0) or np.isclose(x, lx)
            if on_h:
                constrained += [6 * v + 1, 6 * v + 3]   # v_x, v_xx
            if on_v:
                constrained += [6 * v + 2, 6 * v + 5]   # v_y, v_yy
    elif space.family == "p1":
        if space.dim == 1:
            constrained = [0, space.n_dofs - 1]
        else:
            constrained = np.nonzero(space.mesh.boundary_vertex_flags)[0]
    else:
        raise TypeError("no boundary constraint rule for this space")
    return DofSpace(space.mesh, space.family, space.n_dofs, space.cell_dofs,
                    space.dim, space._classes, constrained=constrained)


@dataclass(frozen=True)
class TensorSpace:
    """Space-time tensor space; dimension n_free(space) * n_dofs(time)."""

    space: DofSpace
    time: DofSpace

    @property
    def n_dofs(self) -> int:
        return self.space.n_free * self.time.n_dofs

    def coeff_matrix(self, vec: np.ndarray) -> np.ndarray:
        """Full (n_space_dofs, n_time_dofs) coefficient array, zeros on
        constrained spatial rows."""
        P = np.zeros((self.space.n_dofs, self.time.n_dofs))
        P[self.space.free] = np.asarray(vec).reshape(self.space.n_free,
                                                     self.time.n_dofs)
        return P


@dataclass
class FeFunction:
    """Finite element function: a space (plain or tensor) plus coefficients."""

    space: object
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float).ravel()
        n = self.space.n_dofs
        if self.coefficients.shape[0] != n:
            raise ValueError(
                f"coefficient length {self.coefficients.shape[0]} != dofs {n}")

    def eval(self, points, order: int = 0) -> np.ndarray:
        if isinstance(self.space, TensorSpace):
            raise TypeError("use tensor_eval for space-time functions")
        return self.space.eval_function(self.coefficients, points, order)

    def to_csv(self, path) -> None:
        """Write (global dof index, coefficient) rows."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dof", "coefficient"])
            for i, c in enumerate(self.coefficients):
                writer.writerow([i, f"{c:.17g}"])

    @classmethod
    def from_csv(cls, space, path) -> "FeFunction":
        coeffs = np.zeros(space.n_dofs)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                coeffs[int(row[0])] = float(row[1])
        return cls(space, coeffs)


# ---------------------------------------------------------------------------
# projections and tensor evaluation

def _default_rule(space: DofSpace) -> QuadratureRule:
    return gauss_rule_1d(11) if space.dim == 1 else triangle_rule(12)


def mass_matrix(space: DofSpace, rule=None, cells=None) -> sp.csr_matrix:
    """Mass matrix on the free DOFs of ``space`` (restricted to ``cells``)."""
    rule = rule or _default_rule(space)
    tabs = space.tabulate(rule, max_order=0)
    if cells is None:
        cells = np.arange(space.n_cells)
    rows, cols, data = [], [], []
    for c in range(len(tabs.tables)):
        sel = cells[tabs.cell_class[cells] == c]
        if len(sel) == 0:
            continue
        V = tabs.tables[c][0][:, :, 0]
        Mloc = np.einsum("q,iq,jq->ij", tabs.weights[c], V, V)
        dofs = space.full_to_free(space.cell_dofs[sel])
        rows.append(np.broadcast_to(dofs[:, :, None], dofs.shape + (dofs.shape[1],)).ravel())
        cols.append(np.broadcast_to(dofs[:, None, :], (dofs.shape[0], dofs.shape[1], dofs.shape[1])).ravel())
        data.append(np.broadcast_to(Mloc[None], (len(sel),) + Mloc.shape).ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    data = np.concatenate(data)
    keep = (rows >= 0) & (cols >= 0)
    n = space.n_free
    return sp.coo_matrix((data[keep], (rows[keep], cols[keep])),
                         shape=(n, n)).tocsr()


def _eval_callback(target, pts: np.ndarray, dim: int) -> np.ndarray:
    if dim == 1:
        return np.asarray(target(pts[..., 0]), dtype=float)
    return np.asarray(target(pts[..., 0], pts[..., 1]), dtype=float)


def load_vector(space: DofSpace, target, rule=None, cells=None) -> np.ndarray:
    """(target, phi_i) over the free DOFs by quadrature."""
    rule = rule or _default_rule(space)
    tabs = space.tabulate(rule, max_order=0)
    if cells is None:
        cells = np.arange(space.n_cells)
    b = np.zeros(space.n_free)
    for c in range(len(tabs.tables)):
        sel = cells[tabs.cell_class[cells] == c]
        if len(sel) == 0:
            continue
        V = tabs.tables[c][0][:, :, 0]
        pts = tabs.points(sel)
        fv = _eval_callback(target, pts, space.dim)
        bloc = np.einsum("cq,q,iq->ci", fv, tabs.weights[c], V)
        dofs = space.full_to_free(space.cell_dofs[sel])
        np.add.at(b, dofs[dofs >= 0], bloc[dofs >= 0])
    return b


def project_l2(space: DofSpace, target, rule=None) -> FeFunction:
    """L2-orthogonal projection of a callback onto the space.

    Solves the mass system (proj, phi) = (target, phi) for all free basis
    functions; constrained DOFs stay zero.
    """
    from scipy.sparse.linalg import spsolve

    M = mass_matrix(space, rule)
    b = load_vector(space, target, rule)
    if space.n_free < 600:
        free = np.linalg.solve(M.toarray(), b)
    else:
        free = spsolve(M.tocsc(), b)
    return FeFunction(space, space.expand(free))


def tensor_eval(u: FeFunction, x, t, orders=(0, 0)):
    """Evaluate a space-time tensor function (mixed derivatives).

    Parameters
    ----------
    u : FeFunction on a TensorSpace
    x : spatial point(s); scalar/array in 1D, (.., 2) in 2D
    t : time point(s), broadcast against x
    orders : (space_order, time_order), space 0..2, time 0..2

    Returns the requested derivative component array of shape
    (npts, n_space_comp); scalar inputs give a one-row result.
    """
    ts: TensorSpace = u.space
    if not isinstance(ts, TensorSpace):
        raise TypeError("tensor_eval needs a FeFunction on a TensorSpace")
    so, to = orders
    sdim = ts.space.dim
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    xf = x.reshape(-1) if sdim == 1 else x.reshape(-1, 2)
    tf = t.reshape(-1)
    n = max(xf.shape[0], tf.shape[0])
    if xf.shape[0] != n:
        xf = np.broadcast_to(xf, (n,) if sdim == 1 else (n, 2))
    if tf.shape[0] != n:
        tf = np.broadcast_to(tf, (n,))
    _check_domain(ts, xf, tf)
    P = ts.coeff_matrix(u.coefficients)
    scells = ts.space.locate(xf)
    tcells = ts.time.locate(tf)
    ncomp = {0: 1, 1: sdim, 2: (1 if sdim == 1 else 3)}[so]
    out = np.empty((xf.shape[0], ncomp))
    for sc in np.unique(scells):
        for tc in np.unique(tcells[scells == sc]):
            m = (scells == sc) & (tcells == tc)
            stab = ts.space.eval_in_cell(int(sc), xf[m], so)
            ttab = ts.time.eval_in_cell(int(tc), tf[m], to)[:, :, 0]
            Ploc = P[np.ix_(ts.space.cell_dofs[sc], ts.time.cell_dofs[tc])]
            out[m] = np.einsum("ipc,ia,ap->pc", stab, Ploc, ttab)
    return out


def _check_domain(ts: TensorSpace, xf, tf):
    tol = 1e-10
    tg = ts.time.mesh
    if np.any(tf < tg.t_start - tol) or np.any(tf > tg.t_end + tol):
        raise ValueError("time point outside the observation window")
    if ts.space.dim == 1:
        m: SpaceMesh1D = ts.space.mesh
        if np.any(xf < m.a - tol) or np.any(xf > m.b + tol):
            raise ValueError("spatial point outside the domain")
    else:
        tm: TriMesh = ts.space.mesh
        lx, ly = tm.nx * tm.hx, tm.ny * tm.hy
        if (np.any(xf[:, 0] < -tol) or np.any(xf[:, 0] > lx + tol)
                or np.any(xf[:, 1] < -tol) or np.any(xf[:, 1] > ly + tol)):
            raise ValueError("spatial point outside the domain")
