"""Reference elements and quadrature.

Shape functions with value, gradient and Hessian evaluation for the element
families used by the solver:

* cubic Hermite on an interval (C1 conforming, used for the spatial space in
  1D and for the temporal space),
* Argyris quintic triangle (C1 conforming in 2D),
* linear Lagrange on intervals and triangles (source space).

The Argyris element is not affine equivalent, so its basis is built per
physical triangle by solving the 21x21 system of degree-of-freedom conditions
in a scaled local monomial basis.  On a congruent structured mesh the basis of
a translated triangle is the translate of the representative basis, which is
what :class:`ArgyrisElement` exploits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import roots_jacobi

__all__ = [
    "QuadratureRule",
    "ElementBasis",
    "ArgyrisElement",
    "gauss_rule_1d",
    "triangle_rule",
    "eval_basis",
    "build_argyris_basis",
    "hermite_basis_1d",
    "p1_basis_1d",
    "p1_basis_tri",
    "argyris_reference_basis",
]

MAX_DEGREE_1D = 20
MAX_DEGREE_TRI = 12

_REF_TOL = 1e-12


@dataclass(frozen=True)
class QuadratureRule:
    """Positive quadrature rule on a reference cell ([0,1] or unit triangle)."""

    points: np.ndarray          # (nq, dim)
    weights: np.ndarray         # (nq,)
    exactness_degree: int

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def gauss_rule_1d(degree: int) -> QuadratureRule:
    """Gauss-Legendre rule on [0, 1] exact for polynomials up to ``degree``.

    Parameters
    ----------
    degree : int
        Requested polynomial exactness, 1 <= degree <= 20.
    """
    if not 1 <= degree <= MAX_DEGREE_1D:
        raise ValueError(f"unsupported 1D quadrature degree {degree}")
    n = (degree + 2) // 2
    x, w = leggauss(n)
    points = ((x + 1.0) / 2.0).reshape(-1, 1)
    weights = w / 2.0
    return QuadratureRule(points, weights, exactness_degree=2 * n - 1)


def triangle_rule(degree: int) -> QuadratureRule:
    """Quadrature on the unit right triangle {x,y >= 0, x+y <= 1}.

    A collapsed (Duffy) product of an m-point Gauss-Legendre rule in the first
    coordinate and an m-point Gauss-Jacobi rule with weight (1-v) in the
    second, m = ceil((degree+1)/2).  Exact for all polynomials of total degree
    up to 2m-1 >= degree.
    """
    if not 1 <= degree <= MAX_DEGREE_TRI:
        raise ValueError(f"unsupported triangle quadrature degree {degree}")
    m = (degree + 2) // 2
    xu, wu = leggauss(m)
    u = (xu + 1.0) / 2.0
    wu = wu / 2.0
    xv, wv = roots_jacobi(m, 1.0, 0.0)   # weight (1-x) on [-1, 1]
    v = (xv + 1.0) / 2.0
    wv = wv / 4.0                        # carries the (1-v) Jacobian factor
    uu, vv = np.meshgrid(u, v, indexing="ij")
    points = np.column_stack([(uu * (1.0 - vv)).ravel(), vv.ravel()])
    weights = np.outer(wu, wv).ravel()
    return QuadratureRule(points, weights, exactness_degree=2 * m - 1)


# ---------------------------------------------------------------------------
# cubic Hermite on [0, 1]
#
# DOF order: (v(0), v'(0), v(1), v'(1)).  Rows of _HERMITE_MONO are monomial
# coefficients [1, x, x^2, x^3] of the reference shape functions.
_HERMITE_MONO = np.array(
    [
        [1.0, 0.0, -3.0, 2.0],
        [0.0, 1.0, -2.0, 1.0],
        [0.0, 0.0, 3.0, -2.0],
        [0.0, 0.0, -1.0, 1.0],
    ]
)

_P1_1D_MONO = np.array([[1.0, -1.0], [0.0, 1.0]])


def _polyval_rows(coeffs: np.ndarray, x: np.ndarray, order: int) -> np.ndarray:
    """Evaluate the order-th derivative of monomial-coefficient rows at x."""
    c = coeffs
    for _ in range(order):
        n = c.shape[1]
        if n <= 1:
            return np.zeros((c.shape[0],) + x.shape)
        c = c[:, 1:] * np.arange(1, n)
    # Horner over the trailing axis
    out = np.zeros((c.shape[0],) + x.shape)
    for k in range(c.shape[1] - 1, -1, -1):
        out = out * x + c[:, k][(...,) + (None,) * x.ndim]
    return out


@dataclass(frozen=True)
class ElementBasis:
    """Reference element: family, DOF descriptors and evaluation tables.

    ``dofs`` lists one descriptor per shape function: tuples of
    ``(kind, location, extra)`` with ``kind`` in {"value", "dx", "dy", "dxx",
    "dxy", "dyy", "normal"}; ``location`` is the reference coordinate of the
    DOF and ``extra`` the normal vector for edge-normal DOFs (else None).
    """

    family: str
    n_dofs: int
    degree: int
    dim: int
    dofs: tuple
    _element: object = field(default=None, repr=False, compare=False)

    def eval(self, points: np.ndarray, order: int) -> np.ndarray:
        """Tabulate derivative components at reference points.

        Returns an array of shape (n_dofs, npoints, ncomp) where ncomp is 1
        for order 0, dim for order 1 and dim*(dim+1)/2 for order 2 (ordered
        xx, xy, yy in 2D).
        """
        pts = np.asarray(points, dtype=float)
        if self.dim == 1:
            x = pts.reshape(-1)
            if self.family == "hermite1d":
                mono = _HERMITE_MONO
            elif self.family == "p1_1d":
                mono = _P1_1D_MONO
            else:  # pragma: no cover
                raise ValueError(self.family)
            vals = _polyval_rows(mono, x, order)
            return vals[:, :, None]
        if self.family == "p1_tri":
            n = pts.reshape(-1, 2).shape[0]
            x, y = pts.reshape(-1, 2).T
            if order == 0:
                tab = np.stack([1.0 - x - y, x, y])
                return tab[:, :, None]
            if order == 1:
                g = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
                return np.repeat(g[:, None, :], n, axis=1)
            return np.zeros((3, n, 3))
        if self.family == "argyris":
            return self._element.tabulate(pts.reshape(-1, 2), order)
        raise ValueError(self.family)  # pragma: no cover


def _check_reference_point(basis: ElementBasis, point) -> None:
    p = np.atleast_1d(np.asarray(point, dtype=float))
    if basis.dim == 1:
        if p[0] < -_REF_TOL or p[0] > 1.0 + _REF_TOL:
            raise ValueError(f"point {point} outside reference interval")
    else:
        x, y = p[0], p[1]
        if x < -_REF_TOL or y < -_REF_TOL or x + y > 1.0 + _REF_TOL:
            raise ValueError(f"point {point} outside reference triangle")


def eval_basis(basis: ElementBasis, point, order: int) -> np.ndarray:
    """Evaluate all shape functions of ``basis`` at one reference point.

    Rows are shape functions, columns the derivative components of the
    requested order (value; gradient; Hessian as xx, xy, yy).
    """
    if order not in (0, 1, 2):
        raise ValueError("derivative order must be 0, 1 or 2")
    _check_reference_point(basis, point)
    tab = basis.eval(np.atleast_2d(np.asarray(point, dtype=float)), order)
    return tab[:, 0, :]


def hermite_basis_1d() -> ElementBasis:
    """Cubic Hermite element on [0,1], DOFs (v(0), v'(0), v(1), v'(1))."""
    dofs = (
        ("value", 0.0, None),
        ("dx", 0.0, None),
        ("value", 1.0, None),
        ("dx", 1.0, None),
    )
    return ElementBasis("hermite1d", 4, 3, 1, dofs)


def p1_basis_1d() -> ElementBasis:
    dofs = (("value", 0.0, None), ("value", 1.0, None))
    return ElementBasis("p1_1d", 2, 1, 1, dofs)


def p1_basis_tri() -> ElementBasis:
    dofs = (
        ("value", (0.0, 0.0), None),
        ("value", (1.0, 0.0), None),
        ("value", (0.0, 1.0), None),
    )
    return ElementBasis("p1_tri", 3, 1, 2, dofs)


# ---------------------------------------------------------------------------
# Argyris quintic triangle

# P5 monomial exponents, degree-lexicographic
_ARGYRIS_EXPONENTS = np.array(
    [(a, d - a) for d in range(6) for a in range(d, -1, -1)], dtype=int
)

_VERTEX_DOF_KINDS = ("value", "dx", "dy", "dxx", "dxy", "dyy")

# (p, q) derivative multi-indices for the three kinds of tables
_DERIV_ORDERS = {0: [(0, 0)], 1: [(1, 0), (0, 1)], 2: [(2, 0), (1, 1), (0, 2)]}


def _falling(e: np.ndarray, k: int) -> np.ndarray:
    out = np.ones_like(e, dtype=float)
    for j in range(k):
        out *= np.maximum(e - j, 0)
    return out


class ArgyrisElement:
    """Quintic Argyris basis on one physical triangle.

    21 DOFs: value, both first and all three second derivatives at each
    vertex (DOF order v, v_x, v_y, v_xx, v_xy, v_yy per vertex), then the
    normal derivative at the midpoints of edges (v0,v1), (v1,v2), (v2,v0).
    Shape functions are stored as coefficients in monomials of the scaled
    local coordinates (x - anchor)/scale, anchored at vertex 0, so that a
    translated triangle evaluates the translated polynomials exactly.
    """

    def __init__(self, vertices: np.ndarray, edge_normals: np.ndarray):
        self.vertices = np.asarray(vertices, dtype=float).reshape(3, 2)
        self.edge_normals = np.asarray(edge_normals, dtype=float).reshape(3, 2)
        v0, v1, v2 = self.vertices
        area2 = (v1[0] - v0[0]) * (v2[1] - v0[1]) - (v2[0] - v0[0]) * (v1[1] - v0[1])
        scale = max(
            np.linalg.norm(v1 - v0), np.linalg.norm(v2 - v1), np.linalg.norm(v0 - v2)
        )
        if scale <= 0.0 or abs(area2) < 1e-12 * scale**2:
            raise ValueError("degenerate triangle geometry")
        self.anchor = v0.copy()
        self.scale = scale
        self.area = 0.5 * abs(area2)
        A = self._dof_matrix()
        ident = np.eye(21)
        try:
            self.coeffs = np.linalg.solve(A, ident)  # column i = basis i
        except np.linalg.LinAlgError as exc:  # pragma: no cover
            raise ValueError("singular Argyris DOF system") from exc
        # columns of coeffs give basis i as sum_j coeffs[j, i] * monomial_j

    # -- monomial helpers ---------------------------------------------------
    def _mono_table(self, pts: np.ndarray, p: int, q: int) -> np.ndarray:
        """d^(p+q)/dx^p dy^q of all 21 scaled monomials at pts, (npts, 21)."""
        X = (pts[:, 0] - self.anchor[0]) / self.scale
        Y = (pts[:, 1] - self.anchor[1]) / self.scale
        ea, eb = _ARGYRIS_EXPONENTS.T
        ca = _falling(ea, p)
        cb = _falling(eb, q)
        pa = np.maximum(ea - p, 0)
        pb = np.maximum(eb - q, 0)
        tab = (
            ca * cb / self.scale ** (p + q)
            * X[:, None] ** pa[None, :]
            * Y[:, None] ** pb[None, :]
        )
        tab[:, (ea < p) | (eb < q)] = 0.0
        return tab

    def _dof_matrix(self) -> np.ndarray:
        A = np.empty((21, 21))
        row = 0
        for v in self.vertices:
            pt = v.reshape(1, 2)
            for p, q in [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]:
                A[row] = self._mono_table(pt, p, q)[0]
                row += 1
        mids = 0.5 * (self.vertices + np.roll(self.vertices, -1, axis=0))
        for mid, n in zip(mids, self.edge_normals):
            gx = self._mono_table(mid.reshape(1, 2), 1, 0)[0]
            gy = self._mono_table(mid.reshape(1, 2), 0, 1)[0]
            A[row] = n[0] * gx + n[1] * gy
            row += 1
        return A

    # -- evaluation ---------------------------------------------------------
    def tabulate(self, pts: np.ndarray, order: int) -> np.ndarray:
        """Basis derivative tables at physical points, (21, npts, ncomp)."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        comps = _DERIV_ORDERS[order]
        out = np.empty((21, pts.shape[0], len(comps)))
        for c, (p, q) in enumerate(comps):
            out[:, :, c] = (self._mono_table(pts, p, q) @ self.coeffs).T
        return out

    def dof_values(self, func_derivs) -> np.ndarray:
        """Apply the 21 DOF functionals to a function given by derivative
        callbacks ``func_derivs[(p, q)](x, y)``."""
        vals = np.empty(21)
        row = 0
        for v in self.vertices:
            for p, q in [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]:
                vals[row] = func_derivs[(p, q)](v[0], v[1])
                row += 1
        mids = 0.5 * (self.vertices + np.roll(self.vertices, -1, axis=0))
        for mid, n in zip(mids, self.edge_normals):
            vals[row] = n[0] * func_derivs[(1, 0)](mid[0], mid[1]) + n[1] * func_derivs[
                (0, 1)
            ](mid[0], mid[1])
            row += 1
        return vals

    def dof_matrix_of(self, other: "ArgyrisElement") -> np.ndarray:
        """Apply this element's DOF functionals to another basis (for tests)."""
        M = np.empty((21, 21))
        row = 0
        for v in self.vertices:
            pt = v.reshape(1, 2)
            for order, comp, _ in [(0, 0, None), (1, 0, None), (1, 1, None),
                                   (2, 0, None), (2, 1, None), (2, 2, None)]:
                M[row] = other.tabulate(pt, order)[:, 0, comp]
                row += 1
        mids = 0.5 * (self.vertices + np.roll(self.vertices, -1, axis=0))
        for mid, n in zip(mids, self.edge_normals):
            g = other.tabulate(mid.reshape(1, 2), 1)[:, 0, :]
            M[row] = g @ n
            row += 1
        return M


def _outward_normals(vertices: np.ndarray) -> np.ndarray:
    v = np.asarray(vertices, dtype=float).reshape(3, 2)
    normals = np.empty((3, 2))
    centroid = v.mean(axis=0)
    for k in range(3):
        a, b = v[k], v[(k + 1) % 3]
        t = b - a
        n = np.array([t[1], -t[0]])
        n /= np.linalg.norm(n)
        if np.dot(n, 0.5 * (a + b) - centroid) < 0:
            n = -n
        normals[k] = n
    return normals


def build_argyris_basis(vertices, edge_normals=None) -> ArgyrisElement:
    """Build the 21 Argyris shape functions on a physical triangle.

    Parameters
    ----------
    vertices : (3, 2) array
        Triangle vertices, counterclockwise.
    edge_normals : (3, 2) array, optional
        Unit normals fixing the sign of the edge-midpoint normal-derivative
        DOFs, one per edge (v0,v1), (v1,v2), (v2,v0).  Defaults to outward
        normals; a mesh passes its global-orientation normals here so that
        triangles sharing an edge share the identical functional.
    """
    verts = np.asarray(vertices, dtype=float).reshape(3, 2)
    if edge_normals is None:
        edge_normals = _outward_normals(verts)
    return ArgyrisElement(verts, edge_normals)


def argyris_reference_basis() -> ElementBasis:
    """Argyris element on the unit right triangle with outward normals."""
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    elem = build_argyris_basis(verts)
    dofs = []
    for v in verts:
        for kind in _VERTEX_DOF_KINDS:
            dofs.append((kind, (v[0], v[1]), None))
    mids = 0.5 * (verts + np.roll(verts, -1, axis=0))
    for mid, n in zip(mids, elem.edge_normals):
        dofs.append(("normal", (mid[0], mid[1]), (n[0], n[1])))
    return ElementBasis("argyris", 21, 5, 2, tuple(dofs), _element=elem)
