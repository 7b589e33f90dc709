"""Assembly of the regularized least-squares systems.

The state u lives in a space-time tensor space (space-major indexing), the
source f in the linear space W_h.  The normal equations couple three blocks,

    [ B_uu  B_uf ] [u]   [l_u]
    [ B_uf' B_ff ] [f] = [l_f],

realizing the bilinear form

    b[(u,f),(v,g)] = (u,v)_{H1(I;L2(omega))} + (Au(t0), Av(t0))_{L2(Omega)}
                     + (Lu - Rf, Lv - Rg)_{H1(I;L2(Omega))}

for the boundary-aware (Lipschitz) formulation, plus gradient observations
and the f/u penalties in the boundary-free (Hoelder) variant.  H1(I; X)
inner products use unit weights, (w, z)_X + (dt w, dt z)_X.

Because the elliptic coefficients depend on x only, every B_uu contribution
factors exactly into (spatial integral) x (temporal integral) on each space-
time cell I_n x K; the assembly evaluates both factors with the tensorized
quadrature rules (4-pt Gauss in 1D space and time, degree-10 triangle rule in
2D) and sums Kronecker products.  The R-coupled blocks and all data terms are
integrated over space-time cells directly, so R = R(x, t) is supported.

Penalty norm expansion used for the gamma_u block (space-major Kronecker):

    (u,v)_{H1(I;H2(Omega))} = kron(M + K1 + K2, T00 + T11)
    (u,v)_{H2(I;H1(Omega))} = kron(M + K1,      T00 + T11 + T22)

with M the mass, K1 the gradient product, K2 the second-derivative products
with the mixed term counted twice (uxx*vxx + 2 uxy*vxy + uyy*vyy), and
Tab[al, be] = integral of chi_al^(a) chi_be^(b) over I.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .basis import QuadratureRule, gauss_rule_1d, triangle_rule
from .mesh import SpaceMesh1D, TriMesh, classify_omega_cells
from .spaces import DofSpace, FeFunction, SpaceTables, TensorSpace

__all__ = [
    "EllipticOperator",
    "SourceModulation",
    "SystemBlocks",
    "assemble_lipschitz_system",
    "assemble_holder_system",
    "assemble_rhs",
    "apply_L",
    "residual_norms",
    "evaluate_functional",
    "export_matrix",
    "default_space_rule",
    "default_time_rule",
]


def default_space_rule(dim: int) -> QuadratureRule:
    return gauss_rule_1d(7) if dim == 1 else triangle_rule(10)


def default_time_rule() -> QuadratureRule:
    return gauss_rule_1d(7)


def _as_callable(value, dim):
    if callable(value):
        return value, False
    arr = np.asarray(value, dtype=float)
    if dim == 1:
        return (lambda x: np.broadcast_to(arr, np.shape(x))), True
    return (lambda x, y: np.broadcast_to(arr, np.shape(x))), True


class EllipticOperator:
    """Second order operator A v = -div(a grad v) + b . grad v + c v.

    Parameters
    ----------
    a : scalar, (dim, dim) matrix, or callable
        Diffusion coefficient; callables receive coordinate arrays and return
        the scalar (1D) or the 2x2 matrix entries a11, a12, a22 as a tuple.
    b : vector or callable, optional
        Convection coefficient.
    c : scalar or callable, optional
        Reaction coefficient.
    da : callable, optional
        Spatial derivatives of a, required when a is not constant:
        1D da(x) -> a'; 2D da(x, y) -> (d1 a11, d1 a12, d2 a12, d2 a22).
    mu : float, optional
        Declared ellipticity constant; checked against sampled eigenvalues
        of a at assembly time.
    """

    def __init__(self, a, b=None, c=None, da=None, mu=None, dim=1):
        self.dim = dim
        self.a = a
        self.b = b
        self.c = c
        self.da = da
        self.mu = mu
        self.a_constant = not callable(a)
        self.b_constant = not callable(b)
        self.c_constant = not callable(c)
        if not self.a_constant and da is None:
            raise ValueError("variable diffusion requires the derivative da")

    @classmethod
    def laplace(cls, dim: int = 1) -> "EllipticOperator":
        """A = -Laplacian (a = identity, b = 0, c = 0)."""
        a = 1.0 if dim == 1 else np.eye(2)
        return cls(a, mu=1.0, dim=dim)

    @property
    def is_constant(self) -> bool:
        return self.a_constant and self.b_constant and self.c_constant

    def _coeffs_at(self, pts: np.ndarray) -> dict:
        """Coefficient arrays at physical points of shape pts.shape[:-1]."""
        shape = pts.shape[:-1]
        out = {}
        if self.dim == 1:
            x = pts[..., 0]
            out["a11"] = (np.broadcast_to(float(self.a), shape) if self.a_constant
                          else np.asarray(self.a(x), dtype=float))
            out["da1"] = (np.zeros(shape) if self.da is None
                          else np.asarray(self.da(x), dtype=float))
            bv = 0.0 if self.b is None else self.b
            out["b1"] = (np.broadcast_to(float(bv), shape) if self.b_constant
                         else np.asarray(self.b(x), dtype=float))
            cv = 0.0 if self.c is None else self.c
            out["c"] = (np.broadcast_to(float(cv), shape) if self.c_constant
                        else np.asarray(self.c(x), dtype=float))
            return out
        x, y = pts[..., 0], pts[..., 1]
        if self.a_constant:
            A = np.asarray(self.a, dtype=float)
            if A.ndim == 0:
                A = float(A) * np.eye(2)
            out["a11"] = np.broadcast_to(A[0, 0], shape)
            out["a12"] = np.broadcast_to(A[0, 1], shape)
            out["a22"] = np.broadcast_to(A[1, 1], shape)
        else:
            a11, a12, a22 = self.a(x, y)
            out["a11"], out["a12"], out["a22"] = (np.asarray(v, dtype=float)
                                                  for v in (a11, a12, a22))
        if self.da is None:
            out["div_a1"] = np.zeros(shape)
            out["div_a2"] = np.zeros(shape)
        else:
            d1a11, d1a12, d2a12, d2a22 = self.da(x, y)
            out["div_a1"] = np.asarray(d1a11, dtype=float) + np.asarray(d2a12, dtype=float)
            out["div_a2"] = np.asarray(d1a12, dtype=float) + np.asarray(d2a22, dtype=float)
        if self.b is None:
            out["b1"] = np.zeros(shape)
            out["b2"] = np.zeros(shape)
        elif self.b_constant:
            bv = np.asarray(self.b, dtype=float).reshape(2)
            out["b1"] = np.broadcast_to(bv[0], shape)
            out["b2"] = np.broadcast_to(bv[1], shape)
        else:
            b1, b2 = self.b(x, y)
            out["b1"], out["b2"] = np.asarray(b1, dtype=float), np.asarray(b2, dtype=float)
        cv = 0.0 if self.c is None else self.c
        out["c"] = (np.broadcast_to(float(cv), shape) if self.c_constant
                    else np.asarray(self.c(x, y), dtype=float))
        return out

    def apply_tables(self, val, grad, hess, coeffs) -> np.ndarray:
        """A(phi) at tabulated points.

        val/grad/hess have shape (..., nloc, nq, ncomp); coefficient arrays
        broadcast over (..., nq).  Uses the nondivergence expansion
        A v = -(a : hess v) - (div a) . grad v + b . grad v + c v.
        """
        if self.dim == 1:
            a = coeffs["a11"][..., None, :]
            da = coeffs["da1"][..., None, :]
            b = coeffs["b1"][..., None, :]
            c = coeffs["c"][..., None, :]
            return (-a * hess[..., 0] + (b - da) * grad[..., 0] + c * val[..., 0])
        a11 = coeffs["a11"][..., None, :]
        a12 = coeffs["a12"][..., None, :]
        a22 = coeffs["a22"][..., None, :]
        g1 = coeffs["div_a1"][..., None, :]
        g2 = coeffs["div_a2"][..., None, :]
        b1 = coeffs["b1"][..., None, :]
        b2 = coeffs["b2"][..., None, :]
        c = coeffs["c"][..., None, :]
        return (
            -(a11 * hess[..., 0] + 2.0 * a12 * hess[..., 1] + a22 * hess[..., 2])
            + (b1 - g1) * grad[..., 0] + (b2 - g2) * grad[..., 1]
            + c * val[..., 0]
        )

    def apply_pointwise(self, val, grad, hess, pts) -> np.ndarray:
        """A(u) for value/gradient/Hessian arrays at points (npts, ...)."""
        coeffs = self._coeffs_at(np.atleast_2d(pts))
        if self.dim == 1:
            return (-coeffs["a11"] * hess[:, 0]
                    + (coeffs["b1"] - coeffs["da1"]) * grad[:, 0]
                    + coeffs["c"] * val[:, 0])
        return (
            -(coeffs["a11"] * hess[:, 0] + 2.0 * coeffs["a12"] * hess[:, 1]
              + coeffs["a22"] * hess[:, 2])
            + (coeffs["b1"] - coeffs["div_a1"]) * grad[:, 0]
            + (coeffs["b2"] - coeffs["div_a2"]) * grad[:, 1]
            + coeffs["c"] * val[:, 0]
        )

    def check_ellipticity(self, pts: np.ndarray) -> None:
        if self.mu is None:
            return
        coeffs = self._coeffs_at(pts)
        tol = 1e-10
        if self.dim == 1:
            lo = coeffs["a11"].min()
            hi = coeffs["a11"].max()
        else:
            a11, a12, a22 = coeffs["a11"], coeffs["a12"], coeffs["a22"]
            tr, det = a11 + a22, a11 * a22 - a12 * a12
            disc = np.sqrt(np.maximum(tr * tr / 4.0 - det, 0.0))
            lo = (tr / 2.0 - disc).min()
            hi = (tr / 2.0 + disc).max()
        if lo < self.mu - tol or hi > 1.0 / self.mu + tol:
            raise ValueError(
                f"coefficient matrix violates the declared ellipticity bounds "
                f"mu={self.mu}: sampled eigenvalue range [{lo}, {hi}]")


class SourceModulation:
    """Separable source modulation R(x, t) with time derivative.

    ``time_only`` marks R = R(t); the callbacks then take t alone.  The
    positivity R(x, t0) >= r0 > 0 is sampled at assembly time.
    """

    def __init__(self, R, dtR, time_only=False, r0=None):
        self.R = R
        self.dtR = dtR
        self.time_only = time_only
        self.r0 = r0

    @classmethod
    def constant(cls, value: float = 1.0) -> "SourceModulation":
        return cls(lambda t: np.full_like(np.asarray(t, dtype=float), value),
                   lambda t: np.zeros_like(np.asarray(t, dtype=float)),
                   time_only=True, r0=value)

    def eval(self, which, pts, times, dim) -> np.ndarray:
        """R or dtR on the (points x times) grid -> (npts, ntimes)."""
        cb = self.R if which == "R" else self.dtR
        t = np.asarray(times, dtype=float).reshape(1, -1)
        if self.time_only:
            vals = np.asarray(cb(t[0]), dtype=float).reshape(1, -1)
            return np.broadcast_to(vals, (np.shape(pts)[0], t.shape[1]))
        p = np.asarray(pts, dtype=float)
        if dim == 1:
            return np.asarray(cb(p[:, 0][:, None], t), dtype=float)
        return np.asarray(cb(p[:, 0][:, None], p[:, 1][:, None], t), dtype=float)

    def check_positivity(self, pts, t0, dim) -> None:
        vals = self.eval("R", np.atleast_2d(pts), np.array([t0]), dim)[:, 0]
        floor = 0.0 if self.r0 is None else self.r0 - 1e-10
        if vals.min() <= floor:
            raise ValueError(
                f"R(x, t0) must be positive (>= r0); sampled minimum {vals.min()}")


# ---------------------------------------------------------------------------
# low-level kernels

def _scatter(rows, cols, data, shape) -> sp.csr_matrix:
    rows = rows.ravel()
    cols = cols.ravel()
    data = data.ravel()
    keep = (rows >= 0) & (cols >= 0)
    return sp.coo_matrix((data[keep], (rows[keep], cols[keep])), shape=shape).tocsr()


def _pair_matrix(space_r, space_c, row_arrays, col_arrays, weights, cells_by_class,
                 free_rows=True, free_cols=True) -> sp.csr_matrix:
    """Sum over classes of  sum_q w * row[..] * col[..]  scattered globally.

    row_arrays/col_arrays: per class, arrays of shape (nc, nloc, nq, ncomp)
    (or broadcastable without the cell axis).
    """
    nrows = space_r.n_free if free_rows else space_r.n_dofs
    ncols = space_c.n_free if free_cols else space_c.n_dofs
    acc = sp.csr_matrix((nrows, ncols))
    for c, cells in enumerate(cells_by_class):
        if len(cells) == 0:
            continue
        R = row_arrays[c]
        C = col_arrays[c]
        if R.ndim == 3:
            R = R[None]
        if C.ndim == 3:
            C = C[None]
        loc = np.einsum("q,ciqk,cjqk->cij",
                        weights[c],
                        np.broadcast_to(R, (len(cells),) + R.shape[1:]),
                        np.broadcast_to(C, (len(cells),) + C.shape[1:]),
                        optimize=True)
        rdofs = space_r.cell_dofs[cells]
        cdofs = space_c.cell_dofs[cells]
        if free_rows:
            rdofs = space_r.full_to_free(rdofs)
        if free_cols:
            cdofs = space_c.full_to_free(cdofs)
        nl_r, nl_c = rdofs.shape[1], cdofs.shape[1]
        rows = np.broadcast_to(rdofs[:, :, None], (len(cells), nl_r, nl_c))
        cols = np.broadcast_to(cdofs[:, None, :], (len(cells), nl_r, nl_c))
        acc = acc + _scatter(rows, cols, loc, (nrows, ncols))
    return acc


class _SpaceContext:
    """Tabulated spatial data shared by all assembly passes."""

    def __init__(self, u_space: DofSpace, f_space: DofSpace, operator,
                 rule_x: QuadratureRule):
        self.u_space = u_space
        self.f_space = f_space
        self.rule_x = rule_x
        self.tabs = u_space.tabulate(rule_x, max_order=2)
        self.ftabs = f_space.tabulate(rule_x, max_order=1)
        ncells = u_space.n_cells
        all_cells = np.arange(ncells)
        self.cells_by_class = [all_cells[self.tabs.cell_class == c]
                               for c in range(len(self.tabs.tables))]
        omega = classify_omega_cells(u_space.mesh)
        self.omega_cells_mask = omega
        self.omega_by_class = [all_cells[(self.tabs.cell_class == c) & omega]
                               for c in range(len(self.tabs.tables))]
        self.operator = operator
        # A(phi) tables; per class when coefficients are constant, else per cell
        self.aphi = []
        for c, cells in enumerate(self.cells_by_class):
            tab = self.tabs.tables[c]
            if operator.is_constant:
                pts = self.tabs.local_points[c][None]
                coeffs = operator._coeffs_at(pts)
                aphi = operator.apply_tables(tab[0][None], tab[1][None],
                                             tab[2][None], coeffs)[0]
            else:
                pts = self.tabs.points(cells)          # (nc, nq, dim)
                coeffs = operator._coeffs_at(pts)      # arrays (nc, nq)
                aphi = operator.apply_tables(tab[0][None], tab[1][None],
                                             tab[2][None], coeffs)
            self.aphi.append(aphi)

    # spatial factor matrices ------------------------------------------------
    def val_arrays(self, tabs=None):
        tabs = tabs or self.tabs
        return [tabs.tables[c][0] for c in range(len(tabs.tables))]

    def aphi_arrays(self):
        return [ap[..., None] for ap in self.aphi]

    def matrix(self, kind: str, cells="all") -> sp.csr_matrix:
        cb = self.cells_by_class if cells == "all" else self.omega_by_class
        V = self.val_arrays()
        if kind == "mass":
            return _pair_matrix(self.u_space, self.u_space, V, V,
                                self.tabs.weights, cb)
        if kind == "grad":
            G = [self.tabs.tables[c][1] for c in range(len(V))]
            return _pair_matrix(self.u_space, self.u_space, G, G,
                                self.tabs.weights, cb)
        if kind == "hess":
            # mixed second derivative counted twice (H2 seminorm expansion)
            H = []
            for c in range(len(V)):
                h = self.tabs.tables[c][2].copy()
                if h.shape[-1] == 3:
                    h[..., 1] *= np.sqrt(2.0)
                H.append(h)
            return _pair_matrix(self.u_space, self.u_space, H, H,
                                self.tabs.weights, cb)
        if kind == "op_val":       # D[i, j] = (A phi_i, phi_j)
            A = self.aphi_arrays()
            return _pair_matrix(self.u_space, self.u_space, A, V,
                                self.tabs.weights, cb)
        if kind == "op_op":        # H[i, j] = (A phi_i, A phi_j)
            A = self.aphi_arrays()
            return _pair_matrix(self.u_space, self.u_space, A, A,
                                self.tabs.weights, cb)
        if kind == "mixed_mass":   # (phi_i, psi_k)
            F = self.val_arrays(self.ftabs)
            return _pair_matrix(self.u_space, self.f_space, V, F,
                                self.tabs.weights, cb, free_cols=False)
        if kind == "mixed_op":     # (A phi_i, psi_k)
            A = self.aphi_arrays()
            F = self.val_arrays(self.ftabs)
            return _pair_matrix(self.u_space, self.f_space, A, F,
                                self.tabs.weights, cb, free_cols=False)
        if kind == "f_mass":
            F = self.val_arrays(self.ftabs)
            return _pair_matrix(self.f_space, self.f_space, F, F,
                                self.tabs.weights, cb,
                                free_rows=False, free_cols=False)
        raise ValueError(kind)  # pragma: no cover


class _TimeContext:
    """Temporal basis tables, product matrices and R moments."""

    def __init__(self, time_space: DofSpace, rule_t: QuadratureRule):
        self.time_space = time_space
        self.rule_t = rule_t
        self.tabs = time_space.tabulate(rule_t, max_order=2)
        self.X = [self.tabs.tables[0][o][:, :, 0] for o in range(3)]  # (4, nqt)
        self.w = self.tabs.weights[0]
        grid = time_space.mesh
        self.n_cells = time_space.n_cells
        self.times = (self.tabs.anchors[:, 0][:, None]
                      + self.tabs.local_points[0][:, 0][None, :])  # (N, nqt)
        self.nt = time_space.n_dofs
        self.t0_index = 2 * grid.t0_node_index()

    def product(self, a: int, b: int) -> np.ndarray:
        T = np.zeros((self.nt, self.nt))
        loc = np.einsum("q,aq,bq->ab", self.w, self.X[a], self.X[b])
        for n in range(self.n_cells):
            d = self.time_space.cell_dofs[n]
            T[np.ix_(d, d)] += loc
        return T

    def moments(self, values: np.ndarray, order: int) -> np.ndarray:
        """integral of chi^(order) * values over I; values (N, nqt)."""
        out = np.zeros(self.nt)
        loc = np.einsum("q,aq,nq->na", self.w, self.X[order], values)
        for n in range(self.n_cells):
            out[self.time_space.cell_dofs[n]] += loc[n]
        return out

    def t0_vector(self) -> np.ndarray:
        c0 = np.zeros(self.nt)
        c0[self.t0_index] = 1.0
        return c0


@dataclass
class SystemBlocks:
    """Assembled blocks, right-hand side and the context to rebuild it."""

    b_uu: sp.csr_matrix
    b_uf: sp.csr_matrix
    b_ff: sp.csr_matrix
    l_u: np.ndarray
    l_f: np.ndarray
    u_space: TensorSpace
    f_space: DofSpace
    operator: EllipticOperator
    modulation: SourceModulation
    mode: str
    gamma_f: float = 0.0
    gamma_u: float = 0.0
    warnings: tuple = ()
    _sctx: object = field(default=None, repr=False)
    _tctx: object = field(default=None, repr=False)

    @property
    def n_u(self) -> int:
        return self.b_uu.shape[0]

    @property
    def n_f(self) -> int:
        return self.b_ff.shape[0]

    @property
    def n_total(self) -> int:
        return self.n_u + self.n_f

    def full_matrix(self) -> sp.csr_matrix:
        return sp.bmat([[self.b_uu, self.b_uf],
                        [self.b_uf.T, self.b_ff]], format="csr")

    def full_rhs(self) -> np.ndarray:
        return np.concatenate([self.l_u, self.l_f])

    def split(self, z: np.ndarray):
        """Solution vector -> (tensor state FeFunction, source FeFunction)."""
        u = FeFunction(self.u_space, z[: self.n_u])
        f = FeFunction(self.f_space, z[self.n_u:])
        return u, f


# ---------------------------------------------------------------------------
# assembly entry points

def _assemble_matrix(u_space: TensorSpace, f_space: DofSpace, operator,
                     modulation, mode, gamma_f, gamma_u, rule_x, rule_t):
    sctx = _SpaceContext(u_space.space, f_space, operator, rule_x)
    tctx = _TimeContext(u_space.time, rule_t)
    grid = u_space.time.mesh

    sample = sctx.tabs.points(np.arange(min(4, u_space.space.n_cells))).reshape(-1,
                                                                u_space.space.dim)
    operator.check_ellipticity(sample)
    modulation.check_positivity(sample, grid.t0, u_space.space.dim)

    T = {(a, b): tctx.product(a, b) for a in range(3) for b in range(3)}
    c0 = tctx.t0_vector()

    M = sctx.matrix("mass")
    Mw = sctx.matrix("mass", cells="omega")
    D = sctx.matrix("op_val")
    H = sctx.matrix("op_op")

    def K(S, Tm):
        return sp.kron(S, sp.csr_matrix(Tm), format="csr")

    b_uu = (
        K(Mw, T[(0, 0)] + T[(1, 1)])
        + K(H, np.outer(c0, c0))
        + K(M, T[(1, 1)] + T[(2, 2)])
        + K(D.T, T[(1, 0)] + T[(2, 1)])
        + K(D, T[(0, 1)] + T[(1, 2)])
        + K(H, T[(0, 0)] + T[(1, 1)])
    )

    warnings = []
    if mode == "holder":
        Gw = sctx.matrix("grad", cells="omega")
        b_uu = b_uu + K(Gw, T[(0, 0)] + T[(1, 1)])
        if gamma_u > 0.0:
            K1 = sctx.matrix("grad")
            K2 = sctx.matrix("hess")
            b_uu = b_uu + gamma_u * (
                K(M + K1 + K2, T[(0, 0)] + T[(1, 1)])
                + K(M + K1, T[(0, 0)] + T[(1, 1)] + T[(2, 2)])
            )
        if gamma_f == 0.0 and gamma_u == 0.0:
            warnings.append("gamma_f = gamma_u = 0: uniqueness of the "
                            "boundary-free problem is not guaranteed")

    # source coupling
    Wm = sctx.matrix("f_mass")
    if modulation.time_only:
        rt = np.asarray(modulation.R(tctx.times.ravel()), dtype=float).reshape(
            tctx.times.shape)
        drt = np.asarray(modulation.dtR(tctx.times.ravel()), dtype=float).reshape(
            tctx.times.shape)
        w0 = tctx.moments(rt, 0) + tctx.moments(drt, 1)
        w1 = tctx.moments(rt, 1) + tctx.moments(drt, 2)
        Mm = sctx.matrix("mixed_mass")
        Dm = sctx.matrix("mixed_op")
        b_uf = -(K(Mm, sp.csr_matrix(w1.reshape(-1, 1)))
                 + K(Dm, sp.csr_matrix(w0.reshape(-1, 1))))
        scal = float(np.sum(tctx.w[None, :] * (rt**2 + drt**2)))
        b_ff = scal * Wm
    else:
        b_uf, b_ff = _source_blocks_general(sctx, tctx, modulation)
    if mode == "holder" and gamma_f > 0.0:
        b_ff = b_ff + gamma_f * Wm

    return SystemBlocks(
        b_uu=b_uu.tocsr(), b_uf=b_uf.tocsr(), b_ff=b_ff.tocsr(),
        l_u=np.zeros(b_uu.shape[0]), l_f=np.zeros(b_ff.shape[0]),
        u_space=u_space, f_space=f_space, operator=operator,
        modulation=modulation, mode=mode, gamma_f=gamma_f, gamma_u=gamma_u,
        warnings=tuple(warnings), _sctx=sctx, _tctx=tctx,
    )


def _source_blocks_general(sctx: _SpaceContext, tctx: _TimeContext, modulation):
    """B_uf and B_ff for a genuinely space-time dependent R."""
    us, fs = sctx.u_space, sctx.f_space
    nt = tctx.nt
    n_u = us.n_free * nt
    b_uf = sp.csr_matrix((n_u, fs.n_dofs))
    b_ff = sp.csr_matrix((fs.n_dofs, fs.n_dofs))
    tvals = tctx.times
    for c, cells in enumerate(sctx.cells_by_class):
        if len(cells) == 0:
            continue
        V = sctx.tabs.tables[c][0][:, :, 0]
        F = sctx.ftabs.tables[c][0][:, :, 0]
        A = sctx.aphi[c]
        if A.ndim == 2:
            A = np.broadcast_to(A, (len(cells),) + A.shape)
        pts = sctx.tabs.points(cells).reshape(-1, us.dim)
        Rv = modulation.eval("R", pts, tvals.ravel(), us.dim).reshape(
            len(cells), -1, tctx.n_cells, tvals.shape[1])
        dRv = modulation.eval("dtR", pts, tvals.ravel(), us.dim).reshape(
            len(cells), -1, tctx.n_cells, tvals.shape[1])
        wx = sctx.tabs.weights[c]
        wt = tctx.w
        udofs = us.full_to_free(us.cell_dofs[cells])
        fdofs = fs.cell_dofs[cells]
        for n in range(tctx.n_cells):
            X0, X1, X2 = (tctx.X[o] for o in range(3))
            Rn, dRn = Rv[:, :, n, :], dRv[:, :, n, :]
            # -(L(phi chi), R psi) - (dt L(phi chi), dt R psi)
            loc = -(
                np.einsum("q,t,iq,at,cqt,kq->ciak", wx, wt, V, X1, Rn, F,
                          optimize=True)
                + np.einsum("q,t,ciq,at,cqt,kq->ciak", wx, wt, A, X0, Rn, F,
                            optimize=True)
                + np.einsum("q,t,iq,at,cqt,kq->ciak", wx, wt, V, X2, dRn, F,
                            optimize=True)
                + np.einsum("q,t,ciq,at,cqt,kq->ciak", wx, wt, A, X1, dRn, F,
                            optimize=True)
            )
            tdofs = tctx.time_space.cell_dofs[n]
            rows = (udofs[:, :, None, None] * nt + tdofs[None, None, :, None])
            rows = np.where(udofs[:, :, None, None] >= 0, rows, -1)
            cols = np.broadcast_to(fdofs[:, None, None, :], loc.shape)
            b_uf = b_uf + _scatter(rows, np.ascontiguousarray(cols), loc,
                                   (n_u, fs.n_dofs))
            locff = np.einsum("q,t,cqt,kq,lq->ckl", wx, wt, Rn**2 + dRn**2,
                              F, F, optimize=True)
            rws = np.broadcast_to(fdofs[:, :, None], locff.shape)
            cls_ = np.broadcast_to(fdofs[:, None, :], locff.shape)
            b_ff = b_ff + _scatter(rws, cls_, locff, (fs.n_dofs, fs.n_dofs))
    return b_uf, b_ff


def assemble_rhs(blocks: SystemBlocks, data) -> None:
    """Fill l_u (and l_f = 0) from observation data, in place.

    ``data`` follows the observation protocol: ``eval_field(name, pts,
    times)`` for q, dtq and, in the boundary-free mode, the gradient pair
    r, dtr (all on the omega cells), and ``eval_p(pts)`` on the whole domain.
    Noise realizations, if any, are applied inside the data object keyed by
    the fixed cell/point enumeration used here.
    """
    sctx: _SpaceContext = blocks._sctx
    tctx: _TimeContext = blocks._tctx
    us = blocks.u_space.space
    nt = tctx.nt
    l_u = np.zeros(blocks.n_u)
    tvals = tctx.times
    canon = np.nonzero(sctx.omega_cells_mask)[0]

    # interior data fit over Q_omega
    for c in range(len(sctx.cells_by_class)):
        cells = sctx.omega_by_class[c]
        if len(cells) == 0:
            continue
        rows_c = np.searchsorted(canon, cells)
        V = sctx.tabs.tables[c][0][:, :, 0]
        G = sctx.tabs.tables[c][1]
        wx = sctx.tabs.weights[c]
        pts = sctx.tabs.points(cells)
        q = data.eval_field("q", pts, tvals, rows_c, len(canon))
        dtq = data.eval_field("dtq", pts, tvals, rows_c, len(canon))
        if blocks.mode == "holder":
            r = data.eval_field("r", pts, tvals, rows_c, len(canon))
            dtr = data.eval_field("dtr", pts, tvals, rows_c, len(canon))
        X0, X1 = tctx.X[0], tctx.X[1]
        for n in range(tctx.n_cells):
            loc = (np.einsum("q,t,cqt,iq,at->cia", wx, tctx.w, q[:, :, n, :],
                             V, X0, optimize=True)
                   + np.einsum("q,t,cqt,iq,at->cia", wx, tctx.w, dtq[:, :, n, :],
                               V, X1, optimize=True))
            if blocks.mode == "holder":
                loc += (np.einsum("q,t,cqtk,iqk,at->cia", wx, tctx.w,
                                  r[:, :, n, :, :], G, X0, optimize=True)
                        + np.einsum("q,t,cqtk,iqk,at->cia", wx, tctx.w,
                                    dtr[:, :, n, :, :], G, X1, optimize=True))
            udofs = us.full_to_free(us.cell_dofs[cells])
            tdofs = tctx.time_space.cell_dofs[n]
            rows = np.where(udofs[:, :, None] >= 0,
                            udofs[:, :, None] * nt + tdofs[None, None, :], -1)
            np.add.at(l_u, rows[rows >= 0], loc[rows >= 0])

    # elliptic trace term (p, A v(t0))
    pvec = np.zeros(us.n_free)
    for c, cells in enumerate(sctx.cells_by_class):
        if len(cells) == 0:
            continue
        A = sctx.aphi[c]
        if A.ndim == 2:
            A = np.broadcast_to(A, (len(cells),) + A.shape)
        pts = sctx.tabs.points(cells)
        pv = data.eval_p(pts, cells, us.n_cells)
        loc = np.einsum("q,cq,ciq->ci", sctx.tabs.weights[c], pv, A,
                        optimize=True)
        udofs = us.full_to_free(us.cell_dofs[cells])
        np.add.at(pvec, udofs[udofs >= 0], loc[udofs >= 0])
    l_u += np.kron(pvec, tctx.t0_vector())

    blocks.l_u = l_u
    blocks.l_f = np.zeros(blocks.n_f)


def assemble_lipschitz_system(u_space: TensorSpace, f_space: DofSpace,
                              operator: EllipticOperator,
                              modulation: SourceModulation, data,
                              rule_x=None, rule_t=None) -> SystemBlocks:
    """Normal equations of the boundary-aware least-squares functional.

    Requires the spatial part of ``u_space`` to carry homogeneous Dirichlet
    constraints and t0 to be a grid node of the temporal mesh.
    """
    if len(u_space.space.constrained) == 0:
        raise ValueError("Lipschitz formulation needs the constrained space "
                         "(apply_dirichlet_constraints)")
    u_space.time.mesh.t0_node_index()
    rule_x = rule_x or default_space_rule(u_space.space.dim)
    rule_t = rule_t or default_time_rule()
    blocks = _assemble_matrix(u_space, f_space, operator, modulation,
                              "lipschitz", 0.0, 0.0, rule_x, rule_t)
    if data is not None:
        assemble_rhs(blocks, data)
    return blocks


def assemble_holder_system(u_space: TensorSpace, f_space: DofSpace,
                           operator: EllipticOperator,
                           modulation: SourceModulation, data,
                           gamma_f: float, gamma_u: float,
                           rule_x=None, rule_t=None) -> SystemBlocks:
    """Normal equations of the boundary-free functional with penalties.

    Adds the gradient observation term, the L2 penalty gamma_f on the source
    and the high-order state penalty gamma_u; the state space is the
    unconstrained tensor space.
    """
    if len(u_space.space.constrained) != 0:
        raise ValueError("boundary-free formulation uses the unconstrained space")
    if gamma_f < 0.0 or gamma_u < 0.0:
        raise ValueError("penalty parameters must be nonnegative")
    u_space.time.mesh.t0_node_index()
    rule_x = rule_x or default_space_rule(u_space.space.dim)
    rule_t = rule_t or default_time_rule()
    blocks = _assemble_matrix(u_space, f_space, operator, modulation,
                              "holder", gamma_f, gamma_u, rule_x, rule_t)
    if data is not None:
        assemble_rhs(blocks, data)
    return blocks


# ---------------------------------------------------------------------------
# pointwise operator application and diagnostics

def apply_L(u: FeFunction, operator: EllipticOperator, x, t):
    """Pointwise (L u, dt L u) with L u = dt u + A u, exact basis derivatives."""
    from .spaces import tensor_eval

    pts = np.atleast_2d(np.asarray(x, dtype=float)) if operator.dim == 2 \
        else np.asarray(x, dtype=float).reshape(-1)
    pts2 = pts.reshape(-1, operator.dim) if operator.dim == 2 else pts.reshape(-1, 1)
    out = []
    for torder in (0, 1):
        val = tensor_eval(u, pts, t, (0, torder))
        grad = tensor_eval(u, pts, t, (1, torder))
        hess = tensor_eval(u, pts, t, (2, torder))
        dtu = tensor_eval(u, pts, t, (0, torder + 1))[:, 0]
        Au = operator.apply_pointwise(val, grad, hess, pts2)
        out.append(dtu + Au)
    return out[0], out[1]


def _state_on_cells(u: FeFunction, sctx: _SpaceContext, tctx: _TimeContext):
    """Per space-time quadrature values of u, dtu, Lu, dtLu and u at t0.

    Returns dict of arrays (ncells_total, nqx, N, nqt) in cell order per
    class, plus the A u(t0) array (cells, nqx).
    """
    ts: TensorSpace = u.space
    P = ts.coeff_matrix(u.coefficients)
    out = {}
    for c, cells in enumerate(sctx.cells_by_class):
        if len(cells) == 0:
            continue
        V = sctx.tabs.tables[c][0][:, :, 0]
        A = sctx.aphi[c]
        if A.ndim == 2:
            A = np.broadcast_to(A, (len(cells),) + A.shape)
        Ploc = P[sctx.u_space.cell_dofs[cells]]          # (nc, nloc, ntdofs)
        # spatial contraction: coefficients in the time-dof basis
        su = np.einsum("iq,cin->cqn", V, Ploc)           # value part
        sa = np.einsum("ciq,cin->cqn", A, Ploc)          # A phi part
        for n in range(tctx.n_cells):
            td = tctx.time_space.cell_dofs[n]
            un = {o: np.einsum("cqa,at->cqt", su[:, :, td], tctx.X[o])
                  for o in range(3)}
            an = {o: np.einsum("cqa,at->cqt", sa[:, :, td], tctx.X[o])
                  for o in range(2)}
            rec = out.setdefault(c, {})
            for key, arr in (("u", un[0]), ("dtu", un[1]),
                             ("Lu", un[1] + an[0]), ("dtLu", un[2] + an[1])):
                rec.setdefault(key, []).append(arr)
        # A u(t0): t0 is a node, chi = unit coefficient column
        out[c]["au_t0"] = sa[:, :, tctx.t0_index]
    for c in out:
        for key in ("u", "dtu", "Lu", "dtLu"):
            out[c][key] = np.stack(out[c][key], axis=2)  # (nc, nqx, N, nqt)
    return out


def residual_norms(u: FeFunction, f: FeFunction, operator: EllipticOperator,
                   modulation: SourceModulation, rule_x=None, rule_t=None):
    """(||G||_{H1(I;L2)}, ||G||_{L2(I;L2)}) for G = L u - R f by quadrature."""
    ts: TensorSpace = u.space
    rule_x = rule_x or default_space_rule(ts.space.dim)
    rule_t = rule_t or default_time_rule()
    sctx = _SpaceContext(ts.space, f.space, operator, rule_x)
    tctx = _TimeContext(ts.time, rule_t)
    state = _state_on_cells(u, sctx, tctx)
    l2 = 0.0
    h1 = 0.0
    for c, cells in enumerate(sctx.cells_by_class):
        if len(cells) == 0:
            continue
        F = sctx.ftabs.tables[c][0][:, :, 0]
        fv = np.einsum("iq,ci->cq", F, f.coefficients[sctx.f_space.cell_dofs[cells]])
        pts = sctx.tabs.points(cells).reshape(-1, ts.space.dim)
        Rv = modulation.eval("R", pts, tctx.times.ravel(), ts.space.dim).reshape(
            len(cells), -1, tctx.n_cells, tctx.times.shape[1])
        dRv = modulation.eval("dtR", pts, tctx.times.ravel(), ts.space.dim).reshape(
            len(cells), -1, tctx.n_cells, tctx.times.shape[1])
        G = state[c]["Lu"] - Rv * fv[:, :, None, None]
        dG = state[c]["dtLu"] - dRv * fv[:, :, None, None]
        wxt = sctx.tabs.weights[c][None, :, None, None] * tctx.w[None, None, None, :]
        l2 += float(np.sum(wxt * G * G))
        h1 += float(np.sum(wxt * dG * dG))
    return float(np.sqrt(l2 + h1)), float(np.sqrt(l2))


def evaluate_functional(blocks: SystemBlocks, u: FeFunction, f: FeFunction,
                        data) -> float:
    """Value of the discrete least-squares functional at (u, f).

    Independent quadrature path over the same rules; used by the
    stationarity diagnostics and tests.
    """
    sctx: _SpaceContext = blocks._sctx
    tctx: _TimeContext = blocks._tctx
    ts = blocks.u_space
    state = _state_on_cells(u, sctx, tctx)
    J = 0.0
    tvals = tctx.times
    canon = np.nonzero(sctx.omega_cells_mask)[0]
    for c, cells in enumerate(sctx.cells_by_class):
        if len(cells) == 0:
            continue
        wxt = sctx.tabs.weights[c][None, :, None, None] * tctx.w[None, None, None, :]
        # data misfit on omega
        om = sctx.omega_by_class[c]
        if len(om) > 0:
            sel = np.searchsorted(cells, om)
            rows_c = np.searchsorted(canon, om)
            pts = sctx.tabs.points(om)
            q = data.eval_field("q", pts, tvals, rows_c, len(canon))
            dtq = data.eval_field("dtq", pts, tvals, rows_c, len(canon))
            J += 0.5 * float(np.sum(wxt * (state[c]["u"][sel] - q) ** 2))
            J += 0.5 * float(np.sum(wxt * (state[c]["dtu"][sel] - dtq) ** 2))
            if blocks.mode == "holder":
                r = data.eval_field("r", pts, tvals, rows_c, len(canon))
                dtr = data.eval_field("dtr", pts, tvals, rows_c, len(canon))
                P = ts.coeff_matrix(u.coefficients)
                G = sctx.tabs.tables[c][1]
                Ploc = P[sctx.u_space.cell_dofs[om]]
                sg = np.einsum("iqk,cin->cqkn", G, Ploc)
                for n in range(tctx.n_cells):
                    td = tctx.time_space.cell_dofs[n]
                    g0 = np.einsum("cqka,at->cqtk", sg[:, :, :, td], tctx.X[0])
                    g1 = np.einsum("cqka,at->cqtk", sg[:, :, :, td], tctx.X[1])
                    w2 = sctx.tabs.weights[c][None, :, None, None] * tctx.w[None, None, :, None]
                    J += 0.5 * float(np.sum(w2 * (g0 - r[:, :, n]) ** 2))
                    J += 0.5 * float(np.sum(w2 * (g1 - dtr[:, :, n]) ** 2))
        # residual over the whole domain
        F = sctx.ftabs.tables[c][0][:, :, 0]
        fv = np.einsum("iq,ci->cq", F, f.coefficients[sctx.f_space.cell_dofs[cells]])
        pts_all = sctx.tabs.points(cells).reshape(-1, ts.space.dim)
        Rv = blocks.modulation.eval("R", pts_all, tvals.ravel(), ts.space.dim
                                    ).reshape(len(cells), -1, tctx.n_cells,
                                              tvals.shape[1])
        dRv = blocks.modulation.eval("dtR", pts_all, tvals.ravel(), ts.space.dim
                                     ).reshape(len(cells), -1, tctx.n_cells,
                                               tvals.shape[1])
        G = state[c]["Lu"] - Rv * fv[:, :, None, None]
        dG = state[c]["dtLu"] - dRv * fv[:, :, None, None]
        J += 0.5 * float(np.sum(wxt * (G * G + dG * dG)))
        # trace term
        pts = sctx.tabs.points(cells)
        pv = data.eval_p(pts, cells, sctx.u_space.n_cells)
        J += 0.5 * float(np.sum(sctx.tabs.weights[c][None, :]
                                * (state[c]["au_t0"] - pv) ** 2))
        if blocks.mode == "holder" and blocks.gamma_f > 0.0:
            J += 0.5 * blocks.gamma_f * float(np.sum(
                sctx.tabs.weights[c][None, :] * fv * fv))
    if blocks.mode == "holder" and blocks.gamma_u > 0.0:
        z = np.asarray(u.coefficients)
        sctx2 = blocks._sctx
        K1 = sctx2.matrix("grad")
        K2 = sctx2.matrix("hess")
        M = sctx2.matrix("mass")
        T = {(a, a): blocks._tctx.product(a, a) for a in range(3)}
        pen = (sp.kron(M + K1 + K2, sp.csr_matrix(T[(0, 0)] + T[(1, 1)]))
               + sp.kron(M + K1, sp.csr_matrix(T[(0, 0)] + T[(1, 1)] + T[(2, 2)])))
        J += 0.5 * blocks.gamma_u * float(z @ (pen @ z))
    return J


def export_matrix(blocks: SystemBlocks, path) -> None:
    """Write the full system matrix in coordinate text format (row col value)."""
    coo = blocks.full_matrix().tocoo()
    with open(path, "w") as fh:
        fh.write(f"# {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {v:.17g}\n")
