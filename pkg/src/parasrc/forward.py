"""Forward parabolic solver used to synthesize observation data.

Method of lines: cubic Hermite semi-discretization in space with homogeneous
Dirichlet conditions and a two-stage L-stable second order SDIRK scheme in
time (gamma = 1 - sqrt(2)/2, stiffly accurate).  States and their exact
semi-discrete time derivatives are stored at every step; between steps the
solution is interpolated with cubic Hermite polynomials in time, so values,
time derivatives and spatial derivatives are available anywhere in the
space-time cylinder.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .basis import gauss_rule_1d
from .mesh import SpaceMesh1D, build_mesh_1d
from .spaces import DofSpace, apply_dirichlet_constraints, hermite_space, load_vector

__all__ = ["FineSolution", "solve_forward_1d"]

_SDIRK_GAMMA = 1.0 - np.sqrt(2.0) / 2.0


class FineSolution:
    """Dense-in-time record of a semi-discrete parabolic solve."""

    def __init__(self, space: DofSpace, times: np.ndarray, states: np.ndarray,
                 rates: np.ndarray):
        self.space = space
        self.times = times
        self.states = states      # (nsteps+1, n_dofs) full coefficients
        self.rates = rates        # (nsteps+1, n_dofs) semi-discrete du/dt
        self.dt = times[1] - times[0]

    def _time_weights(self, t: np.ndarray):
        t = np.asarray(t, dtype=float)
        k = np.clip(((t - self.times[0]) / self.dt).astype(int), 0,
                    len(self.times) - 2)
        s = (t - self.times[k]) / self.dt
        return k, s

    def coefficients_at(self, t: np.ndarray, dt_order: int = 0) -> np.ndarray:
        """Hermite-in-time interpolated coefficient vectors, (nt, n_dofs)."""
        k, s = self._time_weights(t)
        h = self.dt
        u0, u1 = self.states[k], self.states[k + 1]
        v0, v1 = self.rates[k], self.rates[k + 1]
        s = s[:, None]
        if dt_order == 0:
            a = (2 * s**3 - 3 * s**2 + 1)
            b = (s**3 - 2 * s**2 + s) * h
            c = (-2 * s**3 + 3 * s**2)
            d = (s**3 - s**2) * h
        elif dt_order == 1:
            a = (6 * s**2 - 6 * s) / h
            b = (3 * s**2 - 4 * s + 1)
            c = (-6 * s**2 + 6 * s) / h
            d = (3 * s**2 - 2 * s)
        else:
            raise ValueError("dt_order must be 0 or 1")
        return a * u0 + b * v0 + c * u1 + d * v1

    def eval(self, x, t, x_order: int = 0, dt_order: int = 0) -> np.ndarray:
        """Point values of d^a_x d^b_t u on the broadcast of x and t."""
        x = np.asarray(x, dtype=float).reshape(-1)
        t = np.asarray(t, dtype=float).reshape(-1)
        n = max(len(x), len(t))
        x = np.broadcast_to(x, (n,))
        t = np.broadcast_to(t, (n,))
        coeffs = self.coefficients_at(t, dt_order)
        out = np.empty(n)
        cells = self.space.locate(x)
        for cell in np.unique(cells):
            m = cells == cell
            tab = self.space.eval_in_cell(int(cell), x[m], x_order)[:, :, 0]
            out[m] = np.einsum("ip,pi->p", tab,
                               coeffs[np.ix_(m, self.space.cell_dofs[cell])])
        return out


def solve_forward_1d(mesh_fine: SpaceMesh1D, source, modulation_R,
                     t_end: float, n_steps: int) -> FineSolution:
    """Integrate  du/dt - (a u')' = R(t) f(x),  u(0) = 0, u = 0 on the boundary.

    Parameters
    ----------
    mesh_fine : SpaceMesh1D
        The refined synthesis mesh.
    source : callable
        Spatial source factor f(x), vectorized.
    modulation_R : callable
        Time factor R(t), vectorized.
    t_end : float
        Final time; integration starts at 0.
    n_steps : int
        Uniform SDIRK2 steps.  Instability cannot occur (L-stable), but a
        nonpositive step count is rejected with a CFL-style diagnostic.
    """
    if n_steps < 1:
        raise ValueError(
            f"forward solve needs a positive number of steps, got {n_steps} "
            f"(t_end={t_end})")
    V = apply_dirichlet_constraints(hermite_space(mesh_fine))
    rule = gauss_rule_1d(7)
    tabs = V.tabulate(rule, max_order=1)
    free = V.free
    cells = np.arange(V.n_cells)
    Vv = tabs.tables[0][0][:, :, 0]
    Vg = tabs.tables[0][1][:, :, 0]
    w = tabs.weights[0]
    nf = V.n_free
    M = np.zeros((nf, nf))
    K = np.zeros((nf, nf))
    Mloc = np.einsum("q,iq,jq->ij", w, Vv, Vv)
    Kloc = np.einsum("q,iq,jq->ij", w, Vg, Vg)
    dofs = V.full_to_free(V.cell_dofs)
    for c in cells:
        d = dofs[c]
        keep = d >= 0
        M[np.ix_(d[keep], d[keep])] += Mloc[np.ix_(keep, keep)]
        K[np.ix_(d[keep], d[keep])] += Kloc[np.ix_(keep, keep)]
    F = load_vector(V, source, rule)

    dt = t_end / n_steps
    times = dt * np.arange(n_steps + 1)
    g = _SDIRK_GAMMA
    lhs = lu_factor(M + g * dt * K)
    mlu = lu_factor(M)

    u = np.zeros(nf)
    states = np.empty((n_steps + 1, V.n_dofs))
    rates = np.empty((n_steps + 1, V.n_dofs))

    def rate(uv, t):
        return lu_solve(mlu, float(modulation_R(np.asarray(t))) * F - K @ uv)

    states[0] = V.expand(u)
    rates[0] = V.expand(rate(u, 0.0))
    for k in range(n_steps):
        t = times[k]
        r1 = float(modulation_R(np.asarray(t + g * dt))) * F
        z1 = lu_solve(lhs, M @ u + g * dt * r1)
        k1 = lu_solve(mlu, r1 - K @ z1)
        r2 = float(modulation_R(np.asarray(t + dt))) * F
        z2 = lu_solve(lhs, M @ u + dt * (1.0 - g) * (M @ k1) + g * dt * r2)
        u = z2
        states[k + 1] = V.expand(u)
        rates[k + 1] = V.expand(rate(u, times[k + 1]))
    return FineSolution(V, times, states, rates)
