"""Finite-difference solver for the scalar HJB variational inequality.

The value function solves::

    min( v_x G_j + K_j  (all j),  v_t + min_u [ b v_x + 1/2 sigma^2 v_xx + f(t, x, v, v_x sigma, u) ] ) = 0
    v(T, x) = phi(x)

on a uniform grid ``x_0 < ... < x_{n_x - 1}``. Time stepping is implicit
(backward Euler) and each step is solved by policy iteration: every cell picks
the branch with the smaller operator value, either a control ``u`` from the
candidate grid of ``U`` (continuation) or a push direction ``j`` (push). The
chosen branches give a tridiagonal system, solved with ``solve_banded``, and
the loop repeats until the update is below ``tol``.

Discrete operators at cell i, with step h::

    continuation  (V1_i - V_i)/dt + b D V_i + 1/2 sigma^2 D2 V_i + f(t, x_i, V_i, sigma D V_i, u)
    push j        G_j (V_{i+s} - V_i) / (s h) + K_j,   s = sign(G_j)

``D`` is the one-sided difference upwind for the effective drift
``b + f_z sigma`` and ``D2`` the central second difference. Boundary cells
drop the diffusion (v_xx = 0) and use the inward difference. A push is only
offered where the neighbour in the push direction exists, so mass cannot
leave the grid. Nonlinear generators are linearised in (y, z) about the
current iterate (Newton step).
"""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import solve_banded

from .model import Problem
from .simulate import McConfig, evaluate_cost


class HJBConvergenceError(RuntimeError):
    """Policy iteration did not settle; ``history`` holds the update norms."""

    def __init__(self, message: str, history):
        super().__init__(message)
        self.history = list(history)


@dataclass(frozen=True)
class SpatialGrid:
    x_min: float
    x_max: float
    n_x: int

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ValueError("spatial grid needs x_min < x_max")
        if self.n_x < 3:
            raise ValueError("spatial grid needs at least 3 points")

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x)


@dataclass
class ValueGrid:
    times: np.ndarray            # (n_t,)
    x: np.ndarray                # (n_x,)
    v: np.ndarray                # (n_t, n_x)
    push_mask: np.ndarray        # (n_t, n_x) bool, last slice all False
    push_dir: np.ndarray         # (n_t, n_x) int, -1 on continuation cells
    u_star: Optional[np.ndarray] = None   # (n_t - 1, n_x, k)
    iterations: list = field(default_factory=list)
    problem: Optional[Problem] = field(default=None, repr=False, compare=False)

    @classmethod
    def from_values(cls, times, x, v, problem: Optional[Problem] = None) -> "ValueGrid":
        """Wrap a hand-built value array (no push cells, no controls)."""
        times = np.asarray(times, dtype=float)
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float).reshape(times.size, x.size)
        return cls(times=times, x=x, v=v, push_mask=np.zeros(v.shape, bool),
                   push_dir=np.full(v.shape, -1), problem=problem)

    @property
    def h(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def free_boundary(self) -> list:
        """Midpoints between neighbouring push and continuation cells, per time slice."""
        out = []
        for mask in self.push_mask:
            flips = np.flatnonzero(mask[1:] != mask[:-1])
            out.append([float(0.5 * (self.x[i] + self.x[i + 1])) for i in flips])
        return out


# ---------------------------------------------------------------------------
# discrete operators
# ---------------------------------------------------------------------------

def _differences(V: np.ndarray, h: float):
    """Forward, backward, central and second differences; inward one-sided at the ends."""
    fwd = np.empty_like(V)
    bwd = np.empty_like(V)
    fwd[:-1] = (V[1:] - V[:-1]) / h
    bwd[1:] = fwd[:-1]
    fwd[-1] = bwd[-1]
    bwd[0] = fwd[0]
    cen = 0.5 * (fwd + bwd)
    d2 = np.zeros_like(V)
    d2[1:-1] = (V[2:] - 2 * V[1:-1] + V[:-2]) / h ** 2
    return fwd, bwd, cen, d2


@dataclass
class _Continuation:
    B: np.ndarray         # (n_x,) operator value at the chosen control
    index: np.ndarray     # (n_x,) candidate index
    b: np.ndarray
    s: np.ndarray
    upwind: np.ndarray    # (n_x,) True -> forward difference
    D: np.ndarray


def _continuation(problem: Problem, t: float, x, V1, V, dt: float, h: float) -> _Continuation:
    c = problem.coeffs
    cand = problem.region.candidates()
    nu, nx = cand.shape[0], V.size
    fwd, bwd, cen, d2 = _differences(V, h)
    X = np.tile(x, nu)[:, None]
    U = np.repeat(cand, nx, axis=0)
    y = np.tile(V, nu)
    b = c.b(t, X, U)[:, 0]
    s = c.sigma(t, X, U)[:, 0]
    fz = c.f_z(t, X, y, s * np.tile(cen, nu), U)
    up = (b + fz * s) > 0
    D = np.where(up, np.tile(fwd, nu), np.tile(bwd, nu))
    diff = np.tile(d2, nu)
    val = (np.tile(V1 - V, nu) / dt + b * D + 0.5 * s ** 2 * diff
           + c.f(t, X, y, s * D, U)).reshape(nu, nx)
    best = val.min(axis=0)
    # ties go to the smallest candidate (lexicographic order)
    idx = np.argmax(val <= best + 1e-13 * (1.0 + np.abs(best)), axis=0)
    pick = idx * nx + np.arange(nx)
    return _Continuation(B=val[idx, np.arange(nx)], index=idx, b=b[pick], s=s[pick],
                         upwind=up[pick], D=D[pick])


def _push(problem: Problem, t: float, V, h: float):
    """Smallest push operator over directions and its direction index (-1 if none)."""
    c = problem.coeffs
    G = c.G_at(t)[0]
    nx = V.size
    A = np.full(nx, np.inf)
    jdir = np.full(nx, -1)
    for j, (g, k) in enumerate(zip(G, c.K)):
        if g == 0.0:
            continue
        val = np.full(nx, np.inf)
        if g > 0:
            val[:-1] = g * (V[1:] - V[:-1]) / h + k
        else:
            val[1:] = -g * (V[:-1] - V[1:]) / h + k
        better = val < A
        A[better] = val[better]
        jdir[better] = j
    return A, jdir


def _operators(problem: Problem, t: float, x, V1, V, dt: float, h: float):
    cont = _continuation(problem, t, x, V1, V, dt, h)
    A, jdir = _push(problem, t, V, h)
    return cont, A, jdir


def _assemble(problem: Problem, t: float, x, V1, V, dt: float, h: float,
              cont: _Continuation, push: np.ndarray, jdir: np.ndarray,
              penalty: Optional[float] = None):
    """Tridiagonal system for the chosen branches, in solve_banded layout."""
    c = problem.coeffs
    cand = problem.region.candidates()
    nx = V.size
    u = cand[cont.index]
    s_, b_ = cont.s, cont.b
    z = s_ * cont.D
    fy = c.f_y(t, x[:, None], V, z, u)
    fz = c.f_z(t, x[:, None], V, z, u)
    f0 = c.f(t, x[:, None], V, z, u)
    beta = b_ + fz * s_
    diff = 0.5 * s_ ** 2 / h ** 2
    diff[0] = diff[-1] = 0.0
    lower = np.zeros(nx)      # coefficient on V_{i-1}
    upper = np.zeros(nx)      # coefficient on V_{i+1}
    diag = -1.0 / dt + fy - 2 * diff
    fwd_row = cont.upwind.copy()
    fwd_row[-1] = False
    bwd_row = ~cont.upwind
    bwd_row[0] = False
    # upwind first difference (inward at the ends)
    a = np.abs(beta) / h
    diag -= np.where(fwd_row | bwd_row, a, 0.0)
    upper += np.where(fwd_row, a, 0.0)
    lower += np.where(bwd_row, a, 0.0)
    # at the ends the difference is inward whatever the upwind flag says
    if not fwd_row[0] and not bwd_row[0]:
        diag[0] -= beta[0] / h
        upper[0] += beta[0] / h
    if not fwd_row[-1] and not bwd_row[-1]:
        diag[-1] += beta[-1] / h
        lower[-1] -= beta[-1] / h
    upper += diff
    lower += diff
    # rhs keeps the part of f that is not linear in (y, z)
    rhs = -(V1 / dt + f0 - fy * V - fz * z)

    G = c.G_at(t)[0]
    if penalty is None:
        rows = np.flatnonzero(push)
        for i in rows:
            j = jdir[i]
            g = abs(G[j]) / h
            diag[i], lower[i], upper[i] = -g, 0.0, 0.0
            if G[j] > 0:
                upper[i] = g
            else:
                lower[i] = g
            rhs[i] = -c.K[j]
    else:
        # penalised branch: continuation + penalty * min(A, 0)
        rows = np.flatnonzero(push)
        for i in rows:
            j = jdir[i]
            g = penalty * abs(G[j]) / h
            diag[i] -= g
            if G[j] > 0:
                upper[i] += g
            else:
                lower[i] += g
            rhs[i] -= penalty * c.K[j]
    ab = np.zeros((3, nx))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    return ab, rhs


def _step(problem: Problem, t: float, x, V1, dt: float, h: float, tol: float,
          max_iter: int, penalty: Optional[float] = None):
    V = V1.copy()
    history = []
    for _ in range(max_iter):
        cont, A, jdir = _operators(problem, t, x, V1, V, dt, h)
        if penalty is None:
            push = (jdir >= 0) & (A < cont.B)
        else:
            push = (jdir >= 0) & (A < 0)
        ab, rhs = _assemble(problem, t, x, V1, V, dt, h, cont, push, jdir, penalty)
        Vn = solve_banded((1, 1), ab, rhs)
        if not np.all(np.isfinite(Vn)):
            raise HJBConvergenceError(f"non-finite value at t={t}", history)
        delta = float(np.max(np.abs(Vn - V)))
        history.append(delta)
        V = Vn
        if delta < tol:
            break
    else:
        raise HJBConvergenceError(
            f"policy iteration at t={t} did not converge in {max_iter} iterations "
            f"(last update {history[-1]:.3e})", history)
    cont, A, jdir = _operators(problem, t, x, V1, V, dt, h)
    # a tie means the constraint is active, so the cell counts as push
    push = (jdir >= 0) & (A <= cont.B + 1e-10 * (1.0 + np.abs(cont.B)))
    return V, cont, push, np.where(push, jdir, -1), len(history)


def _check_scalar(problem: Problem):
    if problem.coeffs.n != 1:
        raise ValueError("the HJB solver handles a scalar state only")


def solve_hjb_vi(problem: Problem, grid: SpatialGrid, tol: float = 1e-10,
                 max_iter: int = 200) -> ValueGrid:
    """Backward implicit time stepping with policy iteration per step."""
    return _solve(problem, grid, tol, max_iter, None)


def solve_hjb_penalized(problem: Problem, grid: SpatialGrid, penalty: float = 1e6,
                        tol: float = 1e-10, max_iter: int = 200) -> ValueGrid:
    """Penalty version: continuation plus ``penalty * min(push operator, 0)``.

    Converges to the projected solution at rate O(1/penalty); kept as a cross-check.
    """
    if not penalty > 0:
        raise ValueError("penalty must be positive")
    return _solve(problem, grid, tol, max_iter, float(penalty))


def _solve(problem, grid, tol, max_iter, penalty):
    _check_scalar(problem)
    c = problem.coeffs
    times = problem.grid.times
    dt, h = problem.grid.dt, grid.h
    x = grid.points
    n_t = times.size
    v = np.empty((n_t, grid.n_x))
    mask = np.zeros((n_t, grid.n_x), bool)
    pdir = np.full((n_t, grid.n_x), -1)
    u_star = np.empty((n_t - 1, grid.n_x, c.k))
    cand = problem.region.candidates()
    v[-1] = c.phi(x[:, None])
    iters = []
    for k in range(n_t - 2, -1, -1):
        V, cont, push, jdir, it = _step(problem, times[k], x, v[k + 1], dt, h, tol, max_iter, penalty)
        v[k] = V
        mask[k] = push
        pdir[k] = jdir
        u_star[k] = cand[cont.index]
        iters.append(it)
    return ValueGrid(times=times.copy(), x=x, v=v, push_mask=mask, push_dir=pdir,
                     u_star=u_star, iterations=iters[::-1], problem=problem)


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------

@dataclass
class ResidualReport:
    residual: float
    per_slice: np.ndarray     # (n_t - 1,)
    worst: tuple              # (time index, cell index)

    def to_dict(self) -> dict:
        return {"residual": self.residual, "per_slice": self.per_slice.tolist(),
                "worst": list(self.worst)}


def complementarity_residual(vg: ValueGrid, problem: Optional[Problem] = None) -> ResidualReport:
    """max over time slices and interior cells of |min(push operator, continuation operator)|."""
    problem = problem or vg.problem
    if problem is None:
        raise ValueError("a problem is needed to evaluate the operators")
    _check_scalar(problem)
    dt, h = vg.dt, vg.h
    per = np.empty(vg.times.size - 1)
    worst, where = -1.0, (0, 0)
    for k in range(vg.times.size - 1):
        cont, A, _ = _operators(problem, vg.times[k], vg.x, vg.v[k + 1], vg.v[k], dt, h)
        r = np.abs(np.minimum(A, cont.B))[1:-1]
        per[k] = r.max()
        if per[k] > worst:
            worst, where = per[k], (k, int(np.argmax(r)) + 1)
    return ResidualReport(residual=float(per.max()), per_slice=per, worst=where)


def obstacle_consistency(vg: ValueGrid, problem: Optional[Problem] = None) -> dict:
    """Push-cell gradient constraint and continuation-cell residual, separately."""
    problem = problem or vg.problem
    dt, h = vg.dt, vg.h
    push_err, cont_err = 0.0, 0.0
    for k in range(vg.times.size - 1):
        cont, A, _ = _operators(problem, vg.times[k], vg.x, vg.v[k + 1], vg.v[k], dt, h)
        m = vg.push_mask[k][1:-1]
        a, b = A[1:-1], cont.B[1:-1]
        if m.any():
            push_err = max(push_err, float(np.abs(a[m]).max()))
        if (~m).any():
            cont_err = max(cont_err, float(np.abs(b[~m]).max()))
    return {"push": push_err, "continuation": cont_err,
            "push_tol": 10 * h, "continuation_tol": 10 * (h ** 2 + dt),
            "passed": bool(push_err <= 10 * h and cont_err <= 10 * (h ** 2 + dt))}


# ---------------------------------------------------------------------------
# feedback
# ---------------------------------------------------------------------------

def hamiltonian(problem: Problem, t: float, x, v, q, theta, u) -> np.ndarray:
    """1/2 sigma^2 theta + q b + f(t, x, v, q sigma, u) at a batch of points."""
    c = problem.coeffs
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    u = np.asarray(u, dtype=float).reshape(x.shape[0], c.k)
    b = c.b(t, x, u)[:, 0]
    s = c.sigma(t, x, u)[:, 0]
    return 0.5 * s ** 2 * theta + q * b + c.f(t, x, v, q * s, u)


def _jets(vg: ValueGrid):
    """Time difference, gradient and second difference on the grid."""
    pt = np.diff(vg.v, axis=0) / vg.dt                         # (n_t - 1, n_x)
    q = np.gradient(vg.v, vg.h, axis=1, edge_order=1)
    theta = np.zeros_like(vg.v)
    theta[:, 1:-1] = (vg.v[:, 2:] - 2 * vg.v[:, 1:-1] + vg.v[:, :-2]) / vg.h ** 2
    return pt, q, theta


class FeedbackControl:
    """Regular feedback u*(t, x): nearest time slice, linear in x."""

    def __init__(self, vg: ValueGrid, table: np.ndarray):
        self.vg = vg
        self.table = table        # (n_t - 1, n_x, k)

    def _slice(self, t: float) -> int:
        k = int(np.floor((t - self.vg.times[0]) / self.vg.dt + 1e-9))
        return min(max(k, 0), self.table.shape[0] - 1)

    def __call__(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        row = self.table[self._slice(t)]
        return np.stack([np.interp(x, self.vg.x, row[:, j]) for j in range(row.shape[1])], axis=1)


class PushFeedback:
    """Singular feedback: from a push cell, move along G to the first continuation cell."""

    def __init__(self, vg: ValueGrid, problem: Problem):
        self.vg = vg
        self.problem = problem

    def increment(self, k: int, t: float, x) -> np.ndarray:
        vg, c = self.vg, self.problem.coeffs
        x = np.asarray(x, dtype=float).reshape(-1)
        out = np.zeros((x.size, c.m))
        s = int(np.floor((t - vg.times[0]) / vg.dt + 1e-9))
        s = min(max(s, 0), vg.times.size - 2)
        mask, pdir = vg.push_mask[s], vg.push_dir[s]
        if not mask.any():
            return out
        cell = np.clip(np.rint((x - vg.x[0]) / vg.h).astype(int), 0, vg.x.size - 1)
        G = c.G_at(t)[0]
        for i in np.flatnonzero(mask[cell]):
            j = pdir[cell[i]]
            step = 1 if G[j] > 0 else -1
            target = cell[i]
            while 0 <= target < vg.x.size and mask[target]:
                target += step
            target = min(max(target, 0), vg.x.size - 1)
            out[i, j] = max((vg.x[target] - x[i]) / G[j], 0.0)
        return out


@dataclass
class Feedback:
    control: FeedbackControl
    push: PushFeedback
    push_region: np.ndarray   # (n_t, n_x) bool


def extract_feedback(vg: ValueGrid, problem: Optional[Problem] = None) -> Feedback:
    """Grid argmin of the Hamiltonian with discrete gradient and second difference.

    Ties go to the smallest control value.
    """
    problem = problem or vg.problem
    if problem is None:
        raise ValueError("a problem is needed to evaluate the Hamiltonian")
    _check_scalar(problem)
    cand = problem.region.candidates()
    nu, nx = cand.shape[0], vg.x.size
    _, q, theta = _jets(vg)
    table = np.empty((vg.times.size - 1, nx, problem.coeffs.k))
    for k in range(vg.times.size - 1):
        val = hamiltonian(problem, vg.times[k], np.tile(vg.x, nu), np.tile(vg.v[k], nu),
                          np.tile(q[k], nu), np.tile(theta[k], nu),
                          np.repeat(cand, nx, axis=0)).reshape(nu, nx)
        best = val.min(axis=0)
        idx = np.argmax(val <= best + 1e-12 * (1.0 + np.abs(best)), axis=0)
        table[k] = cand[idx]
    return Feedback(control=FeedbackControl(vg, table), push=PushFeedback(vg, problem),
                    push_region=vg.push_mask.copy())


def fd_mc_consistency(vg: ValueGrid, problem: Optional[Problem] = None,
                      mc: Optional[McConfig] = None, x_start: Optional[float] = None) -> dict:
    """Monte Carlo cost of the extracted feedback against the grid value at t0."""
    problem = problem or vg.problem
    mc = mc or McConfig()
    if x_start is not None:
        problem = Problem(problem.coeffs, problem.region, problem.grid, [x_start], problem.meta)
    fb = extract_feedback(vg, problem)
    est = evaluate_cost(problem, fb.control, fb.push, mc)
    v0 = float(np.interp(problem.x0[0], vg.x, vg.v[0]))
    tol = max(3 * est.se, 5 * (vg.h + vg.dt))
    return {"J": est.J, "se": est.se, "v0": v0, "gap": abs(est.J - v0), "tol": tol,
            "passed": bool(abs(est.J - v0) <= tol)}


# ---------------------------------------------------------------------------
# jets, semiconcavity and the link with the adjoints
# ---------------------------------------------------------------------------

@dataclass
class JetProbe:
    t: float
    x: float
    p: float
    q: float
    theta: float
    c: float
    superjet: bool
    subjet: bool
    theta_super_min: float
    theta_sub_max: float
    n_points: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def superjet_probe(vg: ValueGrid, point, radius: float, candidate_q: Optional[float] = None) -> JetProbe:
    """Local quadratic fit of v around a grid node and one-sided jet verdicts.

    The fit ``v(s, y) - v(t, x) ~ p ds + q dy + 1/2 theta dy^2`` is least squares
    over ``|dy| <= radius`` and ``|ds| <= max(radius^2, dt)``; ``p`` comes from the
    node column and ``(q, theta)`` from the remaining points. The o-term allowance is
    ``c (|ds| + dy^2)`` with ``c = 10 |v'''| radius``, ``v'''`` from a cubic fit.
    A jet element with the fitted first-order part exists when the smallest
    second-order coefficient that keeps ``v`` below the envelope (superjet) or
    the largest one that keeps it above (subjet) lies within
    ``2 max(|theta|, 1/radius)`` of the fitted ``theta``.
    """
    t0, x0 = map(float, point)
    it = int(np.argmin(np.abs(vg.times - t0)))
    ix = int(np.argmin(np.abs(vg.x - x0)))
    if not 0 < ix < vg.x.size - 1:
        raise ValueError("probe point must be interior to the spatial grid")
    t_rad = max(radius ** 2, vg.dt * (1 + 1e-9))
    ti = np.flatnonzero(np.abs(vg.times - vg.times[it]) <= t_rad)
    xi = np.flatnonzero(np.abs(vg.x - vg.x[ix]) <= radius * (1 + 1e-12))
    S, Y = np.meshgrid(vg.times[ti] - vg.times[it], vg.x[xi] - vg.x[ix], indexing="ij")
    R = vg.v[np.ix_(ti, xi)] - vg.v[it, ix]
    ds, dy, r = S.ravel(), Y.ravel(), R.ravel()
    keep = (ds != 0) | (dy != 0)
    ds, dy, r = ds[keep], dy[keep], r[keep]
    if np.unique(np.abs(dy[dy != 0])).size < 2 or ti.size < 2:
        raise ValueError("not enough neighbourhood points for a jet fit; enlarge the radius")
    # time slope from the node column alone, so a spatial misfit cannot leak into it
    on_t = dy == 0
    p = float(np.dot(ds[on_t], r[on_t]) / np.dot(ds[on_t], ds[on_t]))
    rs = r - p * ds
    if candidate_q is None:
        D = np.stack([dy, 0.5 * dy ** 2], axis=1)
        q, theta = np.linalg.lstsq(D, rs, rcond=None)[0]
    else:
        q = float(candidate_q)
        theta = np.linalg.lstsq((0.5 * dy ** 2)[:, None], rs - q * dy, rcond=None)[0][0]
    D3 = np.stack([dy, 0.5 * dy ** 2, dy ** 3 / 6.0], axis=1)
    third = abs(np.linalg.lstsq(D3, rs, rcond=None)[0][2])
    c = 10.0 * third * radius
    floor = 1e-10 * (1.0 + np.abs(vg.v[np.ix_(ti, xi)]).max())
    r0 = r - p * ds - q * dy
    allow = c * (np.abs(ds) + dy ** 2) + floor
    sp = ~on_t
    theta_sup = float(np.max(2 * (r0[sp] - allow[sp]) / dy[sp] ** 2))
    theta_sub = float(np.min(2 * (r0[sp] + allow[sp]) / dy[sp] ** 2))
    slack = 2.0 * max(abs(theta), 1.0 / radius)
    sup_ok = bool(np.all(r0[on_t] <= allow[on_t]) and theta_sup <= theta + slack)
    sub_ok = bool(np.all(r0[on_t] >= -allow[on_t]) and theta_sub >= theta - slack)
    return JetProbe(t=float(vg.times[it]), x=float(vg.x[ix]), p=float(p), q=float(q),
                    theta=float(theta), c=float(c), superjet=sup_ok, subjet=sub_ok,
                    theta_super_min=theta_sup, theta_sub_max=theta_sub, n_points=int(r.size))


@dataclass
class SemiconcavityReport:
    value: float
    C0: float
    tol: float
    passed: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def semiconcavity_check(vg: ValueGrid, C0: float, tol: float = 1e-8) -> SemiconcavityReport:
    """max over slices and interior cells of the second difference of v(t, .) - C0 x^2."""
    d2 = (vg.v[:, 2:] - 2 * vg.v[:, 1:-1] + vg.v[:, :-2]) / vg.h ** 2
    value = float(np.max(d2 - 2.0 * C0))
    return SemiconcavityReport(value=value, C0=float(C0), tol=float(tol), passed=bool(value <= tol))


def _interpolators(vg: ValueGrid):
    pt, q, theta = _jets(vg)
    pt = np.vstack([pt, pt[-1:]])
    grid = (vg.times, vg.x)
    return {name: RegularGridInterpolator(grid, arr) for name, arr in
            (("v", vg.v), ("pt", pt), ("q", q), ("theta", theta))}


def _check_inside(vg: ValueGrid, X: np.ndarray):
    lo, hi = X.min(), X.max()
    if lo < vg.x[0] or hi > vg.x[-1]:
        raise ValueError(f"trajectory leaves the spatial grid ([{lo:.4g}, {hi:.4g}] vs "
                         f"[{vg.x[0]:.4g}, {vg.x[-1]:.4g}]); widen the grid")


@dataclass
class DppMpReport:
    margin: float                 # min of K_j + p G_j
    gradient_deviation: float     # sup |p - v_x|
    second_order_violation: float # max (v_xx - P), superjet direction
    literal_violation: float      # max (P - v_xx)
    tol: float
    passed: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def check_dpp_mp_connection(vg: ValueGrid, fwd, adj, problem: Optional[Problem] = None,
                            tol: float = 2e-2) -> DppMpReport:
    """Compare first/second adjoints with grid derivatives of v along the paths.

    A superjet element {p} x [P, inf) at a smooth point means ``p = v_x`` and
    ``v_xx <= P``; that is the gated direction. The reversed inequality is
    reported as ``literal_violation`` without entering the verdict.
    """
    problem = problem or vg.problem
    c = problem.coeffs
    X = fwd.X[..., 0]
    _check_inside(vg, X)
    ip = _interpolators(vg)
    n_steps = fwd.n_steps
    margin = np.inf
    grad_dev, viol, lit = 0.0, -np.inf, -np.inf
    for k in range(n_steps + 1):
        t = fwd.times[k]
        pts = np.stack([np.full(X.shape[1], t), X[k]], axis=1)
        p = adj.p[k][:, 0]
        P = adj.P[k][:, 0, 0]
        G = c.G_at(t)[0]
        margin = min(margin, float(np.min(c.K[None, :] + p[:, None] * G[None, :])))
        grad_dev = max(grad_dev, float(np.max(np.abs(p - ip["q"](pts)))))
        vxx = ip["theta"](pts)
        viol = max(viol, float(np.max(vxx - P)))
        lit = max(lit, float(np.max(P - vxx)))
    passed = bool(margin >= -tol and grad_dev <= tol and viol <= tol)
    return DppMpReport(margin=margin, gradient_deviation=grad_dev, second_order_violation=viol,
                       literal_violation=lit, tol=tol, passed=passed)


@dataclass
class VerificationReport:
    tail_integral: float      # max over s of E int_s^T [p + H] dt
    pointwise_gap: float      # max over s of E p(s) + E H(s)
    time_growth: float        # max (v(t + dt, x) - v(t, x)) / dt over the grid
    tol: float
    passed: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def verification_check(vg: ValueGrid, fwd, problem: Optional[Problem] = None,
                       tol: Optional[float] = None) -> VerificationReport:
    """Discrete jets of v along a trajectory, fed into the verification inequalities.

    With ``pbar`` the forward time difference, ``q`` the central gradient and
    ``theta`` the second difference of v at the path point, both
    ``E int_s^T [pbar + H(t, X, v, q, theta, u)] dt <= tol`` for every s and
    ``E pbar(s) + E H(s) <= tol`` must hold.
    """
    problem = problem or vg.problem
    tol = 10 * (vg.h + vg.dt) if tol is None else tol
    X = fwd.X[..., 0]
    _check_inside(vg, X)
    ip = _interpolators(vg)
    n_steps = fwd.n_steps
    g = np.empty(n_steps)
    for k in range(n_steps):
        t = fwd.times[k]
        pts = np.stack([np.full(X.shape[1], t), X[k]], axis=1)
        H = hamiltonian(problem, t, X[k], ip["v"](pts), ip["q"](pts), ip["theta"](pts), fwd.u[k])
        g[k] = float(np.mean(ip["pt"](pts) + H))
    tails = np.cumsum(g[::-1])[::-1] * fwd.dt
    growth = float(np.max(np.diff(vg.v, axis=0)) / vg.dt)
    tail, gap = float(tails.max()), float(g.max())
    return VerificationReport(tail_integral=tail, pointwise_gap=gap, time_growth=growth,
                              tol=float(tol), passed=bool(tail <= tol and gap <= tol))


def k_monotonicity(problem: Problem, grid: SpatialGrid, factor: float = 2.0) -> float:
    """min over the grid of v(K * factor) - v(K); nonnegative when v is monotone in K."""
    if not factor >= 1.0:
        raise ValueError("factor must be at least 1")
    hi = problem.with_coeffs(dataclasses.replace(problem.coeffs, K=problem.coeffs.K * factor))
    return float(np.min(solve_hjb_vi(hi, grid).v - solve_hjb_vi(problem, grid).v))


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def write_value_grid_csv(vg: ValueGrid, path) -> None:
    """Columns ``t, x, v, mask, u_star...``; the terminal slice has empty controls."""
    k = 1 if vg.u_star is None else vg.u_star.shape[2]
    names = ["u_star"] if k == 1 else [f"u_star{j}" for j in range(k)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "v", "mask"] + names)
        for i, t in enumerate(vg.times):
            for j, x in enumerate(vg.x):
                row = [repr(float(t)), repr(float(x)), repr(float(vg.v[i, j])), int(vg.push_mask[i, j])]
                if vg.u_star is None or i == vg.times.size - 1:
                    row += [""] * k
                else:
                    row += [repr(float(u)) for u in vg.u_star[i, j]]
                w.writerow(row)


def hjb_summary(vg: ValueGrid, problem: Optional[Problem] = None) -> dict:
    res = complementarity_residual(vg, problem)
    return {"residual": res.residual, "worst": list(res.worst),
            "obstacle": obstacle_consistency(vg, problem),
            "free_boundary": vg.free_boundary(),
            "iterations_max": int(max(vg.iterations)) if vg.iterations else 0,
            "v_t0": vg.v[0].tolist(), "x": vg.x.tolist()}


def save_summary(summary: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump({"schema": 1, **summary}, fh, indent=2, sort_keys=True)
