"""Variational processes, the state transition matrix and perturbation studies.

Singular perturbation ``xi - xi_bar``::

    x1[k+1] = x1 + b_x x1 dt + sigma_x x1 dW + G (dxi - dxi_bar)[k]
    y1[k]   = E[y1[k+1] | .] + (f_x x1 + f_y y1 + f_z z1) dt + K . (dxi - dxi_bar)[k]
    y1[n]   = phi_x(X_T) . x1[n]

Regular direction ``v`` (perturbed control ``u_bar + eps v``): ``x1`` and ``x2``
are the first and second derivatives in ``eps`` of the Euler map, so
``X^eps - X_bar = eps x1 + eps^2 / 2 x2 + O(eps^3)`` holds pathwise on the grid.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adjoint import solve_classical_adjoints
from .model import Problem, RegularControl, SingularControlPath, convex_combination
from .simulate import (BackwardPaths, ForwardPaths, McConfig, Regression, _as_control,
                       draw_increments, simulate_forward, solve_bsde)


@dataclass
class SingularVariation:
    x1: np.ndarray      # (n_steps + 1, N, n)
    y1: np.ndarray      # (n_steps + 1, N)
    z1: np.ndarray      # (n_steps, N)
    y1_se: float        # standard error of mean(y1[0])


@dataclass
class RegularVariation:
    x1: np.ndarray      # (n_steps + 1, N, n)
    x2: np.ndarray      # (n_steps + 1, N, n)


@dataclass
class TransitionMatrix:
    psi: np.ndarray     # (n_steps + 1, N, n, n)
    psi_inv: np.ndarray


def _increments(xi, n_steps: int, N: int, m: int) -> np.ndarray:
    if xi is None:
        return np.zeros((n_steps, N, m))
    inc = xi.increments if isinstance(xi, SingularControlPath) else np.asarray(xi, float)
    if inc.ndim == 2:
        inc = np.broadcast_to(inc[:, None, :], (n_steps, N, m))
    return np.asarray(inc, dtype=float)


def solve_singular_variation(problem: Problem, fwd: ForwardPaths, bwd: BackwardPaths,
                             xi, xi_bar, mc: Optional[McConfig] = None) -> SingularVariation:
    """First-order response of (X, Y, Z) to moving the singular control from xi_bar to xi.

    ``fwd``/``bwd`` are the paths under ``xi_bar``.
    """
    c = problem.coeffs
    mc = mc or McConfig()
    n_steps, N, n = fwd.n_steps, fwd.n_paths, c.n
    dt = fwd.dt
    delta = _increments(xi, n_steps, N, c.m) - _increments(xi_bar, n_steps, N, c.m)
    x1 = np.zeros((n_steps + 1, N, n))
    for k in range(n_steps):
        t, x, u = fwd.times[k], fwd.X[k], fwd.u[k]
        bx, sx = c.b_x(t, x, u), c.sigma_x(t, x, u)
        x1[k + 1] = (x1[k] + np.einsum("nij,nj->ni", bx, x1[k]) * dt
                     + np.einsum("nij,nj->ni", sx, x1[k]) * fwd.dW[k][:, None]
                     + delta[k] @ c.G_at(t).T)
    y1 = np.empty((n_steps + 1, N))
    z1 = np.empty((n_steps, N))
    y1[n_steps] = np.einsum("ni,ni->n", c.phi_x(fwd.X[n_steps]), x1[n_steps])
    pathwise = y1[n_steps].copy()
    for k in range(n_steps - 1, -1, -1):
        t, x, y, z, u = fwd.times[k], fwd.X[k], bwd.Y[k], bwd.Z[k], fwd.u[k]
        reg = Regression(np.concatenate([x, x1[k]], axis=1), mc.regression_degree, fwd.dW[k])
        y_hat, z1[k] = reg.project(y1[k + 1])
        drive = (np.einsum("ni,ni->n", c.f_x(t, x, y, z, u), x1[k])
                 + c.f_y(t, x, y, z, u) * y_hat + c.f_z(t, x, y, z, u) * z1[k])
        jump = delta[k] @ c.K
        y1[k] = y_hat + drive * dt + jump
        pathwise += drive * dt + jump
    se = float(np.std(pathwise, ddof=1) / np.sqrt(N))
    return SingularVariation(x1=x1, y1=y1, z1=z1, y1_se=se)


def _direction(v, n_steps: int, N: int, k: int) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim <= 1:
        return np.broadcast_to(np.atleast_1d(arr), (n_steps, N, k))
    if arr.ndim == 2:
        return np.broadcast_to(arr[:, None, :], (n_steps, N, k))
    return arr


def solve_regular_variations(problem: Problem, fwd: ForwardPaths, v) -> RegularVariation:
    """First and second variations of the Euler state in the control direction ``v``."""
    c = problem.coeffs
    n_steps, N, n = fwd.n_steps, fwd.n_paths, c.n
    dt = fwd.dt
    V = _direction(v, n_steps, N, c.k)
    x1 = np.zeros((n_steps + 1, N, n))
    x2 = np.zeros((n_steps + 1, N, n))
    for k in range(n_steps):
        t, x, u, dw = fwd.times[k], fwd.X[k], fwd.u[k], fwd.dW[k][:, None]
        a, vk = x1[k], V[k]
        lin = {}
        for key in ("b", "sigma"):
            dx = getattr(c, f"{key}_x")(t, x, u)
            du = getattr(c, f"{key}_u")(t, x, u)
            dxx = getattr(c, f"{key}_xx")(t, x, u)
            dxu = getattr(c, f"{key}_xu")(t, x, u)
            duu = getattr(c, f"{key}_uu")(t, x, u)
            first = np.einsum("nij,nj->ni", dx, a) + np.einsum("nij,nj->ni", du, vk)
            second = (np.einsum("nij,nj->ni", dx, x2[k])
                      + np.einsum("nj,nijl,nl->ni", a, dxx, a)
                      + 2 * np.einsum("nj,nijl,nl->ni", a, dxu, vk)
                      + np.einsum("nj,nijl,nl->ni", vk, duu, vk))
            lin[key] = (first, second)
        x1[k + 1] = a + lin["b"][0] * dt + lin["sigma"][0] * dw
        x2[k + 1] = x2[k] + lin["b"][1] * dt + lin["sigma"][1] * dw
    return RegularVariation(x1=x1, x2=x2)


def transition_and_representation(problem: Problem, fwd: ForwardPaths, v,
                                  max_condition: float = 1e8):
    """Euler transition matrix, its inverse and x1 from the variation-of-constants formula.

    ``x1[k] = psi[k] sum_{j<k} psi_inv[j] (b_u v dt - sigma_x sigma_u v dW_j^2 + sigma_u v dW_j)``.

    The compensator integral is taken against the realised quadratic variation
    ``dW_j^2``; with ``dt`` in its place the pathwise gap to the Euler recursion
    is only O(sqrt(dt)).
    """
    c = problem.coeffs
    n_steps, N, n = fwd.n_steps, fwd.n_paths, c.n
    dt = fwd.dt
    V = _direction(v, n_steps, N, c.k)
    eye = np.eye(n)
    psi = np.empty((n_steps + 1, N, n, n))
    psi[0] = eye
    for k in range(n_steps):
        t, x, u = fwd.times[k], fwd.X[k], fwd.u[k]
        A = eye + c.b_x(t, x, u) * dt + c.sigma_x(t, x, u) * fwd.dW[k][:, None, None]
        psi[k + 1] = A @ psi[k]
    cond = np.linalg.cond(psi.reshape(-1, n, n))
    if not np.all(np.isfinite(cond)) or cond.max() > max_condition:
        flat = int(np.argmax(~np.isfinite(cond) | (cond > max_condition)))
        k, i = divmod(flat, N)
        raise np.linalg.LinAlgError(
            f"transition matrix near singular (condition {cond[flat]:.3g}) at step {k}, path {i}")
    psi_inv = np.linalg.inv(psi)
    acc = np.zeros((N, n))
    x1 = np.zeros((n_steps + 1, N, n))
    for k in range(n_steps):
        t, x, u = fwd.times[k], fwd.X[k], fwd.u[k]
        su = c.sigma_u(t, x, u)
        sx = c.sigma_x(t, x, u)
        bu = c.b_u(t, x, u)
        dw = fwd.dW[k][:, None]
        drift = np.einsum("nij,nj->ni", bu, V[k]) * dt
        comp = np.einsum("nij,nj->ni", sx @ su, V[k]) * dw ** 2
        noise = np.einsum("nij,nj->ni", su, V[k]) * dw
        acc = acc + np.einsum("nij,nj->ni", psi_inv[k], drift - comp + noise)
        x1[k + 1] = np.einsum("nij,nj->ni", psi[k + 1], acc)
    return TransitionMatrix(psi=psi, psi_inv=psi_inv), x1


# ---------------------------------------------------------------------------
# convergence studies
# ---------------------------------------------------------------------------

@dataclass
class StudyResult:
    kind: str
    levels: list
    norms: dict                  # name -> list of values per level
    slopes: dict                 # name -> fitted log-log slope (inf when exact)
    exact: dict = field(default_factory=dict)

    def rows(self):
        for name, values in self.norms.items():
            for lvl, val in zip(self.levels, values):
                yield lvl, name, val

    def to_dict(self) -> dict:
        return {"kind": self.kind, "levels": list(self.levels), "norms": self.norms,
                "slopes": {k: _json_float(v) for k, v in self.slopes.items()},
                "exact": self.exact}


def _json_float(x: float):
    if np.isfinite(x):
        return float(x)
    return "inf" if x > 0 else "-inf"


def fit_slope(levels, values, floor: float = 1e-13) -> float:
    """Least-squares slope of log(value) on log(level); inf when every value is below ``floor``."""
    lv = np.asarray(levels, dtype=float)
    vals = np.asarray(values, dtype=float)
    if np.all(vals <= floor):
        return float("inf")
    vals = np.maximum(vals, floor)
    return float(np.polyfit(np.log(lv), np.log(vals), 1)[0])


def _sup_l2(a: np.ndarray) -> float:
    """sqrt(E sup_k |a_k|^2) over time axis 0 and path axis 1."""
    sq = a.reshape(a.shape[0], a.shape[1], -1)
    sup = np.max(np.sum(sq ** 2, axis=2), axis=0)
    return float(np.sqrt(np.mean(sup)))


def _check_levels(levels):
    lv = [float(x) for x in levels]
    if len(lv) < 3:
        raise ValueError("a convergence study needs at least 3 levels")
    if any(x <= 0 for x in lv) or any(b >= a for a, b in zip(lv, lv[1:])):
        raise ValueError("levels must be positive and strictly decreasing")
    return lv


def convergence_study(problem: Problem, kind: str, levels: Sequence[float],
                      mc: Optional[McConfig] = None, u_bar=None, direction=None,
                      xi=None, xi_bar=None) -> StudyResult:
    """Perturbation-order study with common random numbers.

    ``kind='regular'``: control ``u_bar + eps * direction``; norms
    ``first_order`` = ||dX - eps x1|| and ``second_order`` = ||dX - eps x1 - eps^2/2 x2||
    (``||a|| = sqrt(E sup_k |a_k|^2)``), plus the backward remainders
    ``y_first`` = ||dY - eps p x1|| and ``y_hat`` = ||dY - p(eps x1 + eps^2/2 x2) - eps^2/2 x1 P x1||
    with its square ``y_hat_sq``.

    ``kind='singular'``: singular control ``xi_bar + alpha (xi - xi_bar)``; norm
    ``quotient_error`` = max_k E|(X^alpha - X_bar)/alpha - x1|^2.
    """
    lv = _check_levels(levels)
    mc = mc or McConfig()
    c, g = problem.coeffs, problem.grid
    dW = draw_increments(problem, mc)
    N = mc.n_paths
    if kind == "regular":
        u_bar = 0.0 if u_bar is None else u_bar
        direction = 1.0 if direction is None else direction
        base_ctrl = _as_control(u_bar, g.n_steps)
        if base_ctrl.is_feedback:
            raise ValueError("regular studies need an open-loop reference control")
        fwd = simulate_forward(problem, base_ctrl, xi_bar, mc, dW=dW)
        bwd = solve_bsde(problem, fwd, mc)
        adj = solve_classical_adjoints(problem, fwd, bwd, mc)
        var = solve_regular_variations(problem, fwd, direction)
        V = _direction(direction, g.n_steps, N, c.k)
        norms = {name: [] for name in ("first_order", "second_order", "y_first", "y_hat", "y_hat_sq")}
        p_x1 = np.einsum("kni,kni->kn", adj.p, var.x1)
        p_x2 = np.einsum("kni,kni->kn", adj.p, var.x2)
        x1Px1 = np.einsum("kni,knij,knj->kn", var.x1, adj.P, var.x1)
        for eps in lv:
            u_eps = fwd.u + eps * V
            if not problem.region.contains(u_eps):
                raise ValueError(f"perturbed control leaves the control region at eps={eps}")
            fe = simulate_forward(problem, RegularControl(values=u_eps), xi_bar, mc, dW=dW)
            be = solve_bsde(problem, fe, mc)
            dx = fe.X - fwd.X
            dy = be.Y - bwd.Y
            norms["first_order"].append(_sup_l2(dx - eps * var.x1))
            norms["second_order"].append(_sup_l2(dx - eps * var.x1 - 0.5 * eps ** 2 * var.x2))
            norms["y_first"].append(_sup_l2(dy - eps * p_x1))
            y_hat = dy - (eps * p_x1 + 0.5 * eps ** 2 * p_x2) - 0.5 * eps ** 2 * x1Px1
            norms["y_hat"].append(_sup_l2(y_hat))
            norms["y_hat_sq"].append(_sup_l2(y_hat) ** 2)
    elif kind == "singular":
        if xi is None:
            raise ValueError("singular studies need a comparison singular control xi")
        u_bar = 0.0 if u_bar is None else u_bar
        if xi_bar is None:
            xi_bar = SingularControlPath.zeros(g.n_steps, c.m)
        fwd = simulate_forward(problem, u_bar, xi_bar, mc, dW=dW)
        bwd = solve_bsde(problem, fwd, mc)
        var = solve_singular_variation(problem, fwd, bwd, xi, xi_bar, mc)
        norms = {"quotient_error": []}
        for alpha in lv:
            if alpha > 1:
                raise ValueError("singular levels must lie in (0, 1]")
            xa = convex_combination(xi_bar, xi, alpha)
            fa = simulate_forward(problem, u_bar, xa, mc, dW=dW)
            err = (fa.X - fwd.X) / alpha - var.x1
            norms["quotient_error"].append(float(np.max(np.mean(np.sum(err ** 2, axis=2), axis=1))))
    else:
        raise ValueError(f"unknown study kind {kind!r}; use 'regular' or 'singular'")
    slopes = {name: fit_slope(lv, vals) for name, vals in norms.items()}
    exact = {name: bool(np.isinf(s)) for name, s in slopes.items()}
    return StudyResult(kind=kind, levels=lv, norms=norms, slopes=slopes, exact=exact)


def write_study(result: StudyResult, csv_path, json_path=None) -> None:
    """CSV ``level, norm_name, value`` and an optional slope summary JSON."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "norm_name", "value"])
        for lvl, name, val in result.rows():
            w.writerow([repr(lvl), name, repr(float(val))])
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump({"schema": 1, **result.to_dict()}, fh, indent=2, sort_keys=True)
