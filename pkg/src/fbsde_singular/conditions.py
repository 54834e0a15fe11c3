"""Hamiltonians and necessary-condition checks along simulated trajectories.

Shapes: N points, state dim n, control dim k::

    H (N,)   H_u (N, k)   H_uu (N, k, k)   mixed (N, k, n)
    hu (N,)  hu_u (N, k)  hu_uu (N, k, k)

``hu`` is the second-order Hamiltonian with the diffusion-difference
correction, built around a reference point ``(x_ref, u_ref)``::

    hu = p.b + q.sigma + 1/2 (sigma - sigma_ref)' P (sigma - sigma_ref)
         + f(t, x, y, z + p.(sigma - sigma_ref), u)

``mixed`` is the cross Hamiltonian that multiplies ``x1 v`` in the
second-order expansion::

    mixed = H_ux + b_u' P + sigma_u' Q + sigma_u' P sigma_x + f_yu p' + f_zu (sigma_x' p + q)'
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adjoint import ClassicalAdjoints, SingularAdjoint
from .model import Problem, SingularControlPath
from .simulate import BackwardPaths, ForwardPaths, McConfig
from .variation import RegularVariation, TransitionMatrix, _direction


@dataclass
class HamiltonianRecord:
    H: np.ndarray
    H_u: np.ndarray
    H_uu: np.ndarray
    mixed: np.ndarray
    hu: np.ndarray
    hu_u: np.ndarray
    hu_uu: np.ndarray
    derivs: object = None


@dataclass
class ConditionReport:
    name: str
    min_margin: float
    complementarity_residual: float
    tol: float
    passed: bool
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def build(cls, name, min_margin, residual, tol, **diagnostics) -> "ConditionReport":
        passed = bool(min_margin >= -tol and residual <= tol)
        return cls(name=name, min_margin=float(min_margin), complementarity_residual=float(residual),
                   tol=float(tol), passed=passed, diagnostics=diagnostics)

    def to_dict(self) -> dict:
        return {"name": self.name, "min_margin": self.min_margin,
                "complementarity_residual": self.complementarity_residual,
                "tol": self.tol, "passed": self.passed, "diagnostics": _jsonable(self.diagnostics)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def default_tolerance(se: float = 0.0) -> float:
    return max(1e-6, 3.0 * float(se))


# ---------------------------------------------------------------------------
# Hamiltonians
# ---------------------------------------------------------------------------

def _mixed(d, p, q, P, Q) -> np.ndarray:
    # [l, j] = d^2 H / du_l dx_j
    H_ux = (np.einsum("ni,nijl->nlj", p, d.b_xu) + np.einsum("ni,nijl->nlj", q, d.sigma_xu)
            + np.swapaxes(d.f_xu, 1, 2))
    buT = np.swapaxes(d.b_u, 1, 2)
    suT = np.swapaxes(d.sigma_u, 1, 2)
    sxp_q = np.einsum("nij,ni->nj", d.sigma_x, p) + q
    return (H_ux + buT @ P + suT @ Q + suT @ P @ d.sigma_x
            + d.f_yu[:, :, None] * p[:, None, :] + d.f_zu[:, :, None] * sxp_q[:, None, :])


def eval_hamiltonians(problem: Problem, t: float, x, y, z, u, p, q, P, Q,
                      x_ref=None, u_ref=None) -> HamiltonianRecord:
    """All Hamiltonian quantities at a batch of points from the derivative oracles."""
    c = problem.coeffs
    n, k = c.n, c.k
    x = np.atleast_2d(np.asarray(x, dtype=float))
    N = x.shape[0]
    u = np.asarray(u, dtype=float).reshape(N, k)
    y = np.broadcast_to(np.asarray(y, dtype=float), (N,)).copy()
    z = np.broadcast_to(np.asarray(z, dtype=float), (N,)).copy()
    p = np.asarray(p, dtype=float).reshape(N, n)
    q = np.asarray(q, dtype=float).reshape(N, n)
    P = np.asarray(P, dtype=float).reshape(N, n, n)
    Q = np.asarray(Q, dtype=float).reshape(N, n, n)
    if x.shape != (N, n):
        raise ValueError(f"state has shape {x.shape}, expected ({N}, {n})")
    x_ref = x if x_ref is None else np.broadcast_to(np.asarray(x_ref, float).reshape(-1, n), (N, n))
    u_ref = u if u_ref is None else np.broadcast_to(np.asarray(u_ref, float).reshape(-1, k), (N, k))

    d = c.derivatives(t, x, y, z, u)
    suT = np.swapaxes(d.sigma_u, 1, 2)
    H = np.einsum("ni,ni->n", p, d.b) + np.einsum("ni,ni->n", q, d.sigma) + d.f
    H_u = np.einsum("nil,ni->nl", d.b_u, p) + np.einsum("nil,ni->nl", d.sigma_u, q) + d.f_u
    p_buu = np.einsum("ni,nilm->nlm", p, d.b_uu)
    q_suu = np.einsum("ni,nilm->nlm", q, d.sigma_uu)
    H_uu = p_buu + q_suu + d.f_uu
    mixed = _mixed(d, p, q, P, Q)

    # second-order Hamiltonian with the diffusion-difference term
    s_ref = c.sigma(t, x_ref, u_ref)
    ds = d.sigma - s_ref
    z_shift = z + np.einsum("ni,ni->n", p, ds)
    ds_ = c.derivatives(t, x, y, z_shift, u)
    Pds = np.einsum("nij,nj->ni", P, ds)
    hu = (np.einsum("ni,ni->n", p, d.b) + np.einsum("ni,ni->n", q, d.sigma)
          + 0.5 * np.einsum("ni,ni->n", ds, Pds) + ds_.f)
    su_p = np.einsum("nil,ni->nl", d.sigma_u, p)
    hu_u = (np.einsum("nil,ni->nl", d.b_u, p) + np.einsum("nil,ni->nl", d.sigma_u, q)
            + np.einsum("nil,ni->nl", d.sigma_u, Pds) + ds_.f_u + ds_.f_z[:, None] * su_p)
    p_suu = np.einsum("ni,nilm->nlm", p, d.sigma_uu)
    cross = ds_.f_zu[:, :, None] * su_p[:, None, :]
    hu_uu = (p_buu + q_suu + suT @ P @ d.sigma_u + np.einsum("ni,nilm->nlm", Pds, d.sigma_uu)
             + ds_.f_uu + cross + np.swapaxes(cross, 1, 2)
             + ds_.f_zz[:, None, None] * su_p[:, :, None] * su_p[:, None, :]
             + ds_.f_z[:, None, None] * p_suu)
    return HamiltonianRecord(H=H, H_u=H_u, H_uu=0.5 * (H_uu + np.swapaxes(H_uu, 1, 2)),
                             mixed=mixed, hu=hu, hu_u=hu_u,
                             hu_uu=0.5 * (hu_uu + np.swapaxes(hu_uu, 1, 2)), derivs=d)


def _path_hamiltonians(problem, fwd, bwd, adj, k, u=None, x_ref=None, u_ref=None):
    uk = fwd.u[k] if u is None else u
    return eval_hamiltonians(problem, fwd.times[k], fwd.X[k], bwd.Y[k], bwd.Z[k], uk,
                             adj.p[k], adj.q[k], adj.P[k], adj.Q[k], x_ref, u_ref)


def mixed_hamiltonian_path(problem, fwd, bwd, adj) -> np.ndarray:
    """mixed Hamiltonian along the paths, shape (n_steps, N, k, n)."""
    out = []
    for k in range(fwd.n_steps):
        d = problem.coeffs.derivatives(fwd.times[k], fwd.X[k], bwd.Y[k], bwd.Z[k], fwd.u[k])
        out.append(_mixed(d, adj.p[k], adj.q[k], adj.P[k], adj.Q[k]))
    return np.stack(out)


# ---------------------------------------------------------------------------
# singular maximum principle
# ---------------------------------------------------------------------------

def singular_margin(sing: SingularAdjoint, G, K, times=None) -> np.ndarray:
    """sq K_i - sp' G_i for every step, path and direction; shape (n_steps + 1, N, m)."""
    K = np.atleast_1d(np.asarray(K, dtype=float))
    n_grid = sing.frak_q.shape[0]
    if callable(G):
        if times is None:
            raise ValueError("a time-dependent G needs the grid times")
        Gs = np.stack([np.asarray(G(t), dtype=float) for t in times])
    else:
        Gs = np.broadcast_to(np.asarray(G, dtype=float), (n_grid,) + np.shape(G))
    Gs = Gs.reshape(n_grid, sing.frak_p.shape[2], K.size)
    return sing.frak_q[..., None] * K - np.einsum("kni,kim->knm", sing.frak_p, Gs)


def check_singular_optimality(sing: SingularAdjoint, G, K, xi_bar,
                              times=None, tol: float = 1e-6) -> ConditionReport:
    """Nonnegative margin everywhere and no singular mass where the margin is positive."""
    margin = singular_margin(sing, G, K, times)
    n_steps, N, m = margin.shape[0] - 1, margin.shape[1], margin.shape[2]
    if isinstance(xi_bar, SingularControlPath):
        inc = xi_bar.increments
    else:
        inc = np.zeros((n_steps, m)) if xi_bar is None else np.asarray(xi_bar, dtype=float)
    if inc.ndim == 2:
        inc = np.broadcast_to(inc[:, None, :], (n_steps, N, m))
    active = margin[:n_steps] > tol
    misplaced = np.sum(np.where(active, inc, 0.0), axis=(0, 2))
    residual = float(np.mean(misplaced))
    per_time_min = margin.min(axis=(1, 2))
    return ConditionReport.build(
        "singular_maximum_principle", float(margin.min()), residual, tol,
        per_time_min_margin=per_time_min,
        misplaced_mass_per_step=np.mean(np.sum(np.where(active, inc, 0.0), axis=2), axis=1),
    )


# ---------------------------------------------------------------------------
# classical singularity
# ---------------------------------------------------------------------------

def singularity_residuals(problem: Problem, t, x, y, z, u, p, q, P, Q):
    """First- and second-order singularity expressions, shapes (N, k) and (N, k, k).

    first  = H_u + f_z sigma_u' p
    second = H_uu + sigma_u' P sigma_u + f_z p.sigma_uu
             + f_zu (sigma_u' p)' + (sigma_u' p) f_zu' + f_zz (sigma_u' p)(sigma_u' p)'
    """
    c = problem.coeffs
    rec = eval_hamiltonians(problem, t, x, y, z, u, p, q, P, Q)
    N = rec.H.shape[0]
    d = rec.derivs
    p = np.asarray(p, float).reshape(N, c.n)
    P = np.asarray(P, float).reshape(N, c.n, c.n)
    su_p = np.einsum("nil,ni->nl", d.sigma_u, p)
    first = rec.H_u + d.f_z[:, None] * su_p
    suT = np.swapaxes(d.sigma_u, 1, 2)
    cross = d.f_zu[:, :, None] * su_p[:, None, :]
    second = (rec.H_uu + suT @ P @ d.sigma_u
              + d.f_z[:, None, None] * np.einsum("ni,nilm->nlm", p, d.sigma_uu)
              + cross + np.swapaxes(cross, 1, 2)
              + d.f_zz[:, None, None] * su_p[:, :, None] * su_p[:, None, :])
    return first, second, rec


def check_classical_singularity(problem: Problem, fwd: ForwardPaths, bwd: BackwardPaths,
                                adj: ClassicalAdjoints, tol: float = 1e-8) -> ConditionReport:
    """Residuals of the first/second-order singularity conditions and their
    agreement with the derivatives of the second-order Hamiltonian at the reference point."""
    res_i = np.zeros(fwd.n_steps)
    res_ii = np.zeros(fwd.n_steps)
    hu_u = np.zeros(fwd.n_steps)
    hu_uu = np.zeros(fwd.n_steps)
    disc = 0.0
    for k in range(fwd.n_steps):
        first, second, rec = singularity_residuals(
            problem, fwd.times[k], fwd.X[k], bwd.Y[k], bwd.Z[k], fwd.u[k],
            adj.p[k], adj.q[k], adj.P[k], adj.Q[k])
        res_i[k] = np.abs(first).max()
        res_ii[k] = np.abs(second).max()
        hu_u[k] = np.abs(rec.hu_u).max()
        hu_uu[k] = np.abs(rec.hu_uu).max()
        disc = max(disc, float(np.abs(first - rec.hu_u).max()),
                   float(np.abs(second - rec.hu_uu).max()))
    worst = max(res_i.max(), res_ii.max())
    return ConditionReport.build(
        "classical_singularity", 0.0, worst, tol,
        residual_i=float(res_i.max()), residual_ii=float(res_ii.max()),
        hu_u=float(hu_u.max()), hu_uu=float(hu_uu.max()),
        equivalence_discrepancy=disc,
        per_time_residual_i=res_i, per_time_residual_ii=res_ii,
    )


# ---------------------------------------------------------------------------
# variational inequality
# ---------------------------------------------------------------------------

@dataclass
class VariationalValue:
    value: float             # full right-hand side for the given eps
    value_se: float
    mixed_integral: float    # E int chi v' mixed x1 ds
    mixed_se: float
    terms: dict


def variational_inequality_value(problem: Problem, fwd: ForwardPaths, bwd: BackwardPaths,
                                 adj: ClassicalAdjoints, var: RegularVariation, v,
                                 eps: float = 1.0) -> VariationalValue:
    """Monte Carlo value of the second-order variational inequality integrand.

    Per time, with ``w = sigma_u' p``::

        eps^2/2 f_z v' (p.sigma_uu) v + eps^2 v' mixed x1 + eps^2 (f_zu.v)(w.v)
        + eps v.(H_u + f_z w) + eps^2/2 v' (H_uu + sigma_u' P sigma_u) v

    weighted by ``chi`` and integrated in time. ``terms`` lists each group's mean.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = problem.coeffs
    n_steps, N = fwd.n_steps, fwd.n_paths
    V = _direction(v, n_steps, N, c.k)
    names = ("sigma_uu_term", "mixed_term", "f_zu_term", "first_order_term", "quadratic_term")
    acc = {name: np.zeros(N) for name in names}
    for k in range(n_steps):
        t = fwd.times[k]
        rec = _path_hamiltonians(problem, fwd, bwd, adj, k)
        d = c.derivatives(t, fwd.X[k], bwd.Y[k], bwd.Z[k], fwd.u[k])
        p, P, vk, x1 = adj.p[k], adj.P[k], V[k], var.x1[k]
        chi = adj.chi[k] * fwd.dt
        w = np.einsum("nil,ni->nl", d.sigma_u, p)
        p_suu = np.einsum("ni,nilm->nlm", p, d.sigma_uu)
        suT = np.swapaxes(d.sigma_u, 1, 2)
        acc["sigma_uu_term"] += chi * 0.5 * d.f_z * np.einsum("nl,nlm,nm->n", vk, p_suu, vk)
        acc["mixed_term"] += chi * np.einsum("nl,nlj,nj->n", vk, rec.mixed, x1)
        acc["f_zu_term"] += chi * np.einsum("nl,nl->n", d.f_zu, vk) * np.einsum("nl,nl->n", w, vk)
        acc["first_order_term"] += chi * np.einsum("nl,nl->n", vk, rec.H_u + d.f_z[:, None] * w)
        acc["quadratic_term"] += chi * 0.5 * np.einsum(
            "nl,nlm,nm->n", vk, rec.H_uu + suT @ P @ d.sigma_u, vk)
    e2 = eps ** 2
    total = (e2 * (acc["sigma_uu_term"] + acc["mixed_term"] + acc["f_zu_term"]
                   + acc["quadratic_term"]) + eps * acc["first_order_term"])
    se = lambda a: float(np.std(a, ddof=1) / np.sqrt(N))
    return VariationalValue(
        value=float(total.mean()), value_se=se(total),
        mixed_integral=float(acc["mixed_term"].mean()), mixed_se=se(acc["mixed_term"]),
        terms={name: float(a.mean()) for name, a in acc.items()},
    )


# ---------------------------------------------------------------------------
# pointwise second-order conditions
# ---------------------------------------------------------------------------

def _scalar_only(problem):
    if problem.coeffs.n != 1 or problem.coeffs.k != 1:
        raise NotImplementedError("pointwise second-order checks are implemented for n = k = 1")


@dataclass
class PointwiseReport:
    lhs: np.ndarray                 # per step (mean over paths for the first condition)
    min_lhs: float
    diagnostics: dict


def pointwise_m1(problem: Problem, fwd: ForwardPaths, bwd: BackwardPaths, adj: ClassicalAdjoints,
                 transition: TransitionMatrix, u: float, alphas: Sequence[float],
                 mc: Optional[McConfig] = None, steps: Optional[Sequence[int]] = None,
                 kernel_degree: Optional[int] = None, mixed=None) -> PointwiseReport:
    """First pointwise condition: E[chi mixed b_u (u - u_bar)^2] + right derivative term, per step.

    The right derivative is a limsup in alpha; it is replaced by the largest of the
    double averages at the supplied alphas (in time units, rounded to whole steps).
    ``psi`` comes from :func:`malliavin.martingale_kernel` on chi mixed (u - u_bar).
    """
    from .malliavin import martingale_kernel

    _scalar_only(problem)
    if not alphas:
        raise ValueError("alpha list is empty")
    mc = mc or McConfig()
    c = problem.coeffs
    n_steps, N = fwd.n_steps, fwd.n_paths
    dt = fwd.dt
    widths = sorted({max(1, int(round(a / dt))) for a in alphas}, reverse=True)
    if mixed is None:
        mixed = mixed_hamiltonian_path(problem, fwd, bwd, adj)
    mixed = np.asarray(mixed).reshape(n_steps, N)
    dv = u - fwd.u[..., 0]                                                      # (n_steps, N)
    target = adj.chi[:n_steps] * mixed * dv
    steps = list(range(n_steps)) if steps is None else list(steps)
    top = widths[0]
    pairs = set()
    for r in steps:
        for j in range(r + 1, min(r + top, n_steps - 1) + 1):
            for i in range(r, j):
                pairs.add((i, j))
    kernel = martingale_kernel(np.concatenate([target, target[-1:]]), fwd, mc,
                               pairs=sorted(pairs), degree=kernel_degree)
    psi_T = transition.psi[..., 0, 0]
    psi_inv = transition.psi_inv[..., 0, 0]
    lhs = np.zeros(len(steps))
    per_alpha = np.zeros((len(steps), len(widths)))
    first = np.zeros(len(steps))
    for a, r in enumerate(steps):
        t, x = fwd.times[r], fwd.X[r]
        bu = c.b_u(t, x, fwd.u[r])[:, 0, 0]
        first[a] = float(np.mean(adj.chi[r] * mixed[r] * bu * dv[r] ** 2))
        for b, width in enumerate(widths):
            total = np.zeros(N)
            for j in range(r + 1, min(r + width, n_steps - 1) + 1):
                for i in range(r, j):
                    su = c.sigma_u(fwd.times[i], fwd.X[i], fwd.u[i])[:, 0, 0]
                    weight = 0.5 if i == j - 1 else 1.0
                    total += weight * kernel.values(i, j) * psi_T[r] * psi_inv[i] * su * dv[i]
            alpha = width * dt
            per_alpha[a, b] = 2.0 / alpha ** 2 * float(np.mean(total)) * dt ** 2
        lhs[a] = first[a] + per_alpha[a].max()
    return PointwiseReport(lhs=lhs, min_lhs=float(lhs.min()), diagnostics={
        "steps": steps, "alphas": [w * dt for w in widths], "first_term": first,
        "derivative_term_per_alpha": per_alpha,
        "note": "right derivative approximated by the max over the alpha list",
    })


def pointwise_m2(problem: Problem, fwd: ForwardPaths, bwd: BackwardPaths, adj: ClassicalAdjoints,
                 u: float, nabla_weighted_mixed=None, nabla_u_bar=None,
                 mixed=None) -> PointwiseReport:
    """Second pointwise condition per step and path.

    ``chi mixed b_u v^2 + nabla(chi mixed) sigma_u v^2 - chi mixed sigma_u v nabla(u_bar)``
    with ``v = u - u_bar``. Both Malliavin inputs have shape (n_steps, N).
    """
    _scalar_only(problem)
    missing = [name for name, val in (("nabla_weighted_mixed", nabla_weighted_mixed),
                                      ("nabla_u_bar", nabla_u_bar)) if val is None]
    if missing:
        raise ValueError("missing Malliavin inputs: " + ", ".join(missing)
                         + "; compute them with malliavin.nabla or a closed-form oracle")
    c = problem.coeffs
    n_steps, N = fwd.n_steps, fwd.n_paths
    nab_m = np.broadcast_to(np.asarray(nabla_weighted_mixed, float), (n_steps, N))
    nab_u = np.broadcast_to(np.asarray(nabla_u_bar, float), (n_steps, N))
    if mixed is None:
        mixed = mixed_hamiltonian_path(problem, fwd, bwd, adj)
    mixed = np.asarray(mixed).reshape(n_steps, N)
    chi_m = adj.chi[:n_steps] * mixed
    lhs = np.empty((n_steps, N))
    for k in range(n_steps):
        t, x, uk = fwd.times[k], fwd.X[k], fwd.u[k]
        bu = c.b_u(t, x, uk)[:, 0, 0]
        su = c.sigma_u(t, x, uk)[:, 0, 0]
        v = u - uk[:, 0]
        lhs[k] = chi_m[k] * bu * v * v + nab_m[k] * su * v * v - chi_m[k] * su * v * nab_u[k]
    return PointwiseReport(lhs=lhs, min_lhs=float(lhs.min()),
                           diagnostics={"per_step_min": lhs.min(axis=1),
                                        "per_step_mean": lhs.mean(axis=1)})


# ---------------------------------------------------------------------------
# duality identity
# ---------------------------------------------------------------------------

@dataclass
class DualityCheck:
    lhs: float
    rhs: float
    se: float
    tol: float
    passed: bool


def duality_check(problem: Problem, sing: SingularAdjoint, var_y1_mean: float, var_y1_se: float,
                  xi, xi_bar, times) -> DualityCheck:
    """Compare y1(0) with E sum_k (sq K - sp' G)(dxi - dxi_bar)[k]."""
    c = problem.coeffs
    margin = singular_margin(sing, c.G if not callable(c.G) else c.G_at, c.K, times)
    n_steps, N = margin.shape[0] - 1, margin.shape[1]
    def inc(z):
        a = np.zeros((n_steps, c.m)) if z is None else (
            z.increments if isinstance(z, SingularControlPath) else np.asarray(z, float))
        return np.broadcast_to(a[:, None, :], (n_steps, N, c.m)) if a.ndim == 2 else a
    pathwise = np.sum(margin[:n_steps] * (inc(xi) - inc(xi_bar)), axis=(0, 2))
    rhs = float(pathwise.mean())
    se_rhs = float(np.std(pathwise, ddof=1) / np.sqrt(N))
    se = float(np.hypot(se_rhs, var_y1_se))
    tol = max(1e-6, 3.0 * se)
    return DualityCheck(lhs=float(var_y1_mean), rhs=rhs, se=se, tol=tol,
                        passed=bool(abs(var_y1_mean - rhs) <= tol))
