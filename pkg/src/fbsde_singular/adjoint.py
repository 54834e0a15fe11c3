"""Adjoint processes along simulated trajectories.

Four systems are solved on the paths of a (candidate optimal) control:

* the singular pair ``(sp, sq, sk)``: ``sq`` is the stochastic exponential
  ``dsq = f_y sq dt + f_z sq dW`` with ``sq(0) = 1``; ``(sp, sk)`` solve the
  linear backward equation ``-dsp = [b_x' sp + sigma_x' sk - f_x sq] dt - sk dW``
  with ``sp(T) = -phi_x(X_T) sq(T)``;
* the first-order pair ``(p, q)`` with generator ``gamma``;
* the second-order pair ``(P, Q)`` with generator ``pi``;
* the weight ``chi``, which solves the same linear SDE as ``sq``.

Backward equations use the regression scheme of :mod:`simulate`. ``sp`` is
regressed in units of ``sq`` (divide by ``sq[k]``, project, multiply back):
``sp / sq`` is Markov in the state while ``sp`` alone is not.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import Problem
from .simulate import BackwardPaths, ForwardPaths, McConfig, Regression


@dataclass
class SingularAdjoint:
    frak_p: np.ndarray   # (n_steps + 1, N, n)
    frak_q: np.ndarray   # (n_steps + 1, N)
    frak_k: np.ndarray   # (n_steps, N, n)
    degraded_steps: list = field(default_factory=list)


@dataclass
class ClassicalAdjoints:
    p: np.ndarray        # (n_steps + 1, N, n)
    q: np.ndarray        # (n_steps, N, n)
    P: np.ndarray        # (n_steps + 1, N, n, n)
    Q: np.ndarray        # (n_steps, N, n, n)
    chi: np.ndarray      # (n_steps + 1, N)
    degraded_steps: list = field(default_factory=list)


def step_derivatives(problem: Problem, fwd: ForwardPaths, bwd: BackwardPaths, k: int):
    """Coefficient oracles at (t_k, X_k, Y_k, Z_k, u_k)."""
    return problem.coeffs.derivatives(fwd.times[k], fwd.X[k], bwd.Y[k], bwd.Z[k], fwd.u[k])


def exponential_weight(problem: Problem, fwd: ForwardPaths, bwd: BackwardPaths) -> np.ndarray:
    """Log-Euler solution of d w = f_y w dt + f_z w dW, w(0) = 1; shape (n_steps + 1, N)."""
    c = problem.coeffs
    logw = np.zeros((fwd.n_steps + 1, fwd.n_paths))
    for k in range(fwd.n_steps):
        t, x, y, z, u = fwd.times[k], fwd.X[k], bwd.Y[k], bwd.Z[k], fwd.u[k]
        fy = c.f_y(t, x, y, z, u)
        fz = c.f_z(t, x, y, z, u)
        logw[k + 1] = logw[k] + (fy - 0.5 * fz ** 2) * fwd.dt + fz * fwd.dW[k]
    return np.exp(logw)


def solve_singular_adjoint(problem: Problem, fwd: ForwardPaths, bwd: BackwardPaths,
                           mc: Optional[McConfig] = None) -> SingularAdjoint:
    c = problem.coeffs
    mc = mc or McConfig()
    n_steps, N, n = fwd.n_steps, fwd.n_paths, c.n
    dt = fwd.dt
    sq = exponential_weight(problem, fwd, bwd)
    sp = np.empty((n_steps + 1, N, n))
    sk = np.empty((n_steps, N, n))
    sp[n_steps] = -c.phi_x(fwd.X[n_steps]) * sq[n_steps][:, None]
    degraded = []
    for k in range(n_steps - 1, -1, -1):
        t, x, y, z, u = fwd.times[k], fwd.X[k], bwd.Y[k], bwd.Z[k], fwd.u[k]
        reg = Regression(x, mc.regression_degree, fwd.dW[k])
        if reg.degraded:
            degraded.append(k)
        w = sq[k][:, None]
        mean, zpart = reg.project(sp[k + 1] / w)
        sp_hat = w * mean
        sk[k] = w * zpart
        bx = c.b_x(t, x, u)
        sx = c.sigma_x(t, x, u)
        fx = c.f_x(t, x, y, z, u)
        drive = (np.einsum("nij,ni->nj", bx, sp_hat) + np.einsum("nij,ni->nj", sx, sk[k])
                 - fx * w)
        sp[k] = sp_hat + drive * dt
    return SingularAdjoint(frak_p=sp, frak_q=sq, frak_k=sk, degraded_steps=sorted(degraded))


def first_order_generator(d, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """gamma = b_x' p + f_y p + f_z sigma_x' p + sigma_x' q + f_z q + f_x, shape (N, n)."""
    bxp = np.einsum("nij,ni->nj", d.b_x, p)
    sxp = np.einsum("nij,ni->nj", d.sigma_x, p)
    sxq = np.einsum("nij,ni->nj", d.sigma_x, q)
    fy, fz = d.f_y[:, None], d.f_z[:, None]
    return bxp + fy * p + fz * sxp + sxq + fz * q + d.f_x


def second_order_generator(d, p, q, P, Q) -> np.ndarray:
    """pi for the second adjoint, shape (N, n, n); includes the (x, y, z) Hessian form."""
    N, n = p.shape
    bx, sx = d.b_x, d.sigma_x
    bxT, sxT = np.swapaxes(bx, 1, 2), np.swapaxes(sx, 1, 2)
    p_bxx = np.einsum("ni,nijk->njk", p, d.b_xx)
    p_sxx = np.einsum("ni,nijk->njk", p, d.sigma_xx)
    q_sxx = np.einsum("ni,nijk->njk", q, d.sigma_xx)
    fy, fz = d.f_y[:, None, None], d.f_z[:, None, None]
    out = (p_bxx + q_sxx + P @ bx + bxT @ P + sxT @ P @ sx + Q @ sx + sxT @ Q
           + fy * P + fz * (p_sxx + P @ sx + sxT @ P + Q))
    # directions of (dx, dy, dz) induced by a state perturbation dx
    M = np.empty((N, n + 2, n))
    M[:, :n, :] = np.eye(n)
    M[:, n, :] = p
    M[:, n + 1, :] = np.einsum("nij,ni->nj", sx, p) + q
    H1 = d.f_xyz_hess
    out = out + 0.5 * np.einsum("nai,nab,nbj->nij", M, H1, M)
    return out


def solve_classical_adjoints(problem: Problem, fwd: ForwardPaths, bwd: BackwardPaths,
                             mc: Optional[McConfig] = None) -> ClassicalAdjoints:
    c = problem.coeffs
    mc = mc or McConfig()
    n_steps, N, n = fwd.n_steps, fwd.n_paths, c.n
    dt = fwd.dt
    p = np.empty((n_steps + 1, N, n))
    q = np.empty((n_steps, N, n))
    P = np.empty((n_steps + 1, N, n, n))
    Q = np.empty((n_steps, N, n, n))
    p[n_steps] = c.phi_x(fwd.X[n_steps])
    PT = c.phi_xx(fwd.X[n_steps])
    P[n_steps] = 0.5 * (PT + np.swapaxes(PT, 1, 2))
    degraded = []
    for k in range(n_steps - 1, -1, -1):
        d = step_derivatives(problem, fwd, bwd, k)
        reg = Regression(fwd.X[k], mc.regression_degree, fwd.dW[k])
        if reg.degraded:
            degraded.append(k)
        p_hat, q[k] = reg.project(p[k + 1])
        P_hat, Q[k] = reg.project(P[k + 1])
        p[k] = p_hat + first_order_generator(d, p_hat, q[k]) * dt
        Pk = P_hat + second_order_generator(d, p_hat, q[k], P_hat, Q[k]) * dt
        P[k] = 0.5 * (Pk + np.swapaxes(Pk, 1, 2))
    chi = exponential_weight(problem, fwd, bwd)
    return ClassicalAdjoints(p=p, q=q, P=P, Q=Q, chi=chi, degraded_steps=sorted(degraded))


def check_ratio_identity(sing: SingularAdjoint, cls: ClassicalAdjoints) -> float:
    """max over steps, paths and components of |p + sp / sq| / (1 + |p|)."""
    sq = sing.frak_q
    if np.any(~(sq > 0)):
        k, i = np.argwhere(~(sq > 0))[0]
        raise ValueError(f"nonpositive exponential weight at step {k}, path {i}; adjoint solve failed")
    dev = np.abs(cls.p + sing.frak_p / sq[..., None]) / (1.0 + np.abs(cls.p))
    return float(dev.max())


def export_adjoints_csv(path, times, sing: SingularAdjoint, cls: ClassicalAdjoints,
                        max_paths: Optional[int] = None) -> None:
    """Columns ``t, path_id, frak_p..., frak_q, p..., q..., P..., Q..., chi``."""
    n = cls.p.shape[2]
    N = cls.p.shape[1] if max_paths is None else min(max_paths, cls.p.shape[1])
    n_steps = cls.q.shape[0]
    header = (["t", "path_id"] + [f"frak_p{i}" for i in range(n)] + ["frak_q"]
              + [f"p{i}" for i in range(n)] + [f"q{i}" for i in range(n)]
              + [f"P{i}{j}" for i in range(n) for j in range(n)]
              + [f"Q{i}{j}" for i in range(n) for j in range(n)] + ["chi"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k, t in enumerate(times):
            last = k == n_steps
            for i in range(N):
                row = [repr(float(t)), i]
                row += [repr(float(v)) for v in sing.frak_p[k, i]]
                row.append(repr(float(sing.frak_q[k, i])))
                row += [repr(float(v)) for v in cls.p[k, i]]
                row += [""] * n if last else [repr(float(v)) for v in cls.q[k, i]]
                row += [repr(float(v)) for v in cls.P[k, i].ravel()]
                row += [""] * (n * n) if last else [repr(float(v)) for v in cls.Q[k, i].ravel()]
                row.append(repr(float(cls.chi[k, i])))
                w.writerow(row)
