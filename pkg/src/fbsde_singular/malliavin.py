"""Finite-difference Malliavin derivatives and martingale-representation kernels.

A *functional* is a pure callable ``dW -> values`` mapping Brownian increments
of shape ``(n_steps, N)`` to a process on the grid, shape ``(n_steps + 1, N)``.
Shifting the Brownian path by ``eps`` on ``(t_theta, T]`` changes only the
increment ``dW[theta]``, so the derivative at ``theta`` is a one-increment bump::

    D_theta phi(t_j) ~ [phi_j(dW + eps e_theta) - phi_j(dW)] / eps,   j > theta

and ``D_theta phi(t_j) = 0`` for ``j <= theta`` (the value at ``t_theta`` does
not see ``dW[theta]``). The diagonal operator uses one step to the right::

    nabla phi(t_i) ~ D_{t_i} phi(t_{i+1})
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .simulate import ForwardPaths, McConfig


@dataclass(frozen=True)
class MalliavinConfig:
    eps: Optional[float] = None      # None -> 1e-3 * sqrt(dt)
    mode: str = "bump"               # 'bump' or 'closed_form'

    def __post_init__(self):
        if self.eps is not None and not self.eps > 0:
            raise ValueError("bump size must be positive")
        if self.mode not in ("bump", "closed_form"):
            raise ValueError("mode must be 'bump' or 'closed_form'")

    def bump(self, dt: float) -> float:
        return self.eps if self.eps is not None else 1e-3 * np.sqrt(dt)


def _evaluate(functional: Callable, dW: np.ndarray) -> np.ndarray:
    out = np.asarray(functional(dW), dtype=float)
    if out.shape != (dW.shape[0] + 1, dW.shape[1]):
        raise ValueError(f"functional returned shape {out.shape}, "
                         f"expected {(dW.shape[0] + 1, dW.shape[1])}")
    return out


def _base(functional, dW):
    if functional is None or not callable(functional):
        raise TypeError("a re-simulation closure dW -> process is required")
    first = _evaluate(functional, dW.copy())
    second = _evaluate(functional, dW.copy())
    if not np.array_equal(first, second):
        raise RuntimeError("functional is not reproducible: two evaluations on the same "
                           "increments differ")
    return first


def malliavin_derivative_fd(functional: Callable, dW: np.ndarray, theta: int, dt: float,
                            config: MalliavinConfig = MalliavinConfig()) -> np.ndarray:
    """Bump estimate of D_theta phi(t_j) for all grid indices j, shape (n_steps + 1, N)."""
    n_steps = dW.shape[0]
    if not 0 <= theta < n_steps:
        raise ValueError("theta must index a Brownian increment")
    base = _base(functional, dW)
    eps = config.bump(dt)
    bumped = dW.copy()
    bumped[theta] += eps
    out = (_evaluate(functional, bumped) - base) / eps
    out[:theta + 1] = 0.0
    return out


def nabla(functional: Optional[Callable], dW: np.ndarray, dt: float,
          config: MalliavinConfig = MalliavinConfig(),
          oracle: Optional[Callable] = None) -> np.ndarray:
    """Right-diagonal derivative nabla phi(t_i), shape (n_steps, N).

    In ``closed_form`` mode ``oracle(dW)`` supplies the values directly. The
    one-step diagonal stands in for the limiting construction; it is exact only
    to O(dt) on smooth test families.
    """
    n_steps, N = dW.shape
    if config.mode == "closed_form":
        if oracle is None:
            raise ValueError("closed_form mode needs an oracle")
        out = np.asarray(oracle(dW), dtype=float)
        return np.broadcast_to(out, (n_steps, N)).copy()
    base = _base(functional, dW)
    eps = config.bump(dt)
    out = np.empty((n_steps, N))
    for i in range(n_steps):
        bumped = dW.copy()
        bumped[i] += eps
        out[i] = (_evaluate(functional, bumped)[i + 1] - base[i + 1]) / eps
    return out


def zero_oracle(dW: np.ndarray) -> np.ndarray:
    """Closed form for deterministic adapted processes."""
    return np.zeros_like(dW)


# ---------------------------------------------------------------------------
# martingale representation
# ---------------------------------------------------------------------------

def _raw_basis(x: np.ndarray, degree: int) -> np.ndarray:
    N = x.shape[0]
    x = x.reshape(N, -1)
    keep = x.std(axis=0) > 1e-12 * (1.0 + np.abs(x.mean(axis=0)))
    x = x[:, keep]
    cols = [np.ones(N)]
    if x.shape[1]:
        for deg in range(1, degree + 1):
            for idx in itertools.combinations_with_replacement(range(x.shape[1]), deg):
                cols.append(np.prod(x[:, idx], axis=1))
    return np.stack(cols, axis=1)


@dataclass
class KernelEstimate:
    """psi(s, t) ~ coef(s, t) . basis(X_s) for s < t (grid indices)."""
    coefs: dict
    ses: dict
    residuals: dict
    means: dict
    degree: int
    X: np.ndarray
    dW: np.ndarray
    degraded: list = field(default_factory=list)

    def values(self, s: int, t: int) -> np.ndarray:
        if s >= t:
            raise ValueError("kernel is only defined for s < t")
        return _raw_basis(self.X[s], self.degree)[:, :self.coefs[(s, t)].size] @ self.coefs[(s, t)]

    def reconstruct(self, t: int) -> np.ndarray:
        """E[phi(t)] + sum_{s<t} psi(s, t) dW_s, per path."""
        out = np.full(self.X.shape[1], self.means[t])
        for s in range(t):
            out = out + self.values(s, t) * self.dW[s]
        return out


def martingale_kernel(target: np.ndarray, fwd: ForwardPaths, mc: Optional[McConfig] = None,
                      pairs: Optional[Iterable] = None, degree: Optional[int] = None) -> KernelEstimate:
    """Estimate the integrand of phi(t) = E phi(t) + int_0^t psi(s, t) dW(s).

    ``target`` has shape (n_steps + 1, N). For each t the martingale
    ``M_s = E[phi(t) | X_s]`` is built backwards one step at a time by regressing
    ``M_{s+1}`` on ``[B(X_s), dW_s B(X_s)]`` with ``B`` the raw monomials of ``X_s``.
    The first block gives ``M_s``; the second gives
    ``psi(s, t) = E[M_{s+1} dW_s | X_s] / dt`` as coefficients on ``B``, with
    heteroskedasticity-robust (HC0) standard errors.
    """
    mc = mc or McConfig()
    degree = mc.regression_degree if degree is None else degree
    target = np.asarray(target, dtype=float)
    n_steps, N = fwd.n_steps, fwd.n_paths
    if target.shape != (n_steps + 1, N):
        raise ValueError("target must have shape (n_steps + 1, n_paths)")
    if pairs is None:
        pairs = [(s, t) for t in range(1, n_steps + 1) for s in range(t)]
    by_t: dict = {}
    for s, t in pairs:
        if not 0 <= s < t <= n_steps:
            raise ValueError(f"invalid kernel pair {(s, t)}")
        by_t.setdefault(t, set()).add(s)
    coefs, ses, residuals, means = {}, {}, {}, {}
    degraded = []
    for t, s_set in sorted(by_t.items()):
        means[t] = float(target[t].mean())
        M = target[t]
        for s in range(t - 1, min(s_set) - 1, -1):
            B = _raw_basis(fwd.X[s], degree)
            nb = B.shape[1]
            dw = fwd.dW[s][:, None]
            D = np.hstack([B, B * dw])
            coef, _, rank, _ = np.linalg.lstsq(D, M, rcond=None)
            if rank < D.shape[1]:
                degraded.append((s, t))
            e = M - D @ coef
            if s in s_set:
                bread = np.linalg.pinv(D.T @ D)
                meat = (D * (e ** 2)[:, None]).T @ D
                cov = bread @ meat @ bread
                coefs[(s, t)] = coef[nb:]
                ses[(s, t)] = np.sqrt(np.maximum(np.diag(cov)[nb:], 0.0))
                residuals[(s, t)] = float(np.mean(e ** 2))
            M = B @ coef[:nb]
    for t in range(n_steps + 1):
        means.setdefault(t, float(target[t].mean()))
    return KernelEstimate(coefs=coefs, ses=ses, residuals=residuals, means=means,
                          degree=degree, X=fwd.X, dW=fwd.dW, degraded=degraded)
