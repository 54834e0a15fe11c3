"""Monte Carlo engine: Euler forward scheme and least-squares backward solver.

Arrays are time-major. With ``n_steps`` steps and ``N`` paths::

    X    (n_steps + 1, N, n)     dW   (n_steps, N)
    u    (n_steps, N, k)         dxi  (n_steps, N, m)
    Y    (n_steps + 1, N)        Z    (n_steps, N)

Both conditional expectations come from one joint least-squares fit (see
:class:`Regression`). Backward recursion, one step::

    Yhat  = E[Y[k+1] | X_k]
    Z[k]  = E[Y[k+1] dW[k] | X_k] / dt
    Y[k]  = Yhat + f(t_k, X_k, Yhat, Z[k], u[k]) dt + K . dxi[k]

The last term is the discrete form of ``-K dxi`` in the backward equation:
stepping from k+1 back to k adds the singular cost paid at t_k.

Worked two-step table for b = sigma = f = 0, phi(x) = x, G = K = 1, x0 = 0,
and a unit atom at step 0::

    k   X[k]   dxi[k]   Y[k]
    2   1      -        phi(1) = 1
    1   1      0        1 + 0 = 1
    0   0      1        1 + 1 = 2
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

from . import rng as _rng
from .model import Problem, RegularControl, SingularControlPath


@dataclass(frozen=True)
class McConfig:
    n_paths: int = 10_000
    seed: int = 0
    regression_degree: int = 3

    def __post_init__(self):
        if self.n_paths < 2:
            raise ValueError("n_paths must be at least 2")
        if self.regression_degree < 0:
            raise ValueError("regression_degree must be nonnegative")
        if int(self.seed) < 0:
            raise ValueError("seed must be nonnegative")


# ---------------------------------------------------------------------------
# regression
# ---------------------------------------------------------------------------

def _monomials(F: np.ndarray, degree: int) -> np.ndarray:
    N, d = F.shape
    cols = [np.ones(N)]
    for deg in range(1, degree + 1):
        for idx in itertools.combinations_with_replacement(range(d), deg):
            cols.append(np.prod(F[:, idx], axis=1))
    return np.stack(cols, axis=1)


class Regression:
    """Least-squares projection onto polynomials of standardised features.

    Features with (numerically) zero spread are dropped, so a constant state
    gives the plain sample mean. A rank-deficient basis falls back to degree 0
    and sets ``degraded``.

    When Brownian increments ``dW`` are supplied the design is augmented with
    ``dW * basis``. Those columns have zero conditional mean, so the basis part
    of the fit still estimates E[y | X_k], while the increment part estimates
    E[y dW | X_k] / dt and absorbs the O(sqrt(dt)) noise of the target.
    """

    def __init__(self, features: np.ndarray, degree: int = 3,
                 dW: Optional[np.ndarray] = None):
        F = np.asarray(features, dtype=float)
        N = F.shape[0]
        F = F.reshape(N, -1)
        mu = F.mean(axis=0)
        sd = F.std(axis=0)
        keep = sd > 1e-12 * (1.0 + np.abs(mu))
        Fs = (F[:, keep] - mu[keep]) / sd[keep]
        self.degraded = False
        self.degree = degree if keep.any() else 0
        self._dW = None if dW is None else np.asarray(dW, dtype=float).reshape(N)
        basis = _monomials(Fs, self.degree)
        if not self._setup(basis, N):
            self.degraded = True
            self.degree = 0
            if not self._setup(basis[:, :1], N):
                self._dW = None
                self._setup(basis[:, :1], N)

    def _setup(self, basis: np.ndarray, N: int) -> bool:
        design = basis if self._dW is None else np.hstack([basis, basis * self._dW[:, None]])
        if design.shape[1] > N:
            return False
        Q, R = np.linalg.qr(design)
        diag = np.abs(np.diag(R))
        if design.shape[1] > 1 and diag.min() < 1e-10 * diag.max():
            return False
        self._basis, self._Q, self._R = basis, Q, R
        return True

    def _coef(self, flat: np.ndarray) -> np.ndarray:
        return solve_triangular(self._R, self._Q.T @ flat)

    def fit(self, target: np.ndarray) -> np.ndarray:
        """Fitted conditional expectation, same shape as ``target``."""
        return self.project(target)[0]

    def project(self, target: np.ndarray):
        """Return ``(E[y | X_k], E[y dW | X_k] / dt)``, each shaped like ``target``.

        Without increments the second entry is None.
        """
        y = np.asarray(target, dtype=float)
        N = y.shape[0]
        flat = y.reshape(N, -1)
        nb = self._basis.shape[1]
        if self._dW is None and nb == 1:
            mean = np.broadcast_to(flat.mean(axis=0), flat.shape)
            return np.array(mean).reshape(y.shape), None
        coef = self._coef(flat)
        mean = self._basis @ coef[:nb]
        if self._dW is None:
            return mean.reshape(y.shape), None
        z = self._basis @ coef[nb:]
        return mean.reshape(y.shape), z.reshape(y.shape)


# ---------------------------------------------------------------------------
# path containers
# ---------------------------------------------------------------------------

@dataclass
class ForwardPaths:
    X: np.ndarray
    dW: np.ndarray
    u: np.ndarray
    dxi: np.ndarray
    times: np.ndarray
    dt: float

    @property
    def n_steps(self) -> int:
        return self.dW.shape[0]

    @property
    def n_paths(self) -> int:
        return self.dW.shape[1]

    @property
    def W(self) -> np.ndarray:
        """Brownian path on the grid, shape (n_steps + 1, N)."""
        return np.concatenate([np.zeros((1, self.n_paths)), np.cumsum(self.dW, axis=0)])


@dataclass
class BackwardPaths:
    Y: np.ndarray
    Z: np.ndarray
    generator: np.ndarray
    degraded_steps: list = field(default_factory=list)

    @property
    def warning(self) -> bool:
        return bool(self.degraded_steps)


@dataclass
class CostEstimate:
    J: float
    se: float
    forward: ForwardPaths
    backward: BackwardPaths


# ---------------------------------------------------------------------------
# forward scheme
# ---------------------------------------------------------------------------

def draw_increments(problem: Problem, mc: McConfig) -> np.ndarray:
    g = problem.grid
    return _rng.brownian_increments(mc.seed, mc.n_paths, g.n_steps, g.dt)


def _as_control(u, n_steps: int) -> RegularControl:
    if isinstance(u, RegularControl):
        return u
    if callable(u):
        return RegularControl(feedback=u)
    arr = np.asarray(u, dtype=float)
    if arr.ndim <= 1:
        return RegularControl.constant(arr, n_steps)
    return RegularControl(values=arr)


def simulate_forward(problem: Problem, u, xi=None, mc: Optional[McConfig] = None,
                     dW: Optional[np.ndarray] = None) -> ForwardPaths:
    """Euler scheme X[k+1] = X + b dt + sigma dW + G(t_k) dxi[k].

    ``u`` is a :class:`RegularControl`, a constant, an array or a feedback
    callable. ``xi`` is a :class:`SingularControlPath` or any object with an
    ``increment(k, t, x)`` method returning ``(N, m)`` nonnegative pushes.
    ``dW`` overrides the seeded increments (common random numbers, bumps).
    """
    c, g = problem.coeffs, problem.grid
    mc = mc or McConfig()
    ctrl = _as_control(u, g.n_steps)
    ctrl.check_region(problem.region)
    if xi is None:
        xi = SingularControlPath.zeros(g.n_steps, c.m)
    if isinstance(xi, SingularControlPath) and xi.n_steps != g.n_steps:
        raise ValueError("singular control has the wrong number of steps")
    if dW is None:
        dW = draw_increments(problem, mc)
    N = dW.shape[1]
    if dW.shape[0] != g.n_steps:
        raise ValueError("Brownian increments do not match the grid")
    times = g.times
    dt = g.dt
    X = np.empty((g.n_steps + 1, N, c.n))
    U = np.empty((g.n_steps, N, c.k))
    D = np.empty((g.n_steps, N, c.m))
    X[0] = problem.x0
    for k in range(g.n_steps):
        t = times[k]
        x = X[k]
        uk = ctrl.at(k, t, x, problem.region)
        dk = np.asarray(xi.increment(k, t, x), dtype=float).reshape(N, c.m)
        if np.any(dk < 0):
            raise ValueError(f"negative singular increment at step {k}")
        U[k] = uk
        D[k] = dk
        X[k + 1] = (x + c.b(t, x, uk) * dt + c.sigma(t, x, uk) * dW[k][:, None]
                    + dk @ c.G_at(t).T)
        bad = ~np.isfinite(X[k + 1]).all(axis=1)
        if bad.any():
            raise FloatingPointError(
                f"non-finite state at step {k + 1}, path {int(np.flatnonzero(bad)[0])}")
    return ForwardPaths(X=X, dW=dW, u=U, dxi=D, times=times, dt=dt)


# ---------------------------------------------------------------------------
# backward solver
# ---------------------------------------------------------------------------

def solve_bsde(problem: Problem, fwd: ForwardPaths, mc: Optional[McConfig] = None) -> BackwardPaths:
    """Explicit regression scheme for (Y, Z) along ``fwd`` (controls taken from it)."""
    c = problem.coeffs
    mc = mc or McConfig()
    n_steps, N = fwd.n_steps, fwd.n_paths
    dt = fwd.dt
    Y = np.empty((n_steps + 1, N))
    Z = np.empty((n_steps, N))
    F = np.empty((n_steps, N))
    Y[n_steps] = c.phi(fwd.X[n_steps])
    degraded = []
    for k in range(n_steps - 1, -1, -1):
        t = fwd.times[k]
        reg = Regression(fwd.X[k], mc.regression_degree, fwd.dW[k])
        if reg.degraded:
            degraded.append(k)
        y_hat, Z[k] = reg.project(Y[k + 1])
        F[k] = c.f(t, fwd.X[k], y_hat, Z[k], fwd.u[k])
        Y[k] = y_hat + F[k] * dt + fwd.dxi[k] @ c.K
    return BackwardPaths(Y=Y, Z=Z, generator=F, degraded_steps=sorted(degraded))


def realized_cost(problem: Problem, fwd: ForwardPaths, bwd: BackwardPaths) -> np.ndarray:
    """Pathwise phi(X_T) + sum f dt + sum K dxi, using the solved (Y, Z)."""
    c = problem.coeffs
    singular = np.einsum("knm,m->n", fwd.dxi, c.K)
    return c.phi(fwd.X[-1]) + bwd.generator.sum(axis=0) * fwd.dt + singular


def evaluate_cost(problem: Problem, u, xi=None, mc: Optional[McConfig] = None,
                  dW: Optional[np.ndarray] = None) -> CostEstimate:
    """Recursive cost Y[0] with a Monte Carlo standard error.

    ``J`` is the path average of Y[0]. The standard error is the sample
    standard deviation of the realised pathwise cost over sqrt(N).
    """
    mc = mc or McConfig()
    fwd = simulate_forward(problem, u, xi, mc, dW=dW)
    bwd = solve_bsde(problem, fwd, mc)
    cost = realized_cost(problem, fwd, bwd)
    se = float(np.std(cost, ddof=1) / np.sqrt(fwd.n_paths))
    return CostEstimate(J=float(np.mean(bwd.Y[0])), se=se, forward=fwd, backward=bwd)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def export_paths_csv(path, fwd: ForwardPaths, bwd: Optional[BackwardPaths] = None,
                     max_paths: Optional[int] = None) -> None:
    """Write ``t, path_id, X..., Y, Z, u..., dxi...``; step-wise columns are empty at T."""
    n, k, m = fwd.X.shape[2], fwd.u.shape[2], fwd.dxi.shape[2]
    N = fwd.n_paths if max_paths is None else min(max_paths, fwd.n_paths)
    header = (["t", "path_id"] + [f"X{i}" for i in range(n)] + ["Y", "Z"]
              + [f"u{i}" for i in range(k)] + [f"dxi{i}" for i in range(m)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for step, t in enumerate(fwd.times):
            last = step == fwd.n_steps
            for i in range(N):
                row = [repr(float(t)), i] + [repr(float(v)) for v in fwd.X[step, i]]
                row.append(repr(float(bwd.Y[step, i])) if bwd is not None else "")
                row.append("" if last or bwd is None else repr(float(bwd.Z[step, i])))
                row += [""] * k if last else [repr(float(v)) for v in fwd.u[step, i]]
                row += [""] * m if last else [repr(float(v)) for v in fwd.dxi[step, i]]
                w.writerow(row)
