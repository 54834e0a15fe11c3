"""Problem definitions: grids, control sets, coefficient families and checks.

Coefficients are vectorised over Monte Carlo samples. With ``N`` samples,
state dimension ``n``, control dimension ``k`` and ``m`` singular directions,
the callables follow these shapes::

    b(t, x, u), sigma(t, x, u)      -> (N, n)        x: (N, n), u: (N, k)
    b_x, sigma_x                    -> (N, n, n)     [i, j] = d b_i / d x_j
    b_u, sigma_u                    -> (N, n, k)
    b_xx, sigma_xx                  -> (N, n, n, n)
    b_xu, sigma_xu                  -> (N, n, n, k)
    b_uu, sigma_uu                  -> (N, n, k, k)
    f(t, x, y, z, u)                -> (N,)          y, z: (N,)
    f_x (N, n), f_y (N,), f_z (N,), f_u (N, k)
    f_hess                          -> (N, d, d)     d = n + 2 + k, order (x, y, z, u)
    phi(x) (N,), phi_x (N, n), phi_xx (N, n, n)
    G(t) -> (n, m), K -> (m,)

The Brownian driver is scalar, so ``sigma`` is a vector in R^n.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import polynomial as npoly

from . import rng as _rng

ORACLES = (
    "b_x", "b_u", "b_xx", "b_xu", "b_uu",
    "sigma_x", "sigma_u", "sigma_xx", "sigma_xu", "sigma_uu",
    "f_x", "f_y", "f_z", "f_u", "f_hess",
    "phi_x", "phi_xx",
)


# ---------------------------------------------------------------------------
# grids and control sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        if not self.t0 < self.T:
            raise ValueError("need t0 < T")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Grid index of the last node not after ``t``."""
        k = int(np.floor((t - self.t0) / self.dt + 1e-9))
        return min(max(k, 0), self.n_steps)


@dataclass(frozen=True)
class ControlRegion:
    """Box ``lower <= u <= upper`` with a tensor search grid."""
    lower: np.ndarray
    upper: np.ndarray
    grid_points: int = 41

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be 1-d arrays of equal length")
        if np.any(lo > hi):
            raise ValueError("control region needs lower <= upper in every dimension")
        if self.grid_points < 1:
            raise ValueError("grid_points must be positive")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, u, atol: float = 1e-12) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self.lower - atol) and np.all(u <= self.upper + atol))

    def clip(self, u) -> np.ndarray:
        return np.clip(u, self.lower, self.upper)

    def candidates(self) -> np.ndarray:
        """Search grid of shape ``(n_candidates, k)`` in lexicographic order."""
        axes = [np.linspace(a, b, self.grid_points) if b > a else np.array([a])
                for a, b in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)


# ---------------------------------------------------------------------------
# coefficients
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoefficientSet:
    n: int
    k: int
    m: int
    b: Callable
    sigma: Callable
    f: Callable
    phi: Callable
    b_x: Callable
    b_u: Callable
    b_xx: Callable
    b_xu: Callable
    b_uu: Callable
    sigma_x: Callable
    sigma_u: Callable
    sigma_xx: Callable
    sigma_xu: Callable
    sigma_uu: Callable
    f_x: Callable
    f_y: Callable
    f_z: Callable
    f_u: Callable
    f_hess: Callable
    phi_x: Callable
    phi_xx: Callable
    G: object
    K: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        K = np.atleast_1d(np.asarray(self.K, dtype=float))
        if K.shape != (self.m,):
            raise ValueError(f"K must have shape ({self.m},)")
        if np.any(K <= 0):
            raise ValueError("every K entry must be strictly positive")
        object.__setattr__(self, "K", K)
        if not callable(self.G):
            G = np.asarray(self.G, dtype=float).reshape(self.n, self.m)
            object.__setattr__(self, "G", G)

    def G_at(self, t: float) -> np.ndarray:
        if callable(self.G):
            return np.asarray(self.G(t), dtype=float).reshape(self.n, self.m)
        return self.G

    def with_oracle(self, **oracles) -> "CoefficientSet":
        """Copy with some entries replaced (used to plant wrong oracles in tests)."""
        return dataclasses.replace(self, **oracles)

    @property
    def hess_dim(self) -> int:
        return self.n + 2 + self.k

    def derivatives(self, t: float, x, y, z, u) -> "PointDerivatives":
        return PointDerivatives.evaluate(self, t, x, y, z, u)


@dataclass
class PointDerivatives:
    """All coefficient values and oracles at a batch of points."""
    b: np.ndarray
    sigma: np.ndarray
    f: np.ndarray
    b_x: np.ndarray
    b_u: np.ndarray
    b_xx: np.ndarray
    b_xu: np.ndarray
    b_uu: np.ndarray
    sigma_x: np.ndarray
    sigma_u: np.ndarray
    sigma_xx: np.ndarray
    sigma_xu: np.ndarray
    sigma_uu: np.ndarray
    f_x: np.ndarray
    f_y: np.ndarray
    f_z: np.ndarray
    f_u: np.ndarray
    f_hess: np.ndarray
    n: int
    k: int

    @classmethod
    def evaluate(cls, c: CoefficientSet, t, x, y, z, u) -> "PointDerivatives":
        return cls(
            b=c.b(t, x, u), sigma=c.sigma(t, x, u), f=c.f(t, x, y, z, u),
            b_x=c.b_x(t, x, u), b_u=c.b_u(t, x, u), b_xx=c.b_xx(t, x, u),
            b_xu=c.b_xu(t, x, u), b_uu=c.b_uu(t, x, u),
            sigma_x=c.sigma_x(t, x, u), sigma_u=c.sigma_u(t, x, u),
            sigma_xx=c.sigma_xx(t, x, u), sigma_xu=c.sigma_xu(t, x, u),
            sigma_uu=c.sigma_uu(t, x, u),
            f_x=c.f_x(t, x, y, z, u), f_y=c.f_y(t, x, y, z, u),
            f_z=c.f_z(t, x, y, z, u), f_u=c.f_u(t, x, y, z, u),
            f_hess=c.f_hess(t, x, y, z, u), n=c.n, k=c.k,
        )

    # blocks of the (x, y, z, u) Hessian of f
    @property
    def f_xyz_hess(self) -> np.ndarray:
        d = self.n + 2
        return self.f_hess[:, :d, :d]

    @property
    def f_zz(self) -> np.ndarray:
        return self.f_hess[:, self.n + 1, self.n + 1]

    @property
    def f_zu(self) -> np.ndarray:
        return self.f_hess[:, self.n + 1, self.n + 2:]

    @property
    def f_yu(self) -> np.ndarray:
        return self.f_hess[:, self.n, self.n + 2:]

    @property
    def f_xu(self) -> np.ndarray:
        return self.f_hess[:, :self.n, self.n + 2:]

    @property
    def f_uu(self) -> np.ndarray:
        return self.f_hess[:, self.n + 2:, self.n + 2:]


# ---------------------------------------------------------------------------
# controls
# ---------------------------------------------------------------------------

class RegularControl:
    """Open-loop array or feedback map ``(t, x) -> u``.

    Open-loop values have shape ``(n_steps, k)`` (same for all paths) or
    ``(n_steps, n_paths, k)``. Feedback outputs are clipped to the region.
    """

    def __init__(self, values=None, feedback: Optional[Callable] = None):
        if (values is None) == (feedback is None):
            raise ValueError("give exactly one of values or feedback")
        self.values = None if values is None else np.asarray(values, dtype=float)
        self.feedback = feedback

    @classmethod
    def constant(cls, value, n_steps: int) -> "RegularControl":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(values=np.broadcast_to(v, (n_steps, v.size)).copy())

    @property
    def is_feedback(self) -> bool:
        return self.feedback is not None

    def at(self, k: int, t: float, x: np.ndarray, region: ControlRegion) -> np.ndarray:
        n_paths = x.shape[0]
        if self.feedback is not None:
            u = np.asarray(self.feedback(t, x), dtype=float).reshape(n_paths, region.dim)
            return region.clip(u)
        v = self.values[k]
        if v.ndim == 1:
            return np.broadcast_to(v, (n_paths, v.size)).copy()
        return v.copy()

    def check_region(self, region: ControlRegion) -> None:
        if self.values is not None and not region.contains(self.values):
            bad = np.argwhere((self.values < region.lower - 1e-12)
                              | (self.values > region.upper + 1e-12))
            raise ValueError(f"open-loop control leaves the control region at index {tuple(bad[0])}")


class SingularControlPath:
    """Nondecreasing singular control stored through its grid increments.

    ``increments`` has shape ``(n_steps, m)`` or ``(n_steps, n_paths, m)``;
    mass ``increments[k]`` acts at ``t_k`` and moves the state from step k on.
    """

    def __init__(self, increments):
        inc = np.asarray(increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        if inc.ndim not in (2, 3):
            raise ValueError("increments must have shape (n_steps, m) or (n_steps, n_paths, m)")
        if not np.all(np.isfinite(inc)):
            raise ValueError("singular increments must be finite")
        if np.any(inc < 0):
            raise ValueError("singular increments must be nonnegative")
        self.increments = inc

    @classmethod
    def zeros(cls, n_steps: int, m: int = 1) -> "SingularControlPath":
        return cls(np.zeros((n_steps, m)))

    @classmethod
    def atom(cls, n_steps: int, step: int, mass: float, m: int = 1,
             component: int = 0) -> "SingularControlPath":
        inc = np.zeros((n_steps, m))
        inc[step, component] = mass
        return cls(inc)

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    @property
    def m(self) -> int:
        return self.increments.shape[-1]

    @property
    def cumulative(self) -> np.ndarray:
        """xi[0] = 0 and xi[k] = sum of increments before step k."""
        z = np.zeros((1,) + self.increments.shape[1:])
        return np.concatenate([z, np.cumsum(self.increments, axis=0)], axis=0)

    def increment(self, k: int, t: float, x: np.ndarray) -> np.ndarray:
        v = self.increments[k]
        if v.ndim == 1:
            return np.broadcast_to(v, (x.shape[0], v.size)).copy()
        return v.copy()


def convex_combination(xi_bar: SingularControlPath, xi: SingularControlPath,
                       alpha: float) -> SingularControlPath:
    """Perturbed singular control xi_bar + alpha (xi - xi_bar)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    a, b = np.broadcast_arrays(xi_bar.increments, xi.increments)
    return SingularControlPath(np.maximum((1 - alpha) * a + alpha * b, 0.0))


def classify_increments(dxi, jump_threshold: float) -> np.ndarray:
    """Label each step 'jump' when |dxi[k]| exceeds the threshold, else 'diffuse'."""
    if jump_threshold < 0:
        raise ValueError("jump_threshold must be nonnegative")
    inc = dxi.increments if isinstance(dxi, SingularControlPath) else np.asarray(dxi, float)
    if inc.ndim == 1:
        size = np.abs(inc)
    else:
        size = np.linalg.norm(inc, axis=-1)
    return np.where(size > jump_threshold, "jump", "diffuse")


# ---------------------------------------------------------------------------
# problem
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Problem:
    coeffs: CoefficientSet
    region: ControlRegion
    grid: TimeGrid
    x0: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.shape != (self.coeffs.n,):
            raise ValueError(f"x0 must have shape ({self.coeffs.n},)")
        if self.region.dim != self.coeffs.k:
            raise ValueError("control region dimension does not match k")
        object.__setattr__(self, "x0", x0)

    @property
    def name(self) -> str:
        return self.coeffs.name

    def with_grid(self, n_steps: Optional[int] = None, T: Optional[float] = None) -> "Problem":
        g = TimeGrid(self.grid.t0, self.grid.T if T is None else T,
                     self.grid.n_steps if n_steps is None else n_steps)
        return dataclasses.replace(self, grid=g)

    def with_coeffs(self, coeffs: CoefficientSet) -> "Problem":
        return dataclasses.replace(self, coeffs=coeffs)


# ---------------------------------------------------------------------------
# coefficient families
# ---------------------------------------------------------------------------

def _n(x):
    return x.shape[0]


def linear_quadratic(n: int = 1, k: int = 1, m: int = 1, *, A=None, B=None, b0=None,
                     C=None, D=None, s0=None, fx=None, fy=0.0, fz=0.0, fu=None,
                     f0=0.0, Hf=None, c_phi=None, phi0=0.0, M=None, G=None, K=None,
                     name: str = "quadratic") -> CoefficientSet:
    """Affine dynamics with a quadratic generator and terminal cost.

    b = A x + B u + b0, sigma = C x + D u + s0,
    f = <g, w> + f0 + 1/2 w' Hf w with w = (x, y, z, u), g = (fx, fy, fz, fu),
    phi = <c_phi, x> + phi0 + 1/2 x' M x.
    """
    def arr(v, shape):
        return np.zeros(shape) if v is None else np.asarray(v, dtype=float).reshape(shape)

    A, B, b0 = arr(A, (n, n)), arr(B, (n, k)), arr(b0, (n,))
    C, D, s0 = arr(C, (n, n)), arr(D, (n, k)), arr(s0, (n,))
    d = n + 2 + k
    g = np.concatenate([arr(fx, (n,)), [float(fy), float(fz)], arr(fu, (k,))])
    H = arr(Hf, (d, d))
    H = 0.5 * (H + H.T)
    c_phi, M = arr(c_phi, (n,)), arr(M, (n, n))
    M = 0.5 * (M + M.T)
    G = np.zeros((n, m)) if G is None else np.asarray(G, dtype=float).reshape(n, m)
    K = np.ones(m) if K is None else np.asarray(K, dtype=float).reshape(m)
    f0 = float(f0)
    phi0 = float(phi0)

    def stack(x, y, z, u):
        return np.concatenate([x, np.asarray(y)[:, None], np.asarray(z)[:, None], u], axis=1)

    def grad(t, x, y, z, u):
        return g + stack(x, y, z, u) @ H

    return CoefficientSet(
        n=n, k=k, m=m,
        b=lambda t, x, u: x @ A.T + u @ B.T + b0,
        sigma=lambda t, x, u: x @ C.T + u @ D.T + s0,
        f=lambda t, x, y, z, u: (stack(x, y, z, u) @ g + f0
                                 + 0.5 * np.einsum("ni,ij,nj->n", stack(x, y, z, u), H, stack(x, y, z, u))),
        phi=lambda x: x @ c_phi + phi0 + 0.5 * np.einsum("ni,ij,nj->n", x, M, x),
        b_x=lambda t, x, u: np.broadcast_to(A, (_n(x), n, n)).copy(),
        b_u=lambda t, x, u: np.broadcast_to(B, (_n(x), n, k)).copy(),
        b_xx=lambda t, x, u: np.zeros((_n(x), n, n, n)),
        b_xu=lambda t, x, u: np.zeros((_n(x), n, n, k)),
        b_uu=lambda t, x, u: np.zeros((_n(x), n, k, k)),
        sigma_x=lambda t, x, u: np.broadcast_to(C, (_n(x), n, n)).copy(),
        sigma_u=lambda t, x, u: np.broadcast_to(D, (_n(x), n, k)).copy(),
        sigma_xx=lambda t, x, u: np.zeros((_n(x), n, n, n)),
        sigma_xu=lambda t, x, u: np.zeros((_n(x), n, n, k)),
        sigma_uu=lambda t, x, u: np.zeros((_n(x), n, k, k)),
        f_x=lambda t, x, y, z, u: grad(t, x, y, z, u)[:, :n],
        f_y=lambda t, x, y, z, u: grad(t, x, y, z, u)[:, n],
        f_z=lambda t, x, y, z, u: grad(t, x, y, z, u)[:, n + 1],
        f_u=lambda t, x, y, z, u: grad(t, x, y, z, u)[:, n + 2:],
        f_hess=lambda t, x, y, z, u: np.broadcast_to(H, (_n(x), d, d)).copy(),
        phi_x=lambda x: c_phi + x @ M,
        phi_xx=lambda x: np.broadcast_to(M, (_n(x), n, n)).copy(),
        G=G, K=K, name=name,
    )


def affine(n: int = 1, k: int = 1, m: int = 1, **params) -> CoefficientSet:
    """Affine family: :func:`linear_quadratic` with no quadratic terms."""
    for key in ("Hf", "M"):
        if params.get(key) is not None:
            raise ValueError(f"affine family does not take {key}")
    params.setdefault("name", "affine")
    return linear_quadratic(n, k, m, **params)


def _poly2(c):
    c = np.atleast_2d(np.asarray(c, dtype=float))
    return c


def polynomial_scalar(b_coef, sigma_coef, f_coef=None, fy: float = 0.0, fz: float = 0.0,
                      phi_coef=None, G=0.0, K=1.0, name: str = "polynomial") -> CoefficientSet:
    """Scalar (n = k = m = 1) polynomial family.

    ``b = sum_ij b_coef[i, j] x^i u^j`` and the same for sigma;
    ``f = sum_ij f_coef[i, j] x^i u^j + fy y + fz z``; ``phi = sum_i phi_coef[i] x^i``.
    """
    cb, cs = _poly2(b_coef), _poly2(sigma_coef)
    cf = np.zeros((1, 1)) if f_coef is None else _poly2(f_coef)
    cp = np.zeros(1) if phi_coef is None else np.atleast_1d(np.asarray(phi_coef, dtype=float))
    fy, fz = float(fy), float(fz)

    def der(c, dx, du):
        out = c
        if dx:
            out = npoly.polyder(out, dx, axis=0) if out.shape[0] > dx else np.zeros((1, out.shape[1]))
        if du:
            out = npoly.polyder(out, du, axis=1) if out.shape[1] > du else np.zeros((out.shape[0], 1))
        return out

    def ev(c):
        return lambda t, x, u: npoly.polyval2d(x[:, 0], u[:, 0], c)

    def vec(c):
        e = ev(c)
        return lambda t, x, u: e(t, x, u)[:, None]

    def tens(c, shape):
        e = ev(c)
        return lambda t, x, u: e(t, x, u).reshape((-1,) + shape)

    cfx, cfu = der(cf, 1, 0), der(cf, 0, 1)
    cfxx, cfxu, cfuu = der(cf, 2, 0), der(cf, 1, 1), der(cf, 0, 2)

    def f(t, x, y, z, u):
        return npoly.polyval2d(x[:, 0], u[:, 0], cf) + fy * y + fz * z

    def f_hess(t, x, y, z, u):
        N = x.shape[0]
        H = np.zeros((N, 4, 4))
        H[:, 0, 0] = npoly.polyval2d(x[:, 0], u[:, 0], cfxx)
        H[:, 0, 3] = H[:, 3, 0] = npoly.polyval2d(x[:, 0], u[:, 0], cfxu)
        H[:, 3, 3] = npoly.polyval2d(x[:, 0], u[:, 0], cfuu)
        return H

    cpx = npoly.polyder(cp, 1) if cp.size > 1 else np.zeros(1)
    cpxx = npoly.polyder(cp, 2) if cp.size > 2 else np.zeros(1)

    coeffs = {}
    for key, c in (("b", cb), ("sigma", cs)):
        coeffs[key] = vec(c)
        coeffs[f"{key}_x"] = tens(der(c, 1, 0), (1, 1))
        coeffs[f"{key}_u"] = tens(der(c, 0, 1), (1, 1))
        coeffs[f"{key}_xx"] = tens(der(c, 2, 0), (1, 1, 1))
        coeffs[f"{key}_xu"] = tens(der(c, 1, 1), (1, 1, 1))
        coeffs[f"{key}_uu"] = tens(der(c, 0, 2), (1, 1, 1))
    return CoefficientSet(
        n=1, k=1, m=1, f=f,
        phi=lambda x: npoly.polyval(x[:, 0], cp),
        f_x=lambda t, x, y, z, u: npoly.polyval2d(x[:, 0], u[:, 0], cfx)[:, None],
        f_y=lambda t, x, y, z, u: np.full(x.shape[0], fy),
        f_z=lambda t, x, y, z, u: np.full(x.shape[0], fz),
        f_u=lambda t, x, y, z, u: npoly.polyval2d(x[:, 0], u[:, 0], cfu)[:, None],
        f_hess=f_hess,
        phi_x=lambda x: npoly.polyval(x[:, 0], cpx)[:, None],
        phi_xx=lambda x: npoly.polyval(x[:, 0], cpxx).reshape(-1, 1, 1),
        G=np.array([[float(G)]]), K=np.array([float(K)]), name=name, **coeffs,
    )


# ---------------------------------------------------------------------------
# built-in problems
# ---------------------------------------------------------------------------

def make_quadratic_example(T: float = 1.0, n_steps: int = 200) -> Problem:
    """Scalar worked example: b = u, sigma = u, f = u^2, phi = x^2/2, U = [-1, 1].

    The singular direction is inert (G = 0, K = 1) and the optimum is zero.
    """
    coeffs = linear_quadratic(
        1, 1, 1, B=[[1.0]], D=[[1.0]],
        Hf=np.diag([0.0, 0.0, 0.0, 2.0]), M=[[1.0]],
        G=[[0.0]], K=[1.0], name="quadratic_example",
    )
    return Problem(coeffs, ControlRegion([-1.0], [1.0]), TimeGrid(0.0, T, n_steps), np.zeros(1))


def make_cubic_test(T: float = 1.0, n_steps: int = 100) -> Problem:
    """Scalar problem with cubic drift and diffusion, for expansion-order studies."""
    b = np.zeros((4, 4))
    b[0, 1] = 0.5      # 0.5 u
    b[3, 0] = -0.3     # -0.3 x^3
    b[1, 2] = 0.4      # 0.4 x u^2
    b[2, 1] = 0.2      # 0.2 x^2 u
    s = np.zeros((4, 4))
    s[0, 0] = 0.2
    s[1, 1] = 0.3      # 0.3 x u
    s[0, 3] = -0.1     # -0.1 u^3
    s[2, 0] = 0.1      # 0.1 x^2
    f = np.zeros((3, 3))
    f[0, 2] = 1.0      # u^2
    f[2, 0] = 0.5      # 0.5 x^2
    coeffs = polynomial_scalar(b, s, f, fy=0.1, fz=0.2, phi_coef=[0.0, 0.0, 0.5],
                               name="cubic_test")
    return Problem(coeffs, ControlRegion([-2.0], [2.0]), TimeGrid(0.0, T, n_steps), np.array([0.3]))


def make_duality_test(T: float = 1.0, n_steps: int = 10) -> Problem:
    """b = sigma = f = 0, phi = x, G = K = 1."""
    coeffs = affine(1, 1, 1, c_phi=[1.0], G=[[1.0]], K=[1.0], name="duality_test")
    return Problem(coeffs, ControlRegion([-1.0], [1.0]), TimeGrid(0.0, T, n_steps), np.zeros(1))


def make_ratio_test(T: float = 1.0, n_steps: int = 1000) -> Problem:
    """f = z with b = 0, sigma = 1, phi = x."""
    coeffs = affine(1, 1, 1, s0=[1.0], fz=1.0, c_phi=[1.0], name="ratio_test")
    return Problem(coeffs, ControlRegion([-1.0], [1.0]), TimeGrid(0.0, T, n_steps), np.zeros(1))


def make_running_cost(T: float = 1.0, n_steps: int = 100) -> Problem:
    """phi = 0, f = 1, b = sigma = 0, G = 0; value T - t."""
    coeffs = affine(1, 1, 1, f0=1.0, G=[[0.0]], K=[1.0], name="running_cost")
    return Problem(coeffs, ControlRegion([-1.0], [1.0]), TimeGrid(0.0, T, n_steps), np.zeros(1))


def make_big_k(T: float = 1.0, n_steps: int = 50, K: float = 1e3) -> Problem:
    """Linear model with a dominating singular cost K."""
    coeffs = affine(1, 1, 1, A=[[0.2]], B=[[1.0]], s0=[0.3], c_phi=[1.0],
                    G=[[1.0]], K=[K], name="big_k")
    return Problem(coeffs, ControlRegion([-1.0], [1.0]), TimeGrid(0.0, T, n_steps), np.zeros(1))


BUILTIN = {
    "quadratic_example": make_quadratic_example,
    "cubic_test": make_cubic_test,
    "duality_test": make_duality_test,
    "ratio_test": make_ratio_test,
    "running_cost": make_running_cost,
    "big_k": make_big_k,
}


def builtin_problem(name: str, **kw) -> Problem:
    try:
        return BUILTIN[name](**kw)
    except KeyError:
        raise KeyError(f"unknown built-in problem {name!r}; choose from {sorted(BUILTIN)}") from None


# ---------------------------------------------------------------------------
# JSON loading
# ---------------------------------------------------------------------------

_FAMILIES = ("affine", "quadratic", "polynomial", "quadratic_example")


def problem_from_dict(doc: dict) -> Problem:
    """Build a problem from a JSON-style document.

    Required blocks: ``family``; ``grid`` with ``t0, T, n_steps``;
    ``control_region`` with ``u_lower, u_upper``; ``singular`` with ``m, G, K``;
    ``x0``. Family parameters go under ``params``.
    """
    family = doc.get("family")
    if family not in _FAMILIES:
        raise ValueError(f"unknown coefficient family {family!r}; choose from {_FAMILIES}")
    g = doc["grid"]
    grid = TimeGrid(float(g["t0"]), float(g["T"]), int(g["n_steps"]))
    if family == "quadratic_example":
        base = make_quadratic_example(grid.T, grid.n_steps)
        return dataclasses.replace(base, grid=grid, meta=dict(doc))
    cr = doc["control_region"]
    region = ControlRegion(cr["u_lower"], cr["u_upper"], int(cr.get("grid_points", 41)))
    sing = doc["singular"]
    m = int(sing["m"])
    params = dict(doc.get("params", {}))
    x0 = np.atleast_1d(np.asarray(doc["x0"], dtype=float))
    if family == "polynomial":
        coeffs = polynomial_scalar(G=np.asarray(sing["G"], float).ravel()[0],
                                   K=np.asarray(sing["K"], float).ravel()[0],
                                   name=doc.get("name", "polynomial"), **params)
    else:
        n, k = x0.size, region.dim
        builder = affine if family == "affine" else linear_quadratic
        params.setdefault("name", doc.get("name", family))
        coeffs = builder(n, k, m, G=sing["G"], K=sing["K"], **params)
    return Problem(coeffs, region, grid, x0, meta=dict(doc))


def load_problem(source) -> Problem:
    """Built-in name, path to a JSON document, or an existing :class:`Problem`."""
    if isinstance(source, Problem):
        return source
    if isinstance(source, dict):
        return problem_from_dict(source)
    s = str(source)
    if s in BUILTIN:
        return builtin_problem(s)
    path = Path(s)
    if not path.exists():
        raise FileNotFoundError(f"problem {s!r} is neither a built-in name nor a file")
    return problem_from_dict(json.loads(path.read_text()))


# ---------------------------------------------------------------------------
# oracle validation
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    errors: dict
    nonfinite: list
    tol: float
    passed: bool

    def worst(self) -> tuple:
        name = max(self.errors, key=lambda key: self.errors[key])
        return name, self.errors[name]

    def to_dict(self) -> dict:
        return {"errors": dict(self.errors), "nonfinite": list(self.nonfinite),
                "tol": self.tol, "passed": self.passed}


def _central(fun, pts: dict, var: str, j: int, h: np.ndarray):
    up = {key: val.copy() for key, val in pts.items()}
    dn = {key: val.copy() for key, val in pts.items()}
    if up[var].ndim == 1:
        up[var] = up[var] + h
        dn[var] = dn[var] - h
    else:
        up[var][:, j] += h
        dn[var][:, j] -= h
    return (np.asarray(fun(**up)) - np.asarray(fun(**dn))) / (2 * h.reshape((-1,) + (1,) * (np.ndim(fun(**pts)) - 1)))


def _fd_jacobian(fun, pts: dict, var: str, dim: int) -> np.ndarray:
    """Stack central differences along ``var``; derivative axis goes last."""
    base = pts[var]
    cols = []
    for j in range(dim):
        coord = base if base.ndim == 1 else base[:, j]
        h = 1e-5 * (1.0 + np.abs(coord))
        cols.append(_central(fun, pts, var, j, h))
    return np.stack(cols, axis=-1)


def validate_coefficients(problem: Problem, sample_count: int = 100, seed: int = 0,
                          radius: float = 2.0, tol: float = 1e-4) -> ValidationReport:
    """Compare every derivative oracle with central differences of its parent.

    Points are drawn from t in [t0, T], x in x0 +/- radius, y, z in [-radius, radius]
    and u in the control region. Error metric per oracle: the maximum over samples
    and entries of |oracle - fd| / (1 + |fd|).
    """
    if sample_count < 1:
        raise ValueError("sample_count must be at least 1")
    c = problem.coeffs
    n, k = c.n, c.k
    U = _rng.uniform_block(seed, 0, (sample_count, 3 + n + k))
    g = problem.grid
    pts = {
        "t": g.t0 + (g.T - g.t0) * U[:, 0],
        "x": problem.x0 + radius * (2 * U[:, 3:3 + n] - 1),
        "y": radius * (2 * U[:, 1] - 1),
        "z": radius * (2 * U[:, 2] - 1),
        "u": problem.region.lower + (problem.region.upper - problem.region.lower) * U[:, 3 + n:],
    }

    def txu(fn):
        return lambda t, x, u, **_: fn(t, x, u)

    def full(fn):
        return lambda t, x, y, z, u: fn(t, x, y, z, u)

    def xonly(fn):
        return lambda x, **_: fn(x)

    def f_grad(t, x, y, z, u):
        return np.concatenate([c.f_x(t, x, y, z, u), c.f_y(t, x, y, z, u)[:, None],
                               c.f_z(t, x, y, z, u)[:, None], c.f_u(t, x, y, z, u)], axis=1)

    # (oracle name, parent callable, differentiation variable, dim)
    checks = []
    for key in ("b", "sigma"):
        parent = txu(getattr(c, key))
        px = txu(getattr(c, f"{key}_x"))
        pu = txu(getattr(c, f"{key}_u"))
        checks += [(f"{key}_x", parent, "x", n), (f"{key}_u", parent, "u", k),
                   (f"{key}_xx", px, "x", n), (f"{key}_xu", px, "u", k),
                   (f"{key}_uu", pu, "u", k)]
    fparent = full(c.f)
    checks += [("f_x", fparent, "x", n), ("f_y", fparent, "y", 1),
               ("f_z", fparent, "z", 1), ("f_u", fparent, "u", k)]
    checks += [("phi_x", xonly(c.phi), "x", n), ("phi_xx", xonly(c.phi_x), "x", n)]

    errors: dict = {}
    nonfinite: list = []
    call = {"t": pts["t"][0]}

    def evaluate(fn, p):
        # coefficient callables take a scalar time; loop over sample times
        outs = []
        for i in range(sample_count):
            sub = {key: val[i:i + 1] for key, val in p.items()}
            sub["t"] = float(p["t"][i])
            outs.append(np.asarray(fn(**sub)))
        return np.concatenate(outs, axis=0)

    def wrap(fn):
        return lambda **p: evaluate(fn, p)

    # parent values must be finite first
    for label, fn in (("b", txu(c.b)), ("sigma", txu(c.sigma)), ("f", full(c.f)),
                      ("phi", xonly(c.phi))):
        val = wrap(fn)(**pts)
        bad = ~np.isfinite(val.reshape(sample_count, -1)).all(axis=1)
        for i in np.flatnonzero(bad):
            nonfinite.append({"entry": label, "point": {key: np.atleast_1d(v[i]).tolist()
                                                        for key, v in pts.items()}})
    del call

    for name, parent, var, dim in checks:
        oracle = wrap(_oracle_fn(c, name))(**pts)
        fd = _fd_jacobian(wrap(parent), pts, var, dim)
        if var in ("y", "z"):
            fd = fd[..., 0]
        oracle = oracle.reshape(fd.shape)
        finite = np.isfinite(oracle) & np.isfinite(fd)
        if not finite.all():
            i = int(np.argwhere(~finite)[0][0])
            nonfinite.append({"entry": name, "point": {key: np.atleast_1d(v[i]).tolist()
                                                       for key, v in pts.items()}})
            errors[name] = float("inf")
            continue
        errors[name] = float(np.max(np.abs(oracle - fd) / (1.0 + np.abs(fd))))

    # Hessian of f against differences of the stacked gradient
    oracle = wrap(full(c.f_hess))(**pts)
    fd = np.concatenate([
        _fd_jacobian(wrap(full(f_grad)), pts, "x", n),
        _fd_jacobian(wrap(full(f_grad)), pts, "y", 1),
        _fd_jacobian(wrap(full(f_grad)), pts, "z", 1),
        _fd_jacobian(wrap(full(f_grad)), pts, "u", k),
    ], axis=-1)
    if np.isfinite(oracle).all() and np.isfinite(fd).all():
        errors["f_hess"] = float(np.max(np.abs(oracle - fd) / (1.0 + np.abs(fd))))
    else:
        errors["f_hess"] = float("inf")
        nonfinite.append({"entry": "f_hess", "point": None})

    passed = not nonfinite and all(err <= tol for err in errors.values())
    return ValidationReport(errors=errors, nonfinite=nonfinite, tol=tol, passed=passed)


def _oracle_fn(c: CoefficientSet, name: str):
    fn = getattr(c, name)
    if name.startswith(("b_", "sigma_")):
        return lambda t, x, u, **_: fn(t, x, u)
    if name.startswith("f_"):
        return lambda t, x, y, z, u: fn(t, x, y, z, u)
    return lambda x, **_: fn(x)
