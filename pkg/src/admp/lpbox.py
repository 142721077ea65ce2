"""lp-box ADMM pieces for binary, cardinality-constrained mask vectors.

The binary set {0,1}^n is replaced by the intersection of the box [0,1]^n
and the sphere ||z - 1/2||^2 = n/4.  A mask vector ``m`` is tied to two
copies ``z1`` (box plus cardinality ``1'z = t``) and ``z2`` (sphere) with
unscaled duals ``u1``, ``u2`` and penalty ``rho``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import InfeasibleError, NumericError

BISECT_TOL = 1e-10
BISECT_MAX_ITER = 200


def project_box_simplex(v, t: float) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``[0,1]^n`` intersected with ``sum(z) = t``.

    Bisection on the shift ``lam`` in ``z = clip(v - lam, 0, 1)``, followed by
    an exact solve for ``lam`` on the final free set.
    """
    v = np.asarray(v, dtype=np.float64)
    n = v.size
    if not (0 <= t <= n):
        raise InfeasibleError(f"cardinality target {t} outside [0, {n}]")
    if t == 0:
        return np.zeros(n)
    if t == n:
        return np.ones(n)
    lo, hi = v.min() - 1.0, v.max()  # sum(clip(v - lo)) = n, sum(clip(v - hi)) = 0
    lam = 0.5 * (lo + hi)
    for _ in range(BISECT_MAX_ITER):
        lam = 0.5 * (lo + hi)
        s = np.clip(v - lam, 0.0, 1.0).sum()
        if abs(s - t) <= BISECT_TOL:
            break
        if s > t:
            lo = lam
        else:
            hi = lam
    z = np.clip(v - lam, 0.0, 1.0)
    free = (z > 0.0) & (z < 1.0)
    if free.any():
        n_upper = int(np.count_nonzero(z >= 1.0))
        lam_exact = (v[free].sum() - (t - n_upper)) / free.sum()
        z_exact = np.clip(v - lam_exact, 0.0, 1.0)
        # keep the polish only if it did not change the active set
        if np.array_equal((z_exact > 0.0) & (z_exact < 1.0), free):
            z = z_exact
    return z


def project_sphere(v) -> np.ndarray:
    """Projection onto the sphere centred at 1/2 with radius sqrt(n)/2.

    The centre itself maps to ``1/2 + sqrt(n)/2 * e_1``.
    """
    v = np.asarray(v, dtype=np.float64)
    n = v.size
    d = v - 0.5
    norm = np.linalg.norm(d)
    radius = math.sqrt(n) / 2.0
    if norm == 0.0:
        out = np.full(n, 0.5)
        out[0] += radius
        return out
    return 0.5 + d * (radius / norm)


@dataclass(frozen=True, eq=False)
class AdmmState:
    t: int
    z1: np.ndarray
    z2: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    rho: float = 1.0

    @property
    def n(self) -> int:
        return self.z1.size

    @classmethod
    def init(cls, m_s, t: int, rho: float = 1.0) -> "AdmmState":
        """Zero duals with both copies set to the projections of ``m_s``."""
        m_s = np.asarray(m_s, dtype=np.float64)
        zeros = np.zeros_like(m_s)
        return cls(int(t), project_box_simplex(m_s, t), project_sphere(m_s), zeros, zeros.copy(), float(rho))

    def check(self, tol: float = 1e-9) -> None:
        """Raise AssertionError unless both copies lie on their sets."""
        assert self.z1.min() >= 0.0 and self.z1.max() <= 1.0
        assert abs(self.z1.sum() - self.t) <= tol
        assert abs(np.sum((self.z2 - 0.5) ** 2) - self.n / 4.0) <= tol


def admm_refresh(state: AdmmState, m_s) -> AdmmState:
    """One z-update followed by one dual step ``u <- u + (m_s - z)``."""
    m_s = np.asarray(m_s, dtype=np.float64)
    if m_s.shape != state.z1.shape:
        raise ValueError(f"mask length {m_s.size} does not match state length {state.n}")
    if not np.all(np.isfinite(m_s)):
        raise NumericError("non-finite soft mask passed to admm_refresh")
    # at rho = 0 the scaled duals are taken as zero
    scale = 1.0 / state.rho if state.rho > 0 else 0.0
    z1 = project_box_simplex(m_s + state.u1 * scale, state.t)
    z2 = project_sphere(m_s + state.u2 * scale)
    return replace(state, z1=z1, z2=z2, u1=state.u1 + (m_s - z1), u2=state.u2 + (m_s - z2))


def augmented_terms(state: AdmmState, m_s) -> float:
    """Dual and quadratic penalty terms of the augmented Lagrangian."""
    m_s = np.asarray(m_s, dtype=np.float64)
    r1, r2 = m_s - state.z1, m_s - state.z2
    return float(state.u1 @ r1 + state.u2 @ r2 + 0.5 * state.rho * (r1 @ r1 + r2 @ r2))


def admm_penalty_gradient(state: AdmmState, m_s) -> np.ndarray:
    """Gradient of :func:`augmented_terms` with respect to ``m_s``."""
    m_s = np.asarray(m_s, dtype=np.float64)
    return state.u1 + state.u2 + state.rho * (m_s - state.z1) + state.rho * (m_s - state.z2)


def grow_rho(state: AdmmState, factor: float, rho_max: float) -> AdmmState:
    return replace(state, rho=min(state.rho * factor, rho_max))


def top_t(v, t: int) -> np.ndarray:
    """Binary vector with ones at the ``t`` largest entries, lowest index first on ties."""
    v = np.asarray(v, dtype=np.float64)
    order = np.lexsort((np.arange(v.size), -v))
    out = np.zeros(v.size)
    out[order[:t]] = 1.0
    return out


@dataclass(frozen=True)
class BinaryProgramConfig:
    lr: float = 0.05
    rho: float = 1.0
    rho_growth: float = 1.05
    rho_every: int = 10
    rho_max: float = 10.0
    max_iter: int = 2000
    tol: float = 1e-6


class BinaryProgramResult(NamedTuple):
    x: np.ndarray
    converged: bool
    iterations: int


def solve_binary_program(v, t: int, config: BinaryProgramConfig = BinaryProgramConfig()) -> BinaryProgramResult:
    """Minimise ``||m - v||^2`` over binary ``m`` with ``sum(m) = t`` by lp-box ADMM.

    The continuous iterate is rounded to its top ``t`` coordinates, so the
    answer is feasible whether or not the iteration converged.
    """
    v = np.asarray(v, dtype=np.float64)
    n = v.size
    if not (0 < t <= n <= 20):
        raise InfeasibleError(f"need 0 < t <= n <= 20, got t={t}, n={n}")
    if t == n:
        return BinaryProgramResult(np.ones(n), True, 0)
    m = project_box_simplex(v, t)
    state = AdmmState.init(m, t, config.rho)
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        grad = 2.0 * (m - v) + admm_penalty_gradient(state, m)
        m = m - config.lr * grad
        state = admm_refresh(state, m)
        if it % config.rho_every == 0:
            state = grow_rho(state, config.rho_growth, config.rho_max)
        residual = max(np.abs(m - state.z1).max(), np.abs(m - state.z2).max())
        if residual < config.tol and np.abs(m - np.round(m)).max() < 1e-3:
            converged = True
            break
    return BinaryProgramResult(top_t(m, t), converged, it)
