"""Restarted flexible GMRES with right preconditioning."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_triangular

Operator = Callable[[np.ndarray], np.ndarray]


class DivergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class KrylovParams:
    tol: float = 1e-6
    max_iters: int = 1000
    restart_dim: int = 60

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.restart_dim < 1:
            raise ValueError(f"restart_dim must be >= 1, got {self.restart_dim}")


@dataclass
class SolveStats:
    iterations: int = 0
    final_relres: float = 0.0
    converged: bool = False
    residual_history: list = field(default_factory=list)
    precond_applies: int = 0
    cycle_starts: list = field(default_factory=list)
    orthogonality: list = field(default_factory=list)

    def cycles(self) -> list:
        """Residual history split per restart cycle."""
        bounds = self.cycle_starts + [len(self.residual_history)]
        return [self.residual_history[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


def _identity(x: np.ndarray) -> np.ndarray:
    return x


def fgmres(
    apply_A: Operator,
    apply_M: Optional[Operator],
    b: np.ndarray,
    params: KrylovParams = KrylovParams(),
    x0: Optional[np.ndarray] = None,
    track_orthogonality: bool = False,
) -> tuple[np.ndarray, SolveStats]:
    """Solve ``A x = b`` with FGMRES(m); converged when ``||b - A x|| <= tol ||b||``.

    Arnoldi uses modified Gram-Schmidt. The preconditioned vectors ``z_j``
    are kept so ``apply_M`` may change between iterations. The true
    residual is recomputed at every restart; inside a cycle the Givens
    estimate drives the stopping test.
    """
    b = np.asarray(b, dtype=np.float64)
    n = len(b)
    M = apply_M or _identity
    stats = SolveStats()
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        stats.converged = True
        stats.residual_history.append(0.0)
        stats.cycle_starts.append(0)
        return np.zeros(n), stats
    m = params.restart_dim
    target = params.tol * bnorm

    while True:
        r = b - apply_A(x)
        beta = float(np.linalg.norm(r))
        if not np.isfinite(beta):
            raise DivergenceError("non-finite residual norm")
        stats.final_relres = beta / bnorm
        if beta <= target:
            stats.converged = True
            if not stats.residual_history:
                stats.cycle_starts.append(0)
                stats.residual_history.append(stats.final_relres)
            return x, stats
        if stats.iterations >= params.max_iters:
            return x, stats

        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        stats.cycle_starts.append(len(stats.residual_history))
        stats.residual_history.append(beta / bnorm)
        k = 0
        while k < m and stats.iterations < params.max_iters:
            Z[k] = M(V[k])
            stats.precond_applies += 1
            if not np.all(np.isfinite(Z[k])):
                raise DivergenceError(f"non-finite preconditioned vector in step {stats.iterations + 1}")
            w = apply_A(Z[k])
            wnorm0 = float(np.linalg.norm(w))
            for i in range(k + 1):
                H[i, k] = V[i] @ w
                w = w - H[i, k] * V[i]
            h = float(np.linalg.norm(w))
            if not (np.isfinite(h) and np.all(np.isfinite(H[: k + 1, k]))):
                raise DivergenceError(f"non-finite value in Arnoldi step {stats.iterations + 1}")
            H[k + 1, k] = h
            for i in range(k):
                t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
                H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
                H[i, k] = t
            denom = np.hypot(H[k, k], H[k + 1, k])
            if denom == 0.0:
                cs[k], sn[k] = 1.0, 0.0
            else:
                cs[k], sn[k] = H[k, k] / denom, H[k + 1, k] / denom
            H[k, k] = cs[k] * H[k, k] + sn[k] * H[k + 1, k]
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            stats.iterations += 1
            k += 1
            est = abs(g[k])
            stats.residual_history.append(est / bnorm)
            breakdown = h <= 1e-14 * wnorm0
            if not breakdown:
                V[k] = w / h
            if est <= target or breakdown:
                break

        y = solve_triangular(H[:k, :k], g[:k]) if k else np.zeros(0)
        if track_orthogonality and k:
            Vk = V[: k + (0 if breakdown else 1)]
            stats.orthogonality.append(float(np.abs(Vk @ Vk.T - np.eye(len(Vk))).max()))
        x = x + Z[:k].T @ y
        if breakdown:
            # happy breakdown: the Krylov space is invariant, x is exact up to rounding
            r = b - apply_A(x)
            stats.final_relres = float(np.linalg.norm(r)) / bnorm
            if stats.final_relres <= params.tol:
                stats.converged = True
                return x, stats
