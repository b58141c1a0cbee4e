"""Dense strictly convex QP solver (Goldfarb-Idnani dual active set).

    min  1/2 x^T Q x + c^T x
    s.t. A x  = b
         G x <= h

The problem is whitened with the Cholesky factor of Q, so the unconstrained
minimum is the starting point and every iteration keeps the active
constraints' multipliers dual feasible. A thin QR factorization of the
active (whitened) normals is grown by Gram-Schmidt and rebuilt on a drop.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular

logger = logging.getLogger(__name__)


class QpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


@dataclass
class QpResult:
    x: np.ndarray
    eq_multipliers: np.ndarray     # for A x = b, sign convention Q x + c + A^T y + G^T z = 0
    ineq_multipliers: np.ndarray   # z >= 0 for G x <= h
    status: QpStatus
    iterations: int

    @property
    def ok(self) -> bool:
        return self.status is QpStatus.OPTIMAL


class ActiveSetSolver:
    def __init__(self, max_iter: Optional[int] = None, tol: float = 1e-10):
        self.max_iter = max_iter
        self.tol = tol

    def solve(self, Q, c, A=None, b=None, G=None, h=None) -> QpResult:
        """Raises ``numpy.linalg.LinAlgError`` if Q is not positive definite."""
        Q = np.asarray(Q, dtype=float)
        c = np.asarray(c, dtype=float)
        n = c.size
        A = np.zeros((0, n)) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
        b = np.zeros(0) if b is None else np.asarray(b, dtype=float).reshape(-1)
        G = np.zeros((0, n)) if G is None else np.atleast_2d(np.asarray(G, dtype=float))
        h = np.zeros(0) if h is None else np.asarray(h, dtype=float).reshape(-1)
        meq, mineq = A.shape[0], G.shape[0]

        L = np.linalg.cholesky(Q)
        # constraints in the form w_i^T y >= d_i with y = L^T x
        normals = np.vstack([A, -G])
        bounds = np.concatenate([b, -h])
        W = solve_triangular(L, normals.T, lower=True) if normals.size else np.zeros((n, 0))
        y = -solve_triangular(L, c, lower=True)
        m = meq + mineq
        max_iter = self.max_iter or 10 * (n + m) + 50

        active = []                    # constraint indices, in QR column order
        lam = np.zeros(m)              # multipliers of the >= form
        sign = np.ones(m)              # equalities may be flipped to enter as violated
        Q1 = np.zeros((n, 0))
        R = np.zeros((0, 0))
        scale = 1.0 + np.linalg.norm(W, axis=0)

        def rebuild():
            if not active:
                return np.zeros((n, 0)), np.zeros((0, 0))
            q1, r = np.linalg.qr(W[:, active] * sign[active], mode="reduced")
            return q1, r

        iterations = 0
        status = QpStatus.OPTIMAL
        while True:
            slack = W.T @ y - bounds
            p = -1
            # equalities enter first, oriented so that they start out violated
            pending = [i for i in range(meq) if i not in active]
            if pending:
                p = pending[0]
                if slack[p] > 0.0:
                    sign[p] = -1.0
            elif mineq:
                viol = slack[meq:] / scale[meq:]
                if active:
                    viol[[j - meq for j in active if j >= meq]] = np.inf
                k = int(np.argmin(viol))
                if viol[k] < -self.tol:
                    p = meq + k
            if p < 0:
                break

            w_p = sign[p] * W[:, p]
            s_p = sign[p] * slack[p]
            while True:
                if iterations >= max_iter:
                    status = QpStatus.MAX_ITER
                    break
                iterations += 1
                proj = Q1.T @ w_p
                direction = w_p - Q1 @ proj
                direction -= Q1 @ (Q1.T @ direction)
                r = solve_triangular(R, proj) if active else np.zeros(0)
                # largest dual step keeping active inequality multipliers >= 0
                t_dual, k_drop = np.inf, -1
                for j, idx in enumerate(active):
                    if idx >= meq and r[j] > self.tol:
                        ratio = lam[idx] / r[j]
                        if ratio < t_dual:
                            t_dual, k_drop = ratio, j
                dir_sq = float(direction @ direction)
                t_primal = -s_p / dir_sq if dir_sq > (self.tol * np.linalg.norm(w_p)) ** 2 else np.inf

                if not np.isfinite(t_primal) and not np.isfinite(t_dual):
                    status = QpStatus.INFEASIBLE
                    break
                t = min(t_primal, t_dual)
                if np.isfinite(t_primal):
                    y = y + t * direction
                for j, idx in enumerate(active):
                    lam[idx] -= t * r[j]
                lam[p] += t

                if t == t_primal:
                    active.append(p)
                    rho = np.sqrt(dir_sq)
                    R = np.block([[R, proj[:, None]], [np.zeros((1, R.shape[1])), np.array([[rho]])]])
                    Q1 = np.hstack([Q1, (direction / rho)[:, None]])
                    break
                lam[active[k_drop]] = 0.0
                del active[k_drop]
                Q1, R = rebuild()
                s_p = float(w_p @ y - sign[p] * bounds[p])
            if status is not QpStatus.OPTIMAL:
                break

        x = solve_triangular(L.T, y, lower=False)
        lam = lam * sign
        if status is not QpStatus.OPTIMAL:
            logger.debug("QP stopped with status %s after %d iterations", status.value, iterations)
        # y = -lam for equalities (A x = b as w^T y >= b), z = lam for G x <= h
        return QpResult(
            x=x,
            eq_multipliers=-lam[:meq],
            ineq_multipliers=lam[meq:],
            status=status,
            iterations=iterations,
        )
