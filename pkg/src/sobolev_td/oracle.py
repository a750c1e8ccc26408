"""Ground truth: grid value iteration for the toy problem, Riccati iteration for LQR.

Sign convention for LQR: rewards are negative costs, ``P`` stores the positive
cost-to-go, so ``V*(s) = -s'Ps`` and the optimal action is ``a* = -K s``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import DimensionError
from .envs import LqrEnv, OutOfBoundsError, Toy1DEnv
from .textio import read_table, write_table


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


# --------------------------------------------------------------------------
# toy problem


@dataclass(frozen=True)
class GridSolution:
    s_grid: np.ndarray
    v_star: np.ndarray
    pi_star: np.ndarray
    gamma: float
    residual: float
    iterations: int = 0

    @property
    def dv_star(self) -> np.ndarray:
        """Centered-difference slope of V* on the grid (one-sided at the ends)."""
        return np.gradient(self.v_star, self.s_grid)

    def save(self, path) -> None:
        rows = np.column_stack([self.s_grid, self.v_star, self.pi_star])
        meta = {"gamma": float(self.gamma), "residual": float(self.residual),
                "iterations": self.iterations, "n_grid": self.s_grid.size}
        write_table(path, "grid-solution", meta, ["s", "v_star", "pi_star"], rows)

    @classmethod
    def load(cls, path) -> "GridSolution":
        meta, _, rows = read_table(path, "grid-solution")
        return cls(rows[:, 0].copy(), rows[:, 1].copy(), rows[:, 2].copy(), float(meta["gamma"]),
                   float(meta["residual"]), int(meta.get("iterations", 0)))


def value_iteration_toy(n_grid: int = 1001, gamma: float = 0.9, tol: float = 1e-12,
                        max_iter: int = 10_000) -> GridSolution:
    """Tabular value iteration with the action grid equal to the state grid.

    Because ``s' = a`` every successor lands on a node, so no interpolation
    enters the backup.  Ties in the argmax go to the smallest action.
    """
    if n_grid < 2:
        raise ValueError("n_grid must be >= 2")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if tol <= 0:
        raise ValueError("tol must be positive")
    grid = np.linspace(-1.0, 1.0, n_grid)
    reward = Toy1DEnv.reward(grid[:, None], grid[None, :])   # [state, action]
    v = np.zeros(n_grid)
    residual = np.inf
    for it in range(1, max_iter + 1):
        v_new = (reward + gamma * v[None, :]).max(axis=1)
        residual = float(np.abs(v_new - v).max())
        v = v_new
        if residual <= tol:
            break
    else:
        raise ConvergenceError(f"value iteration did not reach tol={tol} in {max_iter} iterations", residual)
    pi = grid[(reward + gamma * v[None, :]).argmax(axis=1)]
    return GridSolution(grid, v, pi, float(gamma), residual, it)


def _check_toy_box(*xs):
    for x in xs:
        if not np.all(np.abs(np.asarray(x)) <= 1.0):
            raise OutOfBoundsError("toy1d inputs must lie in [-1, 1]")


def q_star_eval(sol: GridSolution, s, a):
    """``Q*(s, a) = r(s, a) + gamma V*(a)`` with V* linearly interpolated."""
    _check_toy_box(s, a)
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    q = Toy1DEnv.reward(s, a) + sol.gamma * np.interp(a, sol.s_grid, sol.v_star)
    return float(q) if q.ndim == 0 else q


def q_star_grads(sol: GridSolution, s, a) -> tuple[np.ndarray, np.ndarray]:
    """Analytic-in-reward, finite-difference-in-V* gradients of Q*."""
    _check_toy_box(s, a)
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    gs = 2.0 * (a - s)
    ga = 0.2 - 2.0 * (a - s) + sol.gamma * np.interp(a, sol.s_grid, sol.dv_star)
    return gs, ga


class ToyOracle:
    """Uniform ground-truth interface over a :class:`GridSolution`."""

    def __init__(self, sol: GridSolution, env: Toy1DEnv | None = None):
        self.sol = sol
        self.env = env or Toy1DEnv(sol.gamma)

    def q_star(self, s, a):
        return q_star_eval(self.sol, s, a)

    def grad_a_star(self, s, a):
        return q_star_grads(self.sol, s, a)[1]

    def grad_s_star(self, s, a):
        return q_star_grads(self.sol, s, a)[0]

    def policy_star(self, s):
        return np.interp(s, self.sol.s_grid, self.sol.pi_star)

    def v_star(self, s):
        return np.interp(s, self.sol.s_grid, self.sol.v_star)


class TabulatedQStarCritic:
    """Critic that reads Q* from a grid oracle; used for fixed-point checks.

    Exposes the same ``values`` / ``evaluate`` surface as the trainable critics
    but has no parameters (``params`` arguments are ignored).
    """

    state_dim = 1
    action_dim = 1
    kind = "tabulated"

    def __init__(self, sol: GridSolution, offset: float = 0.0):
        self.sol = sol
        self.offset = float(offset)

    def values(self, params, s, a):
        s = np.asarray(s, dtype=np.float64).reshape(-1)
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        return q_star_eval(self.sol, s, a) + self.offset

    def evaluate(self, params, s, a):
        s = np.asarray(s, dtype=np.float64).reshape(-1)
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        gs, ga = q_star_grads(self.sol, s, a)
        return q_star_eval(self.sol, s, a) + self.offset, gs[:, None], ga[:, None]


# --------------------------------------------------------------------------
# LQR


@dataclass(frozen=True)
class RiccatiSolution:
    P: np.ndarray
    K: np.ndarray
    iterations: int
    residual: float

    def save(self, path) -> None:
        n = self.P.shape[0]
        m = self.K.shape[0]
        rows = np.concatenate([self.P.ravel(), self.K.ravel()])[None, :]
        cols = [f"P{i}{j}" for i in range(n) for j in range(n)] + [f"K{i}{j}" for i in range(m) for j in range(n)]
        write_table(path, "riccati-solution", {"n": n, "m": m, "iterations": self.iterations,
                                               "residual": float(self.residual)}, cols, rows)

    @classmethod
    def load(cls, path) -> "RiccatiSolution":
        meta, _, rows = read_table(path, "riccati-solution")
        n, m = int(meta["n"]), int(meta["m"])
        flat = rows[0]
        return cls(flat[:n * n].reshape(n, n).copy(), flat[n * n:].reshape(m, n).copy(),
                   int(meta["iterations"]), float(meta["residual"]))


def riccati_update(P, A, B, Qc, Rc, gamma):
    """One application of the discounted Riccati map."""
    S = Rc + gamma * B.T @ P @ B
    BPA = B.T @ P @ A
    return Qc + gamma * A.T @ P @ A - gamma ** 2 * BPA.T @ np.linalg.solve(S, BPA)


def riccati_gain(P, A, B, Rc, gamma):
    return gamma * np.linalg.solve(Rc + gamma * B.T @ P @ B, B.T @ P @ A)


def riccati_solve(env, tol: float = 1e-12, max_iter: int = 100_000) -> RiccatiSolution:
    """Fixed-point iteration from ``P = 0``.

    ``env`` only needs ``A``, ``B``, ``Qcost``, ``Rcost`` and ``gamma``
    attributes, so undiscounted problems can be solved too.
    """
    A = np.atleast_2d(np.asarray(env.A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(env.B, dtype=np.float64))
    Qc = np.atleast_2d(np.asarray(env.Qcost, dtype=np.float64))
    Rc = np.atleast_2d(np.asarray(env.Rcost, dtype=np.float64))
    gamma = float(env.gamma)
    P = np.zeros_like(Qc)
    prev = np.inf
    rising = 0
    residual = np.inf
    for it in range(1, max_iter + 1):
        P_new = riccati_update(P, A, B, Qc, Rc, gamma)
        P_new = 0.5 * (P_new + P_new.T)
        residual = float(np.abs(P_new - P).max())
        P = P_new
        if not np.isfinite(residual):
            raise ConvergenceError("Riccati iteration produced non-finite values", residual)
        if residual <= tol:
            break
        rising = rising + 1 if residual > prev else 0
        if rising >= 10:
            raise ConvergenceError("Riccati iteration diverges", residual)
        prev = residual
    else:
        raise ConvergenceError(f"Riccati iteration did not reach tol={tol} in {max_iter} iterations", residual)
    return RiccatiSolution(P, riccati_gain(P, A, B, Rc, gamma), it, residual)


def lqr_q_star_eval(env: LqrEnv, sol: RiccatiSolution, s, a) -> tuple[float, np.ndarray, np.ndarray]:
    """Optimal Q and its exact gradients at a single (s, a)."""
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    if s.shape != (env.state_dim,) or a.shape != (env.action_dim,):
        raise DimensionError(f"expected s{(env.state_dim,)} and a{(env.action_dim,)}, got {s.shape}, {a.shape}")
    q, gs, ga = lqr_q_star_batch(env, sol, s[None], a[None])
    return float(q[0]), gs[0], ga[0]


def lqr_q_star_batch(env: LqrEnv, sol: RiccatiSolution, s, a):
    s = np.asarray(s, dtype=np.float64).reshape(-1, env.state_dim)
    a = np.asarray(a, dtype=np.float64).reshape(-1, env.action_dim)
    sn = s @ env.A.T + a @ env.B.T
    Psn = sn @ sol.P
    q = env.reward(s, a) - env.gamma * np.einsum("bi,bi->b", sn, Psn)
    gs = -2.0 * s @ env.Qcost - 2.0 * env.gamma * Psn @ env.A
    ga = -2.0 * a @ env.Rcost - 2.0 * env.gamma * Psn @ env.B
    return q, gs, ga


def lqr_quadratic_coefficients(env: LqrEnv, sol: RiccatiSolution) -> np.ndarray:
    """Q* of a scalar LQR written in the quadratic critic's basis (1, s, a, s^2, sa, a^2)."""
    if env.state_dim != 1 or env.action_dim != 1:
        raise DimensionError("quadratic critic coefficients exist only for scalar LQR")
    A, B, q, r, P, g = (float(env.A[0, 0]), float(env.B[0, 0]), float(env.Qcost[0, 0]),
                        float(env.Rcost[0, 0]), float(sol.P[0, 0]), env.gamma)
    return np.array([0.0, 0.0, 0.0, -(q + g * P * A * A), -2.0 * g * P * A * B, -(r + g * P * B * B)])


class LqrOracle:
    """Uniform ground-truth interface for LQR."""

    def __init__(self, env: LqrEnv, sol: RiccatiSolution):
        self.env = env
        self.sol = sol

    def q_star(self, s, a):
        return lqr_q_star_batch(self.env, self.sol, s, a)[0]

    def grad_a_star(self, s, a):
        return lqr_q_star_batch(self.env, self.sol, s, a)[2]

    def grad_s_star(self, s, a):
        return lqr_q_star_batch(self.env, self.sol, s, a)[1]

    def policy_star(self, s):
        s = np.asarray(s, dtype=np.float64).reshape(-1, self.env.state_dim)
        return -s @ self.sol.K.T

    def v_star(self, s):
        s = np.asarray(s, dtype=np.float64).reshape(-1, self.env.state_dim)
        return -np.einsum("bi,ij,bj->b", s, self.sol.P, s)
