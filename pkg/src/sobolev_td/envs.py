"""Differentiable environments: the 1-D toy control problem and discrete-time LQR.

Every environment exposes ``state_dim``, ``action_dim`` and ``gamma`` plus
batched ``step`` / ``jacobians`` so trainers never special-case an env.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import DimensionError


class OutOfBoundsError(ValueError):
    """State or action outside the environment's box."""


@dataclass(frozen=True)
class EnvJacobians:
    """First-order simulator information at one transition."""

    df_ds: np.ndarray  # (n, n)
    df_da: np.ndarray  # (n, m)
    dr_ds: np.ndarray  # (n,)
    dr_da: np.ndarray  # (m,)


@dataclass(frozen=True)
class TransitionRecord:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    jac: EnvJacobians


@dataclass
class TransitionBatch:
    """Stacked transitions; Jacobian arrays carry a leading batch axis."""

    s: np.ndarray       # (B, n)
    a: np.ndarray       # (B, m)
    r: np.ndarray       # (B,)
    s_next: np.ndarray  # (B, n)
    df_ds: np.ndarray   # (B, n, n)
    df_da: np.ndarray   # (B, n, m)
    dr_ds: np.ndarray   # (B, n)
    dr_da: np.ndarray   # (B, m)

    def __len__(self):
        return self.s.shape[0]

    def record(self, i: int) -> TransitionRecord:
        return TransitionRecord(self.s[i], self.a[i], float(self.r[i]), self.s_next[i],
                                EnvJacobians(self.df_ds[i], self.df_da[i], self.dr_ds[i], self.dr_da[i]))

    @classmethod
    def from_records(cls, records) -> "TransitionBatch":
        records = list(records)
        return cls(
            s=np.array([t.s for t in records], dtype=np.float64),
            a=np.array([t.a for t in records], dtype=np.float64),
            r=np.array([t.r for t in records], dtype=np.float64),
            s_next=np.array([t.s_next for t in records], dtype=np.float64),
            df_ds=np.array([t.jac.df_ds for t in records], dtype=np.float64),
            df_da=np.array([t.jac.df_da for t in records], dtype=np.float64),
            dr_ds=np.array([t.jac.dr_ds for t in records], dtype=np.float64),
            dr_da=np.array([t.jac.dr_da for t in records], dtype=np.float64),
        )


class Env:
    """Shared plumbing; subclasses implement ``_step`` and ``_jacobians`` on 2-D arrays."""

    state_dim: int
    action_dim: int
    gamma: float
    name = "env"

    def _as_batch(self, s, a):
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        s2 = s.reshape(-1, self.state_dim) if s.ndim <= 1 and s.size % self.state_dim == 0 else s
        a2 = a.reshape(-1, self.action_dim) if a.ndim <= 1 and a.size % self.action_dim == 0 else a
        if (s2.ndim != 2 or a2.ndim != 2 or s2.shape[1] != self.state_dim
                or a2.shape[1] != self.action_dim or s2.shape[0] != a2.shape[0]):
            raise DimensionError(
                f"{self.name}: expected state dim {self.state_dim} and action dim "
                f"{self.action_dim}, got shapes {s.shape} and {a.shape}")
        return s2, a2

    def step_batch(self, s, a) -> tuple[np.ndarray, np.ndarray]:
        s, a = self._as_batch(s, a)
        return self._step(s, a)

    def jacobians_batch(self, s, a):
        s, a = self._as_batch(s, a)
        return self._jacobians(s, a)

    def transitions(self, s, a) -> TransitionBatch:
        s, a = self._as_batch(s, a)
        s_next, r = self._step(s, a)
        df_ds, df_da, dr_ds, dr_da = self._jacobians(s, a)
        return TransitionBatch(s, a, r, s_next, df_ds, df_da, dr_ds, dr_da)

    def transition(self, s, a) -> TransitionRecord:
        return self.transitions(np.atleast_1d(s)[None], np.atleast_1d(a)[None]).record(0)

    def jacobians(self, s, a) -> EnvJacobians:
        df_ds, df_da, dr_ds, dr_da = self.jacobians_batch(np.atleast_1d(s)[None], np.atleast_1d(a)[None])
        return EnvJacobians(df_ds[0], df_da[0], dr_ds[0], dr_da[0])


class Toy1DEnv(Env):
    """``s' = a`` and ``r = 0.2 a - (a - s)^2`` on ``s, a in [-1, 1]``.

    Out-of-box inputs are rejected rather than clipped, because clipping would
    make the reported Jacobians wrong at the boundary.
    """

    state_dim = 1
    action_dim = 1
    name = "toy1d"
    low, high = -1.0, 1.0

    def __init__(self, gamma: float = 0.9):
        if not 0.0 <= gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
        self.gamma = float(gamma)

    def _check_box(self, s, a):
        # written as a negated <= so that NaN is rejected too
        if not (np.all(np.abs(s) <= self.high) and np.all(np.abs(a) <= self.high)):
            raise OutOfBoundsError("toy1d states and actions must lie in [-1, 1]")

    @staticmethod
    def reward(s, a):
        return 0.2 * a - (a - s) ** 2

    def _step(self, s, a):
        self._check_box(s, a)
        return a.copy(), self.reward(s[:, 0], a[:, 0])

    def _jacobians(self, s, a):
        self._check_box(s, a)
        b = s.shape[0]
        diff = a[:, 0] - s[:, 0]
        df_ds = np.zeros((b, 1, 1))
        df_da = np.ones((b, 1, 1))
        dr_ds = (2.0 * diff)[:, None]
        dr_da = (0.2 - 2.0 * diff)[:, None]
        return df_ds, df_da, dr_ds, dr_da


def toy1d_step(s: float, a: float) -> tuple[float, float]:
    s_next, r = Toy1DEnv().step_batch([s], [a])
    return float(s_next[0, 0]), float(r[0])


def toy1d_jacobians(s: float, a: float) -> EnvJacobians:
    return Toy1DEnv().jacobians(s, a)


class LqrEnv(Env):
    """Linear dynamics ``s' = A s + B a`` with reward ``-(s'Qs + a'Ra)``."""

    name = "lqr"

    def __init__(self, A, B, Qcost, Rcost, gamma: float = 0.9):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.B = np.atleast_2d(np.asarray(B, dtype=np.float64))
        self.Qcost = np.atleast_2d(np.asarray(Qcost, dtype=np.float64))
        self.Rcost = np.atleast_2d(np.asarray(Rcost, dtype=np.float64))
        n, m = self.B.shape
        if self.A.shape != (n, n) or self.Qcost.shape != (n, n) or self.Rcost.shape != (m, m):
            raise DimensionError("inconsistent LQR matrix shapes")
        if not np.allclose(self.Qcost, self.Qcost.T) or np.linalg.eigvalsh(self.Qcost).min() < -1e-12:
            raise ValueError("Qcost must be symmetric positive semidefinite")
        if not np.allclose(self.Rcost, self.Rcost.T) or np.linalg.eigvalsh(self.Rcost).min() <= 0:
            raise ValueError("Rcost must be symmetric positive definite")
        if not 0.0 <= gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
        self.gamma = float(gamma)
        self.state_dim, self.action_dim = n, m

    @classmethod
    def default(cls) -> "LqrEnv":
        return cls(1.0, 1.0, 1.0, 1.0, gamma=0.9)

    def reward(self, s, a):
        return -(np.einsum("bi,ij,bj->b", s, self.Qcost, s) + np.einsum("bi,ij,bj->b", a, self.Rcost, a))

    def _step(self, s, a):
        return s @ self.A.T + a @ self.B.T, self.reward(s, a)

    def _jacobians(self, s, a):
        b = s.shape[0]
        df_ds = np.broadcast_to(self.A, (b,) + self.A.shape).copy()
        df_da = np.broadcast_to(self.B, (b,) + self.B.shape).copy()
        return df_ds, df_da, -2.0 * s @ self.Qcost, -2.0 * a @ self.Rcost


def lqr_step(env: LqrEnv, s, a) -> tuple[np.ndarray, float]:
    s_next, r = env.step_batch(np.atleast_1d(s)[None], np.atleast_1d(a)[None])
    return s_next[0], float(r[0])


def lqr_jacobians(env: LqrEnv, s, a) -> EnvJacobians:
    return env.jacobians(s, a)
