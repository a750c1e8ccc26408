"""First-order Bellman targets: y together with grad_s y and grad_a y.

Both builders chain the bootstrap gradient through the simulator Jacobians:

    dy/ds = dr/ds + gamma * c @ df/ds,    dy/da = dr/da + gamma * c @ df/da

where ``c = grad_{s'} Q_targ + (d a'/d s')^T grad_{a'} Q_targ``.  The
max-target variant treats the grid argmax ``a'`` as a constant, so the second
term of ``c`` is absent.  Target networks are only ever evaluated here; they
never appear on the learner's tape.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .diffcore import DimensionError
from .envs import TransitionBatch, TransitionRecord


@dataclass(frozen=True)
class FirstOrderTarget:
    y: float
    dy_ds: np.ndarray
    dy_da: np.ndarray
    a_prime: np.ndarray
    a_prime_interior: bool
    kind: str = "max"


@dataclass
class FirstOrderTargetBatch:
    y: np.ndarray          # (B,)
    dy_ds: np.ndarray      # (B, n)
    dy_da: np.ndarray      # (B, m)
    a_prime: np.ndarray    # (B, m)
    interior: np.ndarray   # (B,) bool
    kind: str = "max"

    def __len__(self):
        return self.y.shape[0]

    def __getitem__(self, i: int) -> FirstOrderTarget:
        return FirstOrderTarget(float(self.y[i]), self.dy_ds[i].copy(), self.dy_da[i].copy(),
                                self.a_prime[i].copy(), bool(self.interior[i]), self.kind)


def chain_target_gradients(batch: TransitionBatch, gamma: float, grad_s_next: np.ndarray,
                           grad_a_next: np.ndarray | None = None,
                           da_ds_next: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Chain rule through the dynamics for a batch.

    ``da_ds_next`` is ``d a' / d s'`` with shape (m, n) or (B, m, n); leaving it
    as None is the stop-gradient case.
    """
    c = grad_s_next
    if da_ds_next is not None:
        da = np.asarray(da_ds_next, dtype=np.float64)
        if da.ndim == 2:
            c = c + grad_a_next @ da
        else:
            c = c + np.einsum("bm,bmn->bn", grad_a_next, da)
    dy_ds = batch.dr_ds + gamma * np.einsum("bi,bij->bj", c, batch.df_ds)
    dy_da = batch.dr_da + gamma * np.einsum("bi,bij->bj", c, batch.df_da)
    return dy_ds, dy_da


def _action_grid(a_grid, action_dim: int) -> np.ndarray:
    grid = np.asarray(a_grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("action grid is empty")
    grid = grid.reshape(-1, action_dim) if grid.ndim == 1 else grid
    if grid.shape[1] != action_dim:
        raise DimensionError(f"action grid has width {grid.shape[1]}, expected {action_dim}")
    return grid


def grid_argmax(model, params, states: np.ndarray, a_grid,
                search_dtype=np.float64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-state argmax of Q over the grid; ties go to the first (smallest) grid action.

    Returns ``(index, max value, unique-and-interior flag)``.  With a reduced
    ``search_dtype`` only the search runs in that precision; the returned
    values are recomputed in float64 at the chosen actions.
    """
    grid = _action_grid(a_grid, model.action_dim)
    states = np.asarray(states, dtype=np.float64).reshape(-1, model.state_dim)
    b, g = states.shape[0], grid.shape[0]
    if hasattr(model, "grid_values"):
        qs = model.grid_values(params, states, grid, dtype=search_dtype)
    else:
        qs = model.values(params, np.repeat(states, g, axis=0), np.tile(grid, (b, 1))).reshape(b, g)
    idx = qs.argmax(axis=1)
    best = qs[np.arange(b), idx]
    unique = (qs == best[:, None]).sum(axis=1) == 1
    interior = unique & (idx > 0) & (idx < g - 1)
    if qs.dtype != np.float64:
        best = model.values(params, states, grid[idx])
    return idx, np.asarray(best, dtype=np.float64), interior


def max_targets(model, params, batch: TransitionBatch, gamma: float, a_grid,
                search_dtype=np.float64) -> FirstOrderTargetBatch:
    """``y = r + gamma max_{a'} Q_targ(s', a')`` with stop-gradient through ``a'``."""
    grid = _action_grid(a_grid, model.action_dim)
    idx, best, interior = grid_argmax(model, params, batch.s_next, grid, search_dtype)
    a_prime = grid[idx]
    y = batch.r + gamma * best
    _, gs_next, _ = model.evaluate(params, batch.s_next, a_prime)
    dy_ds, dy_da = chain_target_gradients(batch, gamma, gs_next)
    return FirstOrderTargetBatch(y, dy_ds, dy_da, a_prime, interior, "max")


def actor_targets(model, params, actor, actor_params, batch: TransitionBatch,
                  gamma: float) -> FirstOrderTargetBatch:
    """``y = r + gamma Q_targ(s', mu_targ(s'))`` with the full chain rule through mu."""
    a_prime = actor.act(actor_params, batch.s_next)
    da_ds = actor_params.view("K")
    q_next, gs_next, ga_next = model.evaluate(params, batch.s_next, a_prime)
    y = batch.r + gamma * q_next
    dy_ds, dy_da = chain_target_gradients(batch, gamma, gs_next, ga_next, da_ds)
    return FirstOrderTargetBatch(y, dy_ds, dy_da, a_prime, np.ones(len(y), dtype=bool), "actor")


def max_target(model, params, trans: TransitionRecord, gamma: float, a_grid) -> FirstOrderTarget:
    return max_targets(model, params, TransitionBatch.from_records([trans]), gamma, a_grid)[0]


def actor_target(model, params, actor, actor_params, trans: TransitionRecord, gamma: float) -> FirstOrderTarget:
    return actor_targets(model, params, actor, actor_params, TransitionBatch.from_records([trans]), gamma)[0]


def target_gradient_consistency_check(target_fn: Callable[[TransitionRecord], FirstOrderTarget], env,
                                      points: Iterable, h: float = 1e-5) -> float:
    """Worst absolute gap between (dy/ds, dy/da) and central differences of y.

    ``target_fn`` maps a transition record to a target.  For max targets only
    points whose argmax is unique, interior, and unchanged by every
    perturbation are scored.  Returns NaN when no point qualifies.
    """
    n, m = env.state_dim, env.action_dim
    worst = -np.inf
    for s, a in points:
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        a = np.atleast_1d(np.asarray(a, dtype=np.float64))
        base = target_fn(env.transition(s, a))
        screen = base.kind == "max"
        if screen and not base.a_prime_interior:
            continue
        x = np.concatenate([s, a])
        fd = np.empty(n + m)
        stable = True
        for i in range(n + m):
            ys = []
            for sign in (1.0, -1.0):
                xp = x.copy()
                xp[i] += sign * h
                t = target_fn(env.transition(xp[:n], xp[n:]))
                if screen and not np.array_equal(t.a_prime, base.a_prime):
                    stable = False
                ys.append(t.y)
            fd[i] = (ys[0] - ys[1]) / (2.0 * h)
        if not stable:
            continue
        analytic = np.concatenate([base.dy_ds, base.dy_da])
        worst = max(worst, float(np.abs(analytic - fd).max()))
    return float("nan") if worst == -np.inf else worst
