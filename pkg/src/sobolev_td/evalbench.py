"""Critic quality metrics and multi-seed aggregation."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .envs import Toy1DEnv
from .targets import grid_argmax

METRICS = ("q_mse", "grad_a_mse", "policy_err", "mc_return")


@dataclass(frozen=True)
class MetricsRow:
    step: int
    q_mse: float
    grad_a_mse: float
    policy_err: float
    mc_return: float
    seed: int = 0


@dataclass(frozen=True)
class AggregateRow:
    step: int
    n_seeds: int
    q_mse_mean: float
    q_mse_std: float
    grad_a_mse_mean: float
    grad_a_mse_std: float
    policy_err_mean: float
    policy_err_std: float
    mc_return_mean: float
    mc_return_std: float

    def mean(self, metric: str) -> float:
        return getattr(self, f"{metric}_mean")

    def std(self, metric: str) -> float:
        return getattr(self, f"{metric}_std")


def eval_grid(n: int = 51, low: float = -1.0, high: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Flattened uniform n x n grid of (s, a) pairs."""
    u = np.linspace(low, high, n)
    s, a = np.meshgrid(u, u, indexing="ij")
    return s.ravel(), a.ravel()


def q_mse(model, params, oracle, grid=None) -> float:
    s, a = grid if grid is not None else eval_grid()
    diff = model.values(params, s, a) - oracle.q_star(s, a)
    return float(np.mean(diff * diff))


def grad_a_mse(model, params, oracle, grid=None) -> float:
    s, a = grid if grid is not None else eval_grid()
    _, _, ga = model.evaluate(params, s, a)
    diff = ga.reshape(-1) - np.asarray(oracle.grad_a_star(s, a)).reshape(-1)
    return float(np.mean(diff * diff))


class GreedyPolicy:
    """``argmax_a Q(s, a)`` on a fixed action grid, memoized per state value."""

    def __init__(self, model, params, a_grid):
        self.model = model
        self.params = params
        self.a_grid = np.asarray(a_grid, dtype=np.float64)
        self._cache: dict[float, float] = {}

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64).reshape(-1)
        todo = sorted({float(x) for x in s if float(x) not in self._cache})
        if todo:
            idx, _, _ = grid_argmax(self.model, self.params, np.array(todo), self.a_grid)
            for x, i in zip(todo, idx):
                self._cache[x] = float(self.a_grid[i])
        return np.array([self._cache[float(x)] for x in s])[:, None]


def policy_error_of(policy, oracle, s_grid) -> float:
    """Mean squared gap between ``policy(s)`` and the optimal action over ``s_grid``."""
    s_grid = np.asarray(s_grid, dtype=np.float64)
    gap = np.asarray(policy(s_grid)).reshape(-1) - np.asarray(oracle.policy_star(s_grid)).reshape(-1)
    return float(np.mean(gap * gap))


def policy_error(model, params, oracle, s_grid=None, a_grid_fine=None) -> float:
    """Policy error of the critic's greedy policy (ties go to the smallest action)."""
    s_grid = np.linspace(-1.0, 1.0, 51) if s_grid is None else s_grid
    a_grid_fine = np.linspace(-1.0, 1.0, 1001) if a_grid_fine is None else a_grid_fine
    return policy_error_of(GreedyPolicy(model, params, a_grid_fine), oracle, s_grid)


def mc_return(policy, env, s0_set=None, horizon: int = 200, gamma: float | None = None) -> float:
    """Mean discounted return of a deterministic policy over ``horizon`` steps."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    gamma = env.gamma if gamma is None else gamma
    s0 = np.linspace(-1.0, 1.0, 21) if s0_set is None else np.asarray(s0_set, dtype=np.float64)
    s = s0.reshape(-1, env.state_dim)
    total = np.zeros(s.shape[0])
    disc = 1.0
    for _ in range(horizon):
        a = np.asarray(policy(s), dtype=np.float64).reshape(-1, env.action_dim)
        s, r = env.step_batch(s, a)
        total += disc * r
        disc *= gamma
    return float(total.mean())


def evaluate_trainer(trainer, oracle, grid=None) -> MetricsRow:
    """Score the trainer's current online critic (and actor, if any)."""
    model, params = trainer.model, trainer.state.params
    env = trainer.env
    if trainer.actor is not None:
        actor, aparams = trainer.actor, trainer.state.actor_params
        policy = lambda s: actor.act(aparams, s)  # noqa: E731
    else:
        policy = GreedyPolicy(model, params, np.linspace(-1.0, 1.0, 1001))
    if isinstance(env, Toy1DEnv):
        s_grid = np.linspace(-1.0, 1.0, 51)
    else:
        s_grid = np.linspace(-1.0, 1.0, 51)[:, None] * np.ones((1, env.state_dim))
    return MetricsRow(
        step=trainer.step,
        q_mse=q_mse(model, params, oracle, grid),
        grad_a_mse=grad_a_mse(model, params, oracle, grid),
        policy_err=policy_error_of(policy, oracle, s_grid),
        mc_return=mc_return(policy, env),
        seed=trainer.cfg.seed,
    )


def aggregate_seeds(rows) -> list[AggregateRow]:
    """Per-step mean and sample standard deviation over seeds."""
    by_seed: dict[int, dict[int, MetricsRow]] = defaultdict(dict)
    for row in rows:
        by_seed[row.seed][row.step] = row
    step_sets = {frozenset(v) for v in by_seed.values()}
    if len(step_sets) > 1:
        raise ValueError("seeds were evaluated at different steps")
    if not by_seed:
        return []
    out = []
    for step in sorted(next(iter(step_sets))):
        group = [by_seed[seed][step] for seed in sorted(by_seed)]
        stats = {}
        for metric in METRICS:
            vals = np.array([getattr(r, metric) for r in group])
            stats[f"{metric}_mean"] = float(vals.mean())
            stats[f"{metric}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append(AggregateRow(step=step, n_seeds=len(group), **stats))
    return out


def plateau_reached(steps, values, window: float = 0.1, rel: float = 0.01) -> bool:
    """True when the metric moved by less than ``rel`` (relative) over the last ``window`` of steps."""
    steps = np.asarray(steps, dtype=float)
    values = np.asarray(values, dtype=float)
    start = steps[-1] - window * (steps[-1] - steps[0])
    ref = values[np.searchsorted(steps, start)]
    last = values[-1]
    return bool(abs(last - ref) <= rel * abs(last))
