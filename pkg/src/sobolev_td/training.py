"""Training loop: Adam, Polyak targets, replay, Sobolev critic and actor steps."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .critics import LinearActor, init_critic
from .diffcore import DimensionError, FlatParams, mse_loss_and_param_grads, sobolev_loss_arrays
from .envs import Env, LqrEnv, Toy1DEnv, TransitionBatch
from .targets import actor_targets, max_targets


class ConfigError(ValueError):
    """Invalid trainer configuration; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class TrainerConfig:
    env: str = "toy1d"
    algo: str = "q_learning"
    method: str = "sobolev"
    model: str = "quadratic"
    gamma: float = 0.9
    lambda_s: float = 1.0
    lambda_a: float = 1.0
    lr: float = 1e-4
    lr_actor: float | None = None
    batch_size: int = 50
    total_steps: int = 20_000
    polyak_rho: float = 0.995
    warmup_steps: int = 0
    seed: int = 0
    grid_points: int = 100
    argmax_dtype: str = "float32"
    eval_every: int = 1000
    hidden: int = 128
    n_hidden: int = 3
    # actor-critic only
    buffer_capacity: int = 100_000
    explore_noise: float = 0.3
    episode_len: int = 20
    start_steps: int = 1000

    def __post_init__(self):
        if self.method == "baseline":
            self.lambda_s = 0.0
            self.lambda_a = 0.0
        self.validate()

    def validate(self):
        choices = {"env": ("toy1d", "lqr"), "algo": ("q_learning", "actor_critic"),
                   "method": ("baseline", "sobolev"), "model": ("quadratic", "mlp"),
                   "argmax_dtype": ("float32", "float64")}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(key, f"must be one of {allowed}, got {getattr(self, key)!r}")
        for key in ("lambda_s", "lambda_a"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be >= 0")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma", "must lie in [0, 1)")
        if not 0.0 <= self.polyak_rho <= 1.0:
            raise ConfigError("polyak_rho", "must lie in [0, 1]")
        for key in ("batch_size", "grid_points", "eval_every", "hidden", "n_hidden",
                    "buffer_capacity", "episode_len"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be >= 1")
        for key in ("total_steps", "warmup_steps", "start_steps"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be >= 0")
        if self.lr <= 0 or (self.lr_actor is not None and self.lr_actor <= 0):
            raise ConfigError("lr", "must be positive")
        if self.explore_noise < 0:
            raise ConfigError("explore_noise", "must be >= 0")

    def replace(self, **changes) -> "TrainerConfig":
        return dataclasses.replace(self, **changes)

    def effective_lambdas(self, step: int) -> tuple[float, float]:
        """Gradient weights at 1-based ``step``, ramped linearly over ``warmup_steps``."""
        scale = 1.0 if self.warmup_steps == 0 else min(1.0, step / self.warmup_steps)
        return self.lambda_s * scale, self.lambda_a * scale


# --------------------------------------------------------------------------
# optimizer and target updates


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)


def adam_step(state: AdamState, params: FlatParams, grad) -> tuple[FlatParams, AdamState]:
    """One bias-corrected Adam step; returns new params and a new state."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape or state.m.shape != grad.shape:
        raise DimensionError(f"gradient shape {grad.shape} does not match params {params.values.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.with_values(new), dataclasses.replace(state, m=m, v=v, t=t)


def polyak_update(target: FlatParams, online: FlatParams, rho: float) -> FlatParams:
    """``target <- rho * target + (1 - rho) * online``."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if target.values.shape != online.values.shape:
        raise DimensionError("target and online parameters differ in shape")
    if rho == 0.0:
        return online.copy()
    if rho == 1.0:
        return target.copy()
    return target.with_values(rho * target.values + (1.0 - rho) * online.values)


# --------------------------------------------------------------------------
# replay


class ReplayBuffer:
    """Bounded ring of transitions with their cached simulator Jacobians."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        n, m = state_dim, action_dim
        self.capacity = capacity
        self._data = TransitionBatch(
            s=np.zeros((capacity, n)), a=np.zeros((capacity, m)), r=np.zeros(capacity),
            s_next=np.zeros((capacity, n)), df_ds=np.zeros((capacity, n, n)),
            df_da=np.zeros((capacity, n, m)), dr_ds=np.zeros((capacity, n)), dr_da=np.zeros((capacity, m)))
        self._next = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, batch: TransitionBatch) -> None:
        for i in range(len(batch)):
            j = self._next
            for name in ("s", "a", "r", "s_next", "df_ds", "df_da", "dr_ds", "dr_da"):
                getattr(self._data, name)[j] = getattr(batch, name)[i]
            self._next = (j + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch_size: int) -> TransitionBatch:
        if self.size == 0:
            raise RuntimeError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return TransitionBatch(**{f.name: getattr(self._data, f.name)[idx].copy()
                                  for f in dataclasses.fields(TransitionBatch)})


# --------------------------------------------------------------------------
# one training step


@dataclass
class QLearningState:
    params: FlatParams
    target: FlatParams
    adam: AdamState
    step: int = 0


@dataclass
class ActorCriticState:
    params: FlatParams
    target: FlatParams
    adam: AdamState
    actor_params: FlatParams
    actor_target: FlatParams
    adam_actor: AdamState
    buffer: ReplayBuffer
    env_state: np.ndarray
    episode_t: int = 0
    step: int = 0


def critic_update(cfg: TrainerConfig, model, params: FlatParams, adam: AdamState, batch: TransitionBatch,
                  targets, step: int) -> tuple[FlatParams, AdamState, float]:
    """Baseline: value-only TD regression.  Sobolev: value + gradient matching."""
    if cfg.method == "baseline":
        loss, grad = mse_loss_and_param_grads(model, params, batch.s, batch.a, targets.y)
    else:
        lam_s, lam_a = cfg.effective_lambdas(step)
        loss, grad = sobolev_loss_arrays(model, params, batch.s, batch.a, targets.y, targets.dy_ds,
                                         targets.dy_da, lam_s, lam_a, carry_tangents=True)
    params, adam = adam_step(adam, params, grad)
    return params, adam, loss


def train_step_q_learning(cfg: TrainerConfig, model, state: QLearningState, env: Env,
                          rng: np.random.Generator) -> dict:
    """Fresh uniform batch, grid-max first-order targets, one critic step, Polyak."""
    if cfg.algo != "q_learning":
        raise ConfigError("algo", "train_step_q_learning needs algo=q_learning")
    step = state.step + 1
    s = rng.uniform(-1.0, 1.0, size=(cfg.batch_size, env.state_dim))
    a = rng.uniform(-1.0, 1.0, size=(cfg.batch_size, env.action_dim))
    batch = env.transitions(s, a)
    grid = np.linspace(-1.0, 1.0, cfg.grid_points)
    targets = max_targets(model, state.target, batch, cfg.gamma, grid, np.dtype(cfg.argmax_dtype))
    state.params, state.adam, loss = critic_update(cfg, model, state.params, state.adam, batch, targets, step)
    state.target = polyak_update(state.target, state.params, cfg.polyak_rho)
    state.step = step
    return {"step": step, "loss": loss}


def _reset_states(env: Env, rng, k: int) -> np.ndarray:
    if isinstance(env, Toy1DEnv):
        return rng.uniform(-1.0, 1.0, size=(k, env.state_dim))
    return rng.normal(0.0, 1.0, size=(k, env.state_dim))


def collect_transition(cfg: TrainerConfig, actor: LinearActor, state: ActorCriticState, env: Env,
                       rng: np.random.Generator) -> None:
    """Advance the behavior rollout one step (actor + Gaussian noise) into the buffer."""
    s = state.env_state
    a = actor.act(state.actor_params, s) + cfg.explore_noise * rng.normal(size=(1, env.action_dim))
    if isinstance(env, Toy1DEnv):
        a = np.clip(a, -1.0, 1.0)
    batch = env.transitions(s, a)
    state.buffer.add(batch)
    state.episode_t += 1
    if state.episode_t >= cfg.episode_len:
        state.env_state = _reset_states(env, rng, 1)
        state.episode_t = 0
    else:
        state.env_state = batch.s_next


def train_step_actor_critic(cfg: TrainerConfig, model, actor: LinearActor, state: ActorCriticState,
                            env: Env, rng: np.random.Generator) -> dict:
    """Replay minibatch, actor-critic first-order targets, critic step, actor ascent, Polyak."""
    if cfg.algo != "actor_critic":
        raise ConfigError("algo", "train_step_actor_critic needs algo=actor_critic")
    if len(state.buffer) == 0:
        raise RuntimeError("replay buffer is empty; collect transitions first")
    step = state.step + 1
    batch = state.buffer.sample(rng, cfg.batch_size)
    targets = actor_targets(model, state.target, actor, state.actor_target, batch, cfg.gamma)
    state.params, state.adam, loss = critic_update(cfg, model, state.params, state.adam, batch, targets, step)

    mu = actor.act(state.actor_params, batch.s)
    _, _, ga = model.evaluate(state.params, batch.s, mu)
    grad_j = actor.policy_gradient(batch.s, ga)
    # ascent on J is descent on -J
    state.actor_params, state.adam_actor = adam_step(state.adam_actor, state.actor_params, -grad_j)

    state.target = polyak_update(state.target, state.params, cfg.polyak_rho)
    state.actor_target = polyak_update(state.actor_target, state.actor_params, cfg.polyak_rho)
    state.step = step
    return {"step": step, "loss": loss, "policy_grad_norm": float(np.linalg.norm(grad_j))}


# --------------------------------------------------------------------------
# whole runs


def make_env(cfg: TrainerConfig) -> Env:
    if cfg.env == "toy1d":
        return Toy1DEnv(cfg.gamma)
    base = LqrEnv.default()
    return LqrEnv(base.A, base.B, base.Qcost, base.Rcost, gamma=cfg.gamma)


@dataclass
class Trainer:
    """Deterministic single-seed training run."""

    cfg: TrainerConfig
    env: Env
    model: object = None
    actor: LinearActor | None = None
    state: object = None
    rng: np.random.Generator = None

    def __post_init__(self):
        cfg = self.cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.model, params = init_critic(cfg.model, cfg.seed, self.env.state_dim, self.env.action_dim,
                                         cfg.hidden, cfg.n_hidden)
        adam = AdamState.zeros(len(params), lr=cfg.lr)
        if cfg.algo == "q_learning":
            self.state = QLearningState(params, params.copy(), adam)
            return
        self.actor = LinearActor(self.env.state_dim, self.env.action_dim)
        actor_params = self.actor.init_params(cfg.seed)
        buffer = ReplayBuffer(cfg.buffer_capacity, self.env.state_dim, self.env.action_dim)
        self.state = ActorCriticState(params, params.copy(), adam, actor_params, actor_params.copy(),
                                      AdamState.zeros(len(actor_params), lr=cfg.lr_actor or cfg.lr),
                                      buffer, _reset_states(self.env, self.rng, 1))
        for _ in range(cfg.start_steps):
            collect_transition(cfg, self.actor, self.state, self.env, self.rng)

    @property
    def step(self) -> int:
        return self.state.step

    def train_step(self) -> dict:
        if self.cfg.algo == "q_learning":
            return train_step_q_learning(self.cfg, self.model, self.state, self.env, self.rng)
        collect_transition(self.cfg, self.actor, self.state, self.env, self.rng)
        return train_step_actor_critic(self.cfg, self.model, self.actor, self.state, self.env, self.rng)


@dataclass
class ExperimentResult:
    metrics: list
    params: FlatParams
    actor_params: FlatParams | None
    checkpoints: dict[int, FlatParams] = field(default_factory=dict)
    model: object = None


def run_experiment(cfg: TrainerConfig, env: Env | None = None, oracle=None,
                   checkpoint_steps: Callable[[int], bool] | None = None,
                   evaluate: Callable | None = None) -> ExperimentResult:
    """Run ``cfg.total_steps`` steps, scoring every ``cfg.eval_every`` steps (and at 0 and the end).

    ``evaluate(trainer)`` returns one metrics row; the default scores the
    critic against ``oracle`` with :func:`sobolev_td.evalbench.evaluate_trainer`.
    """
    from .evalbench import evaluate_trainer

    env = env or make_env(cfg)
    trainer = Trainer(cfg, env)
    score = evaluate or (lambda tr: evaluate_trainer(tr, oracle))
    rows = [score(trainer)] if (oracle is not None or evaluate is not None) else []
    checkpoints = {}
    if checkpoint_steps is not None and checkpoint_steps(0):
        checkpoints[0] = trainer.state.params.copy()
    for _ in range(cfg.total_steps):
        trainer.train_step()
        t = trainer.step
        if checkpoint_steps is not None and checkpoint_steps(t):
            checkpoints[t] = trainer.state.params.copy()
        if rows and (t % cfg.eval_every == 0 or t == cfg.total_steps):
            rows.append(score(trainer))
    actor_params = getattr(trainer.state, "actor_params", None)
    return ExperimentResult(rows, trainer.state.params, actor_params, checkpoints, trainer.model)
