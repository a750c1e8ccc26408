import copy

import numpy as np
import pytest

from sobolev_td.critics import QuadraticCritic, init_critic
from sobolev_td.diffcore import DimensionError, FlatParams, sobolev_loss_arrays
from sobolev_td.envs import LqrEnv, Toy1DEnv
from sobolev_td.evalbench import MetricsRow
from sobolev_td.oracle import TabulatedQStarCritic, lqr_quadratic_coefficients, riccati_solve
from sobolev_td.targets import max_targets
from sobolev_td.training import (AdamState, ConfigError, ReplayBuffer, Trainer, TrainerConfig, adam_step,
                                 critic_update, make_env, polyak_update, run_experiment,
                                 train_step_actor_critic, train_step_q_learning)


def flat(x):
    return FlatParams.from_arrays({"x": np.asarray(x, dtype=np.float64)})


# --------------------------------------------------------------------------
# Adam and Polyak


def test_adam_zero_grad_first_step():
    p = flat([1.0, -2.0, 3.0])
    new, st = adam_step(AdamState.zeros(3, lr=1e-3), p, np.zeros(3))
    np.testing.assert_array_equal(new.values, p.values)
    assert st.t == 1


@pytest.mark.parametrize("g", [1e-6, 0.3, -5.0, 1e4])
def test_adam_first_step_magnitude(g):
    lr = 1e-4
    new, _ = adam_step(AdamState.zeros(1, lr=lr), flat([0.0]), np.array([g]))
    delta = new.values[0]
    assert np.sign(delta) == -np.sign(g)
    assert abs(delta) <= lr * (1 + 1e-8)
    assert abs(delta) == pytest.approx(lr * abs(g) / (abs(g) + 1e-8), rel=1e-12)


def test_adam_matches_independent_recomputation():
    lr, b1, b2, eps = 1e-4, 0.9, 0.999, 1e-8
    p, st = flat([0.5]), AdamState.zeros(1, lr=lr)
    x, m, v = 0.5, 0.0, 0.0
    trace = []
    for t in range(1, 101):
        p, st = adam_step(st, p, np.array([1.0]))
        m = b1 * m + (1 - b1) * 1.0
        v = b2 * v + (1 - b2) * 1.0
        x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        trace.append(p.values[0])
        assert st.t == t
    assert np.all(np.diff(trace) < 0)
    assert abs(p.values[0] - x) <= 1e-9


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step(AdamState.zeros(3), flat([0.0, 0.0]), np.zeros(2))


def test_polyak_boundaries_and_midpoint():
    t, o = flat([0.0, 4.0]), flat([2.0, -2.0])
    np.testing.assert_array_equal(polyak_update(t, o, 0.0).values, o.values)
    np.testing.assert_array_equal(polyak_update(t, o, 1.0).values, t.values)
    np.testing.assert_array_equal(polyak_update(t, o, 0.5).values, [1.0, 1.0])


def test_polyak_errors():
    with pytest.raises(ValueError):
        polyak_update(flat([0.0]), flat([1.0]), 1.5)
    with pytest.raises(DimensionError):
        polyak_update(flat([0.0]), flat([1.0, 2.0]), 0.5)


# --------------------------------------------------------------------------
# config


def test_baseline_forces_zero_lambdas():
    cfg = TrainerConfig(method="baseline", lambda_s=3.0, lambda_a=2.0)
    assert cfg.lambda_s == 0.0 and cfg.lambda_a == 0.0


@pytest.mark.parametrize("kwargs, key", [
    (dict(lambda_s=-1.0), "lambda_s"), (dict(polyak_rho=1.5), "polyak_rho"), (dict(gamma=1.0), "gamma"),
    (dict(model="cnn"), "model"), (dict(batch_size=0), "batch_size"), (dict(lr=0.0), "lr"),
    (dict(argmax_dtype="float16"), "argmax_dtype"),
])
def test_config_validation(kwargs, key):
    with pytest.raises(ConfigError) as info:
        TrainerConfig(**kwargs)
    assert info.value.key == key


def test_warmup_monotone_and_reaches_target():
    cfg = TrainerConfig(lambda_s=2.0, lambda_a=0.5, warmup_steps=100)
    vals = [cfg.effective_lambdas(t) for t in range(1, 300)]
    for k in range(2):
        seq = [v[k] for v in vals]
        assert all(b >= a for a, b in zip(seq, seq[1:]))
    assert cfg.effective_lambdas(100) == (2.0, 0.5)
    assert cfg.effective_lambdas(50) == (1.0, 0.25)
    assert TrainerConfig(warmup_steps=0).effective_lambdas(1) == (1.0, 1.0)


# --------------------------------------------------------------------------
# replay


def test_replay_cache_matches_fresh_jacobians():
    env = LqrEnv(np.array([[0.9, 0.1], [0.0, 0.8]]), np.array([[0.0], [1.0]]), np.eye(2), np.eye(1))
    buf = ReplayBuffer(64, 2, 1)
    rng = np.random.default_rng(0)
    for _ in range(100):   # wraps around
        buf.add(env.transitions(rng.normal(size=(1, 2)), rng.normal(size=(1, 1))))
    assert len(buf) == 64
    batch = buf.sample(rng, 32)
    for i in range(len(batch)):
        # recompute the way entries were inserted: one row at a time
        fresh = env.transitions(batch.s[i:i + 1], batch.a[i:i + 1])
        for name in ("r", "s_next", "df_ds", "df_da", "dr_ds", "dr_da"):
            assert np.array_equal(getattr(batch, name)[i], getattr(fresh, name)[0])


def test_replay_empty_sample():
    with pytest.raises(RuntimeError):
        ReplayBuffer(4, 1, 1).sample(np.random.default_rng(0), 2)


# --------------------------------------------------------------------------
# Q-learning steps


@pytest.mark.parametrize("model, steps", [("quadratic", 300), ("mlp", 15)])
def test_lambda_zero_matches_baseline_bit_for_bit(model, steps):
    kw = dict(model=model, hidden=16, n_hidden=2, lr=1e-3, seed=3)
    runs = []
    for cfg in (TrainerConfig(method="baseline", **kw),
                TrainerConfig(method="sobolev", lambda_s=0.0, lambda_a=0.0, **kw)):
        tr = Trainer(cfg, make_env(cfg))
        trace = []
        for _ in range(steps):
            tr.train_step()
            trace.append(tr.state.params.values.copy())
        runs.append(np.array(trace))
    assert np.array_equal(runs[0], runs[1])


def test_one_step_descends_batch_loss():
    for seed in range(5):
        cfg = TrainerConfig(lr=1e-5, seed=seed)
        tr = Trainer(cfg, make_env(cfg))
        rng = copy.deepcopy(tr.rng)
        s = rng.uniform(-1, 1, (cfg.batch_size, 1))
        a = rng.uniform(-1, 1, (cfg.batch_size, 1))
        batch = tr.env.transitions(s, a)
        targets = max_targets(tr.model, tr.state.target, batch, cfg.gamma, np.linspace(-1, 1, 100))
        loss = lambda p: sobolev_loss_arrays(tr.model, p, s, a, targets.y, targets.dy_ds,  # noqa: E731
                                             targets.dy_da, 1.0, 1.0)[0]
        before = loss(tr.state.params)
        tr.train_step()
        assert loss(tr.state.params) <= before


def test_targets_are_constants_for_the_learner():
    # online == target values, yet the gradient is that of the loss with frozen targets
    model = QuadraticCritic()
    rng = np.random.default_rng(1)
    params = model.params_from_theta(rng.normal(size=6) * 0.3)
    env = Toy1DEnv()
    s, a = rng.uniform(-1, 1, (2, 40, 1))
    batch = env.transitions(s, a)
    grid = np.linspace(-1, 1, 100)
    frozen = max_targets(model, params.copy(), batch, 0.9, grid)
    cfg = TrainerConfig()
    _, grad = sobolev_loss_arrays(model, params, s, a, frozen.y, frozen.dy_ds, frozen.dy_da, 1.0, 1.0)
    h = 1e-6
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        lp = sobolev_loss_arrays(model, params.with_values(params.values + e), s, a, frozen.y, frozen.dy_ds,
                                 frozen.dy_da, 1.0, 1.0)[0]
        lm = sobolev_loss_arrays(model, params.with_values(params.values - e), s, a, frozen.y, frozen.dy_ds,
                                 frozen.dy_da, 1.0, 1.0)[0]
        assert grad[i] == pytest.approx((lp - lm) / (2 * h), rel=1e-6, abs=1e-8)
    # the trainer's own update agrees with the frozen-target gradient
    adam = AdamState.zeros(6, lr=1e-3)
    new, _, _ = critic_update(cfg, model, params, adam, batch, frozen, 1)
    expected, _ = adam_step(AdamState.zeros(6, lr=1e-3), params, grad)
    np.testing.assert_array_equal(new.values, expected.values)


def test_q_learning_step_rejects_actor_critic_config():
    cfg = TrainerConfig()
    tr = Trainer(cfg, make_env(cfg))
    with pytest.raises(ConfigError):
        train_step_q_learning(cfg.replace(algo="actor_critic"), tr.model, tr.state, tr.env, tr.rng)


def test_bellman_fixed_point_of_tabulated_q_star(toy_solution):
    critic = TabulatedQStarCritic(toy_solution)
    env = Toy1DEnv()
    u = np.linspace(-1, 1, 51)
    s, a = (x.reshape(-1, 1) for x in np.meshgrid(u, u, indexing="ij"))
    batch = env.transitions(s, a)
    t = max_targets(critic, None, batch, 0.9, np.linspace(-1, 1, 100))
    assert np.abs(critic.values(None, s, a) - t.y).mean() <= 5e-3


# --------------------------------------------------------------------------
# actor-critic steps


def _ac_trainer(**kw):
    cfg = TrainerConfig(**{"env": "lqr", "algo": "actor_critic", "start_steps": 200, **kw})
    return cfg, Trainer(cfg, make_env(cfg))


def test_actor_critic_empty_buffer():
    cfg, tr = _ac_trainer(start_steps=0)
    with pytest.raises(RuntimeError):
        train_step_actor_critic(cfg, tr.model, tr.actor, tr.state, tr.env, tr.rng)


def test_constant_critic_leaves_actor_unchanged():
    cfg, tr = _ac_trainer()
    tr.state.params = tr.model.params_from_theta([2.0, 0, 0, 0, 0, 0])
    tr.state.target = tr.state.params.copy()
    tr.state.adam = AdamState.zeros(6, lr=0.0)   # freeze the critic
    tr.state.actor_params = tr.actor.init_params(K=[[0.3]])
    before = tr.state.actor_params.values.copy()
    train_step_actor_critic(cfg, tr.model, tr.actor, tr.state, tr.env, tr.rng)
    np.testing.assert_array_equal(tr.state.actor_params.values, before)


def test_actor_step_follows_analytic_lqr_policy_gradient():
    cfg, tr = _ac_trainer()
    env = tr.env
    sol = riccati_solve(env)
    theta = lqr_quadratic_coefficients(env, sol)
    tr.state.params = tr.model.params_from_theta(theta)
    tr.state.target = tr.state.params.copy()
    tr.state.adam = AdamState.zeros(6, lr=0.0)
    batch = tr.state.buffer.sample(copy.deepcopy(tr.rng), cfg.batch_size)
    diag = train_step_actor_critic(cfg, tr.model, tr.actor, tr.state, env, tr.rng)
    # d/dK Q*(s, K s) at K = 0 is -2 gamma P A B s^2
    P, A, B, g = sol.P[0, 0], env.A[0, 0], env.B[0, 0], env.gamma
    analytic = float(np.mean(-2 * g * P * A * B * batch.s[:, 0] ** 2))
    assert diag["policy_grad_norm"] == pytest.approx(abs(analytic), abs=1e-8)
    # ascent: the gain moves along the analytic gradient
    assert np.sign(tr.state.actor_params.values[0]) == np.sign(analytic)


# --------------------------------------------------------------------------
# whole runs


def _score(trainer):
    q = trainer.model.values(trainer.state.params, np.linspace(-1, 1, 7), np.linspace(1, -1, 7))
    return MetricsRow(trainer.step, float(q.sum()), float(q.mean()), 0.0, 0.0, trainer.cfg.seed)


def test_run_with_zero_steps_scores_untrained_critic(toy_oracle):
    cfg = TrainerConfig(total_steps=0)
    res = run_experiment(cfg, oracle=toy_oracle)
    assert [r.step for r in res.metrics] == [0]
    assert res.metrics[0].q_mse > 0
    assert not res.params.values.any()


@pytest.mark.parametrize("algo", ["q_learning", "actor_critic"])
def test_run_is_deterministic(algo):
    env = "lqr" if algo == "actor_critic" else "toy1d"
    cfg = TrainerConfig(env=env, algo=algo, total_steps=60, eval_every=20, start_steps=50)
    a = run_experiment(cfg, evaluate=_score)
    b = run_experiment(cfg, evaluate=_score)
    assert a.metrics == b.metrics
    assert [r.step for r in a.metrics] == [0, 20, 40, 60]
    np.testing.assert_array_equal(a.params.values, b.params.values)
    c = run_experiment(cfg.replace(seed=1), evaluate=_score)
    assert c.metrics != a.metrics


def test_run_records_requested_checkpoints():
    cfg = TrainerConfig(total_steps=30)
    res = run_experiment(cfg, checkpoint_steps=lambda t: t % 10 == 0)
    assert sorted(res.checkpoints) == [0, 10, 20, 30]
    np.testing.assert_array_equal(res.checkpoints[30].values, res.params.values)


def test_run_mlp_smoke(toy_oracle):
    cfg = TrainerConfig(model="mlp", hidden=16, n_hidden=2, total_steps=20, eval_every=10, lr=1e-3)
    res = run_experiment(cfg, oracle=toy_oracle)
    assert [r.step for r in res.metrics] == [0, 10, 20]
    assert all(np.isfinite([r.q_mse, r.grad_a_mse, r.policy_err, r.mc_return]).all() for r in res.metrics)
    assert init_critic("mlp", 0, hidden=16, n_hidden=2)[0].sizes == res.model.sizes
