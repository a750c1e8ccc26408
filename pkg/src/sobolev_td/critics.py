"""Critic parameterizations and the linear actor.

A model object describes the architecture; its parameters live in a separate
:class:`FlatParams` so online and target networks share one model.  Every
critic provides

* ``values(params, s, a)``   -> Q only, no tape (fast path for grid maxima)
* ``evaluate(params, s, a)`` -> (Q, grad_s Q, grad_a Q) for a batch
* ``build(tape, x)``         -> records Q on a :class:`ParamTape`
"""
from __future__ import annotations

import numpy as np

from .diffcore import LEAKY_SLOPE, DimensionError, FlatParams, ParamTape, eval_batch
from .textio import read_table, write_table


def _batch_inputs(model, s, a):
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    s2 = s.reshape(-1, model.state_dim)
    a2 = a.reshape(-1, model.action_dim)
    if s2.shape[0] != a2.shape[0] or (s.ndim == 2 and s.shape[1] != model.state_dim) \
            or (a.ndim == 2 and a.shape[1] != model.action_dim):
        raise DimensionError(f"{model.kind}: got s{s.shape}, a{a.shape}")
    return s2, a2


class QuadraticCritic:
    """``Q = t0 + t1 s + t2 a + t3 s^2 + t4 s a + t5 a^2`` for scalar s and a."""

    kind = "quadratic"
    state_dim = 1
    action_dim = 1

    def init_params(self, seed: int = 0) -> FlatParams:
        return FlatParams.from_arrays({"theta": np.zeros((6, 1))})

    def params_from_theta(self, theta) -> FlatParams:
        return FlatParams.from_arrays({"theta": np.asarray(theta, dtype=np.float64).reshape(6, 1)})

    @staticmethod
    def theta(params: FlatParams) -> np.ndarray:
        return params.view("theta")[:, 0]

    def values(self, params, s, a):
        s, a = _batch_inputs(self, s, a)
        s, a = s[:, 0], a[:, 0]
        t = self.theta(params)
        return t[0] + t[1] * s + t[2] * a + t[3] * s * s + t[4] * s * a + t[5] * a * a

    def evaluate(self, params, s, a):
        s, a = _batch_inputs(self, s, a)
        s, a = s[:, 0], a[:, 0]
        t = self.theta(params)
        q = t[0] + t[1] * s + t[2] * a + t[3] * s * s + t[4] * s * a + t[5] * a * a
        gs = t[1] + 2.0 * t[3] * s + t[4] * a
        ga = t[2] + t[4] * s + 2.0 * t[5] * a
        return q, gs[:, None], ga[:, None]

    def build(self, tape: ParamTape, x):
        s = tape.take(x, [0])
        a = tape.take(x, [1])
        one = tape.constant(np.ones((x.batch, 1)))
        feats = tape.concat([one, s, a, tape.square(s), tape.mul(s, a), tape.square(a)])
        return tape.linear(feats, "theta")


class MlpCritic:
    """Fully connected network on ``concat(s, a)`` with leaky-ReLU hidden layers."""

    kind = "mlp"

    def __init__(self, state_dim: int = 1, action_dim: int = 1, hidden: int = 128,
                 n_hidden: int = 3, slope: float = LEAKY_SLOPE):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.hidden = hidden
        self.n_hidden = n_hidden
        self.slope = slope
        self.sizes = [state_dim + action_dim] + [hidden] * n_hidden + [1]

    def n_params(self) -> int:
        return sum(i * o + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    def init_params(self, seed: int = 0) -> FlatParams:
        # weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases
        rng = np.random.default_rng(seed)
        arrays = {}
        for layer, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            arrays[f"W{layer}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            arrays[f"b{layer}"] = np.zeros(fan_out)
        return FlatParams.from_arrays(arrays)

    def values(self, params, s, a):
        s, a = _batch_inputs(self, s, a)
        h = np.concatenate([s, a], axis=1)
        last = len(self.sizes) - 2
        for layer in range(last + 1):
            z = h @ params.view(f"W{layer}")
            z += params.view(f"b{layer}")
            h = np.maximum(z, self.slope * z) if layer < last else z
        return h[:, 0]

    def evaluate(self, params, s, a):
        return eval_batch(self, params, s, a)

    def grid_values(self, params, states, grid, dtype=np.float64) -> np.ndarray:
        """``Q(states[i], grid[j])`` as a (len(states), len(grid)) table.

        The first layer is separable in (s, a), so it is formed by broadcasting
        instead of materializing every pair.  ``dtype`` is the working precision
        of the hidden layers.
        """
        states = np.asarray(states, dtype=np.float64).reshape(-1, self.state_dim)
        grid = np.asarray(grid, dtype=np.float64).reshape(-1, self.action_dim)
        w0 = params.view("W0")
        zs = (states @ w0[: self.state_dim] + params.view("b0")).astype(dtype, copy=False)
        za = (grid @ w0[self.state_dim:]).astype(dtype, copy=False)
        width = w0.shape[1]
        z = np.empty((states.shape[0], grid.shape[0], width), dtype=dtype)
        np.add(zs[:, None, :], za[None, :, :], out=z)
        z = z.reshape(-1, width)
        # ping-pong between two preallocated buffers; this loop dominates training time
        h = np.empty_like(z)
        for layer in range(1, len(self.sizes) - 1):
            np.multiply(z, self.slope, out=h)
            np.maximum(z, h, out=h)
            w = params.view(f"W{layer}").astype(dtype, copy=False)
            if w.shape[1] == width:
                np.matmul(h, w, out=z)
            else:
                z = h @ w
            z += params.view(f"b{layer}").astype(dtype, copy=False)
        return z[:, 0].reshape(states.shape[0], grid.shape[0])

    def build(self, tape: ParamTape, x):
        h = x
        last = len(self.sizes) - 2
        for layer in range(last + 1):
            h = tape.linear(h, f"W{layer}", f"b{layer}")
            if layer < last:
                h = tape.leaky_relu(h, self.slope)
        return h

    def preactivations(self, params, s, a) -> list[np.ndarray]:
        """Hidden pre-activations, for steering finite-difference tests off kinks."""
        s, a = _batch_inputs(self, s, a)
        h = np.concatenate([s, a], axis=1)
        out = []
        for layer in range(len(self.sizes) - 2):
            z = h @ params.view(f"W{layer}") + params.view(f"b{layer}")
            out.append(z)
            h = np.maximum(z, self.slope * z)
        return out


def init_critic(kind: str, seed: int = 0, state_dim: int = 1, action_dim: int = 1,
                hidden: int = 128, n_hidden: int = 3):
    """Return ``(model, params)`` for ``kind`` in {"quadratic", "mlp"}."""
    if kind == "quadratic":
        if (state_dim, action_dim) != (1, 1):
            raise DimensionError("the quadratic critic is defined for scalar s and a")
        model = QuadraticCritic()
    elif kind == "mlp":
        model = MlpCritic(state_dim, action_dim, hidden, n_hidden)
    else:
        raise ValueError(f"unknown critic kind {kind!r}")
    return model, model.init_params(seed)


def critic_eval(critic, params: FlatParams, s, a):
    """Batched (Q, grad_s Q, grad_a Q); quadratic uses its closed form."""
    return critic.evaluate(params, s, a)


class LinearActor:
    """Deterministic linear policy ``mu(s) = K s``."""

    kind = "linear"

    def __init__(self, state_dim: int = 1, action_dim: int = 1):
        self.state_dim = state_dim
        self.action_dim = action_dim

    def init_params(self, seed: int = 0, K=None) -> FlatParams:
        K = np.zeros((self.action_dim, self.state_dim)) if K is None else np.asarray(K, dtype=np.float64)
        return FlatParams.from_arrays({"K": K.reshape(self.action_dim, self.state_dim)})

    def act(self, params: FlatParams, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64).reshape(-1, self.state_dim)
        return s @ params.view("K").T

    def policy_gradient(self, s, grad_a_q) -> np.ndarray:
        """Batch mean of ``grad_a Q (s, mu(s)) * d mu / d K``, flattened like K."""
        s = np.asarray(s, dtype=np.float64).reshape(-1, self.state_dim)
        g = np.asarray(grad_a_q, dtype=np.float64).reshape(-1, self.action_dim)
        return (g.T @ s / s.shape[0]).ravel()


def actor_eval(actor: LinearActor, params: FlatParams, s) -> tuple[np.ndarray, np.ndarray]:
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    if s.shape != (actor.state_dim,):
        raise DimensionError(f"expected s of shape ({actor.state_dim},), got {s.shape}")
    K = params.view("K")
    return K @ s, K.copy()


# --------------------------------------------------------------------------
# checkpoints


def save_params(path, model, params: FlatParams, **meta) -> None:
    layout = ";".join(f"{name}:{'x'.join(map(str, shape)) or 'scalar'}"
                      for name, (_, shape) in params.layout.items())
    info = {"kind": model.kind, "state_dim": model.state_dim, "action_dim": model.action_dim}
    if isinstance(model, MlpCritic):
        info.update(hidden=model.hidden, n_hidden=model.n_hidden)
    info["layout"] = layout
    info.update(meta)
    write_table(path, "params", info, ["value"], params.values[:, None])


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(model, params, meta)``."""
    meta, _, rows = read_table(path, "params")
    arrays, offset = {}, 0
    values = rows[:, 0]
    for item in meta["layout"].split(";"):
        name, _, dims = item.partition(":")
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
        size = int(np.prod(shape, dtype=int))
        arrays[name] = values[offset:offset + size].reshape(shape)
        offset += size
    params = FlatParams.from_arrays(arrays)
    kind = meta["kind"]
    n, m = int(meta["state_dim"]), int(meta["action_dim"])
    if kind == "quadratic":
        model = QuadraticCritic()
    elif kind == "mlp":
        model = MlpCritic(n, m, int(meta["hidden"]), int(meta["n_hidden"]))
    elif kind == "linear":
        model = LinearActor(n, m)
    else:
        raise ValueError(f"unknown model kind {kind!r} in {path}")
    return model, params, meta
