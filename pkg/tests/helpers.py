"""Test-only reference implementations, kept independent of the library paths."""
import numpy as np

from sobolev_td.critics import MlpCritic

# one line per acceptance criterion, printed at the end of the session by conftest
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, title: str, ok: bool, detail: str) -> str:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number} ({title}): {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def plain_mlp_mse(model: MlpCritic, params, s, a, y):
    """Value-only MSE and its gradient by hand-written backprop (no tangents)."""
    h = np.concatenate([np.asarray(s).reshape(-1, 1), np.asarray(a).reshape(-1, 1)], axis=1)
    last = len(model.sizes) - 2
    acts, gains = [], []
    for layer in range(last + 1):
        acts.append(h)
        z = h @ params.view(f"W{layer}")
        z += params.view(f"b{layer}")
        if layer < last:
            gain = np.where(z >= 0, 1.0, model.slope)
            gains.append(gain)
            h = z * gain
        else:
            h = z
    err = h[:, 0] - y
    loss = np.mean(err * err)
    g = (2.0 / len(y)) * err[:, None]
    grads = {}
    for layer in range(last, -1, -1):
        if layer < last:
            g = g * gains[layer]
        w = params.view(f"W{layer}")
        grads[f"W{layer}"] = acts[layer].T @ g
        grads[f"b{layer}"] = g.sum(axis=0)
        g = g @ w.T
    flat = np.concatenate([grads[name].ravel() for name in params.layout])
    return float(loss), flat


def kink_free(model: MlpCritic, params, s, a, margin=1e-3):
    """Mask of points whose hidden pre-activations all stay at least ``margin`` from 0."""
    pre = model.preactivations(params, s, a)
    ok = np.ones(len(np.atleast_1d(s)), dtype=bool)
    for z in pre:
        ok &= (np.abs(z) > margin).all(axis=1)
    return ok


def activation_pattern(model: MlpCritic, params, s, a):
    return tuple((z >= 0).tobytes() for z in model.preactivations(params, s, a))


def rel_err(g, fd, floor=1e-5):
    g = np.asarray(g)
    fd = np.asarray(fd)
    return np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)


class SmoothCritic:
    """Q(x) = x'Mx + w.sin(x) over x = (s, a); analytic gradients, no kinks."""

    kind = "smooth"

    def __init__(self, n, m, seed=0):
        rng = np.random.default_rng(seed)
        self.state_dim, self.action_dim = n, m
        M = rng.normal(size=(n + m, n + m))
        self.M = 0.5 * (M + M.T)
        self.w = rng.normal(size=n + m)

    def _x(self, s, a):
        return np.concatenate([np.asarray(s, float).reshape(-1, self.state_dim),
                               np.asarray(a, float).reshape(-1, self.action_dim)], axis=1)

    def values(self, params, s, a):
        x = self._x(s, a)
        return np.einsum("bi,ij,bj->b", x, self.M, x) + np.sin(x) @ self.w

    def evaluate(self, params, s, a):
        x = self._x(s, a)
        g = 2 * x @ self.M + self.w * np.cos(x)
        return self.values(params, s, a), g[:, :self.state_dim], g[:, self.state_dim:]
