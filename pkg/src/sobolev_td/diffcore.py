"""Forward-over-reverse differentiation for small critic/actor networks.

Input derivatives are carried as forward-mode tangents: every intermediate
quantity is a :class:`Dual` holding a value and one tangent per seeded input
coordinate.  Operations are recorded on a :class:`ParamTape` so that a reverse
sweep can differentiate any scalar function of the values *and* the tangents
with respect to the parameters.  That second derivative is what a loss on
``grad_x Q`` needs.

Data layout: a ``Dual`` wraps one array of shape ``(batch, 1 + d, width)``.
Channel 0 is the value, channels ``1..d`` are the tangents.  All math is
float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01


class DimensionError(ValueError):
    """Input array does not match a model's declared dimensions."""


# --------------------------------------------------------------------------
# flat parameter vectors


@dataclass
class FlatParams:
    """A flat float64 vector partitioned into named, non-overlapping segments."""

    values: np.ndarray
    layout: dict[str, tuple[int, tuple[int, ...]]]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("FlatParams.values must be one-dimensional")
        offset = 0
        for name, (start, shape) in self.layout.items():
            if start != offset:
                raise ValueError(f"segment {name!r} starts at {start}, expected {offset}")
            offset += int(np.prod(shape, dtype=int))
        if offset != self.values.size:
            raise ValueError(f"layout covers {offset} entries, vector has {self.values.size}")

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "FlatParams":
        layout, chunks, offset = {}, [], 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            layout[name] = (offset, arr.shape)
            chunks.append(arr.ravel())
            offset += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, layout)

    def view(self, name: str) -> np.ndarray:
        start, shape = self.layout[name]
        size = int(np.prod(shape, dtype=int))
        return self.values[start:start + size].reshape(shape)

    def names(self) -> list[str]:
        return list(self.layout)

    def copy(self) -> "FlatParams":
        return FlatParams(self.values.copy(), dict(self.layout))

    def with_values(self, values: np.ndarray) -> "FlatParams":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise DimensionError(f"expected {self.values.shape}, got {values.shape}")
        return FlatParams(values, dict(self.layout))

    def zeros_like(self) -> np.ndarray:
        return np.zeros_like(self.values)

    def __len__(self) -> int:
        return self.values.size


# --------------------------------------------------------------------------
# dual arrays and the tape


class Dual:
    """Batch of dual vectors: value plus ``d`` forward tangents per entry."""

    __slots__ = ("data", "node")

    def __init__(self, data: np.ndarray, node: int = -1):
        self.data = data
        self.node = node

    @property
    def value(self) -> np.ndarray:
        return self.data[:, 0, :]

    @property
    def tangents(self) -> np.ndarray:
        return self.data[:, 1:, :]

    @property
    def n_tangents(self) -> int:
        return self.data.shape[1] - 1

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def batch(self) -> int:
        return self.data.shape[0]


# An adjoint is (grad wrt value (B, k), grad wrt tangents (B, d, k) or None).
# None means "known to be exactly zero" and lets the sweep skip tangent work.
Adjoint = tuple[np.ndarray, "np.ndarray | None"]


@dataclass
class _Node:
    out: Dual
    parents: tuple[int, ...]
    backward: Callable[[Adjoint], tuple[list[Adjoint | None], dict[str, np.ndarray]]] | None
    params: tuple[str, ...] = ()


def _add_adj(a: Adjoint | None, b: Adjoint) -> Adjoint:
    if a is None:
        return b
    gv = a[0] + b[0]
    if a[1] is None:
        gt = b[1]
    elif b[1] is None:
        gt = a[1]
    else:
        gt = a[1] + b[1]
    return gv, gt


def _matmul_channels(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # (B, c, k) @ (k, m) as one 2-D GEMM
    b, c, k = x.shape
    return (x.reshape(b * c, k) @ w).reshape(b, c, w.shape[1])


class ParamTape:
    """Append-only record of one forward pass, confined to one training step."""

    def __init__(self, params: FlatParams, n_tangents: int):
        self.params = params
        self.n_tangents = int(n_tangents)
        self.nodes: list[_Node] = []
        self.param_index: dict[int, tuple[str, ...]] = {}

    # -- recording helpers -------------------------------------------------

    def _record(self, data, parents=(), backward=None, params=()) -> Dual:
        out = Dual(data, len(self.nodes))
        self.nodes.append(_Node(out, tuple(parents), backward, tuple(params)))
        if params:
            self.param_index[out.node] = tuple(params)
        return out

    def _check(self, x: Dual):
        if x.node < 0 or x.node >= len(self.nodes) or self.nodes[x.node].out is not x:
            raise ValueError("Dual does not belong to this tape")

    # -- leaves --------------------------------------------------------------

    def input(self, x: np.ndarray, seed: np.ndarray | None = None) -> Dual:
        """Leaf for a (B, d_in) input; tangent j is ``seed[j]`` (identity by default)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        b, k = x.shape
        d = self.n_tangents
        data = np.zeros((b, 1 + d, k))
        data[:, 0, :] = x
        if d:
            if seed is None:
                if d != k:
                    raise DimensionError(f"tape seeds {d} tangents but input has {k} coordinates")
                seed = np.eye(k)
            data[:, 1:, :] = np.asarray(seed, dtype=np.float64)
        return self._record(data)

    def constant(self, c: np.ndarray) -> Dual:
        c = np.atleast_2d(np.asarray(c, dtype=np.float64))
        data = np.zeros((c.shape[0], 1 + self.n_tangents, c.shape[1]))
        data[:, 0, :] = c
        return self._record(data)

    # -- primitives ------------------------------------------------------------

    def linear(self, x: Dual, weight: str, bias: str | None = None) -> Dual:
        """``x @ W (+ b)``; the bias only touches the value channel."""
        self._check(x)
        w = self.params.view(weight)
        if w.ndim != 2 or w.shape[0] != x.width:
            raise DimensionError(f"{weight} has shape {w.shape}, input width {x.width}")
        b = self.params.view(bias) if bias is not None else None
        d = x.n_tangents
        data = np.empty((x.batch, 1 + d, w.shape[1]))
        # value channel computed on its own so it matches a tangent-free pass exactly
        xv = np.ascontiguousarray(x.value)
        xt = np.ascontiguousarray(x.tangents)
        v = xv @ w
        if b is not None:
            v += b
        data[:, 0, :] = v
        if d:
            data[:, 1:, :] = _matmul_channels(xt, w)

        def backward(adj):
            gv, gt = adj
            grads = {}
            gw = xv.T @ gv
            if gt is not None:
                gw += xt.reshape(-1, xt.shape[2]).T @ gt.reshape(-1, gt.shape[2])
            grads[weight] = gw
            if bias is not None:
                grads[bias] = gv.sum(axis=0)
            gxv = gv @ w.T
            gxt = _matmul_channels(gt, w.T) if gt is not None else None
            return [(gxv, gxt)], grads

        params = (weight,) if bias is None else (weight, bias)
        return self._record(data, (x.node,), backward, params)

    def leaky_relu(self, x: Dual, slope: float = LEAKY_SLOPE) -> Dual:
        # derivative at exactly 0 taken from the x >= 0 branch
        self._check(x)
        gain = np.where(x.value >= 0, 1.0, slope)
        data = x.data * gain[:, None, :]

        def backward(adj):
            gv, gt = adj
            return [(gv * gain, gt * gain[:, None, :] if gt is not None else None)], {}

        return self._record(data, (x.node,), backward)

    def add(self, x: Dual, y: Dual) -> Dual:
        self._check(x)
        self._check(y)
        data = x.data + y.data

        def backward(adj):
            return [adj, adj], {}

        return self._record(data, (x.node, y.node), backward)

    def mul(self, x: Dual, y: Dual) -> Dual:
        """Elementwise product; tangents follow the product rule."""
        self._check(x)
        self._check(y)
        xv, yv = x.value, y.value
        xt, yt = x.tangents, y.tangents
        data = np.empty_like(x.data)
        data[:, 0, :] = xv * yv
        data[:, 1:, :] = xt * yv[:, None, :] + xv[:, None, :] * yt

        def backward(adj):
            gv, gt = adj
            gxv = gv * yv
            gyv = gv * xv
            if gt is None:
                return [(gxv, None), (gyv, None)], {}
            gxv = gxv + (gt * yt).sum(axis=1)
            gyv = gyv + (gt * xt).sum(axis=1)
            return [(gxv, gt * yv[:, None, :]), (gyv, gt * xv[:, None, :])], {}

        return self._record(data, (x.node, y.node), backward)

    def square(self, x: Dual) -> Dual:
        self._check(x)
        xv, xt = x.value, x.tangents
        data = np.empty_like(x.data)
        data[:, 0, :] = xv * xv
        data[:, 1:, :] = 2.0 * xt * xv[:, None, :]

        def backward(adj):
            gv, gt = adj
            gxv = 2.0 * gv * xv
            if gt is None:
                return [(gxv, None)], {}
            gxv = gxv + 2.0 * (gt * xt).sum(axis=1)
            return [(gxv, 2.0 * gt * xv[:, None, :])], {}

        return self._record(data, (x.node,), backward)

    def norm(self, x: Dual) -> Dual:
        """Euclidean norm over the feature axis; undefined where the norm is 0."""
        self._check(x)
        xv, xt = x.value, x.tangents
        n = np.sqrt((xv * xv).sum(axis=1, keepdims=True))            # (B, 1)
        tout = (xt * xv[:, None, :]).sum(axis=2, keepdims=True) / n[:, None, :]  # (B, d, 1)
        data = np.concatenate([n[:, None, :], tout], axis=1)

        def backward(adj):
            gv, gt = adj
            gxv = gv * xv / n
            if gt is None:
                return [(gxv, None)], {}
            # d tout_j / d v_k = (t_jk - tout_j v_k / n) / n
            dt = (xt - tout * xv[:, None, :] / n[:, None, :]) / n[:, None, :]
            gxv = gxv + (gt * dt).sum(axis=1)
            gxt = gt * xv[:, None, :] / n[:, None, :]
            return [(gxv, gxt)], {}

        return self._record(data, (x.node,), backward)

    def take(self, x: Dual, columns: Sequence[int]) -> Dual:
        self._check(x)
        cols = np.asarray(columns, dtype=int)
        data = x.data[:, :, cols]
        width = x.width

        def backward(adj):
            gv, gt = adj
            fv = np.zeros((gv.shape[0], width))
            np.add.at(fv, (slice(None), cols), gv)
            ft = None
            if gt is not None:
                ft = np.zeros((gt.shape[0], gt.shape[1], width))
                np.add.at(ft, (slice(None), slice(None), cols), gt)
            return [(fv, ft)], {}

        return self._record(data, (x.node,), backward)

    def concat(self, xs: Sequence[Dual]) -> Dual:
        for x in xs:
            self._check(x)
        data = np.concatenate([x.data for x in xs], axis=2)
        bounds = np.cumsum([0] + [x.width for x in xs])

        def backward(adj):
            gv, gt = adj
            out = []
            for lo, hi in zip(bounds[:-1], bounds[1:]):
                out.append((gv[:, lo:hi], gt[:, :, lo:hi] if gt is not None else None))
            return out, {}

        return self._record(data, tuple(x.node for x in xs), backward)

    # -- reverse sweep -----------------------------------------------------------

    def backward(self, out: Dual, grad_value: np.ndarray, grad_tangents: np.ndarray | None) -> np.ndarray:
        """Reverse sweep from ``out``; returns the flat parameter gradient."""
        self._check(out)
        flat = np.zeros_like(self.params.values)
        adjoints: dict[int, Adjoint] = {out.node: (grad_value, grad_tangents)}
        for idx in range(out.node, -1, -1):
            adj = adjoints.pop(idx, None)
            node = self.nodes[idx]
            if adj is None or node.backward is None:
                continue
            parent_adjs, grads = node.backward(adj)
            for name, g in grads.items():
                start, shape = self.params.layout[name]
                flat[start:start + g.size] += g.ravel()
            for p, pa in zip(node.parents, parent_adjs):
                if pa is not None:
                    adjoints[p] = _add_adj(adjoints.get(p), pa)
        return flat


# --------------------------------------------------------------------------
# model-level entry points


def _inputs(model, s, a) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    s2 = s.reshape(-1, model.state_dim) if s.size else s.reshape(0, model.state_dim)
    a2 = a.reshape(-1, model.action_dim) if a.size else a.reshape(0, model.action_dim)
    if s.ndim > 2 or a.ndim > 2 or s2.shape[0] != a2.shape[0] \
            or (s.ndim == 2 and s.shape[1] != model.state_dim) \
            or (a.ndim == 2 and a.shape[1] != model.action_dim):
        raise DimensionError(
            f"model expects state dim {model.state_dim} and action dim {model.action_dim}, "
            f"got shapes {s.shape} and {a.shape}")
    return np.concatenate([s2, a2], axis=1)


def eval_batch(model, params: FlatParams, s, a) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Q, grad_s Q and grad_a Q for a batch of (s, a) pairs."""
    x = _inputs(model, s, a)
    n = model.state_dim
    tape = ParamTape(params, x.shape[1])
    out = model.build(tape, tape.input(x))
    q = out.value[:, 0].copy()
    g = out.tangents[:, :, 0]
    return q, g[:, :n].copy(), g[:, n:].copy()


def eval_with_input_grads(model, params: FlatParams, s, a) -> tuple[float, np.ndarray, np.ndarray]:
    """Single-point ``(Q, grad_s Q, grad_a Q)``."""
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    if s.shape != (model.state_dim,) or a.shape != (model.action_dim,):
        raise DimensionError(
            f"expected s of shape ({model.state_dim},) and a of shape ({model.action_dim},), "
            f"got {s.shape} and {a.shape}")
    q, gs, ga = eval_batch(model, params, s[None], a[None])
    return float(q[0]), gs[0], ga[0]


def sobolev_loss_arrays(model, params: FlatParams, s, a, y, dy_ds, dy_da,
                        lambda_s: float, lambda_a: float,
                        carry_tangents: bool | None = None) -> tuple[float, np.ndarray]:
    """Batch-mean Sobolev loss and its exact parameter gradient (array inputs).

    Tangents are carried whenever a gradient weight is positive; pass
    ``carry_tangents=True`` to carry them even with both weights at zero.
    """
    if lambda_s < 0 or lambda_a < 0:
        raise ValueError(f"lambda_s and lambda_a must be >= 0, got {lambda_s}, {lambda_a}")
    x = _inputs(model, s, a)
    bsz = x.shape[0]
    if bsz == 0:
        raise ValueError("empty batch")
    n = model.state_dim
    y = np.asarray(y, dtype=np.float64).reshape(bsz)
    dy_ds = np.asarray(dy_ds, dtype=np.float64).reshape(bsz, n)
    dy_da = np.asarray(dy_da, dtype=np.float64).reshape(bsz, model.action_dim)

    use_tangents = (lambda_s > 0 or lambda_a > 0) if carry_tangents is None else carry_tangents
    tape = ParamTape(params, x.shape[1] if use_tangents else 0)
    out = model.build(tape, tape.input(x))
    err = out.value[:, 0] - y
    loss = np.mean(err * err)
    grad_v = (2.0 / bsz) * err[:, None]
    grad_t = None
    if use_tangents:
        g = out.tangents[:, :, 0]
        es = g[:, :n] - dy_ds
        ea = g[:, n:] - dy_da
        if lambda_s > 0:
            loss = loss + lambda_s * np.mean((es * es).sum(axis=1))
        if lambda_a > 0:
            loss = loss + lambda_a * np.mean((ea * ea).sum(axis=1))
        grad_t = np.concatenate([(2.0 * lambda_s / bsz) * es, (2.0 * lambda_a / bsz) * ea], axis=1)[:, :, None]
    return float(loss), tape.backward(out, grad_v, grad_t)


def mse_loss_and_param_grads(model, params: FlatParams, s, a, y) -> tuple[float, np.ndarray]:
    """Value-only TD regression loss; no tangents are carried at all."""
    x = _inputs(model, s, a)
    bsz = x.shape[0]
    if bsz == 0:
        raise ValueError("empty batch")
    y = np.asarray(y, dtype=np.float64).reshape(bsz)
    tape = ParamTape(params, 0)
    out = model.build(tape, tape.input(x))
    err = out.value[:, 0] - y
    return float(np.mean(err * err)), tape.backward(out, (2.0 / bsz) * err[:, None], None)


def sobolev_loss_and_param_grads(model, params: FlatParams, batch: Iterable, lambda_s: float,
                                 lambda_a: float) -> tuple[float, np.ndarray]:
    """Sobolev loss over a list of ``(s, a, target)`` triples.

    ``target`` needs ``y``, ``dy_ds`` and ``dy_da`` attributes.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    s = np.array([np.atleast_1d(b[0]) for b in batch], dtype=np.float64)
    a = np.array([np.atleast_1d(b[1]) for b in batch], dtype=np.float64)
    y = np.array([b[2].y for b in batch], dtype=np.float64)
    dys = np.array([np.atleast_1d(b[2].dy_ds) for b in batch], dtype=np.float64)
    dya = np.array([np.atleast_1d(b[2].dy_da) for b in batch], dtype=np.float64)
    return sobolev_loss_arrays(model, params, s, a, y, dys, dya, lambda_s, lambda_a)


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64, ndmin=1)
    grad = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        grad.flat[i] = (f(xp) - f(xm)) / (2.0 * h)
    return grad
