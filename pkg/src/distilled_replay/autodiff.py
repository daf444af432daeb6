"""Reverse-mode automatic differentiation over a recorded op graph.

Every op appends a node to its :class:`Graph`. Vector-Jacobian products are
themselves written with graph ops, so calling :func:`grad` with
``create_graph=True`` records the backward pass and the result can be
differentiated again. This is what makes gradients through unrolled SGD exact.

Arrays are plain numpy arrays; ``Var`` wraps one together with its graph id.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(ValueError):
    pass


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: "Var"
    attrs: dict = field(default_factory=dict)
    saved: dict = field(default_factory=dict)


class Var:
    __slots__ = ("graph", "id", "value", "requires_grad")
    __array_priority__ = 100

    def __init__(self, graph: "Graph", id: int, value: np.ndarray, requires_grad: bool):
        self.graph = graph
        self.id = id
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape}, requires_grad={self.requires_grad})"

    def _lift(self, other):
        if isinstance(other, Var):
            return other
        return self.graph.const(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return self.graph.apply("add", [self, self._lift(other)])

    def __radd__(self, other):
        return self.graph.apply("add", [self._lift(other), self])

    def __sub__(self, other):
        return self.graph.apply("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return self.graph.apply("sub", [self._lift(other), self])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.apply("scale", [self], c=float(other))
        return self.graph.apply("mul", [self, self._lift(other)])

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.apply("scale", [self], c=float(other))
        return self.graph.apply("mul", [self._lift(other), self])

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("Var division is only defined for python scalars")
        return self.graph.apply("scale", [self], c=1.0 / float(other))

    def __neg__(self):
        return self.graph.apply("scale", [self], c=-1.0)

    def __matmul__(self, other):
        return self.graph.apply("matmul", [self, self._lift(other)])

    @property
    def T(self):
        return self.graph.apply("transpose", [self])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        shape = [int(s) for s in shape]
        if shape.count(-1) == 1:
            known = int(np.prod([s for s in shape if s != -1]))
            if known and self.value.size % known == 0:
                shape[shape.index(-1)] = self.value.size // known
        return self.graph.apply("reshape", [self], shape=tuple(shape))

    def sum(self, axis=None, keepdims=False):
        return self.graph.apply("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.graph.apply("mean", [self], axis=axis, keepdims=keepdims)


class Graph:
    """Append-only op record.

    With ``record=False`` ops are evaluated but nothing is stored, which is
    what evaluation and plain SGD steps use.
    """

    def __init__(self, record: bool = True):
        self.nodes: list[Node] = []
        self._ids = itertools.count()
        self._record = record

    def __len__(self):
        return len(self.nodes)

    def clear(self) -> None:
        """Drop the record. Vars and nodes reference each other, so this frees
        large unrolled graphs without waiting for the cyclic collector."""
        self.nodes.clear()

    @contextlib.contextmanager
    def recording(self, enabled: bool):
        prev = self._record
        self._record = enabled
        try:
            yield self
        finally:
            self._record = prev

    def no_record(self):
        return self.recording(False)

    def var(self, value, requires_grad: bool = False, dtype=None) -> Var:
        arr = np.array(value, dtype=dtype if dtype is not None else _default_dtype(value))
        return Var(self, next(self._ids), arr, requires_grad)

    def const(self, value, dtype=None) -> Var:
        return self.var(value, requires_grad=False, dtype=dtype)

    def apply(self, op: str, inputs: Sequence[Var], **attrs) -> Var:
        try:
            spec = OPS[op]
        except KeyError:
            raise ContractError(f"unknown op {op!r}") from None
        for v in inputs:
            if not isinstance(v, Var):
                raise TypeError(f"{op}: inputs must be Var, got {type(v).__name__}")
            if v.graph is not self:
                raise ContractError(f"{op}: input Var {v.id} belongs to another graph")
        values = [v.value for v in inputs]
        spec.check(values, attrs, op)
        saved: dict = {}
        # overflow surfaces as NumericError below, not as a numpy warning
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out = spec.forward(*values, saved=saved, **attrs)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"{op} produced non-finite values")
        requires_grad = self._record and any(v.requires_grad for v in inputs)
        res = Var(self, next(self._ids), out, requires_grad)
        if self._record:
            self.nodes.append(Node(op, tuple(inputs), res, attrs, saved))
        return res

    def replay(self) -> dict:
        """Re-execute every recorded node from its recorded inputs.

        Returns a map from output id to the recomputed array. Inputs that were
        not produced by a recorded node (leaves, constants, unrecorded results)
        are taken from the Var itself.
        """
        values: dict[int, np.ndarray] = {}
        for node in self.nodes:
            args = [values.get(v.id, v.value) for v in node.inputs]
            values[node.output.id] = OPS[node.kind].forward(*args, saved={}, **node.attrs)
        return values


def _default_dtype(value):
    if isinstance(value, np.ndarray) and value.dtype in (np.float32, np.float64):
        return value.dtype
    return np.float64


# ---------------------------------------------------------------------------
# op table


@dataclass(frozen=True)
class OpSpec:
    forward: Callable
    vjp: Callable
    check: Callable


OPS: dict[str, OpSpec] = {}


def _no_check(values, attrs, op):
    pass


def _register(name, check=_no_check):
    def deco(cls):
        OPS[name] = OpSpec(cls.forward, cls.vjp, check)
        return cls
    return deco


def _check_broadcast(values, attrs, op):
    a, b = values
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _sum_to(g: Var, shape: tuple) -> Var:
    if g.shape == tuple(shape):
        return g
    return g.graph.apply("sum_to", [g], shape=tuple(shape))


@_register("add", _check_broadcast)
class _Add:
    @staticmethod
    def forward(a, b, saved):
        return a + b

    @staticmethod
    def vjp(g, node):
        a, b = node.inputs
        return [_sum_to(g, a.shape), _sum_to(g, b.shape)]


@_register("sub", _check_broadcast)
class _Sub:
    @staticmethod
    def forward(a, b, saved):
        return a - b

    @staticmethod
    def vjp(g, node):
        a, b = node.inputs
        return [_sum_to(g, a.shape), _sum_to(-g, b.shape)]


@_register("mul", _check_broadcast)
class _Mul:
    @staticmethod
    def forward(a, b, saved):
        return a * b

    @staticmethod
    def vjp(g, node):
        a, b = node.inputs
        return [_sum_to(g * b, a.shape), _sum_to(g * a, b.shape)]


@_register("scale")
class _Scale:
    @staticmethod
    def forward(a, saved, c):
        return a * a.dtype.type(c)

    @staticmethod
    def vjp(g, node):
        return [g.graph.apply("scale", [g], c=node.attrs["c"])]


def _check_matmul(values, attrs, op):
    a, b = values
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")


@_register("matmul", _check_matmul)
class _Matmul:
    @staticmethod
    def forward(a, b, saved):
        return a @ b

    @staticmethod
    def vjp(g, node):
        a, b = node.inputs
        return [g @ b.T, a.T @ g]


def _check_2d(values, attrs, op):
    if values[0].ndim != 2:
        raise ShapeError(f"{op}: expected a 2-D input, got shape {values[0].shape}")


@_register("transpose", _check_2d)
class _Transpose:
    @staticmethod
    def forward(a, saved):
        return np.ascontiguousarray(a.T)

    @staticmethod
    def vjp(g, node):
        return [g.T]


def _check_reshape(values, attrs, op):
    shape = attrs["shape"]
    if int(np.prod(shape)) != values[0].size:
        raise ShapeError(f"reshape: cannot reshape {values[0].shape} to {shape}")


@_register("reshape", _check_reshape)
class _Reshape:
    @staticmethod
    def forward(a, saved, shape):
        return a.reshape(shape)

    @staticmethod
    def vjp(g, node):
        return [g.reshape(node.inputs[0].shape)]


def _kept_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = {ax % len(shape) for ax in axes}
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def _expand_back(g: Var, node) -> Var:
    in_shape = node.inputs[0].shape
    kept = _kept_shape(in_shape, node.attrs["axis"])
    if g.shape != kept:
        g = g.reshape(kept)
    return g.graph.apply("broadcast_to", [g], shape=in_shape)


@_register("sum")
class _Sum:
    @staticmethod
    def forward(a, saved, axis=None, keepdims=False):
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def vjp(g, node):
        return [_expand_back(g, node)]


@_register("mean")
class _Mean:
    @staticmethod
    def forward(a, saved, axis=None, keepdims=False):
        return np.asarray(a.mean(axis=axis, keepdims=keepdims))

    @staticmethod
    def vjp(g, node):
        in_shape = node.inputs[0].shape
        count = int(np.prod(in_shape)) // max(1, int(np.prod(node.output.shape)))
        return [_expand_back(g, node) * (1.0 / count)]


def _check_broadcast_to(values, attrs, op):
    try:
        np.broadcast_to(values[0], attrs["shape"])
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {values[0].shape} to {attrs['shape']}") from None


@_register("broadcast_to", _check_broadcast_to)
class _BroadcastTo:
    @staticmethod
    def forward(a, saved, shape):
        return np.ascontiguousarray(np.broadcast_to(a, shape))

    @staticmethod
    def vjp(g, node):
        return [_sum_to(g, node.inputs[0].shape)]


def _reduce_to(a: np.ndarray, shape: tuple) -> np.ndarray:
    lead = a.ndim - len(shape)
    out = a.sum(axis=tuple(range(lead))) if lead else a
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and out.shape[i] != 1)
    if axes:
        out = out.sum(axis=axes, keepdims=True)
    return np.asarray(out).reshape(shape)


@_register("sum_to")
class _SumTo:
    @staticmethod
    def forward(a, saved, shape):
        return _reduce_to(a, shape)

    @staticmethod
    def vjp(g, node):
        return [g.graph.apply("broadcast_to", [g], shape=node.inputs[0].shape)]


@_register("relu")
class _Relu:
    @staticmethod
    def forward(a, saved):
        return np.maximum(a, 0)

    @staticmethod
    def vjp(g, node):
        x = node.inputs[0]
        # derivative of the mask is zero almost everywhere
        mask = g.graph.const((x.value > 0).astype(x.dtype))
        return [g * mask]


@_register("tanh")
class _Tanh:
    @staticmethod
    def forward(a, saved):
        return np.tanh(a)

    @staticmethod
    def vjp(g, node):
        y = node.output
        return [g * (1.0 - y * y)]


@_register("softmax")
class _Softmax:
    @staticmethod
    def forward(a, saved):
        z = a - a.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    @staticmethod
    def vjp(g, node):
        s = node.output
        inner = (g * s).sum(axis=-1, keepdims=True)
        return [s * (g - inner)]


def _check_xent(values, attrs, op):
    logits, targets = values
    if logits.shape != targets.shape or logits.ndim not in (1, 2):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} and targets {targets.shape} must match (1-D or 2-D)"
        )


@_register("softmax_cross_entropy", _check_xent)
class _SoftmaxCrossEntropy:
    """Mean over rows of -sum(y * log_softmax(z)). Targets are treated as constants."""

    @staticmethod
    def forward(logits, targets, saved):
        z = logits if logits.ndim == 2 else logits[None, :]
        t = targets if targets.ndim == 2 else targets[None, :]
        m = z.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
        per_row = (t * (lse - z)).sum(axis=1)
        return np.asarray(per_row.mean())

    @staticmethod
    def vjp(g, node):
        logits, targets = node.inputs
        rows = logits.shape[0] if logits.ndim == 2 else 1
        probs = logits.graph.apply("softmax", [logits])
        return [(g * (probs - targets)) * (1.0 / rows), None]


# -- convolution (stride 1, valid padding) ----------------------------------


def _conv_forward(x, w):
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N,C,Ho,Wo,kh,kw
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,K
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(g, w):
    kh, kw = w.shape[2], w.shape[3]
    gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return _conv_forward(gp, wf)


def _conv_weight_grad(x, g):
    ho, wo = g.shape[2], g.shape[3]
    win = sliding_window_view(x, (ho, wo), axis=(2, 3))  # N,C,kh,kw,Ho,Wo
    return np.ascontiguousarray(np.tensordot(g, win, axes=([0, 2, 3], [0, 4, 5])))  # K,C,kh,kw


def _check_conv(values, attrs, op):
    x, w = values
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: expected x[N,C,H,W] and w[K,C,kh,kw], got {x.shape} and {w.shape}")
    if w.shape[2] > x.shape[2] or w.shape[3] > x.shape[3]:
        raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than input {x.shape[2:]}")


@_register("conv2d", _check_conv)
class _Conv2d:
    @staticmethod
    def forward(x, w, saved):
        return _conv_forward(x, w)

    @staticmethod
    def vjp(g, node):
        x, w = node.inputs
        graph = g.graph
        return [
            graph.apply("conv2d_input_grad", [g, w]),
            graph.apply("conv2d_weight_grad", [x, g]),
        ]


@_register("conv2d_input_grad")
class _Conv2dInputGrad:
    @staticmethod
    def forward(g, w, saved):
        return _conv_input_grad(g, w)

    @staticmethod
    def vjp(u, node):
        g, w = node.inputs
        graph = u.graph
        return [graph.apply("conv2d", [u, w]), graph.apply("conv2d_weight_grad", [u, g])]


@_register("conv2d_weight_grad")
class _Conv2dWeightGrad:
    @staticmethod
    def forward(x, g, saved):
        return _conv_weight_grad(x, g)

    @staticmethod
    def vjp(v, node):
        x, g = node.inputs
        graph = v.graph
        return [graph.apply("conv2d_input_grad", [g, v]), graph.apply("conv2d", [x, v])]


def _check_pool(values, attrs, op):
    x = values[0]
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2x2: expected [N,C,H,W] with even H, W, got {x.shape}")


@_register("maxpool2x2", _check_pool)
class _MaxPool2x2:
    @staticmethod
    def forward(x, saved):
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        # argmax returns the first maximum, i.e. row-major tie breaking
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        onehot = np.zeros_like(win)
        np.put_along_axis(onehot, idx[..., None], 1, axis=-1)
        saved["mask"] = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return np.ascontiguousarray(out)

    @staticmethod
    def vjp(g, node):
        n, c, h, w = g.shape
        up = g.reshape(n, c, h, 1, w, 1)
        up = g.graph.apply("broadcast_to", [up], shape=(n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)
        return [up * g.graph.const(node.saved["mask"])]


# ---------------------------------------------------------------------------
# functional helpers


def relu(x: Var) -> Var:
    return x.graph.apply("relu", [x])


def tanh(x: Var) -> Var:
    return x.graph.apply("tanh", [x])


def softmax(x: Var) -> Var:
    return x.graph.apply("softmax", [x])


def conv2d(x: Var, w: Var) -> Var:
    return x.graph.apply("conv2d", [x, w])


def maxpool2x2(x: Var) -> Var:
    return x.graph.apply("maxpool2x2", [x])


def softmax_cross_entropy(logits: Var, targets: Var) -> Var:
    return logits.graph.apply("softmax_cross_entropy", [logits, targets])


def grad(output: Var, wrt: Sequence[Var], create_graph: bool = False) -> list[Var]:
    """Gradients of scalar ``output`` with respect to each Var in ``wrt``.

    With ``create_graph=True`` the backward ops are recorded, so the returned
    Vars can be fed into further ops and differentiated again. A ``wrt`` Var
    that ``output`` does not depend on gets a zero gradient.
    """
    graph = output.graph
    if output.shape != ():
        raise ContractError(f"grad: output must be a scalar, got shape {output.shape}")
    for w in wrt:
        if w.graph is not graph:
            raise ContractError(f"grad: Var {w.id} belongs to another graph")
        if not w.requires_grad:
            raise ContractError(f"grad: Var {w.id} does not require grad")

    wrt_ids = {w.id for w in wrt}
    # nodes downstream of some wrt Var; only those carry nonzero cotangents
    live: set[int] = set(wrt_ids)
    nodes = [n for n in graph.nodes if n.output.id <= output.id]
    for n in nodes:
        if any(v.id in live for v in n.inputs):
            live.add(n.output.id)

    results: dict[int, Var] = {}
    if output.id in live:
        cot: dict[int, Var] = {output.id: graph.const(np.ones((), dtype=output.dtype))}
        with graph.recording(create_graph):
            for n in reversed(nodes):
                g = cot.get(n.output.id)
                if g is None:
                    continue
                if n.output.id not in wrt_ids:
                    del cot[n.output.id]
                targets = [v.id in live for v in n.inputs]
                if not any(targets):
                    continue
                grads = OPS[n.kind].vjp(g, n)
                for v, gv, needed in zip(n.inputs, grads, targets):
                    if not needed or gv is None:
                        continue
                    prev = cot.get(v.id)
                    cot[v.id] = gv if prev is None else prev + gv
        results = {i: cot[i] for i in wrt_ids if i in cot}

    out = []
    for w in wrt:
        g = results.get(w.id)
        out.append(g if g is not None else graph.const(np.zeros(w.shape, dtype=w.dtype)))
    return out


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    at: np.ndarray,
    eps: float,
    analytic: np.ndarray,
    coords: Optional[Sequence[int]] = None,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error of ``analytic`` against central differences of ``f``.

    ``coords`` are flat indices into ``at``; if omitted, ``max_coords`` of them
    are drawn at random (all of them when ``max_coords`` is None). The relative
    error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if eps <= 0:
        raise ContractError("finite_diff_check: eps must be positive")
    at = np.asarray(at, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if analytic.size != at.size:
        raise ShapeError(f"finite_diff_check: analytic gradient has {analytic.size} entries, x has {at.size}")
    if coords is None:
        if max_coords is None or max_coords >= at.size:
            coords = range(at.size)
        else:
            coords = np.random.default_rng(seed).choice(at.size, size=max_coords, replace=False)
    worst = 0.0
    flat = at.reshape(-1)
    for i in coords:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += eps
        xm[i] -= eps
        fp = float(f(xp.reshape(at.shape)))
        fm = float(f(xm.reshape(at.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"finite_diff_check: f is not finite near coordinate {i}")
        numeric = (fp - fm) / (2 * eps)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


__all__ = [
    "ContractError",
    "Graph",
    "Node",
    "NumericError",
    "OPS",
    "ShapeError",
    "Var",
    "conv2d",
    "finite_diff_check",
    "grad",
    "maxpool2x2",
    "relu",
    "softmax",
    "softmax_cross_entropy",
    "tanh",
]
