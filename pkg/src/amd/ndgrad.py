"""Dense-array computation graph with forward evaluation and reverse-mode gradients.

Graphs are built once with the ``Graph`` builder methods and then evaluated any
number of times. Every op works on float64 numpy arrays with static shapes.
There is no implicit broadcasting: ``add``/``sub``/``mul``/``div`` require equal
shapes, and the only shape-expanding ops are ``bias_add`` (row vector added to
the last axis) and ``tile``.

Typical use::

    g = Graph()
    x = g.input("x", (3,))
    w = g.param("w", (3,))
    g.output("y", g.reduce_sum(g.mul(x, w)))
    trace = evaluate(g, {"x": xv}, {"w": wv})
    grads = backward(trace, {"y": 1.0})
"""

from __future__ import annotations

import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

MAGIC = b"AMDC"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Operand shapes are incompatible with an op, or a feed has the wrong shape."""


class NumericError(ArithmeticError):
    """A node produced NaN or Inf."""


class UsageError(RuntimeError):
    """The graph API was called out of order or with missing bindings."""


class Node:
    __slots__ = ("index", "op", "operands", "shape", "attrs", "name")

    def __init__(self, index, op, operands, shape, attrs, name):
        self.index = index
        self.op = op
        self.operands = operands
        self.shape = shape
        self.attrs = attrs
        self.name = name

    def label(self) -> str:
        tag = f"#{self.index} {self.op}"
        return f"{tag} '{self.name}'" if self.name else tag

    def __repr__(self):
        return f"Node({self.label()}, shape={self.shape})"


def _size(shape):
    return int(np.prod(shape, dtype=np.int64)) if shape else 1


class Graph:
    """Append-only op list; node indices are a valid topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self.params: dict[str, Node] = {}
        self.outputs: dict[str, Node] = {}
        self._ancestors: dict[tuple[int, ...], list[int]] = {}

    # -- construction helpers -------------------------------------------------

    def _add(self, op, operands, shape, name=None, **attrs):
        for o in operands:
            if not isinstance(o, Node) or o.index >= len(self.nodes) or self.nodes[o.index] is not o:
                raise UsageError(f"operand {o!r} of {op} does not belong to this graph")
        node = Node(len(self.nodes), op, tuple(o.index for o in operands), tuple(shape), attrs, name)
        self.nodes.append(node)
        return node

    def _fail(self, op, msg, name=None):
        label = f"#{len(self.nodes)} {op}" + (f" '{name}'" if name else "")
        raise ShapeError(f"node {label}: {msg}")

    def input(self, name: str, shape) -> Node:
        if name in self.inputs or name in self.params:
            raise UsageError(f"duplicate binding name {name!r}")
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            self._fail("input", f"extents must be positive, got {shape}", name)
        node = self._add("input", (), shape, name)
        self.inputs[name] = node
        return node

    def param(self, name: str, shape) -> Node:
        if name in self.inputs or name in self.params:
            raise UsageError(f"duplicate binding name {name!r}")
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            self._fail("param", f"extents must be positive, got {shape}", name)
        node = self._add("param", (), shape, name)
        self.params[name] = node
        return node

    def output(self, name: str, node: Node) -> Node:
        self.outputs[name] = node
        return node

    # -- ops ------------------------------------------------------------------

    def matmul(self, a: Node, b: Node, name=None) -> Node:
        sa, sb = a.shape, b.shape
        if len(sa) < 1 or len(sb) < 2:
            self._fail("matmul", f"unsupported ranks {sa} x {sb}", name)
        if sa[-1] != sb[-2]:
            self._fail("matmul", f"inner extents differ: {sa} x {sb}", name)
        if len(sb) > 2 and sa[:-2] != sb[:-2]:
            self._fail("matmul", f"batch extents differ: {sa} x {sb}", name)
        if len(sa) == 1:
            if len(sb) != 2:
                self._fail("matmul", f"vector times batched matrix: {sa} x {sb}", name)
            shape = (sb[1],)
        else:
            shape = sa[:-1] + (sb[-1],)
        return self._add("matmul", (a, b), shape, name)

    def _same(self, op, a, b, name):
        if a.shape != b.shape:
            self._fail(op, f"shapes differ: {a.shape} vs {b.shape}", name)
        return self._add(op, (a, b), a.shape, name)

    def add(self, a, b, name=None):
        return self._same("add", a, b, name)

    def sub(self, a, b, name=None):
        return self._same("sub", a, b, name)

    def mul(self, a, b, name=None):
        return self._same("mul", a, b, name)

    def div(self, a, b, name=None):
        return self._same("div", a, b, name)

    def scale(self, a, c: float, name=None):
        return self._add("scale", (a,), a.shape, name, c=float(c))

    def bias_add(self, a, b, name=None):
        if len(b.shape) != 1 or not a.shape or a.shape[-1] != b.shape[0]:
            self._fail("bias_add", f"bias {b.shape} does not match last axis of {a.shape}", name)
        return self._add("bias_add", (a, b), a.shape, name)

    def _unary(self, op, a, name):
        return self._add(op, (a,), a.shape, name)

    def tanh(self, a, name=None):
        return self._unary("tanh", a, name)

    def sigmoid(self, a, name=None):
        return self._unary("sigmoid", a, name)

    def relu(self, a, name=None):
        return self._unary("relu", a, name)

    def softplus(self, a, name=None):
        return self._unary("softplus", a, name)

    def abs(self, a, name=None):
        return self._unary("abs", a, name)

    def exp(self, a, name=None):
        return self._unary("exp", a, name)

    def log(self, a, name=None):
        return self._unary("log", a, name)

    def softmax(self, a, name=None):
        """Softmax over the last axis."""
        if not a.shape:
            self._fail("softmax", "needs at least one axis", name)
        return self._unary("softmax", a, name)

    def l2_normalize(self, a, name=None):
        """Scale each last-axis row to unit Euclidean norm."""
        if not a.shape:
            self._fail("l2_normalize", "needs at least one axis", name)
        return self._unary("l2_normalize", a, name)

    def layer_norm(self, a, gain, bias, eps=1e-5, name=None):
        d = a.shape[-1] if a.shape else 0
        if gain.shape != (d,) or bias.shape != (d,):
            self._fail("layer_norm", f"gain/bias must be ({d},), got {gain.shape}/{bias.shape}", name)
        return self._add("layer_norm", (a, gain, bias), a.shape, name, eps=float(eps))

    def concat(self, parts, axis: int, name=None):
        if not parts:
            self._fail("concat", "no operands", name)
        rank = len(parts[0].shape)
        axis = axis % rank
        base = parts[0].shape
        for p in parts[1:]:
            if len(p.shape) != rank or any(p.shape[i] != base[i] for i in range(rank) if i != axis):
                self._fail("concat", f"incompatible shapes {[q.shape for q in parts]} on axis {axis}", name)
        shape = list(base)
        shape[axis] = sum(p.shape[axis] for p in parts)
        return self._add("concat", tuple(parts), shape, name, axis=axis)

    def slice(self, a, axis: int, start: int, stop: int, name=None):
        axis = axis % len(a.shape)
        if not 0 <= start < stop <= a.shape[axis]:
            self._fail("slice", f"range [{start}, {stop}) outside axis {axis} of {a.shape}", name)
        shape = list(a.shape)
        shape[axis] = stop - start
        return self._add("slice", (a,), shape, name, axis=axis, start=start, stop=stop)

    def reshape(self, a, shape, name=None):
        shape = tuple(int(s) for s in shape)
        if _size(shape) != _size(a.shape) or any(s <= 0 for s in shape):
            self._fail("reshape", f"cannot reshape {a.shape} to {shape}", name)
        return self._add("reshape", (a,), shape, name)

    def transpose(self, a, perm, name=None):
        perm = tuple(perm)
        if sorted(perm) != list(range(len(a.shape))):
            self._fail("transpose", f"bad permutation {perm} for {a.shape}", name)
        return self._add("transpose", (a,), tuple(a.shape[p] for p in perm), name, perm=perm)

    def tile(self, a, reps, name=None):
        reps = tuple(int(r) for r in reps)
        if len(reps) != len(a.shape) or any(r <= 0 for r in reps):
            self._fail("tile", f"reps {reps} do not match rank of {a.shape}", name)
        return self._add("tile", (a,), tuple(s * r for s, r in zip(a.shape, reps)), name, reps=reps)

    def _reduce(self, op, a, axis, name):
        if axis is None:
            return self._add(op, (a,), (), name, axis=None)
        axis = axis % len(a.shape)
        shape = a.shape[:axis] + a.shape[axis + 1:]
        return self._add(op, (a,), shape, name, axis=axis)

    def reduce_sum(self, a, axis=None, name=None):
        return self._reduce("reduce_sum", a, axis, name)

    def reduce_mean(self, a, axis=None, name=None):
        return self._reduce("reduce_mean", a, axis, name)

    # -- queries --------------------------------------------------------------

    def ancestors(self, targets) -> list[int]:
        """Indices of every node the targets depend on, ascending."""
        key = tuple(sorted(set(targets)))
        cached = self._ancestors.get(key)
        if cached is not None:
            return cached
        seen = set()
        stack = list(key)
        while stack:
            i = stack.pop()
            if i in seen:
                continue
            seen.add(i)
            stack.extend(self.nodes[i].operands)
        order = sorted(seen)
        self._ancestors[key] = order
        return order

    def resolve(self, ref) -> Node:
        if isinstance(ref, Node):
            return ref
        if ref in self.outputs:
            return self.outputs[ref]
        raise UsageError(f"unknown output {ref!r}")


# -- op kernels ---------------------------------------------------------------


def _swap(x):
    return np.swapaxes(x, -1, -2)


def _f_matmul(xs, at):
    return np.matmul(xs[0], xs[1])


def _b_matmul(g, xs, y, at, needs):
    a, b = xs
    ga = gb = None
    if b.ndim == 2:
        if needs[0]:
            ga = g @ b.T
        if needs[1]:
            k, n = b.shape
            gb = a.reshape(-1, k).T @ g.reshape(-1, n)
    else:
        if needs[0]:
            ga = g @ _swap(b)
        if needs[1]:
            gb = _swap(a) @ g
    return ga, gb


def _b_add(g, xs, y, at, needs):
    return g, g


def _b_sub(g, xs, y, at, needs):
    return g, (-g if needs[1] else None)


def _b_mul(g, xs, y, at, needs):
    return (g * xs[1] if needs[0] else None), (g * xs[0] if needs[1] else None)


def _b_div(g, xs, y, at, needs):
    a, b = xs
    return (g / b if needs[0] else None), (-g * a / (b * b) if needs[1] else None)


def _f_bias_add(xs, at):
    return xs[0] + xs[1]


def _b_bias_add(g, xs, y, at, needs):
    return g, g.reshape(-1, g.shape[-1]).sum(axis=0)


def _f_sigmoid(xs, at):
    x = xs[0]
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _f_softplus(xs, at):
    x = xs[0]
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _f_softmax(xs, at):
    x = xs[0]
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _b_softmax(g, xs, y, at, needs):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _f_l2_normalize(xs, at):
    x = xs[0]
    return x / np.sqrt((x * x).sum(axis=-1, keepdims=True))


def _b_l2_normalize(g, xs, y, at, needs):
    x = xs[0]
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)


def _ln_stats(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv, inv


def _f_layer_norm(xs, at):
    xhat, _ = _ln_stats(xs[0], at["eps"])
    return xhat * xs[1] + xs[2]


def _b_layer_norm(g, xs, y, at, needs):
    x, gain, _ = xs
    xhat, inv = _ln_stats(x, at["eps"])
    gx = g * gain
    dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
    d = x.shape[-1]
    return dx, (g * xhat).reshape(-1, d).sum(axis=0), g.reshape(-1, d).sum(axis=0)


def _b_concat(g, xs, y, at, needs):
    bounds = np.cumsum([x.shape[at["axis"]] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=at["axis"]))


def _f_slice(xs, at):
    idx = [slice(None)] * xs[0].ndim
    idx[at["axis"]] = slice(at["start"], at["stop"])
    return xs[0][tuple(idx)]


def _b_slice(g, xs, y, at, needs):
    out = np.zeros_like(xs[0])
    idx = [slice(None)] * out.ndim
    idx[at["axis"]] = slice(at["start"], at["stop"])
    out[tuple(idx)] = g
    return (out,)


def _b_tile(g, xs, y, at, needs):
    shape = xs[0].shape
    split = []
    for r, s in zip(at["reps"], shape):
        split.extend((r, s))
    return (g.reshape(split).sum(axis=tuple(range(0, 2 * len(shape), 2))),)


def _f_reduce_sum(xs, at):
    return np.asarray(xs[0].sum(axis=at["axis"]))


def _f_reduce_mean(xs, at):
    return np.asarray(xs[0].mean(axis=at["axis"]))


def _expand(g, x, axis):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape)


def _b_reduce_sum(g, xs, y, at, needs):
    return (np.array(_expand(g, xs[0], at["axis"])),)


def _b_reduce_mean(g, xs, y, at, needs):
    x = xs[0]
    n = x.size if at["axis"] is None else x.shape[at["axis"]]
    return (_expand(g, x, at["axis"]) / n,)


_OPS = {
    "matmul": (_f_matmul, _b_matmul),
    "add": (lambda xs, at: xs[0] + xs[1], _b_add),
    "sub": (lambda xs, at: xs[0] - xs[1], _b_sub),
    "mul": (lambda xs, at: xs[0] * xs[1], _b_mul),
    "div": (lambda xs, at: xs[0] / xs[1], _b_div),
    "scale": (lambda xs, at: xs[0] * at["c"], lambda g, xs, y, at, n: (g * at["c"],)),
    "bias_add": (_f_bias_add, _b_bias_add),
    "tanh": (lambda xs, at: np.tanh(xs[0]), lambda g, xs, y, at, n: (g * (1.0 - y * y),)),
    "sigmoid": (_f_sigmoid, lambda g, xs, y, at, n: (g * y * (1.0 - y),)),
    "relu": (lambda xs, at: np.maximum(xs[0], 0.0), lambda g, xs, y, at, n: (g * (xs[0] > 0),)),
    "softplus": (_f_softplus, lambda g, xs, y, at, n: (g * _f_sigmoid(xs, at),)),
    "abs": (lambda xs, at: np.abs(xs[0]), lambda g, xs, y, at, n: (g * np.sign(xs[0]),)),
    "exp": (lambda xs, at: np.exp(xs[0]), lambda g, xs, y, at, n: (g * y,)),
    "log": (lambda xs, at: np.log(xs[0]), lambda g, xs, y, at, n: (g / xs[0],)),
    "softmax": (_f_softmax, _b_softmax),
    "l2_normalize": (_f_l2_normalize, _b_l2_normalize),
    "layer_norm": (_f_layer_norm, _b_layer_norm),
    "concat": (lambda xs, at: np.concatenate(xs, axis=at["axis"]), _b_concat),
    "slice": (_f_slice, _b_slice),
    "reshape": (None, lambda g, xs, y, at, n: (g.reshape(xs[0].shape),)),
    "transpose": (
        lambda xs, at: np.transpose(xs[0], at["perm"]),
        lambda g, xs, y, at, n: (np.transpose(g, np.argsort(at["perm"])),),
    ),
    "tile": (lambda xs, at: np.tile(xs[0], at["reps"]), _b_tile),
    "reduce_sum": (_f_reduce_sum, _b_reduce_sum),
    "reduce_mean": (_f_reduce_mean, _b_reduce_mean),
}

OP_NAMES = ("input", "param") + tuple(_OPS)


# -- evaluation -----------------------------------------------------------------


class Trace(Mapping):
    """Forward values of one evaluation; maps output names to arrays.

    More feeds can be bound later with ``extend``, which evaluates only the
    nodes that were not yet computed. This is how losses that depend on a
    selection made from earlier outputs (winner-take-all, top-k) are staged.
    """

    def __init__(self, graph: Graph, params: Mapping[str, np.ndarray], check_finite: bool = True):
        self.graph = graph
        self.params = params
        self.feeds: dict[str, np.ndarray] = {}
        self.values: dict[int, np.ndarray] = {}
        self.check_finite = check_finite

    def extend(self, feeds: Mapping | None = None, outputs=None) -> "Trace":
        g = self.graph
        for name, value in (feeds or {}).items():
            if name not in g.inputs:
                raise UsageError(f"graph has no input named {name!r}")
            node = g.inputs[name]
            arr = np.asarray(value, dtype=np.float64)
            if arr.shape != node.shape:
                raise ShapeError(f"node {node.label()}: fed shape {arr.shape}, declared {node.shape}")
            if node.index in self.values:
                raise UsageError(f"input {name!r} is already bound in this trace")
            self.feeds[name] = arr
        names = list(g.outputs) if outputs is None else list(outputs)
        targets = [g.resolve(o).index for o in names]
        for i in g.ancestors(targets):
            if i not in self.values:
                self.values[i] = self._compute(g.nodes[i])
        return self

    def _compute(self, node: Node) -> np.ndarray:
        if node.op == "input":
            if node.name not in self.feeds:
                raise UsageError(f"input {node.name!r} is not bound")
            return self.feeds[node.name]
        if node.op == "param":
            if node.name not in self.params:
                raise UsageError(f"parameter {node.name!r} is not bound")
            value = np.asarray(self.params[node.name], dtype=np.float64)
            if value.shape != node.shape:
                raise ShapeError(f"node {node.label()}: parameter shape {value.shape}, declared {node.shape}")
            return value
        xs = [self.values[i] for i in node.operands]
        if node.op == "reshape":
            return xs[0].reshape(node.shape)
        fwd = _OPS[node.op][0]
        with np.errstate(all="ignore"):
            out = fwd(xs, node.attrs)
        if self.check_finite and not np.isfinite(out).all():
            raise NumericError(f"node {node.label()} produced non-finite values")
        return out

    def value(self, ref) -> np.ndarray:
        node = self.graph.resolve(ref)
        if node.index not in self.values:
            raise UsageError(f"node {node.label()} has not been evaluated")
        return self.values[node.index]

    def __getitem__(self, name):
        return self.value(name)

    def __iter__(self):
        return (n for n, node in self.graph.outputs.items() if node.index in self.values)

    def __len__(self):
        return sum(1 for _ in self)


def evaluate(graph: Graph, feeds: Mapping, params: Mapping | None = None, outputs=None) -> Trace:
    """Evaluate the requested outputs (default: all declared outputs)."""
    return Trace(graph, params or {}).extend(feeds, outputs)


def _requires_grad(graph: Graph, with_inputs: bool) -> list[bool]:
    req = []
    for node in graph.nodes:
        if node.op == "param":
            req.append(True)
        elif node.op == "input":
            req.append(with_inputs)
        else:
            req.append(any(req[i] for i in node.operands))
    return req


def backward(trace: Trace, seeds: Mapping, with_inputs: bool = False) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of the seeded outputs.

    ``seeds`` maps output names (or nodes) to the gradient of the objective
    with respect to that output. Returns one gradient per parameter (zeros
    for parameters the seeds do not reach), plus inputs when requested.
    """
    if not isinstance(trace, Trace):
        raise UsageError("backward needs the Trace returned by evaluate; run evaluate first")
    g = trace.graph
    req = _requires_grad(g, with_inputs)
    grads: dict[int, np.ndarray] = {}
    for ref, seed in seeds.items():
        node = g.resolve(ref)
        if node.index not in trace.values:
            raise UsageError(f"output {node.label()} was not evaluated before backward")
        s = np.broadcast_to(np.asarray(seed, dtype=np.float64), node.shape) if np.ndim(seed) == 0 else np.asarray(seed, dtype=np.float64)
        if s.shape != node.shape:
            raise ShapeError(f"seed for {node.label()} has shape {s.shape}, output is {node.shape}")
        grads[node.index] = grads[node.index] + s if node.index in grads else np.array(s)
    start = max(grads) if grads else -1
    for i in range(start, -1, -1):
        gi = grads.get(i)
        if gi is None:
            continue
        node = g.nodes[i]
        if not node.operands:
            continue
        needs = tuple(req[j] for j in node.operands)
        if not any(needs):
            continue
        xs = [trace.values[j] for j in node.operands]
        parts = _OPS[node.op][1](gi, xs, trace.values[i], node.attrs, needs)
        for j, need, gj in zip(node.operands, needs, parts):
            if not need or gj is None:
                continue
            if j in grads:
                grads[j] = grads[j] + gj
            else:
                grads[j] = gj
        del grads[i]
    out = {}
    for name, node in g.params.items():
        gv = grads.get(node.index)
        out[name] = np.zeros(node.shape) if gv is None else np.asarray(gv, dtype=np.float64).reshape(node.shape)
    if with_inputs:
        for name, node in g.inputs.items():
            gv = grads.get(node.index)
            out[name] = np.zeros(node.shape) if gv is None else np.asarray(gv, dtype=np.float64).reshape(node.shape)
    return out


def _objective(graph, feeds, params, output, weights):
    y = evaluate(graph, feeds, params, [output])[output]
    return float(np.sum(y * weights))


def grad_check(graph: Graph, feeds: Mapping, params: Mapping, output=None, step: float = 1e-5,
               wrt=None, seed: int = 0) -> float:
    """Largest |analytic - numeric| / max(1, |analytic|) over every parameter entry.

    Non-scalar outputs are reduced with a fixed random projection so that all
    output entries contribute. Numeric gradients use central differences.
    """
    if not 0 < step <= 1e-2:
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    if output is None:
        if len(graph.outputs) != 1:
            raise UsageError("graph has several outputs; name the one to check")
        output = next(iter(graph.outputs))
    node = graph.resolve(output)
    weights = np.random.default_rng(seed).uniform(0.5, 1.5, size=node.shape) if node.shape else np.float64(1.0)
    trace = evaluate(graph, feeds, params, [output])
    analytic = backward(trace, {output: weights})
    names = list(graph.params) if wrt is None else list(wrt)
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    worst = 0.0
    for name in names:
        p = work[name]
        flat = p.reshape(-1)
        ga = analytic[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = _objective(graph, feeds, work, output, weights)
            flat[j] = orig - step
            fm = _objective(graph, feeds, work, output, weights)
            flat[j] = orig
            numeric = (fp - fm) / (2 * step)
            worst = max(worst, abs(ga[j] - numeric) / max(1.0, abs(ga[j])))
    return worst


# -- checkpoints ----------------------------------------------------------------


def save_params(path, params: Mapping[str, np.ndarray]) -> None:
    """Write parameters as an AMDC blob (little-endian, names in mapping order)."""
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, value in params.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not an AMDC checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = _size(shape)
            data = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
            pos += 8 * count
            out[name] = data.astype(np.float64).reshape(shape)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out
