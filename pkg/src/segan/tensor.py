"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Graph` is a static, topologically ordered list of operator nodes
built ahead of time; :func:`forward` evaluates it for a set of feeds, and
:func:`backward` accumulates vector-Jacobian products from a scalar loss
node back to the fed leaves. :func:`finite_diff_grad` is an independent
central-difference check that only ever calls :func:`forward`.

Shapes are inferred and validated at build time, so mismatches surface when
the graph is assembled, not mid-training. Activation layout is channel-last
throughout; ``softmax`` always normalizes the last axis.

Activation gradients use the positive-side derivative at kinks (relu,
leaky_relu at 0; clip at its edges).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


class GraphError(Exception):
    """Structural problem in a graph or in how it is being evaluated."""


class ShapeError(GraphError):
    """Operands fed to a node do not fit; message names the node."""


@dataclass
class Tensor:
    """Dense array leaf. ``grad`` is populated by :func:`backward` when
    ``requires_grad`` is set."""

    data: np.ndarray
    requires_grad: bool = False
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype


def tensor(values, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(values, dtype=dtype)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return Tensor(arr, requires_grad=requires_grad)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    name: str
    attrs: dict = field(default_factory=dict)


def _normalize_axes(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(sorted(a % ndim for a in axis))
    if len(set(axes)) != len(axes):
        raise ValueError(f"duplicate reduction axes {axis}")
    return axes


class Graph:
    """Static operator graph; node ids are topological by construction."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _label(self, idx: int) -> str:
        n = self.nodes[idx]
        return f"node {idx} ({n.op} '{n.name}')"

    def _push(self, op: str, inputs: tuple[int, ...], shape, name: str | None, **attrs) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"{op}: input id {i} does not exist yet")
        idx = len(self.nodes)
        self.nodes.append(Node(op, inputs, tuple(shape), name or f"{op}:{idx}", attrs))
        return idx

    def shape(self, idx: int) -> tuple[int, ...]:
        return self.nodes[idx].shape

    # -- leaves ------------------------------------------------------------

    def input(self, name: str, shape) -> int:
        return self._push("input", (), shape, name)

    # -- arithmetic --------------------------------------------------------

    def _binary_same_shape(self, op: str, a: int, b: int, name) -> int:
        sa, sb = self.shape(a), self.shape(b)
        if sa != sb:
            raise ShapeError(f"{op} '{name or op}': operand shapes differ, {sa} vs {sb}")
        return self._push(op, (a, b), sa, name)

    def add(self, a: int, b: int, name: str | None = None) -> int:
        return self._binary_same_shape("add", a, b, name)

    def mul(self, a: int, b: int, name: str | None = None) -> int:
        return self._binary_same_shape("mul", a, b, name)

    def scalar_mul(self, a: int, value: float, name: str | None = None) -> int:
        return self._push("scalar_mul", (a,), self.shape(a), name, value=float(value))

    def scalar_add(self, a: int, value: float, name: str | None = None) -> int:
        return self._push("scalar_add", (a,), self.shape(a), name, value=float(value))

    def matmul(self, a: int, b: int, name: str | None = None) -> int:
        sa, sb = self.shape(a), self.shape(b)
        if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
            raise ShapeError(f"matmul '{name or 'matmul'}': cannot multiply {sa} by {sb}")
        return self._push("matmul", (a, b), (sa[0], sb[1]), name)

    # -- structure ---------------------------------------------------------

    def conv2d(
        self,
        x: int,
        w: int,
        bias: int | None = None,
        stride: int = 1,
        pad: int = 0,
        name: str | None = None,
    ) -> int:
        sx, sw = self.shape(x), self.shape(w)
        label = name or "conv2d"
        if len(sx) != 4 or len(sw) != 4:
            raise ShapeError(f"conv2d '{label}': need 4-d input/weight, got {sx} and {sw}")
        if sx[3] != sw[2]:
            raise ShapeError(
                f"conv2d '{label}': input channels {sx[3]} != weight channels {sw[2]}"
            )
        try:
            ho = kernels.conv_output_size(sx[1], sw[0], stride, pad)
            wo = kernels.conv_output_size(sx[2], sw[1], stride, pad)
        except ValueError as e:
            raise ShapeError(f"conv2d '{label}': {e}") from None
        inputs = (x, w)
        if bias is not None:
            sb = self.shape(bias)
            if sb != (sw[3],):
                raise ShapeError(f"conv2d '{label}': bias shape {sb} != ({sw[3]},)")
            inputs = (x, w, bias)
        return self._push(
            "conv2d", inputs, (sx[0], ho, wo, sw[3]), name, stride=stride, pad=pad
        )

    def upsample_nearest(self, x: int, factor: int, name: str | None = None) -> int:
        s = self.shape(x)
        if len(s) != 4:
            raise ShapeError(f"upsample '{name or 'upsample'}': need 4-d input, got {s}")
        out = (s[0], s[1] * factor, s[2] * factor, s[3])
        return self._push("upsample", (x,), out, name, factor=int(factor))

    def concat(self, parts: list[int], axis: int, name: str | None = None) -> int:
        if not parts:
            raise GraphError("concat: no operands")
        shapes = [self.shape(p) for p in parts]
        ndim = len(shapes[0])
        ax = axis % ndim
        for s in shapes[1:]:
            if len(s) != ndim or any(s[i] != shapes[0][i] for i in range(ndim) if i != ax):
                raise ShapeError(
                    f"concat '{name or 'concat'}': incompatible shapes {shapes} on axis {ax}"
                )
        out = list(shapes[0])
        out[ax] = sum(s[ax] for s in shapes)
        return self._push("concat", tuple(parts), tuple(out), name, axis=ax)

    # -- pointwise ---------------------------------------------------------

    def _unary(self, op: str, x: int, name, **attrs) -> int:
        return self._push(op, (x,), self.shape(x), name, **attrs)

    def relu(self, x: int, name: str | None = None) -> int:
        return self._unary("relu", x, name)

    def leaky_relu(self, x: int, slope: float = 0.2, name: str | None = None) -> int:
        return self._unary("leaky_relu", x, name, slope=float(slope))

    def tanh(self, x: int, name: str | None = None) -> int:
        return self._unary("tanh", x, name)

    def sigmoid(self, x: int, name: str | None = None) -> int:
        return self._unary("sigmoid", x, name)

    def log(self, x: int, name: str | None = None) -> int:
        return self._unary("log", x, name)

    def square(self, x: int, name: str | None = None) -> int:
        return self._unary("square", x, name)

    def clip(self, x: int, lo: float, hi: float, name: str | None = None) -> int:
        if not lo < hi:
            raise ValueError(f"clip bounds must satisfy lo < hi, got [{lo}, {hi}]")
        return self._unary("clip", x, name, lo=float(lo), hi=float(hi))

    def softmax(self, x: int, name: str | None = None) -> int:
        s = self.shape(x)
        if len(s) < 1 or s[-1] < 1:
            raise ShapeError(f"softmax '{name or 'softmax'}': bad shape {s}")
        return self._unary("softmax", x, name)

    # -- reductions and selection -------------------------------------------

    def _reduce(self, op: str, x: int, axis, name) -> int:
        s = self.shape(x)
        axes = _normalize_axes(axis, len(s))
        if axes is None:
            out = ()
        else:
            out = tuple(d for i, d in enumerate(s) if i not in axes)
        return self._push(op, (x,), out, name, axes=axes)

    def reduce_mean(self, x: int, axis=None, name: str | None = None) -> int:
        return self._reduce("reduce_mean", x, axis, name)

    def reduce_sum(self, x: int, axis=None, name: str | None = None) -> int:
        return self._reduce("reduce_sum", x, axis, name)

    def onehot_gather(self, x: int, onehot: int, name: str | None = None) -> int:
        sx, so = self.shape(x), self.shape(onehot)
        if sx != so:
            raise ShapeError(
                f"onehot_gather '{name or 'gather'}': shapes differ, {sx} vs {so}"
            )
        return self._push("onehot_gather", (x, onehot), sx[:-1], name)


# ---------------------------------------------------------------------------
# evaluation


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _eval_node(node: Node, args: list[np.ndarray]) -> np.ndarray:
    op, at = node.op, node.attrs
    if op == "add":
        return args[0] + args[1]
    if op == "mul":
        return args[0] * args[1]
    if op == "scalar_mul":
        return args[0] * args[0].dtype.type(at["value"])
    if op == "scalar_add":
        return args[0] + args[0].dtype.type(at["value"])
    if op == "matmul":
        return args[0] @ args[1]
    if op == "conv2d":
        out = kernels.conv2d_forward(args[0], args[1], at["stride"], at["pad"])
        if len(args) == 3:
            out = out + args[2]
        return out
    if op == "upsample":
        return kernels.upsample_nearest(args[0], at["factor"])
    if op == "concat":
        return np.concatenate(args, axis=at["axis"])
    if op == "relu":
        return np.maximum(args[0], 0)
    if op == "leaky_relu":
        x = args[0]
        return np.where(x >= 0, x, x.dtype.type(at["slope"]) * x)
    if op == "tanh":
        return np.tanh(args[0])
    if op == "sigmoid":
        return _stable_sigmoid(args[0])
    if op == "log":
        return np.log(args[0])
    if op == "square":
        return np.square(args[0])
    if op == "clip":
        return np.clip(args[0], at["lo"], at["hi"])
    if op == "softmax":
        x = args[0]
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    if op == "reduce_mean":
        return np.mean(args[0], axis=at["axes"])
    if op == "reduce_sum":
        return np.sum(args[0], axis=at["axes"])
    if op == "onehot_gather":
        return (args[0] * args[1]).sum(axis=-1)
    raise GraphError(f"unknown op {op!r}")


def forward(graph: Graph, feeds: dict[int, Tensor | np.ndarray]) -> list[np.ndarray]:
    """Evaluate every node; returns activations indexed by node id."""
    input_ids = {i for i, n in enumerate(graph.nodes) if n.op == "input"}
    missing = input_ids - set(feeds)
    if missing:
        names = ", ".join(graph.nodes[i].name for i in sorted(missing))
        raise GraphError(f"missing feeds for inputs: {names}")
    extra = set(feeds) - input_ids
    if extra:
        raise GraphError(f"feeds given for non-input nodes: {sorted(extra)}")

    values: dict[int, np.ndarray] = {}
    for i, v in feeds.items():
        arr = np.asarray(v.data if isinstance(v, Tensor) else v)
        if not np.issubdtype(arr.dtype, np.floating):
            raise GraphError(f"{graph._label(i)}: feeds must be float arrays, got {arr.dtype}")
        if arr.shape != graph.nodes[i].shape:
            raise ShapeError(
                f"{graph._label(i)}: feed shape {arr.shape} != declared {graph.nodes[i].shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise GraphError(f"{graph._label(i)}: feed contains non-finite values")
        values[i] = arr

    acts: list[np.ndarray] = []
    for idx, node in enumerate(graph.nodes):
        if node.op == "input":
            acts.append(values[idx])
        else:
            acts.append(_eval_node(node, [acts[i] for i in node.inputs]))
    return acts


def _reduce_vjp(g: np.ndarray, in_shape: tuple[int, ...], axes) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(g, in_shape)
    keep = tuple(1 if i in axes else d for i, d in enumerate(in_shape))
    return np.broadcast_to(np.asarray(g).reshape(keep), in_shape)


def _node_vjps(node: Node, acts, grad: np.ndarray, want: list[bool]) -> list[np.ndarray | None]:
    """Gradient contributions to each input of ``node``; None where not wanted."""
    op, at = node.op, node.attrs
    args = [acts[i] for i in node.inputs]
    res: list[np.ndarray | None] = [None] * len(node.inputs)

    if op == "add":
        if want[0]:
            res[0] = grad
        if want[1]:
            res[1] = grad
    elif op == "mul":
        if want[0]:
            res[0] = grad * args[1]
        if want[1]:
            res[1] = grad * args[0]
    elif op == "scalar_mul":
        if want[0]:
            res[0] = grad * grad.dtype.type(at["value"])
    elif op == "scalar_add":
        if want[0]:
            res[0] = grad
    elif op == "matmul":
        if want[0]:
            res[0] = grad @ args[1].T
        if want[1]:
            res[1] = args[0].T @ grad
    elif op == "conv2d":
        stride, pad = at["stride"], at["pad"]
        if want[0]:
            res[0] = kernels.conv2d_bwd_input(
                grad, args[1], (args[0].shape[1], args[0].shape[2]), stride, pad
            )
        if want[1]:
            res[1] = kernels.conv2d_bwd_weight(
                args[0], grad, (args[1].shape[0], args[1].shape[1]), stride, pad
            )
        if len(node.inputs) == 3 and want[2]:
            res[2] = grad.sum(axis=(0, 1, 2))
    elif op == "upsample":
        if want[0]:
            res[0] = kernels.upsample_nearest_bwd(grad, at["factor"])
    elif op == "concat":
        ax = at["axis"]
        offset = 0
        for k, a in enumerate(args):
            size = a.shape[ax]
            if want[k]:
                sl = [slice(None)] * grad.ndim
                sl[ax] = slice(offset, offset + size)
                res[k] = grad[tuple(sl)]
            offset += size
    elif op == "relu":
        if want[0]:
            res[0] = grad * (args[0] >= 0)
    elif op == "leaky_relu":
        if want[0]:
            slope = args[0].dtype.type(at["slope"])
            res[0] = grad * np.where(args[0] >= 0, args[0].dtype.type(1), slope)
    elif op == "tanh":
        if want[0]:
            y = np.tanh(args[0])
            res[0] = grad * (1 - y * y)
    elif op == "sigmoid":
        if want[0]:
            y = _stable_sigmoid(args[0])
            res[0] = grad * y * (1 - y)
    elif op == "log":
        if want[0]:
            res[0] = grad / args[0]
    elif op == "square":
        if want[0]:
            res[0] = 2 * args[0] * grad
    elif op == "clip":
        if want[0]:
            inside = (args[0] >= at["lo"]) & (args[0] <= at["hi"])
            res[0] = grad * inside
    elif op == "softmax":
        if want[0]:
            x = args[0]
            z = x - x.max(axis=-1, keepdims=True)
            e = np.exp(z)
            y = e / e.sum(axis=-1, keepdims=True)
            res[0] = y * (grad - (grad * y).sum(axis=-1, keepdims=True))
    elif op == "reduce_mean":
        if want[0]:
            in_shape = args[0].shape
            axes = at["axes"]
            count = args[0].size if axes is None else int(
                np.prod([in_shape[a] for a in axes])
            )
            res[0] = _reduce_vjp(grad, in_shape, axes) / count
    elif op == "reduce_sum":
        if want[0]:
            res[0] = _reduce_vjp(grad, args[0].shape, at["axes"])
    elif op == "onehot_gather":
        if want[0]:
            res[0] = grad[..., None] * args[1]
        if want[1]:
            res[1] = grad[..., None] * args[0]
    else:
        raise GraphError(f"unknown op {op!r}")
    return res


def backward(
    graph: Graph,
    loss: int,
    acts: list[np.ndarray],
    feeds: dict[int, Tensor | np.ndarray],
    wrt: list[int] | None = None,
) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for the requested leaves.

    ``wrt`` defaults to every fed Tensor with ``requires_grad``. Gradients
    are returned keyed by node id and also written to ``Tensor.grad``.
    Subgraphs that do not lead to any requested leaf are skipped.
    """
    if acts[loss].size != 1:
        raise GraphError(
            f"{graph._label(loss)}: backward needs a scalar loss, shape is {acts[loss].shape}"
        )
    if wrt is None:
        wrt = [
            i
            for i, v in feeds.items()
            if isinstance(v, Tensor) and v.requires_grad
        ]
    for i in wrt:
        if graph.nodes[i].op != "input":
            raise GraphError(f"{graph._label(i)}: gradients only flow to input leaves")

    # Nodes that can influence a requested leaf's gradient path.
    useful = set(wrt)
    for idx, node in enumerate(graph.nodes):
        if any(i in useful for i in node.inputs):
            useful.add(idx)

    dtype = acts[loss].dtype
    grads: dict[int, np.ndarray] = {loss: np.ones(acts[loss].shape, dtype=dtype)}
    for idx in range(loss, -1, -1):
        if idx not in grads:
            continue
        node = graph.nodes[idx]
        if node.op == "input":
            continue
        want = [i in useful for i in node.inputs]
        if not any(want):
            continue
        for inp, contrib in zip(node.inputs, _node_vjps(node, acts, grads[idx], want)):
            if contrib is None:
                continue
            grads[inp] = contrib if inp not in grads else grads[inp] + contrib

    out: dict[int, np.ndarray] = {}
    for i in wrt:
        g = grads.get(i)
        if g is None:
            g = np.zeros(graph.nodes[i].shape, dtype=dtype)
        g = np.array(g, dtype=dtype)  # broadcast views become owned arrays
        out[i] = g
        v = feeds.get(i)
        if isinstance(v, Tensor):
            v.grad = g
    return out


def finite_diff_grad(
    graph: Graph,
    loss: int,
    wrt_id: int,
    feeds: dict[int, Tensor | np.ndarray],
    h: float = 1e-4,
) -> np.ndarray:
    """Central-difference gradient of the loss w.r.t. one leaf.

    Runs forward passes only, in float64, so it is an independent check on
    :func:`backward`. Cost is two evaluations per coordinate of the leaf.
    """
    base = {
        i: np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
        for i, v in feeds.items()
    }
    x = base[wrt_id].copy()
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for j in range(flat_x.size):
        orig = flat_x[j]
        flat_x[j] = orig + h
        hi = forward(graph, {**base, wrt_id: x})[loss]
        flat_x[j] = orig - h
        lo = forward(graph, {**base, wrt_id: x})[loss]
        flat_x[j] = orig
        flat_g[j] = (float(hi) - float(lo)) / (2 * h)
    return grad
