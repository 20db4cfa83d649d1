"""
========
Autograd
========

A reverse-mode differentiation tape over 4-D tensors.

A :class:`Graph` records every operation as a node in insertion order; since a
node can only consume nodes that already exist, insertion order is a valid
topological order and :func:`backward` simply walks it in reverse.

.. code-block:: python

    >>> g = Graph()
    >>> x = g.constant(batch)
    >>> w, b = g.parameter(weight, "conv.w"), g.parameter(bias, "conv.b")
    >>> loss = bce_loss(conv2d(x, w, b, padding=1), target)
    >>> grads = backward(g, loss)
    >>> grads["conv.w"].shape == weight.shape
    True

Operators are :class:`Function` subclasses; each saves whatever it needs
during ``forward`` and returns one gradient per input from ``backward``
(``None`` where an input is not differentiable).

"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from nerveseg.exceptions import DomainError, ShapeError
from nerveseg.tensor import CHECK_DTYPE, DEFAULT_DTYPE, check_tensor, crop2d, pad2d
from nerveseg.types import GradDict, Tensor

SCALAR_DIMS = (1, 1, 1, 1)


@dataclass
class Node:
    """One recorded operation and its output."""

    op: str
    inputs: tuple[int, ...]
    attrs: dict[str, Any]
    value: Tensor
    requires_grad: bool
    function: Optional["Function"] = None
    name: Optional[str] = None
    grad: Optional[Tensor] = field(default=None, repr=False)


class Graph:
    """An append-only tape of operations.

    Parameters
    ----------
    dtype
        Floating point type of every value recorded on this graph. Leaves are
        cast on entry, so a ``float64`` graph evaluates a ``float32`` model in
        double precision without touching the model's own arrays.

    """

    def __init__(self, dtype: type = DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def parameter(self, value: Tensor, name: Optional[str] = None) -> Variable:
        """Adds a leaf that receives a gradient."""
        return self._leaf("parameter", value, requires_grad=True, name=name)

    def constant(self, value: Tensor, name: Optional[str] = None) -> Variable:
        """Adds a leaf that never receives a gradient."""
        return self._leaf("constant", value, requires_grad=False, name=name)

    def record(
        self,
        op: str,
        inputs: Iterable[Variable],
        value: Tensor,
        function: Function,
        attrs: Optional[dict[str, Any]] = None,
    ) -> Variable:
        ids = tuple(v.node_id for v in inputs)
        requires_grad = any(self.nodes[i].requires_grad for i in ids)
        self.nodes.append(
            Node(
                op=op,
                inputs=ids,
                attrs=attrs or {},
                value=value,
                requires_grad=requires_grad,
                function=function,
            )
        )
        return Variable(self, len(self.nodes) - 1)

    def zero_grad(self) -> None:
        for node in self.nodes:
            node.grad = None

    def _leaf(self, op: str, value: Tensor, requires_grad: bool, name: Optional[str]) -> Variable:
        value = np.asarray(value).astype(self.dtype, copy=False)
        self.nodes.append(
            Node(op=op, inputs=(), attrs={}, value=value, requires_grad=requires_grad, name=name)
        )
        return Variable(self, len(self.nodes) - 1)


class Variable:
    """A handle on one node of a :class:`Graph`."""

    __slots__ = ("graph", "node_id")

    def __init__(self, graph: Graph, node_id: int):
        self.graph = graph
        self.node_id = node_id

    @property
    def node(self) -> Node:
        return self.graph.nodes[self.node_id]

    @property
    def value(self) -> Tensor:
        return self.node.value

    @property
    def grad(self) -> Tensor:
        """The accumulated gradient; zeros until :func:`backward` reaches this node."""
        grad = self.node.grad
        return np.zeros_like(self.value) if grad is None else grad

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.value.shape)

    @property
    def name(self) -> Optional[str]:
        return self.node.name

    @property
    def requires_grad(self) -> bool:
        return self.node.requires_grad

    def __repr__(self) -> str:
        return f"Variable(op={self.node.op}, shape={self.shape}, id={self.node_id})"


class Function:
    """Base class for differentiable operations."""

    op = "function"

    def forward(self, *args: Tensor, **attrs: Any) -> Tensor:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> tuple[Optional[Tensor], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Variable, **attrs: Any) -> Variable:
        graph = inputs[0].graph
        if any(v.graph is not graph for v in inputs):
            raise ShapeError(f"{cls.op} mixes variables from different graphs.")
        function = cls()
        value = function.forward(*(v.value for v in inputs), **attrs)
        return graph.record(cls.op, inputs, value.astype(graph.dtype, copy=False), function, attrs)


def _per_sample(fn: Callable[[int], Tensor], batch: int) -> Tensor:
    # Kernels run one sample at a time so results do not depend on batch size.
    return np.stack([fn(n) for n in range(batch)])


def conv_output_extent(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


class Conv2d(Function):
    op = "conv2d"

    def forward(  # type: ignore[override]
        self, x: Tensor, w: Tensor, b: Tensor, stride: int, padding: int, dilation: int
    ) -> Tensor:
        k = w.shape[2]
        span = dilation * (k - 1) + 1
        xp = pad2d(x, padding)
        windows = sliding_window_view(xp, (span, span), axis=(2, 3))
        windows = windows[:, :, ::stride, ::stride, ::dilation, ::dilation]
        self.x_shape = x.shape
        self.windows, self.w = windows, w
        self.stride, self.padding, self.dilation = stride, padding, dilation
        self.padded_shape = xp.shape
        out = _per_sample(
            lambda n: np.tensordot(windows[n], w, axes=([0, 3, 4], [1, 2, 3])).transpose(2, 0, 1),
            x.shape[0],
        )
        return out + b[None, :, None, None]

    def backward(self, grad: Tensor) -> tuple[Optional[Tensor], ...]:
        k = self.w.shape[2]
        s, d = self.stride, self.dilation
        out_h, out_w = grad.shape[2], grad.shape[3]
        grad_w = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = grad.sum(axis=(0, 2, 3))
        # (N, H', W', Cin, k, k) contributions scattered back onto the padded input
        cols = np.tensordot(grad, self.w, axes=([1], [0]))
        grad_xp = np.zeros(self.padded_shape, dtype=grad.dtype)
        for u in range(k):
            for v in range(k):
                grad_xp[
                    :,
                    :,
                    u * d : u * d + s * (out_h - 1) + 1 : s,
                    v * d : v * d + s * (out_w - 1) + 1 : s,
                ] += cols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
        return crop2d(grad_xp, self.padding), grad_w, grad_b


def conv2d(
    x: Variable,
    w: Variable,
    b: Variable,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Variable:
    """Cross-correlates ``x`` [N, Cin, H, W] with ``w`` [Cout, Cin, k, k] plus bias ``b`` [Cout].

    Raises
    ------
    ShapeError
        If the channel counts disagree, the kernel is not square, or the
        output extent would be smaller than one.
    DomainError
        If stride or dilation are not positive or padding is negative.

    """
    check_tensor(x.value, "x")
    if w.value.ndim != 4 or w.value.shape[2] != w.value.shape[3]:
        raise ShapeError(f"conv2d weight must be [Cout, Cin, k, k], got {w.shape}.", "w")
    if stride < 1 or dilation < 1 or padding < 0:
        raise DomainError(
            f"conv2d needs stride >= 1, dilation >= 1, padding >= 0; "
            f"got stride={stride}, dilation={dilation}, padding={padding}."
        )
    c_out, c_in, k, _ = w.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2d input has {x.shape[1]} channels, weight expects {c_in}.", "x")
    if b.shape != (c_out,):
        raise ShapeError(f"conv2d bias must be [{c_out}], got {b.shape}.", "b")
    out_h = conv_output_extent(x.shape[2], k, stride, padding, dilation)
    out_w = conv_output_extent(x.shape[3], k, stride, padding, dilation)
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d output extent ({out_h}, {out_w}) is not positive for input {x.shape}."
        )
    return Conv2d.apply(x, w, b, stride=stride, padding=padding, dilation=dilation)


class TransposedConv2d(Function):
    op = "transposed_conv2d"

    def forward(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:  # type: ignore[override]
        n, _, h, wd = x.shape
        c_out = w.shape[1]
        self.x, self.w = x, w
        out = _per_sample(
            lambda i: np.einsum("cij,couv->oiujv", x[i], w).reshape(c_out, 2 * h, 2 * wd), n
        )
        return out + b[None, :, None, None]

    def backward(self, grad: Tensor) -> tuple[Optional[Tensor], ...]:
        n, c_out, h2, w2 = grad.shape
        tiles = grad.reshape(n, c_out, h2 // 2, 2, w2 // 2, 2)
        grad_x = np.einsum("noiujv,couv->ncij", tiles, self.w)
        grad_w = np.einsum("noiujv,ncij->couv", tiles, self.x)
        return grad_x, grad_w, grad.sum(axis=(0, 2, 3))


def transposed_conv2d(x: Variable, w: Variable, b: Variable, stride: int = 2) -> Variable:
    """Doubles the resolution of ``x`` by stamping ``w`` [Cin, Cout, 2, 2] at stride 2."""
    check_tensor(x.value, "x")
    if stride != 2 or w.value.ndim != 4 or w.shape[2:] != (2, 2):
        raise ShapeError(
            f"transposed_conv2d supports a 2x2 kernel at stride 2, got {w.shape} stride {stride}."
        )
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"transposed_conv2d input has {x.shape[1]} channels, weight expects {w.shape[0]}.",
            "x",
        )
    if b.shape != (w.shape[1],):
        raise ShapeError(f"transposed_conv2d bias must be [{w.shape[1]}], got {b.shape}.", "b")
    return TransposedConv2d.apply(x, w, b)


class MaxPool2d(Function):
    op = "maxpool2d"

    def forward(self, x: Tensor) -> Tensor:  # type: ignore[override]
        n, c, h, w = x.shape
        windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        windows = windows.reshape(n, c, h // 2, w // 2, 4)
        # argmax returns the first maximum, i.e. row-major order inside each window
        self.argmax = windows.argmax(axis=-1)
        self.x_shape = x.shape
        return np.take_along_axis(windows, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad: Tensor) -> tuple[Optional[Tensor], ...]:
        n, c, h, w = self.x_shape
        routed = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(routed, self.argmax[..., None], grad[..., None], axis=-1)
        routed = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (routed.reshape(n, c, h, w),)


def maxpool2d(x: Variable, window: int = 2, stride: int = 2) -> Variable:
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
    check_tensor(x.value, "x")
    if window != 2 or stride != 2:
        raise ShapeError(f"maxpool2d supports a 2x2 window at stride 2, got {window}/{stride}.")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2d needs even height and width, got {x.shape}.", "x")
    return MaxPool2d.apply(x)


class PReLU(Function):
    op = "prelu"

    def forward(self, x: Tensor, a: Tensor) -> Tensor:  # type: ignore[override]
        self.x, self.a = x, a
        self.negative = x < 0
        return np.where(self.negative, a[None, :, None, None] * x, x)

    def backward(self, grad: Tensor) -> tuple[Optional[Tensor], ...]:
        grad_x = np.where(self.negative, self.a[None, :, None, None] * grad, grad)
        grad_a = np.where(self.negative, grad * self.x, 0).sum(axis=(0, 2, 3))
        return grad_x, grad_a.astype(grad.dtype, copy=False)


def prelu(x: Variable, a: Variable) -> Variable:
    """Parametric ReLU with one learned negative slope per channel."""
    check_tensor(x.value, "x")
    if a.shape != (x.shape[1],):
        raise ShapeError(f"prelu slope must be [{x.shape[1]}], got {a.shape}.", "a")
    return PReLU.apply(x, a)


class Sigmoid(Function):
    op = "sigmoid"

    def forward(self, x: Tensor) -> Tensor:  # type: ignore[override]
        self.out = expit(x)
        return self.out

    def backward(self, grad: Tensor) -> tuple[Optional[Tensor], ...]:
        return (grad * self.out * (1 - self.out),)


def sigmoid(x: Variable) -> Variable:
    return Sigmoid.apply(x)


def bilinear_weights(size: int, factor: int = 2, dtype: type = CHECK_DTYPE) -> Tensor:
    """The (factor * size, size) interpolation matrix under half-pixel alignment.

    Output sample ``o`` reads from source coordinate ``(o + 0.5) / factor - 0.5``
    clamped to the valid range.

    """
    out = np.zeros((factor * size, size), dtype=dtype)
    src = np.clip((np.arange(factor * size) + 0.5) / factor - 0.5, 0, size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    rows = np.arange(factor * size)
    np.add.at(out, (rows, lo), 1 - frac)
    np.add.at(out, (rows, hi), frac)
    return out


class BilinearUpsample2d(Function):
    op = "bilinear_upsample2d"

    def forward(self, x: Tensor) -> Tensor:  # type: ignore[override]
        self.rows = bilinear_weights(x.shape[2], dtype=x.dtype)
        self.cols = bilinear_weights(x.shape[3], dtype=x.dtype)
        return _per_sample(lambda n: self.rows @ x[n] @ self.cols.T, x.shape[0])

    def backward(self, grad: Tensor) -> tuple[Optional[Tensor], ...]:
        return (self.rows.T @ grad @ self.cols,)


def bilinear_upsample2d(x: Variable, factor: int = 2) -> Variable:
    check_tensor(x.value, "x")
    if factor != 2:
        raise ShapeError(f"bilinear_upsample2d supports factor 2, got {factor}.")
    return BilinearUpsample2d.apply(x)


class ConcatChannels(Function):
    op = "concat_channels"

    def forward(self, a: Tensor, b: Tensor) -> Tensor:  # type: ignore[override]
        self.split = a.shape[1]
        return np.concatenate([a, b], axis=1)

    def backward(self, grad: Tensor) -> tuple[Optional[Tensor], ...]:
        return grad[:, : self.split], grad[:, self.split :]


def concat_channels(a: Variable, b: Variable) -> Variable:
    """Stacks ``a`` and ``b`` along the channel axis, ``a`` first."""
    check_tensor(a.value, "a")
    check_tensor(b.value, "b")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"concat_channels needs equal N, H, W; got {a.shape} and {b.shape}.")
    return ConcatChannels.apply(a, b)


class ResidualAdd(Function):
    op = "residual_add"

    def forward(self, a: Tensor, b: Tensor) -> Tensor:  # type: ignore[override]
        return a + b

    def backward(self, grad: Tensor) -> tuple[Optional[Tensor], ...]:
        return grad, grad


def residual_add(a: Variable, b: Variable) -> Variable:
    if a.shape != b.shape:
        raise ShapeError(f"residual_add needs identical dims, got {a.shape} and {b.shape}.")
    return ResidualAdd.apply(a, b)


class Scale(Function):
    op = "scale"

    def forward(self, x: Tensor, factor: float) -> Tensor:  # type: ignore[override]
        self.factor = factor
        return x * factor

    def backward(self, grad: Tensor) -> tuple[Optional[Tensor], ...]:
        return (grad * self.factor,)


def scale(x: Variable, factor: float) -> Variable:
    """Multiplies ``x`` by a constant."""
    return Scale.apply(x, factor=float(factor))


class WeightedSum(Function):
    op = "weighted_sum"

    def forward(self, x: Tensor, weights: Tensor) -> Tensor:  # type: ignore[override]
        self.weights = weights
        return np.asarray((x * weights).sum()).reshape(SCALAR_DIMS)

    def backward(self, grad: Tensor) -> tuple[Optional[Tensor], ...]:
        return grad.reshape(()) * self.weights, None


def weighted_sum(x: Variable, weights: Variable) -> Variable:
    """Reduces ``x`` to a scalar ``sum(x * weights)``; ``weights`` receives no gradient."""
    if x.shape != weights.shape:
        raise ShapeError(f"weighted_sum needs identical dims, got {x.shape} and {weights.shape}.")
    return WeightedSum.apply(x, weights)


class BCEWithLogits(Function):
    op = "bce_loss"

    def forward(self, z: Tensor, y: Tensor) -> Tensor:  # type: ignore[override]
        self.z, self.y = z, y
        per_pixel = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
        return np.asarray(per_pixel.mean()).reshape(SCALAR_DIMS)

    def backward(self, grad: Tensor) -> tuple[Optional[Tensor], ...]:
        grad_z = (expit(self.z) - self.y) / self.z.size
        return grad.reshape(()) * grad_z, None


def bce_loss(logits: Variable, target: Variable) -> Variable:
    """Mean binary cross entropy of ``sigmoid(logits)`` against a {0, 1} target.

    Computed from logits in the form ``max(z, 0) - z*y + log(1 + exp(-|z|))``,
    which never overflows.

    Raises
    ------
    ShapeError
        If the logits are not single-channel or the target dims differ.
    DomainError
        If the target contains values other than 0 and 1.

    """
    check_tensor(logits.value, "logits")
    if logits.shape[1] != 1 or logits.shape != target.shape:
        raise ShapeError(
            f"bce_loss needs [N, 1, H, W] logits and a target of the same dims, "
            f"got {logits.shape} and {target.shape}."
        )
    if not np.all((target.value == 0) | (target.value == 1)):
        raise DomainError("bce_loss target must contain only 0 and 1.", "target")
    return BCEWithLogits.apply(logits, target)


def backward(graph: Graph, loss: Variable) -> GradDict:
    """Back-propagates from a scalar ``loss`` through every recorded node.

    Gradients are summed into each node that requires one. Gradients left
    over from an earlier call are cleared first.

    Returns
    -------
        The gradient of every named parameter leaf, keyed by its name.

    Raises
    ------
    ShapeError
        If ``loss`` is not a (1, 1, 1, 1) scalar.

    """
    if loss.shape != SCALAR_DIMS:
        raise ShapeError(f"backward needs a (1, 1, 1, 1) loss, got {loss.shape}.", "loss")
    if loss.graph is not graph:
        raise ShapeError("backward was given a loss from another graph.", "loss")
    graph.zero_grad()
    graph.nodes[loss.node_id].grad = np.ones(SCALAR_DIMS, dtype=graph.dtype)
    for node in reversed(graph.nodes[: loss.node_id + 1]):
        if node.grad is None or node.function is None or not node.requires_grad:
            continue
        for input_id, input_grad in zip(node.inputs, node.function.backward(node.grad)):
            parent = graph.nodes[input_id]
            if input_grad is None or not parent.requires_grad:
                continue
            parent.grad = input_grad if parent.grad is None else parent.grad + input_grad

    grads: GradDict = {}
    for node in graph.nodes:
        if node.op == "parameter" and node.name is not None:
            grad = node.grad if node.grad is not None else np.zeros_like(node.value)
            grads[node.name] = grads[node.name] + grad if node.name in grads else grad
    return grads


LossBuilder = Callable[[Graph, Mapping[str, Variable]], Variable]
PointFilter = Callable[[str, tuple[int, ...], Mapping[str, Tensor]], bool]


@dataclass(frozen=True)
class FiniteDiffResult:
    """Worst relative error of a sweep and the number of points it compared."""

    max_rel_error: float
    points: int


def finite_diff_sweep(
    builder: LossBuilder,
    inputs: Mapping[str, Tensor],
    h: float = 1e-4,
    exclude: Optional[PointFilter] = None,
    max_points: Optional[int] = None,
    seed: int = 0,
    skip_kinks: bool = True,
) -> FiniteDiffResult:
    """Compares backward gradients against central finite differences.

    The graph is evaluated in ``float64``. Every element of every input is
    perturbed by ``+h`` and ``-h``; points for which ``exclude(name, index,
    inputs)`` is true are skipped, which is how non-differentiable points
    (max-pool ties, PReLU at zero) are kept out of the sweep.

    Parameters
    ----------
    builder
        Builds a scalar loss on the given graph from the named input variables.
        Must be deterministic.
    inputs
        Named input tensors. Each becomes a parameter leaf of that name.
    h
        Finite-difference step.
    exclude
        Optional filter for points to skip.
    max_points
        If given, at most this many elements of each input are checked, drawn
        without replacement from a generator seeded with ``seed``. Large
        composite graphs are checked this way.
    seed
        Seed for the point sample.
    skip_kinks
        Skip points whose ``+h`` or ``-h`` evaluation selects a different max-pool
        argmax or PReLU branch than the unperturbed graph.

    Returns
    -------
        The maximum of ``|fd - ad| / max(1e-8, |fd| + |ad|)`` over the compared
        points, and how many points were compared. A sweep that compared no
        point reports an error of 0.0 and must not be read as a pass.

    """
    base = {name: np.asarray(value, dtype=CHECK_DTYPE) for name, value in inputs.items()}

    def evaluate(values: Mapping[str, Tensor]) -> tuple[Graph, Variable]:
        graph = Graph(dtype=CHECK_DTYPE)
        variables = {name: graph.parameter(value, name) for name, value in values.items()}
        return graph, builder(graph, variables)

    graph, loss = evaluate(base)
    analytic = backward(graph, loss)
    branches = _branch_signature(graph)

    picker = np.random.default_rng(seed)
    worst = 0.0
    compared = 0
    for name, value in base.items():
        indices = list(np.ndindex(*value.shape))
        if max_points is not None and len(indices) > max_points:
            chosen = picker.choice(len(indices), size=max_points, replace=False)
            indices = [indices[i] for i in sorted(chosen)]
        for index in indices:
            if exclude is not None and exclude(name, index, base):
                continue
            shifted = dict(base)
            plus, minus = value.copy(), value.copy()
            plus[index] += h
            minus[index] -= h
            shifted[name] = plus
            graph_plus, loss_plus_var = evaluate(shifted)
            shifted[name] = minus
            graph_minus, loss_minus_var = evaluate(shifted)
            if skip_kinks and not (
                _same_branches(branches, _branch_signature(graph_plus))
                and _same_branches(branches, _branch_signature(graph_minus))
            ):
                continue
            loss_plus = float(loss_plus_var.value.reshape(()))
            loss_minus = float(loss_minus_var.value.reshape(()))
            fd = (loss_plus - loss_minus) / (2 * h)
            ad = float(analytic[name][index])
            worst = max(worst, abs(fd - ad) / max(1e-8, abs(fd) + abs(ad)))
            compared += 1
    return FiniteDiffResult(worst, compared)


def finite_diff_check(
    builder: LossBuilder,
    inputs: Mapping[str, Tensor],
    h: float = 1e-4,
    exclude: Optional[PointFilter] = None,
    max_points: Optional[int] = None,
    seed: int = 0,
    skip_kinks: bool = True,
) -> float:
    """Maximum relative error of :func:`finite_diff_sweep` with the same arguments."""
    return finite_diff_sweep(
        builder, inputs, h, exclude, max_points, seed, skip_kinks
    ).max_rel_error


def _branch_signature(graph: Graph) -> list[Tensor]:
    """The piecewise branch taken by every max-pool and PReLU node of ``graph``."""
    signature = []
    for node in graph.nodes:
        if isinstance(node.function, MaxPool2d):
            signature.append(node.function.argmax)
        elif isinstance(node.function, PReLU):
            signature.append(node.function.negative)
    return signature


def _same_branches(a: list[Tensor], b: list[Tensor]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
