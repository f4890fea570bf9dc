"""
Dense real tensors with reverse-mode automatic differentiation.

Every backward rule is written with the same tensor ops as the forward pass.
Running the backward pass with `create_graph=True` therefore records it as an
ordinary graph, and the returned gradients can be differentiated again
(the gradient penalty needs exactly that).
"""

import contextlib
import threading
import typing as t
import zlib

import numpy as np
from kforge.src.exceptions import GradientError, NonFiniteError, ShapeError

ArrayLike = t.Union["Tensor", np.ndarray, float, int, t.Sequence]
BackwardFn = t.Callable[["Tensor"], t.Sequence[t.Optional["Tensor"]]]

_state = threading.local()

PRECISIONS: t.Dict[str, np.dtype] = {
    "float32": np.dtype(np.float32),
    "float64": np.dtype(np.float64),
}


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", PRECISIONS["float32"])


@contextlib.contextmanager
def no_grad() -> t.Iterator[None]:
    """
    Ops executed inside this block are not recorded
    """
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextlib.contextmanager
def enable_grad() -> t.Iterator[None]:
    previous = _grad_enabled()
    _state.grad_enabled = True
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextlib.contextmanager
def precision(name: str) -> t.Iterator[None]:
    """
    Sets the dtype new tensors are created with. Training runs in float32,
    gradient checks run inside `precision("float64")`.

    Args:
        name (str): Either `float32` or `float64`
    """
    if name not in PRECISIONS:
        raise ValueError(f"Unknown precision '{name}'. Choose one of {list(PRECISIONS)}")
    previous = get_default_dtype()
    _state.dtype = PRECISIONS[name]
    try:
        yield
    finally:
        _state.dtype = previous


class Node:
    """
    One entry of the computation record: which op produced a tensor, from
    which parents, and how to push a gradient back to them
    """

    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: t.Tuple["Tensor", ...], backward: BackwardFn):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    """
    Immutable n-dimensional array that remembers how it was computed.

    Args:
        data (ArrayLike): Values, copied into a contiguous array
        requires_grad (bool): Whether gradients should flow into this tensor
        dtype (t.Optional[np.dtype]): Defaults to the array's own floating dtype,
            or to the current default precision
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: t.Optional[t.Union[str, np.dtype]] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data: np.ndarray = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self._node: t.Optional[Node] = None

    @property
    def shape(self) -> t.Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def op(self) -> str:
        return self._node.op if self._node is not None else "leaf"

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def isfinite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # Operators
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return einsum("ij,jk->ik", self, other)

    def sum(self, axis: t.Optional[t.Union[int, t.Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: t.Optional[t.Union[int, t.Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: t.Union[int, t.Sequence[int]]) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes if axes else None)


class Parameter(Tensor):
    """
    Named leaf tensor owned by a model. Only optimizer steps and checkpoint
    loading replace its values.

    Args:
        data (ArrayLike): Initial values
        name (str): Local name, the full path comes from the owning module
        trainable (bool): Non-trainable parameters hold buffers such as running statistics
    """

    def __init__(self, data: ArrayLike, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = bool(trainable)

    def assign(self, values: np.ndarray) -> None:
        values = np.asarray(values)
        if values.shape != self.data.shape:
            raise ShapeError(
                f"Cannot assign shape {values.shape} to parameter '{self.name}' of shape {self.shape}"
            )
        self.data = np.ascontiguousarray(values.astype(self.data.dtype))

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(value: ArrayLike, like: t.Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype or get_default_dtype()))


def zeros(shape: t.Sequence[int], dtype: t.Optional[np.dtype] = None) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype or get_default_dtype()))


def ones(shape: t.Sequence[int], dtype: t.Optional[np.dtype] = None) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=dtype or get_default_dtype()))


def _result(data: np.ndarray, parents: t.Sequence[Tensor], op: str, backward: BackwardFn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, tuple(parents), backward)
    return out


def _normalize_axes(axis: t.Optional[t.Union[int, t.Sequence[int]]], ndim: int) -> t.Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_to(g: Tensor, shape: t.Tuple[int, ...]) -> Tensor:
    """
    Reduces a broadcast gradient back to `shape`
    """
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    axes = list(range(lead))
    for i, extent in enumerate(shape):
        if extent == 1 and g.shape[lead + i] != 1:
            axes.append(lead + i)
    out = reduce_sum(g, axis=tuple(axes), keepdims=True) if axes else g
    return reshape(out, shape)


# Elementwise arithmetic
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(g: Tensor):
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(g: Tensor):
        return sum_to(g, a.shape), sum_to(neg(g), b.shape)

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(g: Tensor):
        return sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)

    return _result(a.data * b.data, (a, b), "mul", backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(g: Tensor):
        ga = div(g, b)
        gb = neg(div(mul(g, a), mul(b, b)))
        return sum_to(ga, a.shape), sum_to(gb, b.shape)

    return _result(a.data / b.data, (a, b), "div", backward)


def neg(a: Tensor) -> Tensor:
    def backward(g: Tensor):
        return (neg(g),)

    return _result(-a.data, (a,), "neg", backward)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def backward(g: Tensor):
        if exponent == 1.0:
            return (g,)
        return (mul(g, mul(exponent, power(a, exponent - 1.0))),)

    return _result(np.power(a.data, exponent), (a,), f"pow[{exponent:g}]", backward)


def sqrt(a: Tensor) -> Tensor:
    def backward(g: Tensor):
        return (div(g, mul(2.0, out)),)

    out = _result(np.sqrt(a.data), (a,), "sqrt", backward)
    return out


def exp(a: Tensor) -> Tensor:
    def backward(g: Tensor):
        return (mul(g, out),)

    out = _result(np.exp(a.data), (a,), "exp", backward)
    return out


def log(a: Tensor) -> Tensor:
    def backward(g: Tensor):
        return (div(g, a),)

    return _result(np.log(a.data), (a,), "log", backward)


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)

    def backward(g: Tensor):
        return (mul(g, Tensor(factor)),)

    return _result(a.data * factor, (a,), "relu" if slope == 0.0 else "leaky_relu", backward)


def _pair(a: ArrayLike, b: ArrayLike) -> t.Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# Shape ops
def reshape(a: Tensor, shape: t.Sequence[int]) -> Tensor:
    def backward(g: Tensor):
        return (reshape(g, a.shape),)

    return _result(a.data.reshape(tuple(shape)), (a,), "reshape", backward)


def transpose(a: Tensor, axes: t.Optional[t.Sequence[int]] = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g: Tensor):
        return (transpose(g, inverse),)

    return _result(np.transpose(a.data, axes), (a,), "transpose", backward)


def expand(a: Tensor, shape: t.Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def backward(g: Tensor):
        return (sum_to(g, a.shape),)

    return _result(np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,), "expand", backward)


def reduce_sum(
    a: Tensor, axis: t.Optional[t.Union[int, t.Sequence[int]]] = None, keepdims: bool = False
) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def backward(g: Tensor):
        return (expand(reshape(g, kept_shape), a.shape),)

    return _result(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), "sum", backward)


def mean(a: Tensor, axis: t.Optional[t.Union[int, t.Sequence[int]]] = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return div(reduce_sum(a, axis=axes, keepdims=keepdims), float(count))


def concat(tensors: t.Sequence[Tensor], axis: int = 0) -> Tensor:
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [x.shape[axis] for x in tensors])

    def backward(g: Tensor):
        return tuple(take(g, np.arange(lo, hi), axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(np.concatenate([x.data for x in tensors], axis=axis), tuple(tensors), "concat", backward)


def take(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """
    Gathers entries along `axis`. A multi-dimensional `indices` array replaces
    that axis with its own shape.
    """
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    size = a.shape[axis]
    if indices.size and (indices.min() < 0 or indices.max() >= size):
        raise ShapeError(f"take: index out of range for axis {axis} of extent {size}")

    def backward(g: Tensor):
        return (scatter_add(g, indices, axis, size),)

    return _result(np.take(a.data, indices, axis=axis), (a,), "take", backward)


def scatter_add(g: Tensor, indices: np.ndarray, axis: int, size: int) -> Tensor:
    """
    Adjoint of `take`: sums slices of `g` into positions `indices` of a new axis of length `size`
    """
    indices = np.asarray(indices, dtype=np.int64)
    k = indices.ndim
    out_shape = g.shape[:axis] + (size,) + g.shape[axis + k :]
    data = np.zeros(out_shape, dtype=g.dtype)
    moved = np.moveaxis(g.data, list(range(axis, axis + k)), list(range(k)))
    np.add.at(np.moveaxis(data, axis, 0), indices, moved)

    def backward(gg: Tensor):
        return (take(gg, indices, axis),)

    return _result(data, (g,), "scatter_add", backward)


def einsum(subscripts: str, *operands: Tensor) -> Tensor:
    """
    Explicit-output einsum (`"ij,jk->ik"`). Subscripts may not repeat a
    letter inside one operand.
    """
    if "->" not in subscripts or "." in subscripts:
        raise ShapeError(f"einsum needs explicit output subscripts without ellipsis, got '{subscripts}'")
    inputs, output = subscripts.replace(" ", "").split("->")
    in_subs = inputs.split(",")
    if len(in_subs) != len(operands):
        raise ShapeError(f"einsum '{subscripts}' expects {len(in_subs)} operands, got {len(operands)}")
    extents: t.Dict[str, int] = {}
    for subs, x in zip(in_subs, operands):
        if len(subs) != x.ndim or len(set(subs)) != len(subs):
            raise ShapeError(f"einsum operand '{subs}' does not match shape {x.shape}")
        for c, n in zip(subs, x.shape):
            if extents.setdefault(c, n) != n:
                raise ShapeError(f"einsum index '{c}' has extents {extents[c]} and {n}")

    def backward(g: Tensor):
        grads = []
        for i, target in enumerate(in_subs):
            others = [x for j, x in enumerate(operands) if j != i]
            sources = [output] + [s for j, s in enumerate(in_subs) if j != i]
            present = set("".join(sources))
            reduced = "".join(c for c in target if c in present)
            part = einsum(f"{','.join(sources)}->{reduced}", g, *others)
            if reduced != target:
                kept = tuple(extents[c] if c in present else 1 for c in target)
                part = expand(reshape(part, kept), operands[i].shape)
            grads.append(part)
        return tuple(grads)

    data = np.einsum(subscripts, *[x.data for x in operands], optimize=len(operands) > 1)
    return _result(np.asarray(data), tuple(operands), f"einsum[{subscripts}]", backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    shifted = sub(a, shift)
    return sub(shifted, log(reduce_sum(exp(shifted), axis=axis, keepdims=True)))


# Differentiation
def _topological_order(output: Tensor) -> t.List[Tensor]:
    order: t.List[Tensor] = []
    visited: t.Set[int] = set()
    stack: t.List[t.Tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._node is not None:
            for parent in node._node.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def grad(
    output: Tensor,
    inputs: t.Sequence[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
    check_finite: bool = True,
) -> t.List[Tensor]:
    """
    Gradients of a scalar `output` with respect to each tensor in `inputs`

    Args:
        output (Tensor): Scalar tensor reachable from `inputs`
        inputs (t.Sequence[Tensor]): Leaves (or intermediate tensors) to differentiate against
        create_graph (bool): Record the backward pass so the returned gradients are differentiable
        allow_unused (bool): Return zeros instead of raising for inputs the output does not depend on
        check_finite (bool): Raise `NonFiniteError` as soon as a NaN/Inf gradient appears

    Raises:
        GradientError: Non-scalar output, or an input that is not part of the graph
        NonFiniteError: A backward rule produced NaN/Inf

    Returns:
        t.List[Tensor]: One gradient per input, same shapes
    """
    if output.size != 1:
        raise GradientError(f"backward needs a scalar output, got shape {output.shape}")
    order = _topological_order(output)
    reachable = {id(x) for x in order}
    for x in inputs:
        if id(x) not in reachable and not allow_unused:
            name = getattr(x, "name", "") or repr(x)
            raise GradientError(f"{name} is not part of the graph that produced the output")

    grads: t.Dict[int, Tensor] = {id(output): Tensor(np.ones(output.shape, dtype=output.dtype))}
    paths: t.Dict[int, t.List[str]] = {id(output): [output.op]}
    context = enable_grad if create_graph else no_grad
    with context():
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._node is None:
                continue
            parent_grads = node._node.backward(g)
            for parent, pg in zip(node._node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                path = [node._node.op] + paths[id(node)]
                if check_finite and not np.all(np.isfinite(pg.data)):
                    raise NonFiniteError("non-finite gradient", path)
                if id(parent) in grads:
                    grads[id(parent)] = add(grads[id(parent)], pg)
                else:
                    grads[id(parent)] = pg
                    paths[id(parent)] = path
    return [grads.get(id(x), Tensor(np.zeros(x.shape, dtype=x.dtype))) for x in inputs]


def backward(
    output: Tensor,
    leaves: t.Sequence[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
) -> t.Dict[Tensor, Tensor]:
    """
    Same as `grad`, keyed by leaf
    """
    return dict(zip(leaves, grad(output, leaves, create_graph=create_graph, allow_unused=allow_unused)))


def grad_check(
    fn: t.Callable[[], Tensor],
    points: t.Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """
    Compares autodiff gradients with central finite differences.

    `fn` is evaluated at the current values of `points`; each coordinate is
    nudged in place and restored afterwards. Run it inside `precision("float64")`.

    Args:
        fn (t.Callable[[], Tensor]): Scalar-valued function of the point tensors
        points (t.Sequence[Tensor]): Leaves to check
        step (float): Finite difference step

    Raises:
        NonFiniteError: When the function value is not finite

    Returns:
        float: max over coordinates of |analytic - numeric| / max(1, |analytic|)
    """
    value = fn()
    if not value.isfinite():
        raise NonFiniteError("function value is not finite at the check point", [value.op])
    analytic = grad(value, points, allow_unused=True)

    worst = 0.0
    for point, a_grad in zip(points, analytic):
        flat = point.data.reshape(-1)
        expected = a_grad.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            f_plus = fn().item()
            flat[i] = original - step
            f_minus = fn().item()
            flat[i] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError("function value is not finite near the check point")
            numeric = (f_plus - f_minus) / (2.0 * step)
            error = abs(float(expected[i]) - numeric) / max(1.0, abs(float(expected[i])))
            worst = max(worst, error)
    return worst


class RandomStreams:
    """
    Splittable counter-based randomness. Each call site names its stream and
    a counter, so results do not depend on call order or thread count.

    Args:
        seed (int): Run seed
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, stream: str, counter: int = 0) -> np.random.Generator:
        sequence = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(zlib.crc32(stream.encode()), int(counter))
        )
        return np.random.Generator(np.random.Philox(sequence))

    def normal(self, stream: str, shape: t.Sequence[int], counter: int = 0) -> Tensor:
        values = self.generator(stream, counter).standard_normal(tuple(shape))
        return Tensor(values.astype(get_default_dtype()))

    def uniform(self, stream: str, shape: t.Sequence[int], counter: int = 0) -> Tensor:
        values = self.generator(stream, counter).random(tuple(shape))
        return Tensor(values.astype(get_default_dtype()))
