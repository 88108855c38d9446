"""Dense float64 tensors with reverse-mode gradients.

Implements only the operation set the rest of the package needs (dense and
convolution layers, elementwise arithmetic, reductions, softmax
log-likelihood pieces, norms, hinges) plus a central finite-difference
checker that serves as the independent oracle for every analytic gradient.
All arrays are 64-bit, row-major, and every public operation validates that
its result is finite.
"""

from __future__ import annotations

from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

CHECKPOINT_MAGIC = "fairdetect-params v1"

GradMap = dict[str, np.ndarray]


class GraphError(ValueError):
    """Raised on shape mismatches, non-finite values, or malformed graphs."""


def _as_array(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


def _require_finite(arr: np.ndarray, op: str) -> None:
    # One-pass check: any inf/nan entry makes the sum non-finite. (A sum
    # overflowing on legitimately finite entries would need ~1e308 values.)
    if not np.isfinite(arr.sum()):
        raise GraphError(f"{op}: produced non-finite values")


class Tensor:
    """A float64 array plus the bookkeeping for reverse-mode gradients.

    Tensors returned by operations remember their parents and a backward
    closure; `backward` on a scalar output accumulates gradients into every
    reachable tensor's `.grad`.
    """

    __slots__ = ("data", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, _parents: tuple = (), _op: str = "tensor"):
        arr = _as_array(data)
        _require_finite(arr, _op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self._op!r}, shape={self.shape})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def constant(data) -> Tensor:
    """Wrap raw data as a graph constant (no gradient flows into it)."""
    return Tensor(data, _op="constant")


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, _op="constant")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` after a broadcasting elementwise op."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(op: str, a, b, fwd, da, db) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out_data = fwd(a.data, b.data)
    except ValueError as exc:
        raise GraphError(f"{op}: shapes {a.shape} and {b.shape} are incompatible") from exc
    out = Tensor(out_data, (a, b), op)

    def backward(g: np.ndarray) -> None:
        a.grad += _unbroadcast(da(g, a.data, b.data), a.data.shape)
        b.grad += _unbroadcast(db(g, a.data, b.data), b.data.shape)

    out._backward = backward
    return out


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary(
        "div",
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    out = Tensor(a.data @ b.data, (a, b), "matmul")

    def backward(g: np.ndarray) -> None:
        a.grad += g @ b.data.T
        b.grad += a.data.T @ g

    out._backward = backward
    return out


def relu(x: Tensor) -> Tensor:
    """Hinge nonlinearity; the subgradient at the kink is 0."""
    x = _wrap(x)
    out = Tensor(np.maximum(x.data, 0.0), (x,), "relu")

    def backward(g: np.ndarray) -> None:
        x.grad += g * (x.data > 0.0)

    out._backward = backward
    return out


def absolute(x: Tensor) -> Tensor:
    """Elementwise |x|; the subgradient at 0 is 0."""
    x = _wrap(x)
    out = Tensor(np.abs(x.data), (x,), "abs")

    def backward(g: np.ndarray) -> None:
        x.grad += g * np.sign(x.data)

    out._backward = backward
    return out


def exp(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = Tensor(np.exp(x.data), (x,), "exp")

    def backward(g: np.ndarray) -> None:
        x.grad += g * out.data

    out._backward = backward
    return out


def log(x: Tensor) -> Tensor:
    x = _wrap(x)
    if np.any(x.data <= 0.0):
        raise GraphError("log: input must be strictly positive")
    out = Tensor(np.log(x.data), (x,), "log")

    def backward(g: np.ndarray) -> None:
        x.grad += g / x.data

    out._backward = backward
    return out


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root; the subgradient at 0 is 0."""
    x = _wrap(x)
    if np.any(x.data < 0.0):
        raise GraphError("sqrt: input must be nonnegative")
    out = Tensor(np.sqrt(x.data), (x,), "sqrt")

    def backward(g: np.ndarray) -> None:
        mask = x.data > 0.0
        contrib = np.zeros_like(x.data)
        np.divide(0.5 * g, out.data, out=contrib, where=mask)
        x.grad += contrib

    out._backward = backward
    return out


def _axes_tuple(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    axes = _axes_tuple(axis, x.ndim)
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims), (x,), "sum")

    def backward(g: np.ndarray) -> None:
        if not keepdims:
            g = np.expand_dims(g, axes)
        x.grad += np.broadcast_to(g, x.data.shape)

    out._backward = backward
    return out


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    axes = _axes_tuple(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims), (x,), "mean")

    def backward(g: np.ndarray) -> None:
        if not keepdims:
            g = np.expand_dims(g, axes)
        x.grad += np.broadcast_to(g, x.data.shape) / count

    out._backward = backward
    return out


def logsumexp(x: Tensor) -> Tensor:
    """Max-stabilized log-sum-exp over the last axis; backward is softmax."""
    x = _wrap(x)
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = Tensor((m + np.log(s)).squeeze(-1), (x,), "logsumexp")
    probs = e / s

    def backward(g: np.ndarray) -> None:
        x.grad += np.expand_dims(g, -1) * probs

    out._backward = backward
    return out


def pick_last(x: Tensor, index) -> Tensor:
    """Select one entry along the last axis per leading position."""
    x = _wrap(x)
    idx = np.asarray(index, dtype=np.intp)
    if idx.shape != x.shape[:-1]:
        raise GraphError(
            f"pick_last: index shape {idx.shape} does not match leading shape {x.shape[:-1]}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
        raise GraphError(f"pick_last: index out of range for width {x.shape[-1]}")
    k = x.shape[-1]
    flat = x.data.reshape(-1, k)
    rows = np.arange(flat.shape[0])
    out = Tensor(flat[rows, idx.ravel()].reshape(idx.shape), (x,), "pick_last")

    def backward(g: np.ndarray) -> None:
        gx = np.zeros_like(flat)
        np.add.at(gx, (rows, idx.ravel()), g.ravel())
        x.grad += gx.reshape(x.data.shape)

    out._backward = backward
    return out


def gather_rows(x: Tensor, index) -> Tensor:
    """Select rows (axis 0); repeated indices accumulate gradient."""
    x = _wrap(x)
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise GraphError(f"gather_rows: index must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise GraphError(f"gather_rows: index out of range for {x.shape[0]} rows")
    out = Tensor(x.data[idx], (x,), "gather_rows")

    def backward(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x.grad += gx

    out._backward = backward
    return out


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise GraphError("concat: need at least one tensor")
    try:
        out_data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise GraphError(
            f"concat: shapes {[p.shape for p in parts]} are incompatible on axis {axis}"
        ) from exc
    out = Tensor(out_data, tuple(parts), "concat")
    extents = [p.shape[axis] for p in parts]

    def backward(g: np.ndarray) -> None:
        start = 0
        for p, extent in zip(parts, extents):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + extent)
            p.grad += g[tuple(sl)]
            start += extent

    out._backward = backward
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis`."""
    x = _wrap(x)
    if start < 0 or start + length > x.shape[axis]:
        raise GraphError(
            f"narrow: slice [{start}:{start + length}] out of range for shape {x.shape} axis {axis}"
        )
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(x.data[sl], (x,), "narrow")

    def backward(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        gx[sl] = g
        x.grad += gx

    out._backward = backward
    return out


def reshape(x: Tensor, shape) -> Tensor:
    x = _wrap(x)
    try:
        out_data = x.data.reshape(shape)
    except ValueError as exc:
        raise GraphError(f"reshape: cannot view shape {x.shape} as {shape}") from exc
    out = Tensor(out_data, (x,), "reshape")

    def backward(g: np.ndarray) -> None:
        x.grad += g.reshape(x.data.shape)

    out._backward = backward
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution of NCHW input with OIHW weights via im2col.

    Output spatial extent is (H + 2*padding - kh) // stride + 1 per side.
    """
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.ndim != 4 or w.ndim != 4:
        raise GraphError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise GraphError(f"conv2d: input channels {cin} do not match weight channels {cin_w}")
    if b.shape != (cout,):
        raise GraphError(f"conv2d: bias shape {b.shape} does not match {cout} output channels")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise GraphError(f"conv2d: kernel {kh}x{kw} too large for input {x.shape}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]  # (n, cin, oh, ow, kh, kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, cin * kh * kw)
    w_flat = w.data.reshape(cout, -1)
    out_flat = cols @ w_flat.T + b.data
    out = Tensor(out_flat.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2), (x, w, b), "conv2d")

    def backward(g: np.ndarray) -> None:
        g_flat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, cout)
        b.grad += g_flat.sum(axis=0)
        w.grad += (g_flat.T @ cols).reshape(w.data.shape)
        d_cols = (g_flat @ w_flat).reshape(n, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        d_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                d_padded[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                    d_cols[:, :, :, :, i, j]
                )
        if padding:
            x.grad += d_padded[:, :, padding:-padding, padding:-padding]
        else:
            x.grad += d_padded

    out._backward = backward
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of an NCHW tensor."""
    x = _wrap(x)
    if x.ndim != 4:
        raise GraphError(f"upsample2x: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3), (x,), "upsample2x")

    def backward(g: np.ndarray) -> None:
        x.grad += g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))

    out._backward = backward
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    return order


def backward(output: Tensor) -> list[Tensor]:
    """Run reverse-mode accumulation from a scalar output.

    Returns the visited tensors; their `.grad` fields hold fresh gradients.
    """
    if output.data.shape != ():
        raise GraphError(f"backward: output must be scalar, got shape {output.shape}")
    order = _toposort(output)
    for node in order:
        node.grad = np.zeros_like(node.data)
    output.grad = np.ones_like(output.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
    return order


class ParameterStore:
    """Ordered, named collection of trainable tensors.

    Iteration order is insertion order, which fixes the layout of gradient
    maps, checkpoints, and direction vectors.
    """

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise GraphError(f"parameter {name!r} already exists")
        t = value if isinstance(value, Tensor) else Tensor(value, _op=f"param:{name}")
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        if name not in self._params:
            raise GraphError(f"unknown parameter {name!r}")
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def keys(self):
        return self._params.keys()

    def items(self):
        return self._params.items()

    def copy(self) -> "ParameterStore":
        clone = ParameterStore()
        for name, t in self._params.items():
            clone.add(name, t.data.copy())
        return clone

    def snapshot(self) -> GradMap:
        """Detached copies of all parameter values."""
        return {name: t.data.copy() for name, t in self._params.items()}

    def restore(self, values: Mapping[str, np.ndarray]) -> None:
        for name, arr in values.items():
            self[name].data = arr.copy()


Graph = Callable[[ParameterStore], Tensor]


def value_and_grads(output: Tensor, params: ParameterStore) -> tuple[float, GradMap]:
    """Backpropagate an already-built scalar node against a parameter store.

    The gradient map carries one entry per parameter in the store; parameters
    the node never touched get zero gradients.
    """
    if not isinstance(output, Tensor):
        raise GraphError("value_and_grads: output must be a Tensor")
    if output.data.shape != ():
        raise GraphError(f"value_and_grads: output must be scalar, got shape {output.shape}")
    visited = {id(t) for t in backward(output)}
    grads: GradMap = {}
    for name, p in params.items():
        grads[name] = p.grad if id(p) in visited else np.zeros_like(p.data)
    _require_finite(output.data, "loss")
    for name, g in grads.items():
        _require_finite(g, f"gradient of {name}")
    return float(output.data), grads


def evaluate_with_gradients(graph: Graph, params: ParameterStore) -> tuple[float, GradMap]:
    """Evaluate a scalar-valued graph and return (loss, gradient map).

    Repeated calls with the same inputs are bit-identical.
    """
    return value_and_grads(graph(params), params)


def evaluate(graph: Graph, params: ParameterStore) -> float:
    """Forward-only evaluation of a scalar graph."""
    out = graph(params)
    if out.data.shape != ():
        raise GraphError(f"evaluate: graph output must be scalar, got shape {out.shape}")
    return float(out.data)


def finite_difference_gradient(graph: Graph, params: ParameterStore, h: float = 1e-5) -> GradMap:
    """Central-difference gradient estimate, coordinate by coordinate."""
    if h <= 0:
        raise GraphError(f"finite_difference_gradient: step must be positive, got {h}")
    grads: GradMap = {}
    for name, p in params.items():
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        g_flat = g.ravel()
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = evaluate(graph, params)
            flat[i] = original - h
            f_minus = evaluate(graph, params)
            flat[i] = original
            g_flat[i] = (f_plus - f_minus) / (2.0 * h)
        grads[name] = g
    return grads


def gradient_check(
    graph: Graph,
    params: ParameterStore,
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-6,
) -> list[tuple[str, int, float, float]]:
    """Compare analytic and finite-difference gradients.

    Returns the offending (name, flat index, analytic, numeric) tuples; an
    empty list means every coordinate agreed within tolerance.
    """
    _, analytic = evaluate_with_gradients(graph, params)
    numeric = finite_difference_gradient(graph, params, h)
    failures = []
    for name in params.keys():
        a = analytic[name].ravel()
        n = numeric[name].ravel()
        for i in range(a.size):
            err = abs(a[i] - n[i])
            if err > max(atol, rtol * max(abs(a[i]), abs(n[i]))):
                failures.append((name, i, float(a[i]), float(n[i])))
    return failures


def sgd_step(params: ParameterStore, grads: Mapping[str, np.ndarray], beta: float) -> None:
    """In-place gradient descent update: p <- p - beta * grad."""
    if beta <= 0:
        raise GraphError(f"sgd_step: learning rate must be positive, got {beta}")
    missing = [k for k in params.keys() if k not in grads]
    if missing:
        raise GraphError(f"sgd_step: missing gradients for {missing}")
    extra = [k for k in grads if k not in params]
    if extra:
        raise GraphError(f"sgd_step: gradients for unknown parameters {extra}")
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.data.shape:
            raise GraphError(
                f"sgd_step: gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {p.data.shape}"
            )
        p.data -= beta * g


def save_checkpoint(params: ParameterStore, path) -> None:
    """Write parameters as versioned text: one (name, shape, values) record each."""
    lines = [CHECKPOINT_MAGIC, str(len(params))]
    for name, p in params.items():
        dims = " ".join(str(d) for d in p.data.shape)
        lines.append(f"{name} {p.data.ndim} {dims}".rstrip())
        lines.append(" ".join(repr(float(v)) for v in p.data.ravel()))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> ParameterStore:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise GraphError(f"{path}: not a parameter checkpoint (missing {CHECKPOINT_MAGIC!r})")
    count = int(lines[1])
    params = ParameterStore()
    cursor = 2
    for _ in range(count):
        header = lines[cursor].split()
        name, ndim = header[0], int(header[1])
        shape = tuple(int(d) for d in header[2 : 2 + ndim])
        values = np.array([float(v) for v in lines[cursor + 1].split()], dtype=np.float64)
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise GraphError(f"{path}: value count mismatch for parameter {name!r}")
        params.add(name, values.reshape(shape))
        cursor += 2
    return params
