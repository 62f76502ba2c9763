"""
Reverse-mode automatic differentiation over dense float64 tensors.

Every differentiable operation appends one node to the active ``Tape``
(parents always precede children), and ``Tape.backward`` walks the node list
once in reverse order. Parameters are plain leaf tensors with
``requires_grad=True``; a tape registers them lazily the first time they are
used, so the same parameters can be read by several tapes (one per thread).

Usage:
    with Tape() as tape:
        loss = (w * w).sum()
    tape.backward(loss)
    w.grad  # -> 2 * w.data
"""

import os
import sys
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Add parent directory to path to import config.py from project root
parent_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from config import Config
from errors import ConfigurationError, DimensionError, DomainError, NumericalAbort

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_local = threading.local()


def current_tape() -> Optional["Tape"]:
    """Innermost tape entered on this thread, if any"""
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense n-dimensional float64 array with an optional tape-node handle"""

    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[int] = None
        self.tape: Optional["Tape"] = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=np.float64)
        out.requires_grad = False
        out.grad = None
        out.node = None
        out.tape = None
        out.name = None
        return out

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return self.data.shape[0]

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self) -> Dict[int, np.ndarray]:
        if self.tape is None:
            raise ValueError("tensor was not produced on a tape")
        return self.tape.backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, data={np.array2string(self.data, precision=4)})"

    # --- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Node:
    op: str
    parents: Tuple[int, ...]
    backward: Optional[Backward]
    leaf: Optional[Tensor] = None


class Tape:
    """Append-only record of differentiable operations"""

    def __init__(self):
        self.nodes: List[_Node] = []
        self.gradients: Dict[int, np.ndarray] = {}
        self._leaf_ids: Dict[int, int] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def node_id(self, tensor: Tensor) -> int:
        """Node id of a tensor on this tape, registering leaves on first use"""
        if tensor.tape is self and tensor.node is not None:
            return tensor.node
        key = id(tensor)
        if key in self._leaf_ids:
            return self._leaf_ids[key]
        self.nodes.append(_Node("leaf", (), None, tensor))
        self._leaf_ids[key] = len(self.nodes) - 1
        return len(self.nodes) - 1

    def record(self, op: str, parents: Tuple[int, ...], backward: Backward) -> int:
        self.nodes.append(_Node(op, parents, backward))
        return len(self.nodes) - 1

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """
        Propagate d(loss)/d(node) to every node and accumulate leaf gradients

        Args:
            loss: scalar tensor recorded on this tape

        Returns:
            Map node-id -> gradient array for every node reached
        """
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise ValueError("backward called on an empty tape")
        root = self.node_id(loss) if loss.requires_grad else None
        if root is None:
            raise ValueError("loss does not depend on any tensor that requires gradients")

        grads: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[root] = np.ones_like(loss.data)
        for i in range(root, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.backward is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if parent < 0 or pg is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = np.array(pg, dtype=np.float64)
                else:
                    grads[parent] = grads[parent] + pg

        self.gradients = {i: g for i, g in enumerate(grads) if g is not None}
        for i, node in enumerate(self.nodes):
            if node.leaf is None or grads[i] is None:
                continue
            leaf = node.leaf
            leaf.grad = grads[i].copy() if leaf.grad is None else leaf.grad + grads[i]
        return self.gradients

    def grad(self, tensor: Tensor) -> Optional[np.ndarray]:
        """Gradient of the last backward pass w.r.t. a tensor, if it was reached"""
        if tensor.tape is self and tensor.node is not None:
            return self.gradients.get(tensor.node)
        node = self._leaf_ids.get(id(tensor))
        return None if node is None else self.gradients.get(node)


def _as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_finite(op: str, out: np.ndarray, inputs: Sequence[Tensor]):
    if np.all(np.isfinite(out)):
        return
    if all(np.all(np.isfinite(t.data)) for t in inputs):
        raise NumericalAbort(f"{op} produced non-finite values from finite inputs")


def _make(out: np.ndarray, op: str, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
    result = Tensor._wrap(out)
    if Config.DEBUG_CHECKS:
        _check_finite(op, result.data, inputs)
    tape = current_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return result
    parents = tuple(tape.node_id(t) if t.requires_grad else -1 for t in inputs)
    result.requires_grad = True
    result.node = tape.record(op, parents, backward)
    result.tape = tape
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- arithmetic ---------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data / b.data, "div", (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = _as_tensor(a)
    p = float(exponent)
    return _make(a.data ** p, "power", (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T, "transpose", (a,), lambda g: (g.T,))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} into {tuple(shape)}") from exc
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def tensor_sum(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), backward)


def mean(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shape mismatch: {[t.shape for t in parts]}") from exc
    cuts = np.cumsum([t.shape[axis] for t in parts])[:-1]
    return _make(out, "concat", parts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def repeat(a: ArrayLike, n: int, axis: int = 0) -> Tensor:
    """Repeat each row n times consecutively: row w becomes rows w*n .. w*n+n-1"""
    a = _as_tensor(a)
    if axis != 0:
        raise DimensionError("repeat supports the leading (batch) axis only")

    def backward(g):
        return (g.reshape((a.shape[0], n) + a.shape[1:]).sum(axis=1),)

    return _make(np.repeat(a.data, n, axis=0), "repeat", (a,), backward)


def take(a: ArrayLike, indices) -> Tensor:
    """Gather entries of the row-major flattened tensor; output has the shape of ``indices``"""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g):
        flat = np.zeros(a.data.size)
        np.add.at(flat, idx.reshape(-1), g.reshape(-1))
        return (flat.reshape(a.shape),)

    return _make(a.data.reshape(-1)[idx], "take", (a,), backward)


def index(a: ArrayLike, key) -> Tensor:
    a = _as_tensor(a)

    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(np.array(a.data[key]), "index", (a,), backward)


def bilinear(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Flattened outer product: output[..., i*n_b + j] = a[..., i] * b[..., j]

    Both operands are rank-1, or rank-2 with the same leading batch size.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (1, 2):
        raise DimensionError(f"bilinear rank mismatch: {a.shape} and {b.shape}")
    if a.ndim == 2 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"bilinear batch mismatch: {a.shape} and {b.shape}")
    na, nb = a.shape[-1], b.shape[-1]
    outer = a.data[..., :, None] * b.data[..., None, :]

    def backward(g):
        grid = g.reshape(g.shape[:-1] + (na, nb))
        return ((grid * b.data[..., None, :]).sum(axis=-1),
                (grid * a.data[..., :, None]).sum(axis=-2))

    return _make(outer.reshape(outer.shape[:-2] + (na * nb,)), "bilinear", (a, b), backward)


# --- elementwise ---------------------------------------------------------

def tanh(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def leaky_relu(a: ArrayLike, slope: float = 0.01) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, slope * a.data), "leaky_relu", (a,),
                 lambda g: (np.where(mask, g, slope * g),))


def exp(a: ArrayLike) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _make(y, "exp", (a,), lambda g: (g * y,))


def log(a: ArrayLike, eps: Optional[float] = None) -> Tensor:
    """log(x + eps); eps defaults to Config.LOG_EPSILON"""
    a = _as_tensor(a)
    eps = Config.LOG_EPSILON if eps is None else eps
    if np.any(a.data < 0):
        raise DomainError(f"log of negative input (min {a.data.min():.3g})")
    shifted = a.data + eps
    with np.errstate(divide="ignore"):
        y = np.log(shifted)
    return _make(y, "log", (a,), lambda g: (g / shifted,))


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, "softmax", (a,),
                 lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    probs = np.exp(y)
    return _make(y, "log_softmax", (a,),
                 lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def l2_normalize(a: ArrayLike, axis: int = -1, eps: Optional[float] = None) -> Tensor:
    """x / max(||x||, eps) along an axis"""
    a = _as_tensor(a)
    eps = Config.NORM_EPSILON if eps is None else eps
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    floored = norm <= eps
    denom = np.where(floored, eps, norm)
    y = a.data / denom

    def backward(g):
        radial = y * (g * y).sum(axis=axis, keepdims=True)
        return (np.where(floored, g / denom, (g - radial) / denom),)

    return _make(y, "l2_normalize", (a,), backward)


# --- convolution / normalization -----------------------------------------

def _batched_image(x: Tensor, what: str) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"{what} expects C x H x W or B x C x H x W input, got {x.shape}")


def conv2d(x: ArrayLike, kernels: ArrayLike, stride: int = 1) -> Tensor:
    """Valid-mode cross-correlation of (B x) C_in x H x W with C_out x C_in x k x k kernels"""
    x, w = _as_tensor(x), _as_tensor(kernels)
    xd, squeeze = _batched_image(x, "conv2d")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d kernels must be C_out x C_in x k x k, got {w.shape}")
    _, channels, height, width = xd.shape
    _, c_in, k, _ = w.shape
    if c_in != channels:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernels {w.shape}")
    if k > height or k > width:
        raise DimensionError(f"conv2d kernel {k}x{k} larger than input {height}x{width}")
    s = stride
    out_h, out_w = (height - k) // s + 1, (width - k) // s + 1
    cols = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    out = np.einsum("bchwij,ocij->bohw", cols, w.data)

    def backward(g):
        gb = g[None] if squeeze else g
        dw = np.einsum("bchwij,bohw->ocij", cols, gb)
        dcols = np.einsum("bohw,ocij->bchwij", gb, w.data)
        dx = np.zeros_like(xd)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * (out_h - 1) + 1:s, j:j + s * (out_w - 1) + 1:s] += dcols[..., i, j]
        return (dx[0] if squeeze else dx, dw)

    return _make(out[0] if squeeze else out, "conv2d", (x, w), backward)


def conv_transpose2d(
    x: ArrayLike,
    kernels: ArrayLike,
    stride: int = 1,
    output_padding: Union[int, Tuple[int, int]] = 0,
) -> Tensor:
    """
    Adjoint of conv2d: maps (B x) C_out x h x w back to C_in x H x W with
    H = (h - 1) * stride + k + output_padding, using the same kernel layout.
    output_padding may be one int or a (rows, cols) pair.
    """
    x, w = _as_tensor(x), _as_tensor(kernels)
    xd, squeeze = _batched_image(x, "conv_transpose2d")
    if w.ndim != 4 or w.shape[0] != xd.shape[1]:
        raise DimensionError(f"conv_transpose2d channel mismatch: input {x.shape}, kernels {w.shape}")
    batch, _, in_h, in_w = xd.shape
    _, c_in, k, _ = w.shape
    s = stride
    pad_h, pad_w = (output_padding, output_padding) if isinstance(output_padding, int) else output_padding
    height, width = (in_h - 1) * s + k + pad_h, (in_w - 1) * s + k + pad_w
    contrib = np.einsum("bohw,ocij->bchwij", xd, w.data)
    out = np.zeros((batch, c_in, height, width))
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * (in_h - 1) + 1:s, j:j + s * (in_w - 1) + 1:s] += contrib[..., i, j]

    def backward(g):
        gb = g[None] if squeeze else g
        trimmed = gb[:, :, :height - pad_h, :width - pad_w]
        windows = sliding_window_view(trimmed, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        dx = np.einsum("bchwij,ocij->bohw", windows, w.data)
        dw = np.einsum("bchwij,bohw->ocij", windows, xd)
        return (dx[0] if squeeze else dx, dw)

    return _make(out[0] if squeeze else out, "conv_transpose2d", (x, w), backward)


def batchnorm(
    x: ArrayLike,
    gamma: ArrayLike,
    beta: ArrayLike,
    eps: Optional[float] = None,
    training: bool = True,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    momentum: float = 0.1,
) -> Tensor:
    """
    Per-feature standardization with learned scale/shift

    A B x F batch is normalized per feature; a B x C x H x W batch per
    channel over batch and spatial axes. In training mode the batch
    statistics are used and the running statistics (if given) are updated
    in place; inference mode reads them.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    eps = Config.BATCHNORM_EPSILON if eps is None else eps
    if x.ndim == 2:
        axes, view = (0,), (1, x.shape[1])
    elif x.ndim == 4:
        axes, view = (0, 2, 3), (1, x.shape[1], 1, 1)
    else:
        raise DimensionError(f"batchnorm expects B x F or B x C x H x W input, got {x.shape}")
    batch = x.shape[0]
    count = int(np.prod([x.shape[a] for a in axes]))

    if training:
        if batch < 2:
            raise ConfigurationError(
                "batchnorm in training mode needs a batch of at least 2; disable batchnorm "
                "(model.use_batchnorm=false) or collect rollouts with n_workers >= 2"
            )
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var * count / (count - 1)
    else:
        if running_mean is None or running_var is None:
            raise ConfigurationError("batchnorm inference mode needs running statistics")
        mu, var = running_mean, running_var

    inv_std = (1.0 / np.sqrt(var + eps)).reshape(view)
    xhat = (x.data - np.reshape(mu, view)) * inv_std
    g_view = gamma.data.reshape(view)
    out = g_view * xhat + beta.data.reshape(view)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_view
        if training:
            dx = inv_std / count * (count * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * inv_std
        return (dx, dgamma, dbeta)

    return _make(out, "batchnorm", (x, gamma, beta), backward)


# --- gradient checking ---------------------------------------------------

@dataclass
class GradCheckResult:
    ok: bool
    max_rel_error: float
    max_abs_error: float
    worst: str


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-6,
) -> GradCheckResult:
    """
    Compare backprop gradients of sum(fn(*inputs)) with central differences

    Every input with requires_grad=True is checked element by element. An
    element passes when its absolute error is below ``atol`` or its relative
    error is below ``rtol``.
    """
    def scalar(*args) -> Tensor:
        out = fn(*args)
        return out if out.size == 1 else out.sum()

    with Tape() as tape:
        loss = scalar(*inputs)
    tape.backward(loss)

    ok, worst, max_rel, max_abs = True, "", 0.0, 0.0
    for position, tensor in enumerate(inputs):
        if not tensor.requires_grad:
            continue
        analytic = tape.grad(tensor)
        analytic = np.zeros_like(tensor.data) if analytic is None else analytic
        flat = tensor.data.reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + step
            plus = float(scalar(*inputs).data)
            flat[k] = original - step
            minus = float(scalar(*inputs).data)
            flat[k] = original
            numeric = (plus - minus) / (2.0 * step)
            exact = float(analytic.reshape(-1)[k])
            abs_err = abs(exact - numeric)
            rel_err = abs_err / max(abs(exact), abs(numeric), 1e-300)
            max_abs = max(max_abs, abs_err)
            if abs_err > atol:
                max_rel = max(max_rel, rel_err)
                if rel_err > rtol:
                    ok = False
                    worst = f"input {position} element {k}: backprop {exact:.8g} vs numeric {numeric:.8g}"
    return GradCheckResult(ok=ok, max_rel_error=max_rel, max_abs_error=max_abs, worst=worst)
