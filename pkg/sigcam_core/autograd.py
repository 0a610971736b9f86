"""
Dense tensors with reverse-mode automatic differentiation.

Storage is a numpy array (float32 by default, float64 when requested
explicitly). Every differentiable op records a ``TapeNode`` holding its
inputs and a closure that maps the output gradient to input gradients.
``backward`` walks the tape once in reverse topological order.

Interior activations (the final-conv feature tensor) opt into gradient
capture with ``Tensor.retain_grad()``.
"""

import contextlib
import logging
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence, float, int]

_STATE = {"grad_enabled": True, "debug": False}


def set_debug(enabled: bool) -> None:
    """Enable the NaN/Inf check that runs after every op."""
    _STATE["debug"] = bool(enabled)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them on the tape."""
    previous = _STATE["grad_enabled"]
    _STATE["grad_enabled"] = False
    try:
        yield
    finally:
        _STATE["grad_enabled"] = previous


class TapeNode:
    """One recorded op: identifier, inputs and the backward rule."""

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: Tuple["Tensor", ...],
                 backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"TapeNode(op='{self.op}', inputs={len(self.parents)})"


class Tensor:
    """Dense n-dimensional array with an optional tape node."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 dtype: Optional[np.dtype] = None, name: Optional[str] = None):
        dtype = np.float32 if dtype is None else dtype
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None
        self.retain = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def retain_grad(self) -> "Tensor":
        """Mark an interior activation so backward stores its gradient."""
        self.retain = True
        self.requires_grad = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def __repr__(self) -> str:
        op = self.node.op if self.node is not None else "leaf"
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={op}, requires_grad={self.requires_grad})"


def _as_tensor(value, dtype) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.full((), value), dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str,
            backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> Tensor:
    """Wrap an op output and record it on the tape when needed."""
    if _STATE["debug"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    if _STATE["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = TapeNode(op, tuple(parents), backward_fn)
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if b.shape == () and a.shape != ():
        return _result(a.data + b.data, (a, b), "add_scalar",
                       lambda g: (g, np.asarray(g.sum(), dtype=b.dtype)))
    _check_same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, factor: float) -> Tensor:
    return _result(a.data * a.dtype.type(factor), (a,), "scale",
                   lambda g: (g * a.dtype.type(factor),))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias along axis 1 (the only broadcast we allow)."""
    if x.ndim < 2 or bias.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match axis 1 of {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    reduce_axes = tuple(i for i in range(x.ndim) if i != 1)
    return _result(x.data + bias.data.reshape(view), (x, bias), "add_bias",
                   lambda g: (g, g.sum(axis=reduce_axes, dtype=np.float64).astype(bias.dtype)))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = x.shape
    return _result(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(original),))


def take(x: Tensor, index) -> Tensor:
    """Numpy-style indexing; gradient scatters back with ``np.add.at``."""
    out = np.array(x.data[index], dtype=x.dtype)

    def backward_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(out, (x,), "take", backward_fn)


def tensor_sum(x: Tensor) -> Tensor:
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return _result(total, (x,), "sum", lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def tensor_mean(x: Tensor) -> Tensor:
    count = max(x.size, 1)
    total = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    return _result(total, (x,), "mean",
                   lambda g: (np.full(x.shape, g / count, dtype=x.dtype),))


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return _result(np.where(positive, x.data, 0).astype(x.dtype), (x,), "relu",
                   lambda g: (g * positive,))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _result(s, (x,), "sigmoid", lambda g: (g * s * (1 - s),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    out = np.logaddexp(x.dtype.type(0), x.data).astype(x.dtype)
    return _result(out, (x,), "softplus", lambda g: (g * _stable_sigmoid(x.data),))


def _check_rows(op: str, x: Tensor) -> None:
    if x.ndim != 2:
        raise ShapeError(f"{op}: expected [B,C] logits, got {x.shape}")


def softmax(logits: Tensor) -> Tensor:
    """Row softmax with max subtraction."""
    _check_rows("softmax", logits)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = (e / e.sum(axis=1, keepdims=True)).astype(logits.dtype)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result(y, (logits,), "softmax", backward_fn)


def log_softmax(logits: Tensor) -> Tensor:
    _check_rows("log_softmax", logits)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = (shifted - log_z).astype(logits.dtype)
    y = np.exp(out)

    def backward_fn(g):
        return (g - y * g.sum(axis=1, keepdims=True),)

    return _result(out, (logits,), "log_softmax", backward_fn)


# ---------------------------------------------------------------------------
# Network layers
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input channels (axis 1 = {x.shape[1]}) != kernel channels (axis 1 = {kernel.shape[1]})")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    batch, _, height, width = x.shape
    _, _, kh, kw = kernel.shape
    if kh > height + 2 * padding or kw > width + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {height + 2 * padding}x{width + 2 * padding} (axes 2,3)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def backward_fn(g):
        grad_kernel = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])).astype(kernel.dtype)
        grad_padded = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contribution = np.tensordot(g, kernel.data[:, :, i, j], axes=([1], [0]))
                grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                    contribution.transpose(0, 3, 1, 2)
        if padding:
            grad_padded = grad_padded[:, :, padding:padding + height, padding:padding + width]
        return (grad_padded, grad_kernel)

    return _result(out, (x, kernel), "conv2d", backward_fn)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first max."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected [B,C,H,W], got {x.shape}")
    batch, channels, height, width = x.shape
    if height % size or width % size:
        raise ShapeError(f"max_pool2d: spatial extents {height}x{width} (axes 2,3) not divisible by {size}")
    out_h, out_w = height // size, width // size
    windows = (x.data.reshape(batch, channels, out_h, size, out_w, size)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(batch, channels, out_h, out_w, size * size))
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        grad_windows = np.zeros_like(windows)
        np.put_along_axis(grad_windows, arg[..., None], g[..., None], axis=-1)
        grad = (grad_windows.reshape(batch, channels, out_h, out_w, size, size)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(batch, channels, height, width))
        return (grad,)

    return _result(np.ascontiguousarray(out), (x,), "max_pool2d", backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of [B,N,P,Q] -> [B,N], accumulated in float64."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected [B,N,P,Q], got {x.shape}")
    p, q = x.shape[2], x.shape[3]
    if p < 1 or q < 1:
        raise ShapeError(f"global_avg_pool: empty spatial extent {p}x{q}")
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / x.dtype.type(p * q), x.shape).copy(),)

    return _result(out, (x,), "global_avg_pool", backward_fn)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map [B,N] @ [N,C] + [C]."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ShapeError(f"fully_connected: ranks {x.shape}, {weight.shape}, {bias.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"fully_connected: input axis 1 ({x.shape[1]}) != weight axis 0 ({weight.shape[0]})")
    if weight.shape[1] != bias.shape[0]:
        raise ShapeError(f"fully_connected: weight axis 1 ({weight.shape[1]}) != bias axis 0 ({bias.shape[0]})")
    out = (x.data @ weight.data + bias.data).astype(x.dtype)

    def backward_fn(g):
        return (g @ weight.data.T, x.data.T @ g, g.sum(axis=0))

    return _result(out, (x, weight, bias), "fully_connected", backward_fn)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in reversed(tensor.node.parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every leaf / retained tensor reachable from ``root``."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward root is not on the tape")

    grads: Dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for tensor in reversed(_topological_order(root)):
        g = grads.pop(id(tensor), None)
        if g is None:
            continue
        if tensor.node is None or tensor.retain:
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
        if tensor.node is None:
            continue
        for parent, parent_grad in zip(tensor.node.parents, tensor.node.backward_fn(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            parent_grad = np.asarray(parent_grad, dtype=parent.dtype).reshape(parent.shape)
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-3) -> float:
    """Largest normwise relative error between autograd and central differences.

    ``inputs`` should be float64 tensors; ``fn`` must return a scalar.
    """
    for tensor in inputs:
        tensor.zero_grad()
        tensor.requires_grad = True
    fn(*inputs).backward()
    worst = 0.0
    for tensor in inputs:
        analytic = np.zeros(tensor.shape) if tensor.grad is None else tensor.grad.astype(np.float64)
        numeric = np.zeros(tensor.shape)
        flat = tensor.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                plus = fn(*inputs).item()
                flat[i] = original - h
                minus = fn(*inputs).item()
                flat[i] = original
                numeric.reshape(-1)[i] = (plus - minus) / (2 * h)
        denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    logger.debug(f"gradcheck over {len(inputs)} inputs: max relative error {worst:.3e}")
    return worst
