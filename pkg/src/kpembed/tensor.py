"""Dense tensors with reverse-mode automatic differentiation.

Everything is backed by numpy arrays. Each operation that participates in
autodiff records its input tensors and a backward function that maps the
output gradient to per-input gradients. ``Tensor.backward()`` walks the
recorded graph in reverse topological order (which equals execution order)
and accumulates gradients into ``requires_grad`` leaves by summation.

Only the broadcasting the model actually needs is supported; gradients of
broadcast operands are reduced back to the operand shape by summing the
broadcast axes.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

__all__ = [
    "Tensor",
    "no_grad",
    "backward",
    "concat",
    "linear",
    "conv2d",
    "conv_transpose2d",
    "batch_norm",
    "BatchNormState",
    "global_avg_pool",
    "global_max_pool",
]


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (used in eval paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A dense real array with an optional gradient node.

    ``data`` is always a numpy array (float64 by default; float32 is
    accepted for training). ``grad`` is populated on leaves by
    ``backward()`` and always matches ``data`` in shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype.kind not in "fiu":
            raise ContractError(f"tensor data must be numeric, got {self.data.dtype}")
        if self.data.dtype.kind in "iu" and requires_grad:
            raise ContractError("integer tensors cannot require grad")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, inputs: tuple["Tensor", ...], backward_fn) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._prev = inputs
            out._backward = backward_fn
        return out

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._non_scalar()

    def _non_scalar(self):
        raise ContractError(f"expected a scalar tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ---------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` of every requires_grad leaf reachable from self.

        Repeated calls without resetting grads accumulate (a second call
        doubles every leaf gradient).
        """
        if self.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for inp, ig in zip(node._prev, node._backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig

    # -- elementwise arithmetic --------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other
        return Tensor._from_op(
            a.data + b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = self._coerce(other)
        a, b = self, other
        return Tensor._from_op(
            a.data - b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        return Tensor._from_op(
            a.data * b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other
        return Tensor._from_op(
            a.data / b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            ),
        )

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, expo):
        if isinstance(expo, Tensor):
            raise ContractError("only scalar exponents are supported")
        expo = float(expo)
        x = self
        return Tensor._from_op(
            x.data ** expo,
            (x,),
            lambda g: (g * expo * x.data ** (expo - 1.0),),
        )

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(
                f"matmul needs 2-D operands with matching inner axis, got {a.shape} @ {b.shape}"
            )
        return Tensor._from_op(
            a.data @ b.data,
            (a, b),
            lambda g: (g @ b.data.T, a.data.T @ g),
        )

    def __getitem__(self, key):
        x = self
        out_data = x.data[key]

        def back(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, key, g)
            return (gx,)

        return Tensor._from_op(np.ascontiguousarray(out_data), (x,), back)

    # -- shape ops ----------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        return Tensor._from_op(
            x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),)
        )

    def transpose2d(self) -> "Tensor":
        if self.ndim != 2:
            raise ShapeError(f"transpose2d needs a 2-D tensor, got {self.shape}")
        x = self
        return Tensor._from_op(x.data.T.copy(), (x,), lambda g: (g.T,))

    # -- reductions -----------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self
        out = x.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            g = np.asarray(g)
            if axis is None:
                return (np.broadcast_to(g, x.shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return Tensor._from_op(np.asarray(out), (x,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self
        if axis is None:
            count = x.size
        elif isinstance(axis, tuple):
            count = int(np.prod([x.shape[a] for a in axis]))
        else:
            count = x.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        """Maximum reduction; gradient routes to the first (row-major) argmax."""
        x = self
        if axis is None:
            out = x.data.max()
            flat_idx = int(x.data.argmax())

            def back(g):
                gx = np.zeros_like(x.data)
                gx.reshape(-1)[flat_idx] = np.asarray(g).reshape(-1)[0]
                return (gx,)

            return Tensor._from_op(np.asarray(out), (x,), back)

        out = x.data.max(axis=axis, keepdims=keepdims)
        arg = x.data.argmax(axis=axis)

        def back_axis(g):
            g = np.asarray(g)
            if keepdims:
                g = np.squeeze(g, axis=axis)
            gx = np.zeros_like(x.data)
            onehot = np.expand_dims(arg, axis)
            np.put_along_axis(gx, onehot, np.expand_dims(g, axis), axis=axis)
            return (gx,)

        return Tensor._from_op(out, (x,), back_axis)

    # -- elementwise nonlinearities -----------------------------------------------

    def exp(self) -> "Tensor":
        x = self
        out = np.exp(x.data)
        return Tensor._from_op(out, (x,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        x = self
        return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,))

    def sqrt(self) -> "Tensor":
        """Elementwise square root; the backward slope is clamped near zero
        so mined zero-distance pairs cannot inject infinities."""
        x = self
        out = np.sqrt(x.data)
        return Tensor._from_op(
            out, (x,), lambda g: (g * 0.5 / np.maximum(out, 1e-12),)
        )

    def relu(self) -> "Tensor":
        x = self
        return Tensor._from_op(
            np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),)
        )

    def sigmoid(self) -> "Tensor":
        x = self
        out = _sigmoid(x.data)
        return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),))

    def softplus(self) -> "Tensor":
        """ln(1 + e^x) computed as max(x, 0) + ln(1 + e^-|x|) (overflow-safe)."""
        x = self
        out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
        return Tensor._from_op(out, (x,), lambda g: (g * _sigmoid(x.data),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS (deep graphs must not hit the recursion limit)."""
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))
    return topo


def backward(loss: Tensor) -> None:
    """Free-function form of ``loss.backward()``."""
    loss.backward()


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity dispatch: relu, sigmoid, or softplus."""
    if kind == "relu":
        return x.relu()
    if kind == "sigmoid":
        return x.sigmoid()
    if kind == "softplus":
        return x.softplus()
    raise ConfigError(f"unknown activation kind {kind!r}")


def concat(parts: list[Tensor], axis: int) -> Tensor:
    """Concatenate tensors along ``axis``; gradient splits back to parts."""
    if not parts:
        raise ContractError("concat needs at least one part")
    ref = parts[0].shape
    for i, p in enumerate(parts[1:], start=1):
        if p.ndim != len(ref) or any(
            a != b for k, (a, b) in enumerate(zip(p.shape, ref)) if k != axis
        ):
            raise ShapeError(
                f"concat part {i} has shape {p.shape}, incompatible with {ref} off axis {axis}"
            )
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis))
            for i in range(len(parts))
        )

    return Tensor._from_op(out, tuple(parts), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = x @ weight.T + bias for x: (N, in), weight: (out, in), bias: (out,)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear needs 2-D x and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear inner axes disagree: x axis 1 is {x.shape[1]}, weight axis 1 is {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"linear bias shape {bias.shape} does not match out features {weight.shape[0]}"
        )
    out = x.data @ weight.data.T + bias.data

    def back(g):
        return (g @ weight.data, g.T @ x.data, g.sum(axis=0))

    return Tensor._from_op(out, (x, weight, bias), back)


# -- convolution ---------------------------------------------------------------


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _conv_out_size(size: int, k: int, stride: int, pad: int, axis_name: str) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv output along {axis_name} is not an integer: "
            f"({size} + 2*{pad} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    ns, cs, hs, ws = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        (n, c, oh, ow, kh, kw),
        (ns, cs, stride * hs, stride * ws, hs, ws),
        writeable=False,
    )


def _conv_forward_arr(x, w, stride, pad):
    kh, kw = w.shape[2], w.shape[3]
    oh = (x.shape[2] + 2 * pad - kh) // stride + 1
    ow = (x.shape[3] + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, kh, kw, stride, oh, ow)
    return np.einsum("nihwkl,oikl->nohw", win, w, optimize=True)


def _conv_dw_arr(x, dy, stride, pad, kh, kw):
    oh, ow = dy.shape[2], dy.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, kh, kw, stride, oh, ow)
    return np.einsum("nihwkl,nohw->oikl", win, dy, optimize=True)


def _conv_dx_arr(dy, w, stride, pad, in_h, in_w):
    n, _, oh, ow = dy.shape
    cin, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    buf = np.zeros((n, cin, in_h + 2 * pad, in_w + 2 * pad), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("nohw,oi->nihw", dy, w[:, :, i, j], optimize=True)
            buf[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += contrib
    if pad:
        return buf[:, :, pad : pad + in_h, pad : pad + in_w]
    return buf


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Standard cross-correlation over (N, Cin, H, W) with weight (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D x and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d channel axes disagree: input has {x.shape[1]}, weight expects {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {weight.shape[0]} filters")
    kh, kw = weight.shape[2], weight.shape[3]
    _conv_out_size(x.shape[2], kh, stride, padding, "height")
    _conv_out_size(x.shape[3], kw, stride, padding, "width")

    out = _conv_forward_arr(x.data, weight.data, stride, padding)
    out = out + bias.data[None, :, None, None]
    in_h, in_w = x.shape[2], x.shape[3]

    def back(g):
        gx = _conv_dx_arr(g, weight.data, stride, padding, in_h, in_w)
        gw = _conv_dw_arr(x.data, g, stride, padding, kh, kw)
        gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    return Tensor._from_op(out, (x, weight, bias), back)


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """Adjoint of conv2d with the same weight, laid out (Cin, Cout, kh, kw).

    The forward pass reuses conv2d's input-gradient routine and the backward
    pass reuses its forward/weight-gradient routines, so adjointness holds
    by construction.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"conv_transpose2d needs 4-D x and weight, got {x.shape} and {weight.shape}"
        )
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"conv_transpose2d channel axes disagree: input has {x.shape[1]}, "
            f"weight expects {weight.shape[0]}"
        )
    if bias.shape != (weight.shape[1],):
        raise ShapeError(
            f"conv_transpose2d bias shape {bias.shape} does not match {weight.shape[1]} filters"
        )
    kh, kw = weight.shape[2], weight.shape[3]
    out_h = (x.shape[2] - 1) * stride - 2 * padding + kh
    out_w = (x.shape[3] - 1) * stride - 2 * padding + kw
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(
            f"conv_transpose2d output size is not positive: {out_h}x{out_w}"
        )

    out = _conv_dx_arr(x.data, weight.data, stride, padding, out_h, out_w)
    out = out + bias.data[None, :, None, None]

    def back(g):
        gx = _conv_forward_arr(g, weight.data, stride, padding)
        gw = _conv_dw_arr(g, x.data, stride, padding, kh, kw)
        gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    return Tensor._from_op(out, (x, weight, bias), back)


# -- batch normalization ---------------------------------------------------------


class BatchNormState:
    """Running mean/variance buffers for one batch-norm layer."""

    def __init__(self, num_features: int, dtype=np.float64):
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    def copy(self) -> "BatchNormState":
        out = BatchNormState(len(self.running_mean), dtype=self.running_mean.dtype)
        out.running_mean = self.running_mean.copy()
        out.running_var = self.running_var.copy()
        return out


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str,
    momentum: float = 0.1,
    epsilon: float = 1e-5,
) -> Tensor:
    """Per-channel (4-D input) or per-feature (2-D input) batch normalization.

    Train mode normalizes by biased batch statistics and updates the running
    buffers in place; eval mode normalizes by the running buffers. Both are
    differentiable w.r.t. x, gamma, and beta.
    """
    if epsilon <= 0:
        raise ConfigError(f"batch_norm epsilon must be positive, got {epsilon}")
    if x.ndim == 4:
        axes = (0, 2, 3)
        features = x.shape[1]
        stat_shape = (1, features, 1, 1)
    elif x.ndim == 2:
        axes = (0,)
        features = x.shape[1]
        stat_shape = (1, features)
    else:
        raise ShapeError(f"batch_norm expects 2-D or 4-D input, got {x.shape}")
    if gamma.shape != (features,) or beta.shape != (features,):
        raise ShapeError(
            f"batch_norm gamma/beta must have shape ({features},), got {gamma.shape}/{beta.shape}"
        )
    if mode not in ("train", "eval"):
        raise ConfigError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")

    if mode == "train":
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        state.running_mean *= 1.0 - momentum
        state.running_mean += momentum * mean.data.reshape(features)
        state.running_var *= 1.0 - momentum
        state.running_var += momentum * var.data.reshape(features)
        inv_std = (var + epsilon) ** -0.5
        normed = centered * inv_std
    else:
        mean = Tensor(state.running_mean.reshape(stat_shape).astype(x.dtype))
        inv_std = Tensor(
            1.0 / np.sqrt(state.running_var.reshape(stat_shape).astype(x.dtype) + epsilon)
        )
        normed = (x - mean) * inv_std
    return normed * gamma.reshape(stat_shape) + beta.reshape(stat_shape)


# -- global pooling ----------------------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) per-channel spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got {x.shape}")
    return x.mean(axis=(2, 3))


def global_max_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) per-channel spatial maximum.

    The backward pass routes the gradient to the first argmax element in
    row-major order, which makes tie-breaking deterministic.
    """
    if x.ndim != 4:
        raise ShapeError(f"global_max_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).max(axis=2)


def global_pool(x: Tensor, mode: str) -> Tensor:
    if mode == "avg":
        return global_avg_pool(x)
    if mode == "max":
        return global_max_pool(x)
    raise ConfigError(f"unknown pooling mode {mode!r}")
