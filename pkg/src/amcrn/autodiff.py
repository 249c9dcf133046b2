"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a float64 ndarray and records the operations that produced
it; `backward` on a scalar loss accumulates gradients into every reachable
tensor with `requires_grad`. Only the operations the network needs are
provided: elementwise arithmetic and activations, 2-D matmul, reductions,
concatenation/slicing, dilated 1-D convolution, dropout, and the losses.
"""

import numpy as np

from .errors import ConfigError, ShapeError


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- graph construction helpers ------------------------------------

    def _accum(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self):
        """Reverse accumulation from a scalar loss."""
        if self.data.size != 1:
            raise ShapeError("backward requires a scalar loss")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data + other.data, _parents=(self, other))

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accum(-g)

        out._backward = bwd
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data * other.data, _parents=(self, other))

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data / other.data, _parents=(self, other))

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g * self.data / other.data**2, other.data.shape))

        out._backward = bwd
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError("matmul supports 2-D operands only")
        out = Tensor(self.data @ other.data, _parents=(self, other))

        def bwd(g):
            if self.requires_grad:
                self._accum(g @ other.data.T)
            if other.requires_grad:
                other._accum(self.data.T @ g)

        out._backward = bwd
        return out

    def __pow__(self, exponent):
        assert np.isscalar(exponent)
        out = Tensor(self.data**exponent, _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accum(g * exponent * self.data ** (exponent - 1))

        out._backward = bwd
        return out

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), _parents=(self,))

        def bwd(g):
            if self.requires_grad:
                self._accum(g.reshape(self.data.shape))

        out._backward = bwd
        return out


class Parameter(Tensor):
    """A named trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True)
        self.name = name


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise activations -------------------------------------------


def relu(x):
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0), _parents=(x,))

    def bwd(g):
        if x.requires_grad:
            x._accum(g * (x.data > 0.0))

    out._backward = bwd
    return out


def sigmoid(x):
    x = as_tensor(x)
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y, _parents=(x,))

    def bwd(g):
        if x.requires_grad:
            x._accum(g * y * (1.0 - y))

    out._backward = bwd
    return out


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    out = Tensor(y, _parents=(x,))

    def bwd(g):
        if x.requires_grad:
            x._accum(g * (1.0 - y * y))

    out._backward = bwd
    return out


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    out = Tensor(y, _parents=(x,))

    def bwd(g):
        if x.requires_grad:
            x._accum(g * y)

    out._backward = bwd
    return out


def log(x):
    x = as_tensor(x)
    out = Tensor(np.log(x.data), _parents=(x,))

    def bwd(g):
        if x.requires_grad:
            x._accum(g / x.data)

    out._backward = bwd
    return out


def sqrt(x):
    x = as_tensor(x)
    y = np.sqrt(x.data)
    out = Tensor(y, _parents=(x,))

    def bwd(g):
        if x.requires_grad:
            x._accum(g * 0.5 / y)

    out._backward = bwd
    return out


def clamp_min(x, floor):
    """max(x, floor) with gradient passing only where x > floor."""
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, floor), _parents=(x,))

    def bwd(g):
        if x.requires_grad:
            x._accum(g * (x.data > floor))

    out._backward = bwd
    return out


# -- reductions ---------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims), _parents=(x,))

    def bwd(g):
        if not x.requires_grad:
            return
        if axis is None:
            x._accum(np.broadcast_to(g, x.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x._accum(np.broadcast_to(gg, x.data.shape).copy())

    out._backward = bwd
    return out


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def tmax(x, axis, keepdims=False):
    """Max over one axis; ties split the gradient equally."""
    x = as_tensor(x)
    y = x.data.max(axis=axis, keepdims=True)
    mask = (x.data == y).astype(np.float64)
    mask /= mask.sum(axis=axis, keepdims=True)
    out = Tensor(y if keepdims else np.squeeze(y, axis=axis), _parents=(x,))

    def bwd(g):
        if x.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axis)
            x._accum(gg * mask)

    out._backward = bwd
    return out


def softmax(x, axis):
    """Numerically stable softmax along one axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, _parents=(x,))

    def bwd(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            x._accum(y * (g - dot))

    out._backward = bwd
    return out


# -- structure ----------------------------------------------------------


def concat(xs, axis):
    xs = [as_tensor(x) for x in xs]
    out = Tensor(np.concatenate([x.data for x in xs], axis=axis), _parents=tuple(xs))
    sizes = [x.data.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if x.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                x._accum(g[tuple(sl)])

    out._backward = bwd
    return out


def narrow(x, axis, start, length):
    """Contiguous slice along one axis."""
    x = as_tensor(x)
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(x.data[sl], _parents=(x,))

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[sl] = g
            x._accum(full)

    out._backward = bwd
    return out


def split(x, n, axis):
    """Split into n equal chunks along an axis."""
    x = as_tensor(x)
    size = x.data.shape[axis]
    if size % n:
        raise ShapeError(f"axis of extent {size} not divisible into {n} chunks")
    step = size // n
    return [narrow(x, axis, i * step, step) for i in range(n)]


# -- network operations -------------------------------------------------


def linear(x, weight, bias=None):
    """Row-wise affine map: (T x Din) @ (Din x Dout) + bias."""
    out = as_tensor(x) @ weight
    if bias is not None:
        out = out + bias
    return out


def conv1d_dilated(x, kernel, bias=None, dilation=1):
    """1-D dilated convolution over time with "same" zero padding.

    x: T x Cin, kernel: k x Cin x Cout with k odd, output: T x Cout.
    out[q] = sum_t x[q - dilation * t] K[t] for tap index t in [-n, n],
    where the kernel array index i corresponds to t = i - n.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    k = kernel.data.shape[0]
    if k % 2 == 0:
        raise ConfigError("convolution kernel size must be odd")
    if dilation < 1:
        raise ConfigError("dilation rate must be >= 1")
    if x.data.ndim != 2 or kernel.data.ndim != 3 or x.data.shape[1] != kernel.data.shape[1]:
        raise ShapeError("conv1d_dilated expects T x Cin input and k x Cin x Cout kernel")
    n_taps = (k - 1) // 2
    pad = dilation * n_taps
    t_len = x.data.shape[0]
    xp = np.pad(x.data, ((pad, pad), (0, 0)))
    acc = np.zeros((t_len, kernel.data.shape[2]))
    starts = [dilation * (2 * n_taps - i) for i in range(k)]
    for i, s in enumerate(starts):
        acc += xp[s : s + t_len] @ kernel.data[i]
    out = Tensor(acc, _parents=(x, kernel))

    def bwd(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i, s in enumerate(starts):
                gxp[s : s + t_len] += g @ kernel.data[i].T
            x._accum(gxp[pad : pad + t_len] if pad else gxp)
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for i, s in enumerate(starts):
                gk[i] = xp[s : s + t_len].T @ g
            kernel._accum(gk)

    out._backward = bwd
    if bias is not None:
        out = out + bias
    return out


def dropout(x, p, mode, rng):
    """Inverted dropout: identity in eval mode."""
    x = as_tensor(x)
    if mode == "eval" or p <= 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return x * Tensor(mask)


def cross_entropy(logits, label):
    """Negative log softmax probability of the true class (1-D logits)."""
    logits = as_tensor(logits)
    if logits.data.ndim != 1:
        raise ShapeError("cross_entropy expects a 1-D logit vector")
    shift = float(logits.data.max())  # constant; gradient-neutral
    z = logits - shift
    lse = log(tsum(exp(z))) + shift
    return lse - narrow(logits, 0, int(label), 1).reshape(())


def grad_check(f, point, eps=1e-3):
    """Max relative error between analytic and central-difference gradients.

    f maps a Tensor to a scalar Tensor. Relative error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    x = Tensor(point.data.copy() if isinstance(point, Tensor) else np.asarray(point, dtype=np.float64),
               requires_grad=True)
    loss = f(x)
    loss.backward()
    analytic = x.grad.copy()
    numeric = np.zeros_like(analytic)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(x.data)).data)
        flat[i] = orig - eps
        lo = float(f(Tensor(x.data)).data)
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * eps)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
