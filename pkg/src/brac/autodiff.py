"""Minimal reverse-mode autodiff on dense float64 numpy arrays.

A ``Tape`` records every operation whose inputs require gradients; creation
order is a valid topological order, so the backward sweep is a single reversed
pass over the recorded nodes. Tapes are cheap and are meant to be created and
discarded once per training step. With no tape active, all ops run eagerly and
record nothing, so the same forward code serves rollouts and evaluation.

All arithmetic is float64. Non-finite values never propagate silently through
an optimizer update: ``AdamState.step`` and ``check_finite`` raise
``TrainingError`` with the offending site name.
"""

import threading

import numpy as np

from .errors import ConfigError, ContractError, TrainingError

_local = threading.local()


def _tape():
    return getattr(_local, "tape", None)


class Tape:
    """Records ops for one backward pass. Use as a context manager."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if _tape() is not None:
            raise ContractError("tapes do not nest")
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = None
        return False

    def gradient(self, loss):
        """Backpropagate from a scalar loss; fills ``.grad`` on every tensor
        reachable from it (parameters included). Returns None."""
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
        for node in self.nodes:
            node.grad = None
            for p in node._parents:
                p.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


class Tensor:
    """A float64 array plus the bookkeeping for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def value(x):
    """Plain numpy view of a Tensor (or pass an array through)."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _make(data, backward, parents):
    """Wrap an op result; records on the active tape only when a gradient
    path exists."""
    out = Tensor(data)
    tape = _tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._backward = backward
        out._parents = parents
        tape.nodes.append(out)
    return out


def _acc(t, g):
    # out-of-place: backward functions may hand the same array to two parents
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g, b.data.shape))

    return _make(out, backward, (a, b))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g, b.data.shape))

    return _make(out, backward, (a, b))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, backward, (a, b))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g * out / b.data, b.data.shape))

    return _make(out, backward, (a, b))


def neg(a):
    a = as_tensor(a)

    def backward(g):
        _acc(a, -g)

    return _make(-a.data, backward, (a,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T)
        if b.requires_grad:
            _acc(b, a.data.T @ g)

    return _make(out, backward, (a, b))


def affine(x, w, b):
    """Fused x @ w + b with a row-broadcast bias; one tape node per layer."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    out = x.data @ w.data + b.data

    def backward(g):
        if x.requires_grad:
            _acc(x, g @ w.data.T)
        if w.requires_grad:
            _acc(w, x.data.T @ g)
        if b.requires_grad:
            _acc(b, g.sum(axis=0))

    return _make(out, backward, (x, w, b))


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def backward(g):
        _acc(a, g * (a.data > 0.0))

    return _make(out, backward, (a,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        _acc(a, g * (1.0 - out * out))

    return _make(out, backward, (a,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        _acc(a, g * out)

    return _make(out, backward, (a,))


def log(a):
    a = as_tensor(a)

    def backward(g):
        _acc(a, g / a.data)

    return _make(np.log(a.data), backward, (a,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        _acc(a, g * (0.5 / out))

    return _make(out, backward, (a,))


def square(a):
    a = as_tensor(a)

    def backward(g):
        _acc(a, g * (2.0 * a.data))

    return _make(a.data * a.data, backward, (a,))


def absolute(a):
    a = as_tensor(a)

    def backward(g):
        _acc(a, g * np.sign(a.data))

    return _make(np.abs(a.data), backward, (a,))


def softplus(a):
    """log(1 + exp(x)), computed stably for large |x|."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        # sigmoid(x), stable
        _acc(a, g * (0.5 * (1.0 + np.tanh(0.5 * x))))

    return _make(out, backward, (a,))


def atanh(a):
    a = as_tensor(a)

    def backward(g):
        _acc(a, g / (1.0 - a.data * a.data))

    return _make(np.arctanh(a.data), backward, (a,))


def clip(a, lo, hi):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def backward(g):
        _acc(a, g * ((a.data > lo) & (a.data < hi)))

    return _make(out, backward, (a,))


def transpose(a):
    a = as_tensor(a)

    def backward(g):
        _acc(a, g.T)

    return _make(a.data.T, backward, (a,))


def reshape(a, shape):
    a = as_tensor(a)

    def backward(g):
        _acc(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), backward, (a,))


def concat(parts, axis):
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                _acc(p, piece)

    return _make(np.concatenate([p.data for p in parts], axis=axis), backward, tuple(parts))


def slice_axis(a, axis, start, stop):
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _acc(a, full)

    return _make(a.data[idx], backward, (a,))


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.data.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), backward, (a,))


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g / n, a.data.shape))

    return _make(a.data.mean(axis=axis, keepdims=keepdims), backward, (a,))


def _reduce_extreme(a, axis, argfn, valfn):
    a = as_tensor(a)
    idx = argfn(a.data, axis=axis)
    out = valfn(a.data, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        _acc(a, full)

    return _make(out, backward, (a,))


def reduce_min(a, axis):
    """Row-wise minimum; gradient routes to the first attaining index."""
    return _reduce_extreme(a, axis, np.argmin, np.min)


def reduce_max(a, axis):
    return _reduce_extreme(a, axis, np.argmax, np.max)


def mse(pred, target):
    """Mean squared error against a constant target, as a single tape node."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    diff = pred.data - target

    def backward(g):
        _acc(pred, g * diff * (2.0 / diff.size))

    return _make(np.mean(diff * diff), backward, (pred,))


def check_finite(site, *arrays, step=None):
    """Raise TrainingError naming ``site`` if any array has NaN/Inf."""
    for arr in arrays:
        a = arr.data if isinstance(arr, Tensor) else arr
        if not np.all(np.isfinite(a)):
            raise TrainingError(site, step)


# ---------------------------------------------------------------------------
# layers and optimization


class Mlp:
    """Fully connected network, ReLU on hidden layers, linear output.

    Parameters live in one contiguous float64 buffer; per-layer weights and
    biases are Tensor views into it, so optimizer updates and soft target
    updates are single vectorized passes.
    """

    def __init__(self, layer_sizes, rng=None, requires_grad=True):
        if len(layer_sizes) < 2 or any(s < 1 for s in layer_sizes):
            raise ConfigError(f"bad layer sizes {layer_sizes}")
        self.layer_sizes = list(layer_sizes)
        self.flat = np.zeros(self.n_params(layer_sizes), dtype=np.float64)
        self.weights = []
        self.biases = []
        off = 0
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            w = self.flat[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
            off += fan_in * fan_out
            b = self.flat[off:off + fan_out]
            off += fan_out
            wt = Tensor(0.0, requires_grad=requires_grad)
            wt.data = w  # view into the flat buffer
            bt = Tensor(0.0, requires_grad=requires_grad)
            bt.data = b
            self.weights.append(wt)
            self.biases.append(bt)
        if rng is not None:
            self.init_params(rng)

    @staticmethod
    def n_params(layer_sizes):
        return sum((i + 1) * o for i, o in zip(layer_sizes[:-1], layer_sizes[1:]))

    def init_params(self, rng):
        """Uniform in +-1/sqrt(fan_in), weights and biases alike."""
        for w, b in zip(self.weights, self.biases):
            bound = 1.0 / np.sqrt(w.data.shape[0])
            w.data[:] = rng.uniform(-bound, bound, size=w.data.shape)
            b.data[:] = rng.uniform(-bound, bound, size=b.data.shape)

    def forward(self, x):
        x = as_tensor(x)
        if x.data.ndim != 2 or x.data.shape[1] != self.layer_sizes[0]:
            raise ConfigError(
                f"expected input (batch, {self.layer_sizes[0]}), got {x.data.shape}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = affine(h, w, b)
            if i < last:
                h = relu(h)
        return h

    def __call__(self, x):
        return self.forward(x)

    def forward_np(self, x):
        """Gradient-free forward on a plain array; same op order as forward,
        so outputs are bitwise identical to ``value(forward(x))``."""
        h = np.asarray(x, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def grad_vector(self):
        """Gradients of all parameters as one flat vector (zeros where a
        parameter was unreachable from the loss)."""
        parts = []
        for p in self.params():
            if p.grad is None:
                parts.append(np.zeros(p.data.size))
            else:
                parts.append(np.ravel(p.grad))
        return np.concatenate(parts)

    def copy_from(self, other):
        if other.layer_sizes != self.layer_sizes:
            raise ConfigError("layer size mismatch in copy_from")
        self.flat[:] = other.flat

    def clone(self, requires_grad=True):
        m = Mlp(self.layer_sizes, rng=None, requires_grad=requires_grad)
        m.flat[:] = self.flat
        return m

    def __getstate__(self):
        return {"layer_sizes": self.layer_sizes,
                "flat": np.array(self.flat),
                "requires_grad": self.weights[0].requires_grad}

    def __setstate__(self, state):
        self.__init__(state["layer_sizes"], rng=None,
                      requires_grad=state["requires_grad"])
        self.flat[:] = state["flat"]

    def frozen_view(self):
        """An Mlp sharing this network's parameter buffer, with gradients
        disabled; useful when only input gradients are wanted."""
        m = Mlp(self.layer_sizes, rng=None, requires_grad=False)
        m.flat = self.flat
        off = 0
        for w, b in zip(m.weights, m.biases):
            fan_in, fan_out = w.data.shape
            w.data = self.flat[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
            off += fan_in * fan_out
            b.data = self.flat[off:off + fan_out]
            off += fan_out
        return m


class AdamState:
    """Standard Adam with bias correction over a flat parameter vector."""

    def __init__(self, n_params, learning_rate, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon

    def step(self, params, grads, site="adam_step", step_index=None):
        """One in-place update of ``params`` (flat float64 array)."""
        if params.shape != self.m.shape or grads.shape != self.m.shape:
            raise ConfigError("adam: parameter/gradient shape mismatch")
        if not np.all(np.isfinite(grads)):
            raise TrainingError(site, step_index)
        self.t += 1
        self.m += (1.0 - self.beta1) * (grads - self.m)
        self.v += (1.0 - self.beta2) * (grads * grads - self.v)
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)
        return params


def soft_update(target, source, tau):
    """target <- tau * source + (1 - tau) * target, in place, elementwise."""
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"tau must be in (0, 1], got {tau}")
    if target.shape != source.shape:
        raise ConfigError("soft_update shape mismatch")
    target *= 1.0 - tau
    target += tau * source
    return target
