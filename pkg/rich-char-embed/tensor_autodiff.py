"""
Dense tensors with reverse-mode differentiation.

Every operation records its parents and a backward closure; calling backward()
on a scalar replays the recorded graph in reverse topological order. This is
enough for the transformer encoders, the character CNN, the probes and Adam.
"""

import contextlib
import json
import math
import struct
import threading

import numpy as np
from scipy.special import logsumexp

from utils import ConfigManager

IGNORE_INDEX = -100
MASK_FILL = -1e30

PARAMETER_MAGIC = b'RCEPARAM'
PARAMETER_FORMAT_VERSION = 1

_DTYPES = {'float64': np.float64, 'float32': np.float32}
_default_dtype = np.float64
_check_finite = False
_state = threading.local()
_rng = np.random.default_rng(0)


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteValue(FloatingPointError):
    """An operation produced NaN or Inf while finite checks were enabled."""


class StepOutOfRange(ValueError):
    """A learning-rate schedule was queried outside [0, total]."""


class CheckpointError(ValueError):
    """A parameter file is malformed or does not match the model."""


def set_default_dtype(name):
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unsupported precision {name!r}; use one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def get_default_dtype():
    return _default_dtype


def enable_finite_checks(enabled=True):
    global _check_finite
    _check_finite = bool(enabled)


def manual_seed(seed):
    """Seed the shared generator used for initialisation and dropout."""
    global _rng
    _rng = np.random.default_rng(seed)


def get_rng():
    return _rng


def _grad_enabled():
    return getattr(_state, 'grad_enabled', True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """n-dimensional array with an optional gradient buffer."""

    # ndarray <op> Tensor dispatches to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = 'leaf'

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}, op={self._op}{label}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        ComputationTape.from_output(self).replay(grad)

    # operators
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class ComputationTape:
    """Operations reachable from one output, in topological order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output):
        order, visited = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def replay(self, grad=None):
        output = self.nodes[-1]
        if not output.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if output.size != 1:
                raise ShapeMismatch(f"backward() without a gradient needs a scalar, got {output.shape}")
            grad = np.ones_like(output.data)
        grads = {id(output): np.asarray(grad, dtype=output.data.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data, parents, op, backward):
    """Wrap an op result; parents get gradients through backward(g) -> tuple."""
    out = Tensor(data)
    out._op = op
    if _check_finite and not np.all(np.isfinite(out.data)):
        raise NonFiniteValue(f"{op} produced a non-finite value")
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'add')
    return _result(a.data + b.data, (a, b), 'add',
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'sub')
    return _result(a.data - b.data, (a, b), 'sub',
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'mul')
    return _result(a.data * b.data, (a, b), 'mul',
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'div')
    out = a.data / b.data
    return _result(out, (a, b), 'div',
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)
    return _result(a.data ** exponent, (a,), 'pow',
                   lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), 'exp', lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), 'log', lambda g: (g / a.data,))


def sqrt(a):
    return power(a, 0.5)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), 'tanh', lambda g: (g * (1.0 - out ** 2),))


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, (a,), 'sigmoid', lambda g: (g * out * (1.0 - out),))


def relu(a):
    a = as_tensor(a)
    positive = a.data > 0
    return _result(np.where(positive, a.data, 0.0), (a,), 'relu', lambda g: (g * positive,))


# reductions and shape ops

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), 'sum', backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: {a.shape} -> {shape}") from exc
    return _result(out, (a,), 'reshape', lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), 'transpose', lambda g: (g.transpose(inverse),))


def slice_(a, index):
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), 'slice', backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {[t.shape for t in tensors]} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, 'concat', lambda g: tuple(np.split(g, bounds, axis=axis)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")

    def backward(g):
        return (_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape),
                _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), 'matmul', backward)


def masked_fill(a, mask, value=MASK_FILL):
    """Replace entries where mask is True; those entries receive no gradient."""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _result(np.where(mask, value, a.data), (a,), 'masked_fill',
                   lambda g: (np.where(mask, 0.0, g),))


def embedding_lookup(table, indices):
    """Rows of table selected by an integer index array of any shape."""
    table = as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, indices, g)
        return (full,)

    return _result(table.data[indices], (table,), 'embedding_lookup', backward)


# normalisation and activations over an axis

def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(out, (a,), 'softmax',
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    out = a.data - logsumexp(a.data, axis=axis, keepdims=True)
    probs = np.exp(out)
    return _result(out, (a,), 'log_softmax',
                   lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def layer_norm(a, axis=-1, eps=1e-5):
    """Normalize to zero mean and unit variance along axis (no affine part)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=axis, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        g_mean = g.mean(axis=axis, keepdims=True)
        gx_mean = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)

    return _result(xhat, (a,), 'layer_norm', backward)


def dropout(a, p, train, rng=None):
    a = as_tensor(a)
    if not train or p <= 0.0:
        return a
    if p >= 1.0:
        return mul(a, 0.0)
    rng = rng or _rng
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _result(a.data * keep, (a,), 'dropout', lambda g: (g * keep,))


# convolution and pooling over the position axis of [B x L x C] tensors

def conv1d(x, weight, bias=None, stride=1):
    """
    Valid 1-d convolution.

    :param x: [B x L x C_in]
    :param weight: [K x C_in x C_out]
    :return: [B x T x C_out] with T = (L - K) // stride + 1
    """
    x, weight = as_tensor(x), as_tensor(weight)
    kernel, c_in, c_out = weight.shape
    if x.ndim != 3 or x.shape[2] != c_in:
        raise ShapeMismatch(f"conv1d: input {x.shape} does not match kernel {weight.shape}")
    if x.shape[1] < kernel:
        raise ShapeMismatch(f"conv1d: length {x.shape[1]} shorter than kernel {kernel}")
    batch = x.shape[0]
    windows = np.lib.stride_tricks.sliding_window_view(x.data, kernel, axis=1)[:, ::stride]
    steps = windows.shape[1]
    cols = windows.transpose(0, 1, 3, 2).reshape(batch, steps, kernel * c_in)
    flat_weight = weight.data.reshape(kernel * c_in, c_out)
    out = cols @ flat_weight

    def backward(g):
        grad_weight = np.einsum('btk,bto->ko', cols, g).reshape(weight.shape)
        grad_cols = (g @ flat_weight.T).reshape(batch, steps, kernel, c_in)
        grad_x = np.zeros_like(x.data)
        span = stride * (steps - 1) + 1
        for k in range(kernel):
            grad_x[:, k:k + span:stride, :] += grad_cols[:, :, k, :]
        return grad_x, grad_weight

    result = _result(out, (x, weight), 'conv1d', backward)
    return result if bias is None else add(result, bias)


def max_pool1d(x, kernel, stride=None):
    """
    Max over windows of the position axis.

    :param x: [B x L x C]
    :return: [B x T x C]; ties route the gradient to the first maximum
    """
    x = as_tensor(x)
    stride = stride or kernel
    if x.ndim != 3 or x.shape[1] < kernel:
        raise ShapeMismatch(f"max_pool1d: input {x.shape} with kernel {kernel}")
    windows = np.lib.stride_tricks.sliding_window_view(x.data, kernel, axis=1)[:, ::stride]
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        grad_x = np.zeros_like(x.data)
        b, t, c = np.indices(arg.shape)
        np.add.at(grad_x, (b, t * stride + arg, c), g)
        return (grad_x,)

    return _result(out, (x,), 'max_pool1d', backward)


# losses

def cross_entropy(logits, targets, ignore_index=IGNORE_INDEX):
    """
    Mean negative log-likelihood over non-ignored targets.

    :param logits: [... x C]
    :param targets: integer array with the leading shape of logits
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    valid = targets != ignore_index
    count = int(valid.sum())
    if count == 0:
        return _result(np.array(0.0), (logits,), 'cross_entropy',
                       lambda g: (np.zeros_like(logits.data),))
    safe = np.where(valid, targets, 0)
    log_probs = logits.data - logsumexp(logits.data, axis=-1, keepdims=True)
    picked = np.take_along_axis(log_probs, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * valid).sum() / count

    def backward(g):
        grad = np.exp(log_probs)
        np.put_along_axis(grad, safe[..., None],
                          np.take_along_axis(grad, safe[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * valid[..., None] * (g / count),)

    return _result(np.array(loss), (logits,), 'cross_entropy', backward)


def binary_cross_entropy_with_logits(logits, targets):
    """Mean logistic loss; targets are 0/1 floats with the shape of logits."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=logits.data.dtype)
    z = logits.data
    loss = np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    probs = 0.5 * (1.0 + np.tanh(0.5 * z))
    return _result(np.array(loss.mean()), (logits,), 'bce_with_logits',
                   lambda g: ((probs - targets) * (g / n),))


# layers

class Module:
    """Container of parameters and sub-modules with a train/eval switch."""

    training = True

    def named_parameters(self, prefix=''):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f'{prefix}{name}.')
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f'{prefix}{name}.{i}.')

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for module in self.modules():
            module.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def parameter_count(self):
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, prefix=''):
        for name, p in self.named_parameters():
            key = prefix + name
            if key not in state:
                raise CheckpointError(f"missing parameter {key}")
            value = np.asarray(state[key])
            if value.shape != p.shape:
                raise CheckpointError(f"{key}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(_default_dtype)


@contextlib.contextmanager
def evaluating(*modules):
    """Eval mode without graph recording; previous modes are restored."""
    previous = [m.training for m in modules]
    for m in modules:
        m.eval()
    try:
        with no_grad():
            yield
    finally:
        for m, mode in zip(modules, previous):
            m.train(mode)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng=None, bias=True):
        rng = rng or _rng
        bound = 1.0 / math.sqrt(in_dim)
        self.weight = parameter(rng.uniform(-bound, bound, (in_dim, out_dim)))
        self.bias = parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x):
        out = matmul(x, self.weight)
        return out if self.bias is None else add(out, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, axis=-1, eps=self.eps) * self.gamma + self.beta


class Conv1d(Module):
    def __init__(self, in_channels, out_channels, kernel, rng=None, stride=1):
        rng = rng or _rng
        bound = 1.0 / math.sqrt(in_channels * kernel)
        self.weight = parameter(rng.uniform(-bound, bound, (kernel, in_channels, out_channels)))
        self.bias = parameter(np.zeros(out_channels))
        self.kernel = kernel
        self.stride = stride

    def __call__(self, x):
        return conv1d(x, self.weight, self.bias, self.stride)


class MultiHeadAttention(Module):
    def __init__(self, dim, heads, rng=None):
        if dim % heads:
            raise ShapeMismatch(f"model dimension {dim} is not divisible by {heads} heads")
        rng = rng or _rng
        self.dim = dim
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def __call__(self, x, key_mask=None, return_weights=False):
        """
        :param x: [L x d] or [B x L x d]
        :param key_mask: boolean [L] or [B x L]; False positions get zero attention
        """
        single = x.ndim == 2
        if single:
            x = reshape(x, (1,) + x.shape)
            if key_mask is not None:
                key_mask = np.asarray(key_mask)[None]
        if x.shape[-1] != self.dim:
            raise ShapeMismatch(f"attention expects last dimension {self.dim}, got {x.shape}")
        batch, length, _ = x.shape
        head_dim = self.dim // self.heads

        def split(t):
            return t.reshape((batch, length, self.heads, head_dim)).transpose((0, 2, 1, 3))

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(head_dim))
        if key_mask is not None:
            blocked = ~np.asarray(key_mask, dtype=bool)[:, None, None, :]
            scores = masked_fill(scores, blocked)
        weights = softmax(scores, axis=-1)
        context = (weights @ v).transpose((0, 2, 1, 3)).reshape((batch, length, self.dim))
        out = self.out_proj(context)
        if single:
            out = reshape(out, (length, self.dim))
        return (out, weights) if return_weights else out


def multi_head_attention(x, attention, mask=None):
    """Functional entry point for a MultiHeadAttention module."""
    return attention(x, key_mask=mask)


class EncoderBlock(Module):
    """Post-norm transformer encoder layer."""

    def __init__(self, dim, heads, ff_dim, dropout_rate=0.1, rng=None):
        rng = rng or _rng
        self.attention = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.ff1 = Linear(dim, ff_dim, rng)
        self.ff2 = Linear(ff_dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.dropout_rate = dropout_rate

    def __call__(self, x, key_mask=None):
        attended = self.attention(x, key_mask=key_mask)
        x = self.norm1(x + dropout(attended, self.dropout_rate, self.training))
        hidden = self.ff2(dropout(relu(self.ff1(x)), self.dropout_rate, self.training))
        return self.norm2(x + dropout(hidden, self.dropout_rate, self.training))


class TransformerEncoder(Module):
    def __init__(self, layers, dim, heads, ff_dim, dropout_rate=0.1, rng=None):
        if layers < 1:
            raise ValueError("a transformer encoder needs at least one layer")
        rng = rng or _rng
        self.blocks = [EncoderBlock(dim, heads, ff_dim, dropout_rate, rng) for _ in range(layers)]

    def __call__(self, x, key_mask=None):
        for block in self.blocks:
            x = block(x, key_mask)
        return x


def sinusoidal_table(length, dim):
    """Fixed sine/cosine positional encodings, [length x dim]."""
    positions = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[:dim // 2])
    return table


# optimisation

class AdamState:
    def __init__(self, count):
        self.step = 0
        self.m = [None] * count
        self.v = [None] * count


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update in place; parameters without gradient are skipped."""
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if state.m[i] is None:
            state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.state = AdamState(len(self.params))

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        adam_step(self.params, [p.grad for p in self.params], self.state, lr,
                  self.betas[0], self.betas[1], self.eps)


def lr_schedule(step, warmup=5000, total=300000, max_lr=0.001):
    """Linear warmup from 0 to max_lr, then cosine annealing to 0 at total."""
    if step < 0 or step > total:
        raise StepOutOfRange(f"step {step} outside [0, {total}]")
    if warmup > 0 and step < warmup:
        return max_lr * step / warmup
    if total <= warmup:
        return max_lr
    progress = (step - warmup) / (total - warmup)
    return 0.5 * max_lr * (1.0 + math.cos(math.pi * progress))


# finite differences

def numerical_gradient(fn, tensor, h=1e-5):
    """Central differences of the scalar fn() with respect to tensor.data."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = float(fn().data)
        flat[i] = original - h
        minus = float(fn().data)
        flat[i] = original
        grad.reshape(-1)[i] = (plus - minus) / (2.0 * h)
    return grad


def gradient_check(fn, tensors, h=1e-5):
    """
    Largest relative error between analytic and numerical gradients.

    :param fn: zero-argument callable returning a scalar Tensor
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = numerical_gradient(fn, t, h)
        scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst


# serialization

def save_parameters(path, named_arrays, alphabet_hash, meta=None):
    """
    Versioned binary parameter file.

    Layout: magic, <u32 version, <u32 header length, JSON header (names, shapes,
    alphabet hash, meta), then every array as little-endian float64 in header order.
    """
    names = list(named_arrays)
    header = {
        'version': PARAMETER_FORMAT_VERSION,
        'alphabet_hash': alphabet_hash,
        'meta': meta or {},
        'tensors': [{'name': n, 'shape': list(np.shape(named_arrays[n]))} for n in names],
    }
    encoded = json.dumps(header, sort_keys=True, ensure_ascii=False).encode('utf-8')
    with open(path, 'wb') as file:
        file.write(PARAMETER_MAGIC)
        file.write(struct.pack('<II', PARAMETER_FORMAT_VERSION, len(encoded)))
        file.write(encoded)
        for name in names:
            file.write(np.ascontiguousarray(named_arrays[name], dtype='<f8').tobytes())
    ConfigManager.log_numerics_debug(f"Wrote {len(names)} tensors to {path}")


def load_parameters(path):
    """Inverse of save_parameters -> (named arrays, alphabet hash, meta)."""
    with open(path, 'rb') as file:
        if file.read(len(PARAMETER_MAGIC)) != PARAMETER_MAGIC:
            raise CheckpointError(f"{path}: not a parameter file")
        version, header_len = struct.unpack('<II', file.read(8))
        if version != PARAMETER_FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        header = json.loads(file.read(header_len).decode('utf-8'))
        arrays = {}
        for entry in header['tensors']:
            shape = tuple(entry['shape'])
            count = int(np.prod(shape)) if shape else 1
            raw = file.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
            arrays[entry['name']] = np.frombuffer(raw, dtype='<f8').reshape(shape).astype(np.float64)
    ConfigManager.log_numerics_debug(f"Read {len(arrays)} tensors from {path}")
    return arrays, header['alphabet_hash'], header['meta']
