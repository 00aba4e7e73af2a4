"""
Neural Network Core
Reverse-mode automatic differentiation over numpy arrays, the layer
primitives the fusion model is built from, a small module system, the
Adam optimizer and a central finite-difference gradient checker
"""
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logsumexp

from src.errors import ConfigError, DimensionError, NumericError

logger = logging.getLogger(__name__)

DTYPE = np.float64

_grad_enabled = True


@contextmanager
def no_grad():
    """Build no graph inside the block (evaluation, finite differences)"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(values: np.ndarray, where: str):
    if not np.isfinite(values).all():
        raise NumericError(f"non-finite values produced by {where}")


class Tensor:
    """
    A numpy array plus the graph needed to backpropagate into it

    Leaves with requires_grad accumulate .grad on backward(); intermediate
    results only pass gradients through.
    """

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: Optional[np.ndarray] = None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad"""
        if grad is None:
            if self.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)

        # iterative topological order (graphs get deep)
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        pending = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = _lift(other)
        a, b = self, other
        return _result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __neg__(self):
        return _result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        other = _lift(other)
        a, b = self, other
        return _result(a.data * b.data, (a, b),
                       lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        a, b = self, other
        return _result(a.data / b.data, (a, b),
                       lambda g: (_unbroadcast(g / b.data, a.shape),
                                  _unbroadcast(-g * a.data / b.data ** 2, b.shape)))

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f"matmul needs >= 2-D operands, got {a.shape} @ {b.shape}")

        def backward(g):
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
            return ga, gb

        return _result(a.data @ b.data, (a, b), backward)

    # -- shape ---------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _result(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        axes = range(self.ndim) if axis is None else np.atleast_1d(axis)
        count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return _result(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),))

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = np.argsort(axes)
        return _result(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def __getitem__(self, index):
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=DTYPE)
            np.add.at(full, index, g)
            return (full,)

        return _result(self.data[index], (self,), backward)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    parents = tuple(p for p in parents if p is not None)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = backward
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    return _result(data, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


class Parameter(Tensor):
    """A named, optimizer-visible leaf tensor"""

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


# ---------------------------------------------------------------- primitives

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x W^T + b over the last axis of x"""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    _check_finite(out, "linear")

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gx = (g @ weight.data) if x.requires_grad else None
        gw = g2.T @ x2
        return (gx, gw) + ((g2.sum(axis=0),) if bias is not None else ())

    return _result(out, (x, weight, bias), backward)


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    1-D cross-correlation over [C_in, L] or [N, C_in, L] input

    Returns [C_out, L_out] (or [N, C_out, L_out]) with
    L_out = floor((L + 2 padding - k) / stride) + 1.
    """
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3:
        raise DimensionError(f"conv1d input must be [C, L] or [N, C, L], got {x.shape}")
    n, c_in, length = xd.shape
    c_out, c_w, k = weight.shape
    if c_w != c_in:
        raise DimensionError(f"conv1d: input has {c_in} channels, weight expects {c_w}")
    if k > length + 2 * padding:
        raise DimensionError(f"conv1d: kernel {k} longer than padded input {length + 2 * padding}")

    l_out = (length + 2 * padding - k) // stride + 1
    span = stride * (l_out - 1) + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    w = weight.data

    out = np.zeros((n, l_out, c_out))
    for j in range(k):
        out += np.tensordot(xp[:, :, j:j + span:stride], w[:, :, j], axes=([1], [1]))
    out = out.transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    _check_finite(out, "conv1d")

    def backward(g):
        g = g[None] if unbatched else g
        gw = np.empty_like(w)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for j in range(k):
            window = xp[:, :, j:j + span:stride]
            gw[:, :, j] = np.tensordot(g, window, axes=([0, 2], [0, 2]))
            if gxp is not None:
                gxp[:, :, j:j + span:stride] += np.tensordot(g, w[:, :, j], axes=([1], [0])).transpose(0, 2, 1)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding:padding + length]
            gx = gx[0] if unbatched else gx
        return (gx, gw) + ((g.sum(axis=(0, 2)),) if bias is not None else ())

    return _result(out[0] if unbatched else out, (x, weight, bias), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over [C_in, H, W] or [N, C_in, H, W] input, square kernels"""
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4:
        raise DimensionError(f"conv2d input must be [C, H, W] or [N, C, H, W], got {x.shape}")
    n, c_in, height, width = xd.shape
    c_out, c_w, kh, kw = weight.shape
    if c_w != c_in:
        raise DimensionError(f"conv2d: input has {c_in} channels, weight expects {c_w}")
    if kh > height + 2 * padding or kw > width + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {height}x{width}+{padding}")

    h_out = (height + 2 * padding - kh) // stride + 1
    w_out = (width + 2 * padding - kw) // stride + 1
    span_h = stride * (h_out - 1) + 1
    span_w = stride * (w_out - 1) + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    w = weight.data

    out = np.zeros((n, h_out, w_out, c_out))
    for i in range(kh):
        for j in range(kw):
            window = xp[:, :, i:i + span_h:stride, j:j + span_w:stride]
            out += np.tensordot(window, w[:, :, i, j], axes=([1], [1]))
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    _check_finite(out, "conv2d")

    def backward(g):
        g = g[None] if unbatched else g
        gw = np.empty_like(w)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                window = xp[:, :, i:i + span_h:stride, j:j + span_w:stride]
                gw[:, :, i, j] = np.tensordot(g, window, axes=([0, 2, 3], [0, 2, 3]))
                if gxp is not None:
                    gxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += \
                        np.tensordot(g, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding:padding + height, padding:padding + width]
            gx = gx[0] if unbatched else gx
        return (gx, gw) + ((g.sum(axis=(0, 2, 3)),) if bias is not None else ())

    return _result(out[0] if unbatched else out, (x, weight, bias), backward)


def global_avg_pool(x: Tensor, spatial_dims: Optional[int] = None) -> Tensor:
    """Mean over the trailing spatial axes: [C, ...] -> [C], [N, C, ...] -> [N, C]"""
    if spatial_dims is None:
        spatial_dims = x.ndim - 1
    return x.mean(axis=tuple(range(x.ndim - spatial_dims, x.ndim)))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data
    _check_finite(out, "layer_norm")

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv_std / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), backward)


def dropout_rng(seed: int, layer_id: int, step: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, layer, step) so replays are exact"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, layer_id, step])))


def dropout(x: Tensor, p: float, train: bool, seed: int = 0, layer_id: int = 0, step: int = 0) -> Tensor:
    """Inverted dropout; identity in eval mode. The mask is a constant for backprop."""
    if not 0 <= p < 1:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0:
        return x
    keep = dropout_rng(seed, layer_id, step).random(x.shape) >= p
    mask = keep / (1.0 - p)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return _result(s, (logits,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """
    -log softmax(logits)[label]

    [C] logits with an int label give a scalar; [N, C] logits with N labels
    give the [N] per-sample losses.
    """
    n_classes = logits.shape[-1]
    if n_classes < 2:
        raise DimensionError(f"cross_entropy needs >= 2 classes, got {n_classes}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels shape {labels.shape} doesn't match logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise IndexError(f"label out of range for {n_classes} classes: {labels}")

    lse = logsumexp(logits.data, axis=-1)
    picked = np.take_along_axis(logits.data, labels[..., None], axis=-1)[..., 0]
    loss = lse - picked

    def backward(g):
        probs = np.exp(logits.data - lse[..., None])
        one_hot = np.zeros_like(probs)
        np.put_along_axis(one_hot, labels[..., None], 1.0, axis=-1)
        return (np.asarray(g)[..., None] * (probs - one_hot),)

    return _result(loss, (logits,), backward)


def multi_head_self_attention(tokens: Tensor, w_q: Tensor, b_q: Tensor, w_k: Tensor, b_k: Tensor,
                              w_v: Tensor, b_v: Tensor, w_o: Tensor, b_o: Tensor, n_heads: int) -> Tensor:
    """
    Scaled dot-product self-attention with n_heads heads over [T, d] or [N, T, d]

    No positional information is added here.
    """
    d = tokens.shape[-1]
    if d % n_heads:
        raise ConfigError(f"embedding dim {d} not divisible by {n_heads} heads")
    unbatched = tokens.ndim == 2
    x = tokens.reshape(1, *tokens.shape) if unbatched else tokens
    n, t, _ = x.shape
    d_head = d // n_heads

    def split_heads(z):
        return z.reshape(n, t, n_heads, d_head).transpose(0, 2, 1, 3)

    q = split_heads(linear(x, w_q, b_q))
    k = split_heads(linear(x, w_k, b_k))
    v = split_heads(linear(x, w_v, b_v))

    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d_head))
    context = (softmax(scores, axis=-1) @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
    out = linear(context, w_o, b_o)
    return out.reshape(t, d) if unbatched else out


def transformer_encoder_layer(tokens: Tensor, attention: Dict[str, Tensor], ffn: Dict[str, Tensor],
                              n_heads: int, dropout_p: float = 0.0, train: bool = False,
                              seed: int = 0, layer_ids: Tuple[int, int] = (0, 1), step: int = 0) -> Tensor:
    """
    Post-norm encoder layer

        y   = layer_norm(x + dropout(MHSA(x)))
        out = layer_norm(y + dropout(FFN(y))),  FFN = linear -> relu -> linear

    attention holds w_q/b_q/w_k/b_k/w_v/b_v/w_o/b_o; ffn holds w1/b1/w2/b2 and
    the two norms' norm1_gain/norm1_bias/norm2_gain/norm2_bias.
    """
    attended = multi_head_self_attention(tokens, n_heads=n_heads, **attention)
    attended = dropout(attended, dropout_p, train, seed, layer_ids[0], step)
    y = layer_norm(tokens + attended, ffn["norm1_gain"], ffn["norm1_bias"])

    hidden = relu(linear(y, ffn["w1"], ffn["b1"]))
    fed = dropout(linear(hidden, ffn["w2"], ffn["b2"]), dropout_p, train, seed, layer_ids[1], step)
    return layer_norm(y + fed, ffn["norm2_gain"], ffn["norm2_bias"])


# ---------------------------------------------------------------- modules

class Module:
    """Container of Parameters and sub-modules, discovered from attributes"""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _members(self):
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in self._members():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            else:
                yield from value.named_parameters(path + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._members():
            if isinstance(value, Module):
                yield from value.modules()

    def assign_names(self):
        """Give every Parameter its dotted path; shared parameters are rejected"""
        seen = {}
        for path, param in self.named_parameters():
            if id(param) in seen:
                raise ConfigError(f"parameter registered twice: {seen[id(param)]} and {path}")
            seen[id(param)] = path
            param.name = path
        return self

    def train(self, mode: bool = True):
        for module in self.modules():
            module.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for param in self.parameters():
            param.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, param in params.items():
            if state[name].shape != param.shape:
                raise DimensionError(f"{name}: checkpoint shape {state[name].shape} != model shape {param.shape}")
            param.data = np.array(state[name], dtype=DTYPE)

    def mult_adds(self, input_shape: Tuple[int, ...]) -> Tuple[int, Tuple[int, ...]]:
        """Multiply-adds of one unbatched forward pass and the output shape"""
        raise NotImplementedError


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(rng.uniform(-1, 1, (d_out, d_in)) / math.sqrt(d_in))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def mult_adds(self, input_shape):
        d_out, d_in = self.weight.shape
        lead = int(np.prod(input_shape[:-1]))
        return lead * d_in * d_out, tuple(input_shape[:-1]) + (d_out,)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: Optional[int] = None):
        self.weight = Parameter(_kaiming(rng, (c_out, c_in, kernel), c_in * kernel))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.stride, self.padding)

    def output_length(self, length: int) -> int:
        return (length + 2 * self.padding - self.weight.shape[2]) // self.stride + 1

    def mult_adds(self, input_shape):
        c_out, c_in, k = self.weight.shape
        l_out = self.output_length(input_shape[-1])
        return c_out * c_in * k * l_out, (c_out, l_out)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: Optional[int] = None):
        self.weight = Parameter(_kaiming(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def mult_adds(self, input_shape):
        c_out, c_in, k, _ = self.weight.shape
        h_out = (input_shape[-2] + 2 * self.padding - k) // self.stride + 1
        w_out = (input_shape[-1] + 2 * self.padding - k) // self.stride + 1
        return c_out * c_in * k * k * h_out * w_out, (c_out, h_out, w_out)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class Dropout(Module):
    """Dropout whose mask stream is keyed by (seed, layer_id, step)"""

    def __init__(self, p: float, layer_id: int, seed: int = 0):
        if not 0 <= p < 1:
            raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.layer_id = layer_id
        self.seed = seed
        self.step = 0

    def forward(self, x: Tensor) -> Tensor:
        return dropout(x, self.p, self.training, self.seed, self.layer_id, self.step)


class MultiHeadSelfAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads:
            raise ConfigError(f"embedding dim {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def weights(self) -> Dict[str, Tensor]:
        return {
            "w_q": self.q.weight, "b_q": self.q.bias,
            "w_k": self.k.weight, "b_k": self.k.bias,
            "w_v": self.v.weight, "b_v": self.v.bias,
            "w_o": self.o.weight, "b_o": self.o.bias,
        }

    def forward(self, tokens: Tensor) -> Tensor:
        return multi_head_self_attention(tokens, n_heads=self.n_heads, **self.weights())

    def mult_adds(self, input_shape):
        t, d = input_shape
        return 4 * t * d * d + 2 * t * t * d, (t, d)


class TransformerEncoderLayer(Module):
    def __init__(self, d: int, n_heads: int, ffn_hidden: int, dropout_p: float,
                 rng: np.random.Generator, first_layer_id: int = 0, seed: int = 0):
        self.attention = MultiHeadSelfAttention(d, n_heads, rng)
        self.ff1 = Linear(d, ffn_hidden, rng)
        self.ff2 = Linear(ffn_hidden, d, rng)
        self.norm1 = LayerNorm(d)
        self.norm2 = LayerNorm(d)
        self.drop_attention = Dropout(dropout_p, first_layer_id, seed)
        self.drop_ffn = Dropout(dropout_p, first_layer_id + 1, seed)

    def ffn_weights(self) -> Dict[str, Tensor]:
        return {
            "w1": self.ff1.weight, "b1": self.ff1.bias,
            "w2": self.ff2.weight, "b2": self.ff2.bias,
            "norm1_gain": self.norm1.gain, "norm1_bias": self.norm1.bias,
            "norm2_gain": self.norm2.gain, "norm2_bias": self.norm2.bias,
        }

    def forward(self, tokens: Tensor) -> Tensor:
        return transformer_encoder_layer(
            tokens, self.attention.weights(), self.ffn_weights(), self.attention.n_heads,
            dropout_p=self.drop_attention.p, train=self.training, seed=self.drop_attention.seed,
            layer_ids=(self.drop_attention.layer_id, self.drop_ffn.layer_id), step=self.drop_attention.step,
        )

    def mult_adds(self, input_shape):
        t, d = input_shape
        attention, _ = self.attention.mult_adds(input_shape)
        hidden = self.ff1.weight.shape[0]
        return attention + 2 * t * d * hidden, (t, d)


def count_parameters(module: Module) -> int:
    return sum(p.size for p in module.parameters())


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    """Adam hyperparameters plus per-parameter moments"""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)
    timestep: int = 0


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> Tuple[List[np.ndarray], AdamState]:
    """
    One Adam update with decoupled weight decay

        theta <- theta - lr * wd * theta
        theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)

    Pure: returns new parameter arrays and a new state.
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    first = state.first_moment or [np.zeros_like(p) for p in params]
    second = state.second_moment or [np.zeros_like(p) for p in params]
    if len(first) != len(params):
        raise DimensionError(f"optimizer state tracks {len(first)} parameters, got {len(params)}")

    t = state.timestep + 1
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t

    new_params, new_first, new_second = [], [], []
    for theta, g, m, v in zip(params, grads, first, second):
        if theta.shape != g.shape or theta.shape != m.shape:
            raise DimensionError(f"adam: parameter {theta.shape}, gradient {g.shape}, moment {m.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        theta = theta - state.lr * state.weight_decay * theta
        theta = theta - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        new_params.append(theta)
        new_first.append(m)
        new_second.append(v)

    new_state = AdamState(state.lr, state.beta1, state.beta2, state.epsilon, state.weight_decay,
                          new_first, new_second, t)
    return new_params, new_state


class Adam:
    """Stateful wrapper applying adam_step to a model's trainable Parameters"""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = [p for p in params if p.trainable]
        self.state = AdamState(lr, betas[0], betas[1], eps, weight_decay)

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        updated, self.state = adam_step([p.data for p in self.params], grads, self.state)
        for param, data in zip(self.params, updated):
            param.data = data

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------- verification

def grad_check(function: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """
    Max relative error between analytic and central-difference gradients

    function() must recompute a scalar from the current values of inputs.
    Relative error is |a - n| / max(|a|, |n|, 1e-8). With max_coords, that
    many coordinates per input are sampled instead of checking all.
    """
    for t in inputs:
        t.grad = None
    out = function()
    if out.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            original = flat[i]
            with no_grad():
                flat[i] = original + eps
                plus = function().item()
                flat[i] = original - eps
                minus = function().item()
            flat[i] = original
            numeric = (plus - minus) / (2 * eps)
            exact = a.reshape(-1)[i]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, error)
    return worst
