"""Layer objects with parameters, gradients and momentum buffers.

Each layer caches what its backward pass needs during ``forward`` and must
not be shared between concurrent forward/backward calls.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor
from .tensor import check_finite


# --- functional forms -------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_out, 0).astype(np.result_type(grad_out), copy=False)


@dataclass(frozen=True)
class LRNParams:
    """Cross-channel normalisation constants: window ``n``, ``k``, ``alpha``, ``beta``."""

    n: int = 5
    k: float = 1.0
    alpha: float = 1e-4
    beta: float = 0.75

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1 or self.n % 2 == 0:
            raise ValueError(f"LRN window n must be odd and >= 1, got {self.n}")
        if self.k < 0 or self.alpha < 0 or self.beta <= 0:
            raise ValueError(f"invalid LRN constants k={self.k} alpha={self.alpha} beta={self.beta}")


def _window_sum(sq, n):
    """Sum over the channel window [i - n//2, i + n//2], clipped at the edges."""
    half = n // 2
    c = sq.shape[-1]
    out = sq.copy()
    for off in range(1, half + 1):
        if off >= c:
            break
        out[..., off:] += sq[..., :-off]
        out[..., :-off] += sq[..., off:]
    return out


def lrn_forward(x, p=LRNParams()):
    """``x_i / (k + alpha * sum_{j in window(i)} x_j**2) ** beta`` across channels."""
    scale = p.k + p.alpha * _window_sum(x * x, p.n)
    out = x * scale ** (-p.beta)
    return check_finite(out.astype(x.dtype, copy=False), "lrn_forward")


def lrn_backward(grad_out, x, p=LRNParams()):
    scale = p.k + p.alpha * _window_sum(x * x, p.n)
    inv = scale ** (-p.beta)
    # the channel window is symmetric, so the transpose of the window sum is the window sum
    t = _window_sum(grad_out * x * inv / scale, p.n)
    grad_in = grad_out * inv - 2.0 * p.alpha * p.beta * x * t
    return check_finite(grad_in.astype(x.dtype, copy=False), "lrn_backward")


def dropout_forward(x, rate, rng, training=True):
    """Inverted dropout; returns ``(out, mask)`` where ``mask`` is None in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded generator")
    keep = rng.random(np.shape(x)) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, mask


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_xent(logits, label):
    """Softmax cross-entropy.

    ``logits`` is a length-K vector with an integer ``label``, or an N x K batch
    with N labels; the batch loss is the mean and its gradient is scaled by 1/N.
    Returns ``(loss, grad_logits)``.
    """
    logits = np.asarray(logits)
    k = logits.shape[-1]
    if k < 2:
        raise ValueError("softmax needs at least two classes")
    labels = np.atleast_1d(np.asarray(label))
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    z2 = np.atleast_2d(logits)
    z = z2 - z2.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    rows = np.arange(z2.shape[0])
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= z2.shape[0]
    grad = grad.astype(logits.dtype, copy=False)
    return loss, grad.reshape(logits.shape)


# --- layer objects ---------------------------------------------------------

class Layer:
    """Base layer: parameter, gradient and velocity lists plus a train/eval flag."""

    def __init__(self):
        self.params = []
        self.grads = []
        self.velocity = []
        self.training = True

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def train(self, mode=True):
        self.training = mode

    def zero_grad(self):
        for g in self.grads:
            g[...] = 0

    def _init_state(self):
        self.grads = [np.zeros_like(p) for p in self.params]
        self.velocity = [np.zeros_like(p) for p in self.params]

    def astype(self, dtype):
        self.params = [p.astype(dtype) for p in self.params]
        self._rebind()
        self._init_state()

    def _rebind(self):
        pass

    def sublayers(self):
        return []


class Conv(Layer):
    """Convolution with zero padding ``pad``; weights stored K x kh x kw x C."""

    def __init__(self, c_in, c_out, size=1, pad=0, dtype=np.float32):
        super().__init__()
        self.pad = pad
        self.weight = np.zeros((c_out, size, size, c_in), dtype=dtype)
        self.bias = np.zeros(c_out, dtype=dtype)
        self.params = [self.weight, self.bias]
        self._init_state()
        self._x = None

    def _rebind(self):
        self.weight, self.bias = self.params

    @property
    def shape(self):
        return self.weight.shape

    def forward(self, x):
        self._x = x
        return tensor.conv2d_forward(x, self.weight, self.bias, self.pad)

    def backward(self, grad_out):
        gx, gw, gb = tensor.conv2d_backward(self._x, self.weight, grad_out, self.pad)
        self.grads[0] += gw
        self.grads[1] += gb
        return gx


class ReLU(Layer):
    def forward(self, x):
        self._x = x
        return relu_forward(x)

    def backward(self, grad_out):
        return relu_backward(grad_out, self._x)


class LRN(Layer):
    def __init__(self, params=LRNParams()):
        super().__init__()
        self.p = params

    def forward(self, x):
        self._x = x
        return lrn_forward(x, self.p)

    def backward(self, grad_out):
        return lrn_backward(grad_out, self._x, self.p)


class Dropout(Layer):
    """Inverted dropout with a private generator; identity in eval mode."""

    def __init__(self, rate=0.5, seed=0):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = np.random.default_rng(seed)
        self.mask = None

    def forward(self, x):
        out, self.mask = dropout_forward(x, self.rate, self.rng, self.training)
        return out

    def backward(self, grad_out):
        return grad_out if self.mask is None else grad_out * self.mask


class MaxPool(Layer):
    def __init__(self, window):
        super().__init__()
        self.window = window
        self._index = None

    def forward(self, x):
        out, self._index = tensor.maxpool2d_forward(x, self.window)
        return out

    def backward(self, grad_out):
        return tensor.maxpool2d_backward(grad_out, self._index)


class Residual(Layer):
    """``relu(conv_b(relu(conv_a(x))) + x)``; with ``shortcut=False`` the ``+ x`` is dropped."""

    def __init__(self, conv_a, conv_b, shortcut=True):
        super().__init__()
        self.conv_a, self.conv_b = conv_a, conv_b
        self.shortcut = shortcut
        self._inner = ReLU()
        self._outer = ReLU()

    def sublayers(self):
        return [self.conv_a, self.conv_b]

    def forward(self, x):
        branch = self.conv_b.forward(self._inner.forward(self.conv_a.forward(x)))
        if self.shortcut:
            if branch.shape != np.shape(x):
                raise ValueError(f"residual branch shape {branch.shape} != input shape {np.shape(x)}")
            branch = branch + x
        return self._outer.forward(branch)

    def backward(self, grad_out):
        g = self._outer.backward(grad_out)
        gx = self.conv_a.backward(self._inner.backward(self.conv_b.backward(g)))
        return gx + g if self.shortcut else gx

    def train(self, mode=True):
        self.training = mode
        for layer in self.sublayers():
            layer.train(mode)

    def astype(self, dtype):
        for layer in self.sublayers():
            layer.astype(dtype)


def residual_forward(x, conv_a, conv_b):
    return Residual(conv_a, conv_b).forward(x)


class FilterBank(Layer):
    """Parallel s x s convolutions, max-pooled to a common size and concatenated.

    Input is expected to be padded already by ``max(scales) // 2`` per side.  A
    branch with kernel ``s`` is pooled with a ``max_scale - s + 1`` window so
    every branch ends up at the unpadded spatial extent.
    """

    def __init__(self, c_in, width, scales=(1, 3, 5), dtype=np.float32):
        super().__init__()
        self.scales = tuple(scales)
        top = max(self.scales)
        self.convs = [Conv(c_in, width, s, pad=0, dtype=dtype) for s in self.scales]
        self.pools = [MaxPool(top - s + 1) for s in self.scales]
        self.width = width

    def sublayers(self):
        return list(self.convs)

    def forward(self, x):
        outs = []
        for conv, pool in zip(self.convs, self.pools):
            y = conv.forward(x)
            outs.append(pool.forward(y) if pool.window > 1 else y)
        return tensor.concat_channels(outs)

    def backward(self, grad_out):
        parts = tensor.split_channels(grad_out, [self.width] * len(self.convs))
        gx = None
        for conv, pool, g in zip(self.convs, self.pools, parts):
            if pool.window > 1:
                g = pool.backward(g)
            gi = conv.backward(g)
            gx = gi if gx is None else gx + gi
        return gx

    def astype(self, dtype):
        for layer in self.convs:
            layer.astype(dtype)
