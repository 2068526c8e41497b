"""The contextual fully convolutional network.

Layer graph (defaults: width 128, two residual modules, bank scales 1/3/5)::

    bank(1x1 | 3x3 | 5x5, pooled to a common size) -> ReLU -> LRN
    conv 1x1 -> ReLU -> LRN
    residual module x n      relu(conv_b(relu(conv_a(x))) + x)
    conv 1x1 -> ReLU -> dropout
    conv 1x1 -> ReLU -> dropout
    conv 1x1 (class logits)

The same parameters serve two entry points: :func:`forward_patch` on
``p x p`` neighbourhoods (``p = 2 * radius + 1``, 5 for the default bank) and
:func:`forward_image` on a whole cube zero-padded by ``radius``.
"""
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigMismatchError, FormatError
from .layers import LRN, Conv, Dropout, FilterBank, LRNParams, ReLU, Residual
from .tensor import pad_spatial

WEIGHT_MAGIC = b"HSIW"
WEIGHT_VERSION = 1

# init std devs: bank, second and last conv use the wider one
_WIDE_STD = 0.01
_NARROW_STD = 0.005


@dataclass(frozen=True)
class NetworkConfig:
    bands: int
    n_classes: int
    width: int = 128
    n_residual_modules: int = 2
    bank_scales: tuple = (1, 3, 5)
    lrn: LRNParams = field(default_factory=LRNParams)
    dropout_rate: float = 0.5
    # leading residual modules built without their shortcut (ablation only; not serialisable)
    plain_modules: int = 0

    def __post_init__(self):
        object.__setattr__(self, "bank_scales", tuple(sorted(int(s) for s in self.bank_scales)))
        if self.bands < 1:
            raise ValueError(f"bands must be >= 1, got {self.bands}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.n_residual_modules < 0:
            raise ValueError("n_residual_modules must be >= 0")
        if not self.bank_scales or any(s < 1 or s % 2 == 0 for s in self.bank_scales):
            raise ValueError(f"bank scales must be a non-empty set of odd sizes, got {self.bank_scales}")
        if len(set(self.bank_scales)) != len(self.bank_scales):
            raise ValueError(f"duplicate bank scales {self.bank_scales}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if not 0 <= self.plain_modules <= self.n_residual_modules:
            raise ValueError("plain_modules must lie in [0, n_residual_modules]")

    @property
    def radius(self):
        """Receptive-field radius, also the zero padding applied to whole images."""
        return max(self.bank_scales) // 2

    @property
    def patch_size(self):
        return 2 * self.radius + 1

    @property
    def n_weighted_layers(self):
        return 1 + 1 + 2 * self.n_residual_modules + 3


def param_count(config):
    """Number of trainable scalars, from the closed form."""
    b, w, c = config.bands, config.width, config.n_classes
    bank = sum(s * s * b * w + w for s in config.bank_scales)
    second = len(config.bank_scales) * w * w + w
    hidden = (2 * config.n_residual_modules + 2) * (w * w + w)
    last = w * c + c
    return bank + second + hidden + last


class ContextualNet:
    """Instantiated layer graph for a :class:`NetworkConfig`."""

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.seed = seed
        cfg = config
        w = cfg.width
        seeds = np.random.SeedSequence(seed).spawn(3)
        drop_seeds = seeds[1].generate_state(2)

        self.bank = FilterBank(cfg.bands, w, cfg.bank_scales, dtype=dtype)
        self.conv2 = Conv(len(cfg.bank_scales) * w, w, dtype=dtype)
        self.modules = [
            Residual(Conv(w, w, dtype=dtype), Conv(w, w, dtype=dtype), shortcut=i >= cfg.plain_modules)
            for i in range(cfg.n_residual_modules)
        ]
        self.fc1 = Conv(w, w, dtype=dtype)
        self.fc2 = Conv(w, w, dtype=dtype)
        self.classifier = Conv(w, cfg.n_classes, dtype=dtype)
        self.drop1 = Dropout(cfg.dropout_rate, seed=int(drop_seeds[0]))
        self.drop2 = Dropout(cfg.dropout_rate, seed=int(drop_seeds[1]))

        self.layers = [self.bank, ReLU(), LRN(cfg.lrn), self.conv2, ReLU(), LRN(cfg.lrn)]
        self.layers += self.modules
        self.layers += [self.fc1, ReLU(), self.drop1, self.fc2, ReLU(), self.drop2, self.classifier]
        self._initialise(np.random.default_rng(seeds[0]))
        self.eval()

    def _initialise(self, rng):
        wide = set(map(id, self.bank.convs + [self.conv2, self.classifier]))
        for conv in self.conv_layers():
            std = _WIDE_STD if id(conv) in wide else _NARROW_STD
            conv.weight[...] = rng.normal(0.0, std, size=conv.weight.shape)
            conv.bias[...] = 0.0 if conv is self.classifier else 1.0

    def conv_layers(self):
        """Every convolution in the fixed serialisation order."""
        convs = list(self.bank.convs) + [self.conv2]
        for m in self.modules:
            convs += [m.conv_a, m.conv_b]
        return convs + [self.fc1, self.fc2, self.classifier]

    def parameters(self):
        return [p for conv in self.conv_layers() for p in conv.params]

    def gradients(self):
        return [g for conv in self.conv_layers() for g in conv.grads]

    def velocities(self):
        return [v for conv in self.conv_layers() for v in conv.velocity]

    @property
    def dtype(self):
        return self.classifier.weight.dtype

    def astype(self, dtype):
        for conv in self.conv_layers():
            conv.astype(dtype)
        return self

    def train(self):
        for layer in self.layers:
            layer.train(True)
        return self

    def eval(self):
        for layer in self.layers:
            layer.train(False)
        return self

    @property
    def training(self):
        return self.drop1.training

    def zero_grad(self):
        for conv in self.conv_layers():
            conv.zero_grad()

    def forward(self, x):
        """Run the graph on an input already zero-padded by ``config.radius``."""
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out


def build(config, seed=0, dtype=np.float32):
    """Instantiate a network with the Gaussian/constant initialisation scheme."""
    return ContextualNet(config, seed=seed, dtype=dtype)


def _set_mode(net, mode):
    if mode == "train":
        net.train()
    elif mode == "eval":
        net.eval()
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def forward_patch(net, patch, mode="eval"):
    """Logits for the centre pixel of one ``p x p x B`` patch or an ``N x p x p x B`` batch."""
    cfg = net.config
    patch = np.asarray(patch, dtype=net.dtype)
    p = cfg.patch_size
    if patch.ndim not in (3, 4) or patch.shape[-3:-1] != (p, p):
        raise ValueError(f"expected {p}x{p} patches, got shape {patch.shape}")
    if patch.shape[-1] != cfg.bands:
        raise ValueError(f"band mismatch: network expects B={cfg.bands}, patch has B={patch.shape[-1]}")
    _set_mode(net, mode)
    out = net.forward(patch)
    return out.reshape(out.shape[:-3] + out.shape[-1:])


def backward_patch(net, grad_logits):
    """Backpropagate centre-pixel logit gradients from the last :func:`forward_patch`."""
    grad_logits = np.asarray(grad_logits)
    g = grad_logits.reshape(grad_logits.shape[:-1] + (1, 1, grad_logits.shape[-1]))
    return net.backward(g)


def _cube_values(cube):
    return cube.values if hasattr(cube, "values") else np.asarray(cube)


def forward_image(net, cube, mode="eval", tile=None):
    """Logit map ``H x W x C`` for a whole cube, optionally in ``tile x tile`` pieces."""
    cfg = net.config
    values = np.asarray(_cube_values(cube), dtype=net.dtype)
    if values.ndim != 3:
        raise ValueError(f"cube must be H x W x B, got shape {values.shape}")
    if values.shape[2] != cfg.bands:
        raise ValueError(f"band mismatch: network expects B={cfg.bands}, cube has B={values.shape[2]}")
    _set_mode(net, mode)
    r = cfg.radius
    padded = pad_spatial(values, r)
    h, w, _ = values.shape
    if tile is None or (tile >= h and tile >= w):
        return net.forward(padded)
    if tile < 1:
        raise ValueError("tile must be >= 1")
    out = np.empty((h, w, cfg.n_classes), dtype=net.dtype)
    for y0 in range(0, h, tile):
        y1 = min(h, y0 + tile)
        for x0 in range(0, w, tile):
            x1 = min(w, x0 + tile)
            # halo of `r` pixels on every side comes from the padded cube
            out[y0:y1, x0:x1] = net.forward(padded[y0:y1 + 2 * r, x0:x1 + 2 * r])
    return out


def predict(net, cube, tile=128):
    """Per-pixel argmax class index (lowest index on ties), eval mode."""
    logits = forward_image(net, cube, mode="eval", tile=tile)
    return np.argmax(logits, axis=-1).astype(np.int64)


# --- weight files ------------------------------------------------------------

def _config_bytes(cfg):
    head = struct.pack("<5I", cfg.bands, cfg.n_classes, cfg.width, cfg.n_residual_modules, len(cfg.bank_scales))
    scales = struct.pack(f"<{len(cfg.bank_scales)}I", *cfg.bank_scales)
    lrn = struct.pack("<5d", cfg.lrn.n, cfg.lrn.k, cfg.lrn.alpha, cfg.lrn.beta, cfg.dropout_rate)
    return head + scales + lrn


def weights_to_bytes(net):
    cfg = net.config
    if cfg.plain_modules:
        raise ValueError("networks with shortcut-free modules cannot be stored in the weight format")
    chunks = [WEIGHT_MAGIC, struct.pack("<I", WEIGHT_VERSION), _config_bytes(cfg)]
    for p in net.parameters():
        chunks.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        chunks.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_weights(net, path):
    with open(path, "wb") as fh:
        fh.write(weights_to_bytes(net))


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated weight file while reading {what}", self.path, self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def weights_from_bytes(buf, path=None):
    rd = _Reader(buf, path)
    if rd.take(4, "magic") != WEIGHT_MAGIC:
        raise FormatError("bad magic, expected HSIW", path, 0)
    (version,) = rd.unpack("<I", "version")
    if version != WEIGHT_VERSION:
        raise FormatError(f"unsupported weight file version {version}", path, 4)
    bands, n_classes, width, n_res, n_scales = rd.unpack("<5I", "config")
    if n_scales > 16:
        raise FormatError(f"implausible bank scale count {n_scales}", path, rd.pos - 4)
    scales = rd.unpack(f"<{n_scales}I", "bank scales")
    lrn_n, lrn_k, lrn_alpha, lrn_beta, drop = rd.unpack("<5d", "LRN/dropout constants")
    try:
        cfg = NetworkConfig(
            bands=bands, n_classes=n_classes, width=width, n_residual_modules=n_res,
            bank_scales=scales, lrn=LRNParams(int(lrn_n), lrn_k, lrn_alpha, lrn_beta), dropout_rate=drop,
        )
    except ValueError as exc:
        raise FormatError(f"invalid stored configuration: {exc}", path, 8) from exc

    net = build(cfg, seed=0)
    loaded = []
    for i, p in enumerate(net.parameters()):
        start = rd.pos
        (rank,) = rd.unpack("<I", f"rank of tensor {i}")
        if rank > 4:
            raise ConfigMismatchError(f"tensor {i} has rank {rank}, expected {p.ndim}", path, start)
        extents = rd.unpack(f"<{rank}I", f"extents of tensor {i}")
        if tuple(extents) != p.shape:
            raise ConfigMismatchError(
                f"tensor {i} has shape {tuple(extents)} but the stored config implies {p.shape}", path, start
            )
        raw = rd.take(4 * p.size, f"values of tensor {i}")
        loaded.append(np.frombuffer(raw, dtype="<f4").reshape(p.shape))
    if rd.pos != len(buf):
        raise FormatError(f"{len(buf) - rd.pos} trailing bytes after last tensor", path, rd.pos)
    for p, values in zip(net.parameters(), loaded):
        p[...] = values
    return net


def load_weights(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return weights_from_bytes(buf, path=str(path))
