"""Encoder-decoder segmentation network with hand-written backprop.

UNet-family layout: per stage a double 3x3 conv block (conv -> instance
norm -> ReLU, twice), 2x max-pool downsampling, 2x nearest-neighbor
upsampling with skip concatenation, and a 1x1 conv head producing 2 logit
channels (background, nodule). Everything runs in float32 on the kernels
backend (numba or numpy); gradients are accumulated by an explicit
backward() that mirrors forward() layer by layer.

Convolutions inside norm blocks carry no bias: instance normalization
subtracts the per-channel mean, so a bias there would be a dead parameter
with an identically-zero gradient. Only the head conv has a bias.

Checkpoints are a 6-byte magic (``WPSEG1``) followed by an npz archive of
the weights plus step / config-hash / RNG-state metadata.
"""

import io
import json
from pathlib import Path

import numpy as np

from . import kernels
from .errors import MissingArtifactError, ValidationError

CHECKPOINT_MAGIC = b"WPSEG1"
IN_EPS = 1e-5


class Param:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)


class _Conv3x3:
    """3x3 same-padding convolution, no bias (normalized away downstream)."""

    def __init__(self, name, cin, cout, rng):
        std = np.sqrt(2.0 / (cin * 9.0))
        w = (rng.standard_normal((cout, cin, 3, 3)) * std).astype(np.float32)
        self.w = Param(f"{name}.w", w)
        self._zero_bias = np.zeros(cout, dtype=np.float32)
        self._x = None

    def params(self):
        return [self.w]

    def forward(self, x):
        self._x = x
        return kernels.conv3x3_forward(x, self.w.value, self._zero_bias)

    def backward(self, dy):
        dw, _ = kernels.conv3x3_param_grad(self._x, dy)
        self.w.grad += dw
        return kernels.conv3x3_input_grad(dy, self.w.value)


class _InstanceNorm:
    """Per-sample, per-channel normalization with affine parameters."""

    def __init__(self, name, channels):
        self.gamma = Param(f"{name}.gamma", np.ones(channels, dtype=np.float32))
        self.beta = Param(f"{name}.beta", np.zeros(channels, dtype=np.float32))
        self._xhat = None
        self._inv_std = None

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x):
        mean = x.mean(axis=(2, 3), keepdims=True)
        var = x.var(axis=(2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + np.float32(IN_EPS))
        xhat = (x - mean) * inv_std
        self._xhat, self._inv_std = xhat, inv_std
        return self.gamma.value[None, :, None, None] * xhat + self.beta.value[None, :, None, None]

    def backward(self, dy):
        xhat, inv_std = self._xhat, self._inv_std
        self.gamma.grad += (dy * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += dy.sum(axis=(0, 2, 3))
        dxhat = dy * self.gamma.value[None, :, None, None]
        m1 = dxhat.mean(axis=(2, 3), keepdims=True)
        m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
        return inv_std * (dxhat - m1 - xhat * m2)


class _ReLU:
    def __init__(self):
        self._mask = None

    def params(self):
        return []

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, np.float32(0.0))

    def backward(self, dy):
        return np.where(self._mask, dy, np.float32(0.0))


class _DoubleConv:
    def __init__(self, name, cin, cout, rng):
        self.layers = [
            _Conv3x3(f"{name}.conv1", cin, cout, rng),
            _InstanceNorm(f"{name}.norm1", cout),
            _ReLU(),
            _Conv3x3(f"{name}.conv2", cout, cout, rng),
            _InstanceNorm(f"{name}.norm2", cout),
            _ReLU(),
        ]

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


class _Conv1x1:
    def __init__(self, name, cin, cout, rng):
        std = np.sqrt(2.0 / cin)
        w = (rng.standard_normal((cout, cin)) * std).astype(np.float32)
        self.w = Param(f"{name}.w", w)
        self.b = Param(f"{name}.b", np.zeros(cout, dtype=np.float32))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        self._x = x
        y = np.einsum("oi,bihw->bohw", self.w.value, x)
        return y + self.b.value[None, :, None, None]

    def backward(self, dy):
        self.w.grad += np.einsum("bohw,bihw->oi", dy, self._x)
        self.b.grad += dy.sum(axis=(0, 2, 3))
        return np.einsum("oi,bohw->bihw", self.w.value, dy)


def _upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _upsample2_backward(dy):
    b, c, h, w = dy.shape
    return dy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


class SegModel:
    """Two-class segmentation network.

    depth: number of pooling stages; inputs must have H, W divisible by
    2**depth. base_channels: width of the first stage, doubled per level.
    """

    def __init__(self, depth=3, base_channels=16, seed=0):
        if depth < 1:
            raise ValidationError(f"depth must be >= 1, got {depth}")
        if base_channels < 1:
            raise ValidationError(f"base_channels must be >= 1, got {base_channels}")
        self.depth = depth
        self.base_channels = base_channels
        self.seed = seed
        rng = np.random.default_rng(seed)

        chans = [base_channels * (1 << i) for i in range(depth + 1)]
        self.encoders = []
        cin = 1
        for i in range(depth):
            self.encoders.append(_DoubleConv(f"enc{i}", cin, chans[i], rng))
            cin = chans[i]
        self.bottleneck = _DoubleConv("bottleneck", chans[depth - 1], chans[depth], rng)
        self.decoders = []
        up_ch = chans[depth]
        for i in range(depth - 1, -1, -1):
            skip_ch = chans[i]
            self.decoders.append(_DoubleConv(f"dec{i}", up_ch + skip_ch, skip_ch, rng))
            up_ch = skip_ch
        self.head = _Conv1x1("head", chans[0], 2, rng)

        self._pool_idx = None
        self._up_channels = None

    def parameters(self):
        ps = []
        for enc in self.encoders:
            ps.extend(enc.params())
        ps.extend(self.bottleneck.params())
        for dec in self.decoders:
            ps.extend(dec.params())
        ps.extend(self.head.params())
        return ps

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0.0

    def forward(self, x):
        """x: Bx1xHxW float32 -> Bx2xHxW float32 logits."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValidationError(f"expected Bx1xHxW input, got shape {x.shape}")
        div = 1 << self.depth
        if x.shape[2] % div or x.shape[3] % div:
            raise ValidationError(
                f"input spatial dims {x.shape[2]}x{x.shape[3]} must be divisible "
                f"by 2^depth = {div}"
            )
        x = np.ascontiguousarray(x, dtype=np.float32)
        skips = []
        self._pool_idx = []
        self._up_channels = []
        for enc in self.encoders:
            f = enc.forward(x)
            skips.append(f)
            x, idx = kernels.maxpool2_forward(f)
            self._pool_idx.append(idx)
        x = self.bottleneck.forward(x)
        for dec, skip in zip(self.decoders, reversed(skips)):
            up = _upsample2(x)
            self._up_channels.append(up.shape[1])
            x = dec.forward(np.concatenate([up, skip], axis=1))
        return self.head.forward(x)

    def backward(self, dlogits):
        """Accumulate parameter gradients from d(loss)/d(logits)."""
        d = self.head.backward(np.ascontiguousarray(dlogits, dtype=np.float32))
        # Walk decoders shallowest-first (reverse of forward order); the skip
        # gradient for encoder level k lands in dskips[k].
        dskips = []
        for dec, up_ch in zip(reversed(self.decoders), reversed(self._up_channels)):
            dcat = dec.backward(d)
            dskips.append(dcat[:, up_ch:])
            d = _upsample2_backward(np.ascontiguousarray(dcat[:, :up_ch]))
        d = self.bottleneck.backward(d)
        for level in range(self.depth - 1, -1, -1):
            dpool = kernels.maxpool2_backward(d, self._pool_idx[level])
            d = self.encoders[level].backward(dpool + dskips[level])
        return d

    def predict(self, image):
        """(H,W) image in [0,1] -> (foreground probability map, hard mask).

        Ties at the argmax resolve to background.
        """
        x = np.ascontiguousarray(image, dtype=np.float32)[None, None]
        logits = self.forward(x)[0]
        z = logits.astype(np.float64)
        z -= z.max(axis=0, keepdims=True)
        e = np.exp(z)
        prob = (e[1] / e.sum(axis=0)).astype(np.float32)
        hard = (logits[1] > logits[0]).astype(np.uint8)
        return prob, hard


def save_checkpoint(path, model, step=0, config_hash="", rng_state=None,
                    opt_state=None, extra_meta=None):
    """opt_state: optional {param_name: momentum array} for exact resume;
    rng_state: the data RNG's bit-generator state (JSON-serializable)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{p.name}": p.value for p in model.parameters()}
    if opt_state:
        arrays.update({f"opt/{name}": v for name, v in opt_state.items()})
    meta = {
        "step": int(step),
        "config_hash": config_hash,
        "depth": model.depth,
        "base_channels": model.base_channels,
        "seed": model.seed,
        "rng_state": rng_state,
    }
    if extra_meta:
        meta.update(extra_meta)
    buf = io.BytesIO()
    np.savez(buf, meta=np.array(json.dumps(meta)), **arrays)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns (model, meta dict, opt_state dict).

    Forward after reload is bit-identical to the saved model's.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValidationError(
                f"{path}: not a {CHECKPOINT_MAGIC.decode()} checkpoint "
                f"(magic {magic!r})"
            )
        data = np.load(io.BytesIO(fh.read()), allow_pickle=False)
    meta = json.loads(str(data["meta"]))
    model = SegModel(depth=meta["depth"], base_channels=meta["base_channels"],
                     seed=meta.get("seed", 0))
    for p in model.parameters():
        key = f"param/{p.name}"
        if key not in data:
            raise ValidationError(f"{path}: missing weight {p.name}")
        stored = data[key]
        if stored.shape != p.value.shape:
            raise ValidationError(
                f"{path}: weight {p.name} has shape {stored.shape}, "
                f"expected {p.value.shape}"
            )
        p.value[...] = stored
    opt_state = {k[len("opt/"):]: data[k] for k in data.files if k.startswith("opt/")}
    return model, meta, opt_state
