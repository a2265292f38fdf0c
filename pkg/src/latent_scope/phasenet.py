"""Small numpy encoder-decoder for phase-space projection stacks.

The encoder takes a G x G input-beam image plus the 7 machine scalars and
produces a latent vector; the decoder maps the latent vector to
``15 * n_stations`` G x G channels, each passed through a spatial softmax so it
is a normalized probability grid. Gradients are hand-written reverse mode over
a fixed menu of layers (conv, dense, leaky ramp, nearest upsample).

Internally feature maps are NHWC.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; ``checkpoint`` holds the last good parameters."""

    def __init__(self, msg, checkpoint=None, history=None):
        super().__init__(msg)
        self.checkpoint = checkpoint
        self.history = history


@dataclass
class NetworkArch:
    G: int = 32
    n_scalars: int = 7
    latent_dim: int = 2
    n_stations: int = 5
    kernel: int = 3
    enc_conv: list[int] = field(default_factory=lambda: [8, 16, 16])  # stride-2 stages
    enc_dense: list[int] = field(default_factory=lambda: [64])
    merge_dense: list[int] = field(default_factory=lambda: [64])
    dec_dense: list[int] = field(default_factory=lambda: [64])
    dec_base: int = 4
    dec_base_channels: int = 32
    dec_conv: list[int] = field(default_factory=lambda: [32, 16])
    leak: float = 0.1

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ShapeError("latent_dim must be >= 1")
        stages = math.log2(self.G / self.dec_base)
        if stages != int(stages) or int(stages) != len(self.dec_conv) + 1:
            raise ShapeError("G / dec_base must equal 2 ** (len(dec_conv) + 1)")
        if self.G % (2 ** len(self.enc_conv)):
            raise ShapeError("G must be divisible by 2 ** len(enc_conv)")

    @property
    def out_channels(self) -> int:
        return 15 * self.n_stations

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkArch":
        return cls(**dict(d))


# --- layers -----------------------------------------------------------------


class Dense:
    def __init__(self, n_in, n_out):
        self.n_in, self.n_out = n_in, n_out

    def shapes(self):
        return [(self.n_in, self.n_out), (self.n_out,)]

    def fan_in(self):
        return self.n_in

    def forward(self, x, W, b):
        return x @ W + b, x

    def backward(self, dy, x, W, b):
        return dy @ W.T, [x.T @ dy, dy.sum(axis=0)]


class Conv:
    """'Same'-padded square convolution with optional stride, via im2col."""

    def __init__(self, c_in, c_out, k=3, stride=1):
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride

    def shapes(self):
        return [(self.k, self.k, self.c_in, self.c_out), (self.c_out,)]

    def fan_in(self):
        return self.k * self.k * self.c_in

    def forward(self, x, W, b):
        k, s, p = self.k, self.stride, self.k // 2
        B, H, Wd, C = x.shape
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
        Ho, Wo = win.shape[1], win.shape[2]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, k * k * C)
        y = cols @ W.reshape(k * k * C, self.c_out) + b
        return y.reshape(B, Ho, Wo, self.c_out), (cols, x.shape)

    def backward(self, dy, cache, W, b):
        cols, xshape = cache
        k, s, p = self.k, self.stride, self.k // 2
        B, H, Wd, C = xshape
        _, Ho, Wo, F = dy.shape
        d2 = dy.reshape(-1, F)
        dW = (cols.T @ d2).reshape(W.shape)
        dcols = (d2 @ W.reshape(-1, F).T).reshape(B, Ho, Wo, k, k, C)
        dxp = np.zeros((B, H + 2 * p, Wd + 2 * p, C), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + s * Ho : s, j : j + s * Wo : s, :] += dcols[:, :, :, i, j, :]
        return dxp[:, p : p + H, p : p + Wd, :], [dW, d2.sum(axis=0)]


class LeakyRamp:
    def __init__(self, leak):
        self.leak = leak

    def shapes(self):
        return []

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, self.leak * x), mask

    def backward(self, dy, mask):
        return np.where(mask, dy, self.leak * dy), []


class Upsample2:
    def shapes(self):
        return []

    def forward(self, x):
        return x.repeat(2, axis=1).repeat(2, axis=2), None

    def backward(self, dy, _):
        B, H, W, C = dy.shape
        return dy.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4)), []


class Reshape:
    def __init__(self, shape):
        self.shape = tuple(shape)

    def shapes(self):
        return []

    def forward(self, x):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, dy, xshape):
        return dy.reshape(xshape), []


def spatial_softmax(z):
    """Softmax over the two spatial axes of NHWC logits."""
    m = z.max(axis=(1, 2), keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=(1, 2), keepdims=True)


def spatial_softmax_backward(ds, s):
    return s * (ds - (ds * s).sum(axis=(1, 2), keepdims=True))


# --- network ----------------------------------------------------------------


def _build_layers(arch: NetworkArch):
    k, lk = arch.kernel, arch.leak
    enc = []
    c = 1
    for ch in arch.enc_conv:
        enc += [Conv(c, ch, k, 2), LeakyRamp(lk)]
        c = ch
    side = arch.G // 2 ** len(arch.enc_conv)
    enc.append(Reshape((side * side * c,)))
    n = side * side * c
    for w in arch.enc_dense:
        enc += [Dense(n, w), LeakyRamp(lk)]
        n = w
    merge = []
    n += arch.n_scalars
    for w in arch.merge_dense:
        merge += [Dense(n, w), LeakyRamp(lk)]
        n = w
    merge.append(Dense(n, arch.latent_dim))
    dec = []
    n = arch.latent_dim
    for w in arch.dec_dense:
        dec += [Dense(n, w), LeakyRamp(lk)]
        n = w
    base = arch.dec_base * arch.dec_base * arch.dec_base_channels
    dec += [Dense(n, base), LeakyRamp(lk), Reshape((arch.dec_base, arch.dec_base, arch.dec_base_channels))]
    c = arch.dec_base_channels
    for ch in arch.dec_conv:
        dec += [Upsample2(), Conv(c, ch, k, 1), LeakyRamp(lk)]
        c = ch
    dec += [Upsample2(), Conv(c, arch.out_channels, k, 1)]
    return enc, merge, dec


class Network:
    """Parameters live in one flat array; each layer gets views into it.

    ``scalar_mean``/``scalar_std`` standardize the machine scalars. The
    ``latent_*`` attributes are filled after training from training-set latents
    and give the tuning box and default starting point.
    """

    def __init__(self, arch: NetworkArch, params: np.ndarray | None = None, dtype=np.float32):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self.enc, self.merge, self.dec = _build_layers(arch)
        self.layers = self.enc + self.merge + self.dec
        self._slices = []
        offset = 0
        for layer in self.layers:
            sl = []
            for shp in layer.shapes():
                size = int(np.prod(shp))
                sl.append((offset, offset + size, shp))
                offset += size
            self._slices.append(sl)
        self.n_params = offset
        if params is None:
            params = np.zeros(offset)
        params = np.asarray(params)
        if params.shape != (offset,):
            raise ShapeError(f"expected {offset} parameters, got {params.shape}")
        self.params = params.astype(self.dtype, copy=True)
        self.scalar_mean = np.zeros(arch.n_scalars)
        self.scalar_std = np.ones(arch.n_scalars)
        self.latent_center = np.zeros(arch.latent_dim)
        self.latent_basis = np.eye(arch.latent_dim)
        self.latent_half = np.ones(arch.latent_dim)

    def views(self, flat: np.ndarray, idx: int) -> list[np.ndarray]:
        return [flat[a:b].reshape(shp) for a, b, shp in self._slices[idx]]

    def astype(self, dtype) -> "Network":
        other = Network(self.arch, self.params, dtype)
        other.copy_stats_from(self)
        return other

    def copy(self) -> "Network":
        return self.astype(self.dtype)

    def copy_stats_from(self, other: "Network") -> None:
        for name in ("scalar_mean", "scalar_std", "latent_center", "latent_basis", "latent_half"):
            setattr(self, name, np.array(getattr(other, name), dtype=np.float64))

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha256(np.ascontiguousarray(self.params).tobytes()).hexdigest()

    # -- forward pieces, each returns (output, caches)

    def _run(self, layers, offset, x, flat):
        caches = []
        for i, layer in enumerate(layers):
            x, c = layer.forward(x, *self.views(flat, offset + i))
            caches.append(c)
        return x, caches

    def _back(self, layers, offset, dy, caches, flat, grad):
        for i in range(len(layers) - 1, -1, -1):
            idx = offset + i
            dy, grads = layers[i].backward(dy, caches[i], *self.views(flat, idx))
            for (a, b, shp), g in zip(self._slices[idx], grads):
                grad[a:b] += g.reshape(-1)
        return dy

    def _prep_inputs(self, images, scalars):
        images = np.asarray(images)
        scalars = np.asarray(scalars, dtype=np.float64)
        G = self.arch.G
        if images.ndim == 2:
            images = images[None]
        if scalars.ndim == 1:
            scalars = scalars[None]
        if images.shape[1:] != (G, G) or scalars.shape[1:] != (self.arch.n_scalars,):
            raise ShapeError(f"expected images (B, {G}, {G}) and scalars (B, {self.arch.n_scalars})")
        if len(images) != len(scalars):
            raise ShapeError("batch sizes differ")
        # images are probability grids; scale so a flat image has unit pixels
        x = (images * (G * G)).astype(self.dtype)[..., None]
        s = ((scalars - self.scalar_mean) / self.scalar_std).astype(self.dtype)
        return x, s

    def _encode(self, x, s, flat):
        n_enc = len(self.enc)
        h, c_enc = self._run(self.enc, 0, x, flat)
        h = np.concatenate([h, s], axis=1)
        z, c_merge = self._run(self.merge, n_enc, h, flat)
        return z, (c_enc, c_merge)

    def _decode(self, z, flat):
        off = len(self.enc) + len(self.merge)
        logits, c_dec = self._run(self.dec, off, z.astype(self.dtype), flat)
        return spatial_softmax(logits), c_dec

    @staticmethod
    def _to_channels(out):
        # NHWC -> (B, C, G, G), renormalized in float64
        y = out.transpose(0, 3, 1, 2).astype(np.float64)
        return y / y.sum(axis=(2, 3), keepdims=True)

    # -- public

    def encode(self, images, scalars) -> np.ndarray:
        x, s = self._prep_inputs(images, scalars)
        z, _ = self._encode(x, s, self.params)
        z = z.astype(np.float64)
        return z[0] if np.ndim(images) == 2 else z

    def decode(self, latent) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float64)
        single = z.ndim == 1
        if single:
            z = z[None]
        if z.shape[1:] != (self.arch.latent_dim,):
            raise ShapeError(f"latent must have length {self.arch.latent_dim}")
        out, _ = self._decode(z, self.params)
        y = self._to_channels(out)
        return y[0] if single else y

    def forward(self, images, scalars) -> np.ndarray:
        x, s = self._prep_inputs(images, scalars)
        z, _ = self._encode(x, s, self.params)
        out, _ = self._decode(z, self.params)
        y = self._to_channels(out)
        return y[0] if np.ndim(images) == 2 else y

    def loss_and_grad(self, images, scalars, targets, flat=None):
        """Mean-over-batch loss and its gradient w.r.t. the flat parameters."""
        flat = self.params if flat is None else flat
        x, s = self._prep_inputs(images, scalars)
        z, (c_enc, c_merge) = self._encode(x, s, flat)
        out, c_dec = self._decode(z, flat)
        tgt = np.asarray(targets, dtype=self.dtype).transpose(0, 2, 3, 1)
        if tgt.shape != out.shape:
            raise ShapeError(f"target shape {targets.shape} does not match network output")
        diff = out - tgt
        B, C = out.shape[0], out.shape[3]
        value = float(np.abs(diff.astype(np.float64)).sum() / (B * C))
        if not np.isfinite(value):
            raise TrainingDivergedError(f"non-finite loss {value}")
        grad = np.zeros_like(flat)
        d_out = np.sign(diff) / (B * C)
        d_logits = spatial_softmax_backward(d_out, out)
        off = len(self.enc) + len(self.merge)
        dz = self._back(self.dec, off, d_logits, c_dec, flat, grad)
        dh = self._back(self.merge, len(self.enc), dz, c_merge, flat, grad)
        n_img = dh.shape[1] - self.arch.n_scalars
        self._back(self.enc, 0, dh[:, :n_img], c_enc, flat, grad)
        return value, grad


def init_network(arch: NetworkArch, seed: int, dtype=np.float32) -> Network:
    """Fan-in scaled normal weights (gain for the leaky ramp), zero biases."""
    net = Network(arch, dtype=np.float64)
    rng = np.random.default_rng(seed)
    flat = np.zeros(net.n_params)
    gain = math.sqrt(2.0 / (1.0 + arch.leak**2))
    for idx, layer in enumerate(net.layers):
        views = net.views(flat, idx)
        if views:
            W = views[0]
            W[...] = rng.standard_normal(W.shape) * gain / math.sqrt(layer.fan_in())
    return Network(arch, flat, dtype)


def loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Sum of absolute differences over pixels, averaged over channels (and batch)."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"{pred.shape} != {target.shape}")
    per_channel = np.abs(pred - target).sum(axis=(-1, -2))
    return float(per_channel.mean())


def gradients(net: Network, batch) -> np.ndarray:
    """Gradient of the mean batch loss; ``batch`` is ``(images, scalars, targets)``."""
    images, scalars, targets = batch
    if len(images) == 0:
        raise ShapeError("empty batch")
    return net.loss_and_grad(images, scalars, targets)[1]


# --- training ---------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "mae"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or not self.learning_rate > 0:
            raise ValueError("batch_size, epochs and learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("moment coefficients must lie in [0, 1)")
        if self.loss != "mae":
            raise ValueError("only the 'mae' loss is supported")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**dict(d))


@dataclass
class Dataset:
    images: np.ndarray  # (n, G, G)
    scalars: np.ndarray  # (n, 7)
    targets: np.ndarray  # (n, n_stations * 15, G, G)
    is_test: np.ndarray  # (n,) bool
    axes: np.ndarray  # (n_stations, 6, 2)
    input_axes: np.ndarray | None = None  # (6, 2)
    params: np.ndarray | None = None  # (n, 7) raw machine parameters
    seeds: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.images)

    def split(self, test: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        m = self.is_test == test
        return self.images[m], self.scalars[m], self.targets[m]


class Adam:
    def __init__(self, n, cfg: TrainConfig, dtype):
        self.cfg = cfg
        self.m = np.zeros(n, dtype=dtype)
        self.v = np.zeros(n, dtype=dtype)
        self.t = 0

    def update(self, params, grad):
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
        mhat = self.m / (1 - c.beta1**self.t)
        vhat = self.v / (1 - c.beta2**self.t)
        params -= (c.learning_rate * mhat / (np.sqrt(vhat) + c.eps)).astype(params.dtype)


def evaluate_loss(net: Network, images, scalars, targets, batch_size: int = 64) -> float:
    if len(images) == 0:
        return float("nan")
    total = 0.0
    for i in range(0, len(images), batch_size):
        pred = net.forward(images[i : i + batch_size], scalars[i : i + batch_size])
        total += loss(pred, targets[i : i + batch_size]) * len(pred)
    return total / len(images)


def fit_scalar_stats(net: Network, scalars: np.ndarray) -> None:
    net.scalar_mean = scalars.mean(axis=0)
    std = scalars.std(axis=0)
    net.scalar_std = np.where(std > 0, std, 1.0)


def fit_latent_box(net: Network, images, scalars, margin: float = 0.1) -> None:
    """Centroid and principal-axis box of the training latents.

    Training latents usually occupy a thin, tilted sheet, so the box is
    aligned with the principal axes of their covariance: a latent is
    ``center + basis @ (half * u)`` with ``u`` in ``[-1, 1]^d``.  Each
    half-width is the largest training extent along that axis, padded by
    ``margin``.
    """
    z = np.concatenate([net.encode(images[i : i + 256], scalars[i : i + 256]) for i in range(0, len(images), 256)])
    center = z.mean(axis=0)
    d = z - center
    _, vecs = np.linalg.eigh(d.T @ d / len(z))
    vecs = vecs[:, ::-1]
    # sign convention: largest component of each axis positive
    vecs = vecs * np.sign(vecs[np.abs(vecs).argmax(axis=0), np.arange(vecs.shape[1])])
    c = d @ vecs
    net.latent_center = center
    net.latent_basis = vecs
    net.latent_half = (1 + margin) * np.maximum(np.abs(c).max(axis=0), 1e-6)


def train(net: Network, dataset: Dataset, cfg: TrainConfig, log=None):
    """Minibatch Adam on the L1 loss. Returns ``(trained_net, history)``.

    ``history`` is a list of dicts with ``epoch``, ``train_loss`` (mean over the
    epoch's batches) and ``test_loss``. Shuffling is seeded by ``cfg.seed``.
    """
    tr_img, tr_sc, tr_tg = dataset.split(False)
    te_img, te_sc, te_tg = dataset.split(True)
    if len(tr_img) == 0:
        raise ValueError("dataset has no training samples")
    net = net.copy()
    fit_scalar_stats(net, tr_sc)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.n_params, cfg, net.dtype)
    history = []
    for epoch in range(cfg.epochs):
        last_good = net.params.copy()
        order = rng.permutation(len(tr_img))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            b = order[i : i + cfg.batch_size]
            try:
                value, grad = net.loss_and_grad(tr_img[b], tr_sc[b], tr_tg[b])
                if not np.all(np.isfinite(grad)):
                    raise TrainingDivergedError("non-finite gradient")
            except TrainingDivergedError as exc:
                good = net.copy()
                good.params = last_good
                raise TrainingDivergedError(str(exc), good, history) from None
            opt.update(net.params, grad)
            losses.append(value * len(b))
        row = {
            "epoch": epoch + 1,
            "train_loss": float(sum(losses) / len(order)),
            "test_loss": evaluate_loss(net, te_img, te_sc, te_tg),
        }
        history.append(row)
        if log:
            log(row)
    fit_latent_box(net, tr_img, tr_sc)
    return net, history
