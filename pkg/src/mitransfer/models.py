"""EEGNet, DeepConvNet and MIN2Net builders, their losses and checkpoints.

Models consume batches shaped (N, n_channels, n_samples) and produce class
probabilities.  Layer geometry follows the architectures' original
publications; every knob lives on :class:`ModelSpec`.
"""
from __future__ import annotations

import dataclasses
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import functional as F
from .tensor import Tensor, _DTYPES, maximum, precision_name

KINDS = ("eegnet", "deepconvnet", "min2net")

# Dropout column of the hyperparameter table; MIN2Net has none.
DEFAULT_DROPOUT = {"eegnet": 0.4, "deepconvnet": 0.5, "min2net": None}


class SpecError(ValueError):
    """A ModelSpec that cannot produce a valid network."""


class ContractError(ValueError):
    """Arguments violate a function's documented contract."""


class ConfigError(ValueError):
    """Invalid loss or training configuration."""


class CheckpointError(ValueError):
    pass


@dataclass
class ModelSpec:
    kind: str
    n_channels: int = 16
    n_samples: int = 2000
    n_classes: int = 2
    dropout_rate: float | None = None
    sample_rate: float = 250.0
    seed: int = 0
    precision: str = "single"
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-5
    # EEGNet
    f1: int = 8
    depth: int = 2
    f2: int = 16
    temporal_kernel: int | None = None
    separable_kernel: int = 16
    eegnet_pools: tuple[int, int] = (4, 8)
    depthwise_max_norm: float = 1.0
    dense_max_norm: float = 0.25
    # DeepConvNet
    deep_filters: tuple[int, ...] = (25, 25, 50, 100, 200)
    deep_kernel: int = 10
    deep_pool: int = 3
    # MIN2Net
    latent_dim: int = 64
    min2net_pools: tuple[int, int] | None = None
    min2net_filters: tuple[int, int] | None = None
    min2net_kernels: tuple[int, int] = (64, 32)
    triplet_margin: float = 1.0
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)  # (ce, mse, triplet)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "min2net":
            if self.dropout_rate not in (None, 0.0):
                raise SpecError("MIN2Net has no dropout rate hyperparameter")
            self.dropout_rate = None
        elif self.dropout_rate is None:
            self.dropout_rate = DEFAULT_DROPOUT[self.kind]
        if self.n_channels < 1:
            raise SpecError(f"n_channels must be >= 1, got {self.n_channels}")
        if self.n_samples < 1:
            raise SpecError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.n_classes < 2:
            raise SpecError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.dropout_rate is not None and not 0.0 <= self.dropout_rate < 1.0:
            raise SpecError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.precision not in _DTYPES:
            raise SpecError(f"precision must be 'single' or 'double', got {self.precision!r}")
        for name in ("eegnet_pools", "deep_filters", "min2net_kernels", "loss_weights"):
            setattr(self, name, tuple(getattr(self, name)))
        for name in ("min2net_pools", "min2net_filters"):
            if getattr(self, name) is not None:
                setattr(self, name, tuple(getattr(self, name)))
        if self.temporal_kernel is None:
            self.temporal_kernel = int(round(self.sample_rate / 2))
        if self.kind == "min2net":
            if self.min2net_pools is None:
                self.min2net_pools = default_min2net_pools(self.n_samples)
            if self.min2net_filters is None:
                self.min2net_filters = (self.n_channels, max(1, self.n_channels // 2))

    @property
    def dtype(self):
        return _DTYPES[self.precision]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def default_min2net_pools(n_samples: int) -> tuple[int, int]:
    """Largest equal pool pair P (P <= 10) with P*P dividing ``n_samples``."""
    for p in range(10, 0, -1):
        if n_samples % (p * p) == 0:
            return p, p
    return 1, 1


# ----------------------------------------------------------------------
# layers


class Parameter(Tensor):
    """Trainable tensor, optionally carrying a max-norm constraint.

    ``norm_axes`` are the axes reduced when computing each unit's norm.
    """

    __slots__ = ("max_norm", "norm_axes")

    def __init__(self, data, dtype, name=None, max_norm=None, norm_axes=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)
        self.max_norm = max_norm
        self.norm_axes = norm_axes

    def apply_constraint(self) -> None:
        if self.max_norm is None:
            return
        norms = np.sqrt(np.sum(self.data**2, axis=self.norm_axes, keepdims=True))
        scale = np.minimum(1.0, self.max_norm / np.maximum(norms, 1e-12))
        self.data *= scale.astype(self.dtype)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    if len(shape) == 2:
        fan_in, fan_out = shape
    else:
        receptive = int(np.prod(shape[2:]))
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> list[np.ndarray]:
        return []

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, in_ch, out_ch, kernel, rng, dtype, padding="valid", bias=True, max_norm=None, name="conv"):
        self.kernel_size = tuple(kernel)
        self.padding = padding
        self.weight = Parameter(
            glorot_uniform(rng, (out_ch, in_ch) + self.kernel_size), dtype, f"{name}.weight", max_norm, (1, 2, 3)
        )
        self.bias = Parameter(np.zeros(out_ch), dtype, f"{name}.bias") if bias else None

    def _pad(self):
        if self.padding == "same":
            return F.same_padding(self.kernel_size[0]), F.same_padding(self.kernel_size[1])
        return 0

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, x, training=False):
        out = F.conv2d(x, self.weight, padding=self._pad())
        if self.bias is not None:
            out = out + self.bias.reshape(1, -1, 1, 1)
        return out


class DepthwiseConv2D(Conv2D):
    def __init__(self, channels, depth, kernel, rng, dtype, padding="valid", max_norm=None, name="depthwise"):
        self.kernel_size = tuple(kernel)
        self.padding = padding
        self.depth = depth
        self.weight = Parameter(
            glorot_uniform(rng, (channels * depth, 1) + self.kernel_size), dtype, f"{name}.weight", max_norm, (1, 2, 3)
        )
        self.bias = None

    def __call__(self, x, training=False):
        return F.depthwise_conv2d(x, self.weight, self.depth, padding=self._pad())


class BatchNorm(Layer):
    def __init__(self, channels, dtype, momentum=0.99, eps=1e-5, name="bn"):
        self.gamma = Parameter(np.ones(channels), dtype, f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels), dtype, f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def __call__(self, x, training=False):
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training, self.momentum, self.eps
        )


class Dense(Layer):
    def __init__(self, n_in, n_out, rng, dtype, bias=True, max_norm=None, name="dense"):
        self.weight = Parameter(glorot_uniform(rng, (n_in, n_out)), dtype, f"{name}.weight", max_norm, 0)
        self.bias = Parameter(np.zeros(n_out), dtype, f"{name}.bias") if bias else None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, x, training=False):
        return F.linear(x, self.weight, self.bias)


class Activation(Layer):
    def __init__(self, kind):
        self.kind = kind

    def __call__(self, x, training=False):
        return F.activation(x, self.kind)


class Pool(Layer):
    def __init__(self, kind, window):
        self.kind = kind
        self.window = tuple(window)

    def __call__(self, x, training=False):
        return F.pool2d(x, self.kind, self.window, self.window)


class Upsample(Layer):
    def __init__(self, factor):
        self.factor = tuple(factor)

    def __call__(self, x, training=False):
        return F.upsample(x, self.factor)


class Dropout(Layer):
    def __init__(self, rate, owner):
        self.rate = rate
        self.owner = owner

    def __call__(self, x, training=False):
        return F.dropout(x, self.rate, self.owner.rng, training)


class Reshape(Layer):
    """Reshape everything after the batch axis."""

    def __init__(self, shape):
        self.shape = tuple(shape)

    def __call__(self, x, training=False):
        return x.reshape((x.shape[0],) + self.shape)


class Flatten(Layer):
    def __call__(self, x, training=False):
        return F.flatten(x)


class Softmax(Layer):
    def __call__(self, x, training=False):
        return F.softmax(x, axis=1)


def run_layers(layers: Sequence[Layer], x: Tensor, training: bool) -> Tensor:
    for layer in layers:
        x = layer(x, training)
    return x


# ----------------------------------------------------------------------
# models


class Model:
    """Base class: an ordered set of layers plus loss and inference helpers."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.dtype = spec.dtype
        self.rng = np.random.default_rng(spec.seed + 1)
        self.layers: list[Layer] = []

    # parameter bookkeeping -------------------------------------------
    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self) -> list[np.ndarray]:
        return [b for layer in self.layers for b in layer.buffers()]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def constrained_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.max_norm is not None]

    def apply_constraints(self) -> None:
        for p in self.constrained_parameters():
            p.apply_constraint()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()] + [b.copy() for b in self.buffers()]

    def load_state(self, state: Sequence[np.ndarray]) -> None:
        targets = [p.data for p in self.parameters()] + self.buffers()
        if len(state) != len(targets):
            raise CheckpointError(f"state has {len(state)} arrays, model expects {len(targets)}")
        for dst, src in zip(targets, state):
            if dst.shape != np.shape(src):
                raise CheckpointError(f"array shape {np.shape(src)} does not match {dst.shape}")
            dst[...] = src

    def reseed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    # forward ------------------------------------------------------------
    def _input(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[1:] != (self.spec.n_channels, self.spec.n_samples):
            raise F.DimensionError(
                f"expected batch shaped (N, {self.spec.n_channels}, {self.spec.n_samples}), got {x.shape}"
            )
        return x

    def forward(self, x, training: bool = False) -> Tensor:
        """Class probabilities, shape (N, n_classes)."""
        x = self._input(x)
        return run_layers(self.layers, x.reshape(x.shape[0], 1, *x.shape[1:]), training)

    __call__ = forward

    def loss(self, x, labels, training: bool = True) -> tuple[Tensor, np.ndarray]:
        """Training objective for one batch and the predicted probabilities."""
        probs = self.forward(x, training)
        return cross_entropy(probs, labels), probs.data

    def predict_proba(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = [self.forward(x[i : i + batch_size], training=False).data for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        # argmax returns the first maximum: ties go to the lower class index
        return self.predict_proba(x, batch_size).argmax(axis=1)


class EEGNet(Model):
    pass


class DeepConvNet(Model):
    pass


class MIN2Net(Model):
    """Autoencoder whose latent vector also feeds metric and softmax heads.

    ``forward`` returns ``(reconstruction, latent, probabilities)``.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        self.encoder: list[Layer] = []
        self.decoder: list[Layer] = []
        self.head: list[Layer] = []

    @property
    def layers(self):
        return self.encoder + self.decoder + self.head

    @layers.setter
    def layers(self, value):
        pass

    def encode(self, x, training=False) -> Tensor:
        x = self._input(x)
        return run_layers(self.encoder, x.reshape(x.shape[0], x.shape[1], 1, x.shape[2]), training)

    def forward(self, x, training: bool = False):
        z = self.encode(x, training)
        recon = run_layers(self.decoder, z, training)
        recon = recon.reshape(recon.shape[0], self.spec.n_channels, self.spec.n_samples)
        probs = run_layers(self.head, z, training)
        return recon, z, probs

    __call__ = forward

    def loss_bundle(self, x, labels, training: bool = True) -> tuple["LossBundle", np.ndarray]:
        x = self._input(x)
        recon, z, probs = self.forward(x, training)
        w_ce, w_mse, w_tri = self.spec.loss_weights
        bundle = LossBundle(
            classification=cross_entropy(probs, labels),
            reconstruction=mse(recon, x),
            metric=triplet_loss(z, labels, self.spec.triplet_margin),
            weights=(w_ce, w_mse, w_tri),
        )
        return bundle, probs.data

    def loss(self, x, labels, training: bool = True):
        bundle, probs = self.loss_bundle(x, labels, training)
        return multitask_loss(bundle), probs

    def predict_proba(self, x, batch_size: int = 64):
        out = [self.forward(x[i : i + batch_size], training=False)[2].data for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)


# ----------------------------------------------------------------------
# builders


def _check_kind(spec: ModelSpec, kind: str) -> None:
    if spec.kind != kind:
        raise SpecError(f"spec.kind is {spec.kind!r}, expected {kind!r}")


def build_eegnet(spec: ModelSpec) -> EEGNet:
    _check_kind(spec, "eegnet")
    C, T = spec.n_channels, spec.n_samples
    if T < spec.temporal_kernel:
        raise SpecError(f"n_samples {T} shorter than temporal kernel {spec.temporal_kernel}")
    p1, p2 = spec.eegnet_pools
    width = T // p1 // p2
    if width < 1:
        raise SpecError(f"n_samples {T} too short for pooling {p1}x{p2}")
    model = EEGNet(spec)
    rng = np.random.default_rng(spec.seed)
    dt = spec.dtype
    F1, D, F2 = spec.f1, spec.depth, spec.f2
    bn = dict(momentum=spec.bn_momentum, eps=spec.bn_epsilon)
    model.layers = [
        Conv2D(1, F1, (1, spec.temporal_kernel), rng, dt, padding="same", bias=False, name="temporal"),
        BatchNorm(F1, dt, name="bn1", **bn),
        DepthwiseConv2D(F1, D, (C, 1), rng, dt, max_norm=spec.depthwise_max_norm, name="spatial"),
        BatchNorm(F1 * D, dt, name="bn2", **bn),
        Activation("elu"),
        Pool("average", (1, p1)),
        Dropout(spec.dropout_rate, model),
        DepthwiseConv2D(F1 * D, 1, (1, spec.separable_kernel), rng, dt, padding="same", name="separable.depthwise"),
        Conv2D(F1 * D, F2, (1, 1), rng, dt, bias=False, name="separable.pointwise"),
        BatchNorm(F2, dt, name="bn3", **bn),
        Activation("elu"),
        Pool("average", (1, p2)),
        Dropout(spec.dropout_rate, model),
        Flatten(),
        Dense(F2 * width, spec.n_classes, rng, dt, max_norm=spec.dense_max_norm, name="classifier"),
        Softmax(),
    ]
    return model


def deepconvnet_widths(spec: ModelSpec) -> list[int]:
    """Temporal extent after each of the four conv/pool blocks."""
    width = spec.n_samples
    widths = []
    for _ in range(4):
        width = F.output_extent(width, spec.deep_kernel)
        if width < 1:
            break
        width = F.output_extent(width, spec.deep_pool, spec.deep_pool) if width >= spec.deep_pool else 0
        if width < 1:
            break
        widths.append(width)
    return widths


def build_deepconvnet(spec: ModelSpec) -> DeepConvNet:
    _check_kind(spec, "deepconvnet")
    widths = deepconvnet_widths(spec)
    if len(widths) < 4:
        raise SpecError(f"n_samples {spec.n_samples} too short for four conv/pool blocks")
    model = DeepConvNet(spec)
    rng = np.random.default_rng(spec.seed)
    dt = spec.dtype
    f = spec.deep_filters
    k, p = spec.deep_kernel, spec.deep_pool
    bn = dict(momentum=spec.bn_momentum, eps=spec.bn_epsilon)
    layers: list[Layer] = [
        Conv2D(1, f[0], (1, k), rng, dt, name="temporal"),
        Conv2D(f[0], f[1], (spec.n_channels, 1), rng, dt, name="spatial"),
        BatchNorm(f[1], dt, name="bn1", **bn),
        Activation("elu"),
        Pool("max", (1, p)),
    ]
    for i, (n_in, n_out) in enumerate(zip(f[1:-1], f[2:]), start=2):
        layers += [
            Dropout(spec.dropout_rate, model),
            Conv2D(n_in, n_out, (1, k), rng, dt, name=f"conv{i}"),
            BatchNorm(n_out, dt, name=f"bn{i}", **bn),
            Activation("elu"),
            Pool("max", (1, p)),
        ]
    layers += [
        Dropout(spec.dropout_rate, model),
        Flatten(),
        Dense(f[-1] * widths[-1], spec.n_classes, rng, dt, name="classifier"),
        Softmax(),
    ]
    model.layers = layers
    return model


def build_min2net(spec: ModelSpec) -> MIN2Net:
    _check_kind(spec, "min2net")
    C, T = spec.n_channels, spec.n_samples
    p1, p2 = spec.min2net_pools
    if p1 < 1 or p2 < 1 or T % (p1 * p2) != 0:
        raise SpecError(f"n_samples {T} not divisible by pool product {p1}x{p2}")
    f1, f2 = spec.min2net_filters
    k1, k2 = spec.min2net_kernels
    width = T // (p1 * p2)
    model = MIN2Net(spec)
    rng = np.random.default_rng(spec.seed)
    dt = spec.dtype
    model.encoder = [
        Conv2D(C, f1, (1, k1), rng, dt, padding="same", name="enc.conv1"),
        Activation("elu"),
        Pool("average", (1, p1)),
        Conv2D(f1, f2, (1, k2), rng, dt, padding="same", name="enc.conv2"),
        Activation("elu"),
        Pool("average", (1, p2)),
        Flatten(),
        Dense(f2 * width, spec.latent_dim, rng, dt, name="enc.latent"),
    ]
    model.decoder = [
        Dense(spec.latent_dim, f2 * width, rng, dt, name="dec.dense"),
        Activation("elu"),
        Reshape((f2, 1, width)),
        Upsample((1, p2)),
        Conv2D(f2, f1, (1, k2), rng, dt, padding="same", name="dec.conv1"),
        Activation("elu"),
        Upsample((1, p1)),
        Conv2D(f1, C, (1, k1), rng, dt, padding="same", name="dec.conv2"),
    ]
    model.head = [
        Dense(spec.latent_dim, spec.n_classes, rng, dt, name="classifier"),
        Softmax(),
    ]
    return model


_BUILDERS = {"eegnet": build_eegnet, "deepconvnet": build_deepconvnet, "min2net": build_min2net}


def build_model(spec: ModelSpec) -> Model:
    return _BUILDERS[spec.kind](spec)


# ----------------------------------------------------------------------
# losses


PROB_FLOOR = 1e-12


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    N, K = probs.shape
    if labels.shape != (N,):
        raise ContractError(f"expected {N} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ContractError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    picked = probs[np.arange(N), labels]
    return -(maximum(picked, PROB_FLOOR).log().mean())


def mse(prediction: Tensor, target: Tensor) -> Tensor:
    return ((prediction - target.detach()) ** 2).mean()


def pairwise_distances(z: Tensor) -> Tensor:
    """Euclidean distance matrix between the rows of ``z``."""
    N = z.shape[0]
    diff = z.reshape(N, 1, -1) - z.reshape(1, N, -1)
    return (diff**2).sum(axis=2).sqrt()


def select_semihard_triplets(dist: np.ndarray, labels: np.ndarray):
    """Anchor, positive and negative indices under semi-hard mining.

    For every ordered same-label pair (a, p) with a != p the negative is the
    closest one strictly farther from a than p is; if no such negative
    exists, the farthest negative is used instead.
    """
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    anchors, positives = np.nonzero(same & ~np.eye(len(labels), dtype=bool))
    negatives = np.empty_like(anchors)
    for t, (a, p) in enumerate(zip(anchors, positives)):
        neg = np.nonzero(~same[a])[0]
        d = dist[a, neg]
        outside = d > dist[a, p]
        if outside.any():
            negatives[t] = neg[outside][np.argmin(d[outside])]
        else:
            negatives[t] = neg[np.argmax(d)]
    return anchors, positives, negatives


def triplet_loss(latent: Tensor, labels, margin: float = 1.0) -> Tensor:
    """Semi-hard triplet loss averaged over all anchor-positive pairs."""
    labels = np.asarray(labels)
    zero = Tensor(0.0, dtype=latent.dtype)
    classes = np.unique(labels)
    if len(classes) < 2:
        warnings.warn("triplet_loss: batch holds a single class; no triplets formed", RuntimeWarning)
        return zero
    counts = np.array([(labels == c).sum() for c in classes])
    if counts.max() < 2:
        return zero
    dist = pairwise_distances(latent)
    a, p, n = select_semihard_triplets(dist.data, labels)
    hinge = dist[a, p] - dist[a, n] + margin
    return F.activation(hinge, "relu").mean()


@dataclass
class LossBundle:
    classification: Tensor
    reconstruction: Tensor
    metric: Tensor
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)  # (ce, mse, triplet)

    def values(self) -> dict[str, float]:
        return {
            "classification": self.classification.item(),
            "reconstruction": self.reconstruction.item(),
            "metric": self.metric.item(),
        }


def multitask_loss(bundle: LossBundle) -> Tensor:
    w_ce, w_mse, w_tri = bundle.weights
    if min(bundle.weights) < 0:
        raise ConfigError(f"loss weights must be non-negative, got {bundle.weights}")
    return w_mse * bundle.reconstruction + w_tri * bundle.metric + w_ce * bundle.classification


# ----------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"MICK"
_CKPT_VERSION = 1


def save_checkpoint(model: Model, path) -> None:
    """Write ``MICK`` | u16 version | u32 header length | JSON header | payload.

    The payload holds every parameter then every buffer, flattened in
    declaration order, little-endian in the model's precision.
    """
    header = json.dumps(
        {"kind": model.spec.kind, "spec": model.spec.to_dict(), "precision": precision_name(model.dtype)},
        sort_keys=True,
    ).encode()
    dtype = np.dtype(model.dtype).newbyteorder("<")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<HI", _CKPT_VERSION, len(header)))
        fh.write(header)
        for arr in model.state():
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at offset 4")
    header = json.loads(raw[10 : 10 + hlen])
    spec = ModelSpec.from_dict(header["spec"])
    model = build_model(spec)
    dtype = np.dtype(model.dtype).newbyteorder("<")
    offset = 10 + hlen
    state = []
    for arr in model.state():
        nbytes = arr.size * dtype.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: payload truncated at offset {offset}")
        state.append(np.frombuffer(raw, dtype=dtype, count=arr.size, offset=offset).reshape(arr.shape))
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes at offset {offset}")
    model.load_state(state)
    return model
