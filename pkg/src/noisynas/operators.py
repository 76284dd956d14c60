"""Candidate operator set for the cell search space.

Seven operators over (B, C, H, W) feature maps, all channel-preserving:
plain separable / dilated convolution blocks, their noise-injecting
variants, 3x3 max/avg pooling (each followed by batch norm), and the
identity (realized as a factorized reduction at stride 2 so reduction
cells stay shape-consistent).

The noise injector adds zero-mean Gaussian noise whose per-channel
standard deviation is predicted from the input's pooled channel means
by a small bottleneck MLP (the phi parameters). Each injection site
surfaces its (mu, sigma) pair so the training objective can apply the
closed-form Gaussian KL penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ParamStore, ShapeError, Tensor

OPERATOR_KINDS = (
    "sep_conv_3x3",
    "dil_conv_3x3",
    "sep_nconv_3x3",
    "dil_nconv_3x3",
    "max_pool_3x3",
    "avg_pool_3x3",
    "identity",
)

PARAMETERLESS_KINDS = ("max_pool_3x3", "avg_pool_3x3", "identity")


@dataclass
class SiteStats:
    """Per-injection-site (mu, sigma) from the most recent forward pass.

    mu holds the pooled channel means of the site input, sigma the
    predicted per-channel noise scale; both are (B, C) tensors still on
    the tape so the KL term can differentiate through them.
    """

    name: str
    mu: Tensor
    sigma: Tensor

    @property
    def channels(self) -> int:
        return self.mu.shape[-1]


def _he(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError("expected (C,H,W) or (B,C,H,W)")


class NoiseInjector:
    """Additive Gaussian noise with input-adaptive per-channel scale.

    sigma = sigmoid(fc2(relu(fc1(spatial_mean(x))))), strictly inside
    (0, 1). Train mode returns x + sigma * eps with eps ~ N(0, I); eval
    mode returns x unchanged (sigma is still computed for logging).
    Freezing caches the eps draw per input shape so repeated forwards
    inside one gradient estimate see identical noise.
    """

    def __init__(self, channels: int, store: ParamStore, name: str,
                 rng_seed: int, reduction: int = 4, init_rng: np.random.Generator | None = None):
        self.channels = channels
        self.name = name
        hidden = max(channels // reduction, 4)
        init = init_rng if init_rng is not None else np.random.default_rng(rng_seed)
        self.fc1_w = store.add("phi", f"{name}.fc1_w", _he(init, (channels, hidden), channels))
        self.fc1_b = store.add("phi", f"{name}.fc1_b", Tensor(np.zeros(hidden)))
        self.fc2_w = store.add("phi", f"{name}.fc2_w",
                               Tensor(init.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, channels))))
        self.fc2_b = store.add("phi", f"{name}.fc2_b", Tensor(np.zeros(channels)))
        self.rng_seed = rng_seed
        self.rng = np.random.default_rng(rng_seed)
        self._freeze_depth = 0
        self._eps_cache: dict[tuple[int, ...], np.ndarray] = {}

    @property
    def frozen(self) -> bool:
        return self._freeze_depth > 0

    def _draw(self, shape: tuple[int, ...]) -> np.ndarray:
        if self.frozen:
            eps = self._eps_cache.get(shape)
            if eps is None:
                eps = self.rng.standard_normal(shape)
                self._eps_cache[shape] = eps
            return eps
        return self.rng.standard_normal(shape)

    def freeze(self) -> None:
        """Re-entrant: only the outermost freeze/thaw pair clears the cache."""
        self._freeze_depth += 1
        if self._freeze_depth == 1:
            self._eps_cache.clear()

    def thaw(self) -> None:
        self._freeze_depth -= 1
        if self._freeze_depth <= 0:
            self._freeze_depth = 0
            self._eps_cache.clear()

    def forward(self, x: Tensor, train: bool) -> tuple[Tensor, SiteStats]:
        x4, squeezed = _as_batched(x)
        b, c, h, w = x4.shape
        if c != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {c}")
        pooled = x4.mean(axis=(2, 3))                      # (B, C)
        hidden = T.relu(pooled @ self.fc1_w + self.fc1_b)
        sigma = T.sigmoid(hidden @ self.fc2_w + self.fc2_b)  # (B, C) in (0, 1)
        stats = SiteStats(self.name, pooled, sigma)
        if not train:
            return x, stats
        eps = Tensor(self._draw((b, c, h, w)))
        out = x4 + sigma.reshape((b, c, 1, 1)) * eps
        if squeezed:
            out = out.reshape((c, h, w))
        return out, stats


class FixedNoiseInjector:
    """Noise with externally fixed mean/std, nothing learned.

    Used by the std-sweep ablation: train mode adds mean + std * eps,
    eval mode is the identity. Emits no SiteStats (there is no sigma to
    penalize, and std may legitimately be zero).
    """

    def __init__(self, channels: int, std: float, mean: float, rng_seed: int):
        self.channels = channels
        self.std = float(std)
        self.mean = float(mean)
        self.rng = np.random.default_rng(rng_seed)

    def forward(self, x: Tensor, train: bool) -> tuple[Tensor, None]:
        if not train or (self.std == 0.0 and self.mean == 0.0):
            return x, None
        noise = self.mean + self.std * self.rng.standard_normal(x.shape)
        return x + Tensor(noise), None


class BatchNorm:
    """Per-channel batch normalization over (B, H, W) with running stats.

    Train mode normalizes by batch statistics and updates the running
    buffers (momentum 0.1); eval mode uses the running buffers. The
    affine scale/shift pair is optional and lives in theta when present.
    """

    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, channels: int, store: ParamStore, name: str, affine: bool):
        self.channels = channels
        self.affine = affine
        self.name = name
        if affine:
            self.gamma = store.add("theta", f"{name}.gamma", Tensor(np.ones(channels)))
            self.beta = store.add("theta", f"{name}.beta", Tensor(np.zeros(channels)))
        else:
            self.gamma = None
            self.beta = None
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        x4, squeezed = _as_batched(x)
        if x4.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels")
        if train:
            mu = x4.mean(axis=(0, 2, 3), keepdims=True)
            var = ((x4 - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
            xhat = (x4 - mu) / T.sqrt(var + self.EPS)
            m = self.MOMENTUM
            self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
            self.running_var = (1 - m) * self.running_var + m * var.data.reshape(-1)
        else:
            rm = self.running_mean.reshape(1, -1, 1, 1)
            rv = self.running_var.reshape(1, -1, 1, 1)
            xhat = (x4 - Tensor(rm)) / Tensor(np.sqrt(rv + self.EPS))
        if self.affine:
            c = self.channels
            xhat = xhat * self.gamma.reshape((1, c, 1, 1)) + self.beta.reshape((1, c, 1, 1))
        return xhat.reshape(x.shape) if squeezed else xhat


def batch_norm_lite(x: Tensor, bn: BatchNorm, train: bool) -> Tensor:
    return bn.forward(x, train)


class _ConvUnit:
    """ReLU -> depthwise kxk -> pointwise 1x1 -> BN, channel preserving."""

    def __init__(self, channels: int, stride: int, dilation: int, store: ParamStore,
                 name: str, rng: np.random.Generator, bn_affine: bool):
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation  # kxk=3x3: keeps extent at stride 1
        self.dw = store.add("theta", f"{name}.dw", _he(rng, (channels, 1, 3, 3), 9))
        self.pw = store.add("theta", f"{name}.pw",
                            _he(rng, (channels, channels, 1, 1), channels))
        self.bn = BatchNorm(channels, store, f"{name}.bn", bn_affine)
        self.channels = channels

    def forward(self, x: Tensor, train: bool) -> Tensor:
        y = T.relu(x)
        y = T.conv2d(y, self.dw, stride=self.stride, dilation=self.dilation,
                     padding=self.padding, groups=self.channels)
        y = T.conv2d(y, self.pw)
        return self.bn.forward(y, train)


class SepConv:
    """Two stacked depthwise-separable 3x3 units; the first carries the stride."""

    KIND = "sep_conv_3x3"

    def __init__(self, channels: int, stride: int, store: ParamStore, name: str,
                 rng: np.random.Generator, bn_affine: bool):
        self.unit1 = _ConvUnit(channels, stride, 1, store, f"{name}.u1", rng, bn_affine)
        self.unit2 = _ConvUnit(channels, 1, 1, store, f"{name}.u2", rng, bn_affine)

    def forward(self, x: Tensor, train: bool) -> tuple[Tensor, list[SiteStats]]:
        return self.unit2.forward(self.unit1.forward(x, train), train), []


class DilConv:
    """Single depthwise-separable unit with dilation 2."""

    KIND = "dil_conv_3x3"

    def __init__(self, channels: int, stride: int, store: ParamStore, name: str,
                 rng: np.random.Generator, bn_affine: bool):
        self.unit = _ConvUnit(channels, stride, 2, store, f"{name}.u", rng, bn_affine)

    def forward(self, x: Tensor, train: bool) -> tuple[Tensor, list[SiteStats]]:
        return self.unit.forward(x, train), []


class SepNConv:
    """SepConv with a noise injection site before each ReLU (two sites)."""

    KIND = "sep_nconv_3x3"

    def __init__(self, channels: int, stride: int, store: ParamStore, name: str,
                 rng: np.random.Generator, bn_affine: bool, noise_seed: int):
        self.inj1 = NoiseInjector(channels, store, f"{name}.inj1", noise_seed, init_rng=rng)
        self.unit1 = _ConvUnit(channels, stride, 1, store, f"{name}.u1", rng, bn_affine)
        self.inj2 = NoiseInjector(channels, store, f"{name}.inj2", noise_seed + 1, init_rng=rng)
        self.unit2 = _ConvUnit(channels, 1, 1, store, f"{name}.u2", rng, bn_affine)

    def forward(self, x: Tensor, train: bool) -> tuple[Tensor, list[SiteStats]]:
        y, s1 = self.inj1.forward(x, train)
        y = self.unit1.forward(y, train)
        y, s2 = self.inj2.forward(y, train)
        y = self.unit2.forward(y, train)
        return y, [s1, s2]

    def injectors(self):
        return [self.inj1, self.inj2]


class DilNConv:
    """DilConv with a noise injection site at its input (one site)."""

    KIND = "dil_nconv_3x3"

    def __init__(self, channels: int, stride: int, store: ParamStore, name: str,
                 rng: np.random.Generator, bn_affine: bool, noise_seed: int):
        self.inj = NoiseInjector(channels, store, f"{name}.inj", noise_seed, init_rng=rng)
        self.unit = _ConvUnit(channels, stride, 2, store, f"{name}.u", rng, bn_affine)

    def forward(self, x: Tensor, train: bool) -> tuple[Tensor, list[SiteStats]]:
        y, s = self.inj.forward(x, train)
        return self.unit.forward(y, train), [s]

    def injectors(self):
        return [self.inj]


class PoolOp:
    """3x3 max or avg pooling followed by BN (stabilizes mixed-edge scale)."""

    def __init__(self, kind: str, channels: int, stride: int, store: ParamStore,
                 name: str, bn_affine: bool):
        self.kind = kind
        self.stride = stride
        self.bn = BatchNorm(channels, store, f"{name}.bn", bn_affine)

    def forward(self, x: Tensor, train: bool) -> tuple[Tensor, list[SiteStats]]:
        y = T.pool2d(self.kind, x, 3, stride=self.stride, padding=1)
        return self.bn.forward(y, train), []


class Identity:
    """Pass-through at stride 1."""

    def forward(self, x: Tensor, train: bool) -> tuple[Tensor, list[SiteStats]]:
        return x, []


class FactorizedReduce:
    """Halve the spatial extent without losing pixel phase information:
    ReLU, then two stride-2 1x1 convs (one on the input, one shifted by
    a pixel), channel-concatenated and batch-normalized."""

    def __init__(self, c_in: int, c_out: int, store: ParamStore, name: str,
                 rng: np.random.Generator, bn_affine: bool):
        if c_out % 2:
            raise ShapeError("factorized reduce needs an even output width")
        half = c_out // 2
        self.conv_a = store.add("theta", f"{name}.conv_a", _he(rng, (half, c_in, 1, 1), c_in))
        self.conv_b = store.add("theta", f"{name}.conv_b", _he(rng, (half, c_in, 1, 1), c_in))
        self.bn = BatchNorm(c_out, store, f"{name}.bn", bn_affine)

    def forward(self, x: Tensor, train: bool) -> tuple[Tensor, list[SiteStats]]:
        x4, squeezed = _as_batched(x)
        y = T.relu(x4)
        h, w = y.shape[2], y.shape[3]
        shifted = T.pad2d(y, (0, 1, 0, 1))[:, :, 1:1 + h, 1:1 + w]
        out = T.concat([T.conv2d(y, self.conv_a, stride=2),
                        T.conv2d(shifted, self.conv_b, stride=2)], axis=1)
        out = self.bn.forward(out, train)
        return (out.reshape(out.shape[1:]) if squeezed else out), []


class ReLUConvBN:
    """ReLU -> 1x1 conv -> BN, for cell input preprocessing."""

    def __init__(self, c_in: int, c_out: int, store: ParamStore, name: str,
                 rng: np.random.Generator, bn_affine: bool):
        self.conv = store.add("theta", f"{name}.conv", _he(rng, (c_out, c_in, 1, 1), c_in))
        self.bn = BatchNorm(c_out, store, f"{name}.bn", bn_affine)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        return self.bn.forward(T.conv2d(T.relu(x), self.conv), train)


def make_operator(kind: str, channels: int, stride: int, store: ParamStore,
                  name: str, rng: np.random.Generator, bn_affine: bool,
                  noise_seed: int):
    """Instantiate one member of the candidate set. Every kind maps a
    (B, C, H, W) input to (B, C, H/stride, W/stride)."""
    if kind == "sep_conv_3x3":
        return SepConv(channels, stride, store, name, rng, bn_affine)
    if kind == "dil_conv_3x3":
        return DilConv(channels, stride, store, name, rng, bn_affine)
    if kind == "sep_nconv_3x3":
        return SepNConv(channels, stride, store, name, rng, bn_affine, noise_seed)
    if kind == "dil_nconv_3x3":
        return DilNConv(channels, stride, store, name, rng, bn_affine, noise_seed)
    if kind == "max_pool_3x3":
        return PoolOp("max", channels, stride, store, name, bn_affine)
    if kind == "avg_pool_3x3":
        return PoolOp("avg", channels, stride, store, name, bn_affine)
    if kind == "identity":
        if stride == 1:
            return Identity()
        return FactorizedReduce(channels, channels, store, name, rng, bn_affine)
    raise ValueError(f"unknown operator kind {kind!r}")


def apply_operator(op, x: Tensor, train: bool) -> tuple[Tensor, list[SiteStats]]:
    """Uniform call surface: (output, injection-site stats)."""
    return op.forward(x, train)


def collect_injectors(op) -> list[NoiseInjector]:
    if hasattr(op, "injectors"):
        return op.injectors()
    return []
