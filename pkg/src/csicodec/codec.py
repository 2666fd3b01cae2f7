"""Convolutional CSI codec: feature encoder, quantiser, feature decoder with
residual blocks, and the joint multi-user decoder with summation fusion.

Tensors follow ``(N, C, H, W)`` with ``H`` indexing subcarriers and ``W``
antennas. A complex channel matrix enters as two real planes.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rangecoder
from .autograd import BatchNorm2d, Conv2d, ConvTranspose2d, Module, PReLU, Tensor
from .autograd import functional as F
from .entropy import FactorizedDensity
from .rangecoder import Bitstream, PmfTable


@dataclass
class CodecConfig:
    base_channels: int = 32
    latent_channels: int | None = None  # defaults to base_channels
    kernel_sizes: tuple[int, int, int] = (9, 5, 5)
    down_factors: tuple[int, int, int] = (4, 2, 2)
    n_residual_blocks: int = 2
    residual_kernel: int = 3
    upsample_mode: str = "nearest"  # or "transposed"
    decoder_bn: bool = True
    # "conv-bn-prelu" or "conv-prelu-bn" inside residual blocks
    residual_order: str = "conv-bn-prelu"
    fusion_kernel: int = 3
    # fusion after these residual blocks (0-based)
    fusion_positions: tuple[int, ...] = (0, 1)
    entropy_coding: bool = True
    noise: str = "centered"  # "centered": U[-1/2, 1/2); "unit": U[0, 1)
    density_hidden: tuple[int, ...] = (3, 3, 3)

    def __post_init__(self):
        self.kernel_sizes = tuple(self.kernel_sizes)
        self.down_factors = tuple(self.down_factors)
        self.fusion_positions = tuple(self.fusion_positions)
        self.density_hidden = tuple(self.density_hidden)
        if self.latent_channels is None:
            self.latent_channels = self.base_channels
        if len(self.kernel_sizes) != 3 or len(self.down_factors) != 3:
            raise ValueError("the encoder has exactly three layers")
        if any(f not in (1, 2, 4) for f in self.down_factors):
            raise ValueError("down factors must be 1, 2 or 4")
        if self.upsample_mode not in ("nearest", "transposed"):
            raise ValueError(f"unknown upsample mode {self.upsample_mode!r}")
        if self.residual_order not in ("conv-bn-prelu", "conv-prelu-bn"):
            raise ValueError(f"unknown residual order {self.residual_order!r}")
        if self.noise not in ("centered", "unit"):
            raise ValueError(f"unknown noise model {self.noise!r}")
        if any(not 0 <= p < self.n_residual_blocks for p in self.fusion_positions):
            raise ValueError("fusion positions must index residual blocks")

    @property
    def total_factor(self) -> int:
        return math.prod(self.down_factors)

    @property
    def up_factors(self) -> tuple[int, ...]:
        return tuple(reversed(self.down_factors))

    def latent_shape(self, n_sub: int, n_ant: int) -> tuple[int, int, int]:
        f = self.total_factor
        return self.latent_channels, n_sub // f, n_ant // f

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# complex <-> real planes


def split_complex(h: np.ndarray) -> np.ndarray:
    """``(..., N_c, N_t)`` complex to ``(..., 2, N_c, N_t)`` real."""
    h = np.asarray(h)
    return np.stack([h.real, h.imag], axis=-3).astype(np.float64)


def merge_complex(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-3] != 2:
        raise ValueError(f"expected two real planes on axis -3, got shape {x.shape}")
    return x[..., 0, :, :] + 1j * x[..., 1, :, :]


# ---------------------------------------------------------------------------
# quantiser


def quantize(m: np.ndarray) -> np.ndarray:
    """Round to the nearest integer, ties away from zero."""
    m = np.asarray(m, dtype=np.float64)
    return np.sign(m) * np.floor(np.abs(m) + 0.5)


def quantization_noise(shape, rng: np.random.Generator, mode: str = "centered") -> np.ndarray:
    u = rng.uniform(0.0, 1.0, shape)
    return u - 0.5 if mode == "centered" else u


def add_noise(m, rng: np.random.Generator, mode: str = "centered") -> Tensor:
    m = m if isinstance(m, Tensor) else Tensor(m)
    return F.add(m, quantization_noise(m.shape, rng, mode))


# ---------------------------------------------------------------------------
# networks


class ConvBlock(Module):
    """Conv (optionally strided) followed by BN and PReLU, or a bare conv
    when ``linear``."""

    def __init__(self, c_in, c_out, kernel, stride=1, linear=False, bn=True, rng=None):
        self.conv = Conv2d(c_in, c_out, kernel, stride, rng=rng)
        self.bn = BatchNorm2d(c_out) if (bn and not linear) else None
        self.act = None if linear else PReLU(c_out)

    def forward(self, x):
        x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        if self.act is not None:
            x = self.act(x)
        return x


class UpBlock(Module):
    """Upsampling by ``factor`` then a 'same' convolution; with the
    transposed mode a single strided transposed convolution."""

    def __init__(self, c_in, c_out, kernel, factor, mode, linear=False, bn=True, rng=None):
        self.factor = factor
        self.mode = mode
        if mode == "transposed" and factor > 1:
            self.conv = ConvTranspose2d(c_in, c_out, kernel, factor, rng=rng)
        else:
            self.conv = Conv2d(c_in, c_out, kernel, 1, rng=rng)
        self.bn = BatchNorm2d(c_out) if (bn and not linear) else None
        self.act = None if linear else PReLU(c_out)

    def forward(self, x):
        if self.mode == "nearest" and self.factor > 1:
            # same result as upsample followed by conv, computed per phase
            x = F.upsample_conv2d(x, self.conv.weight, self.conv.bias, self.factor)
        else:
            x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        if self.act is not None:
            x = self.act(x)
        return x


class ResidualBlock(Module):
    def __init__(self, channels, kernel, order="conv-bn-prelu", rng=None):
        self.order = order
        self.conv1 = Conv2d(channels, channels, kernel, rng=rng)
        self.bn1 = BatchNorm2d(channels)
        self.act1 = PReLU(channels)
        self.conv2 = Conv2d(channels, channels, kernel, rng=rng)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, x):
        y = self.conv1(x)
        if self.order == "conv-bn-prelu":
            y = self.act1(self.bn1(y))
        else:
            y = self.bn1(self.act1(y))
        y = self.bn2(self.conv2(y))
        return F.add(x, y)


class FeatureEncoder(Module):
    def __init__(self, config: CodecConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        c, lat = config.base_channels, config.latent_channels
        k, s = config.kernel_sizes, config.down_factors
        self.config = config
        self.layers = [
            ConvBlock(2, c, k[0], s[0], rng=rng),
            ConvBlock(c, c, k[1], s[1], rng=rng),
            ConvBlock(c, lat, k[2], s[2], linear=True, rng=rng),
        ]

    def forward(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        f = self.config.total_factor
        if x.shape[2] % f or x.shape[3] % f:
            raise ValueError(
                f"input extents {x.shape[2:]} must be multiples of {f}; pad the CSI first"
            )
        for layer in self.layers:
            x = layer(x)
        return x


class FeatureDecoder(Module):
    """Mirror of the encoder: up-conv, residual blocks wrapped by an outer
    shortcut, two more up-convs; the last one is linear with two output
    planes."""

    def __init__(self, config: CodecConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        c, lat = config.base_channels, config.latent_channels
        k = config.kernel_sizes
        u = config.up_factors
        mode, bn = config.upsample_mode, config.decoder_bn
        self.config = config
        self.head = UpBlock(lat, c, k[2], u[0], mode, bn=bn, rng=rng)
        self.blocks = [
            ResidualBlock(c, config.residual_kernel, config.residual_order, rng=rng)
            for _ in range(config.n_residual_blocks)
        ]
        self.mid = UpBlock(c, c, k[1], u[1], mode, bn=bn, rng=rng)
        self.tail = UpBlock(c, 2, k[0], u[2], mode, linear=True, rng=rng)

    def finish(self, x, shortcut):
        if self.blocks:
            x = F.add(x, shortcut)
        return self.tail(self.mid(x))

    def forward(self, m):
        m = m if isinstance(m, Tensor) else Tensor(m)
        if m.shape[1] != self.config.latent_channels:
            raise ValueError(f"latent has {m.shape[1]} channels, decoder expects {self.config.latent_channels}")
        x = self.head(m)
        shortcut = x
        for block in self.blocks:
            x = block(x)
        return self.finish(x, shortcut)


class JointFeatureDecoder(Module):
    """K decoder branches; after selected residual blocks each branch adds
    the sum of 'combining' convolutions of the other branches' features."""

    def __init__(self, config: CodecConfig, n_users: int, rng=None, zero_fusion: bool = False):
        if n_users < 1:
            raise ValueError("need at least one user")
        rng = rng or np.random.default_rng(0)
        self.config = config
        self.n_users = n_users
        self.branches = [FeatureDecoder(config, rng=rng) for _ in range(n_users)]
        c = config.base_channels
        # fusion[s][j * K + k] maps user j's features into branch k (j != k)
        self.fusion: list[list[Conv2d]] = []
        for _ in config.fusion_positions:
            stage = []
            for j in range(n_users):
                for k in range(n_users):
                    if j == k:
                        continue
                    conv = Conv2d(c, c, config.fusion_kernel, rng=rng)
                    if zero_fusion:
                        conv.weight.data[...] = 0.0
                    stage.append(conv)
            self.fusion.append(stage)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, branch in enumerate(self.branches):
            out.update(branch.named_parameters(f"{prefix}branches.{i}."))
        for s, stage in enumerate(self.fusion):
            for i, conv in enumerate(stage):
                out.update(conv.named_parameters(f"{prefix}fusion.{s}.{i}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, branch in enumerate(self.branches):
            out.update(branch.named_buffers(f"{prefix}branches.{i}."))
        return out

    def train(self, mode: bool = True):
        self.training = mode
        for b in self.branches:
            b.train(mode)
        return self

    def fusion_conv(self, stage: int, src: int, dst: int) -> Conv2d:
        k = self.n_users
        idx = src * (k - 1) + (dst if dst < src else dst - 1)
        return self.fusion[stage][idx]

    def zero_fusion(self) -> None:
        for stage in self.fusion:
            for conv in stage:
                conv.weight.data[...] = 0.0
                conv.bias.data[...] = 0.0

    def forward(self, latents):
        if len(latents) != self.n_users:
            raise ValueError(f"joint decoder built for {self.n_users} users, got {len(latents)} latents")
        shapes = {tuple(np.shape(m.data if isinstance(m, Tensor) else m)) for m in latents}
        if len(shapes) != 1:
            raise ValueError(f"all latents must share one shape, got {sorted(shapes)}")
        xs = [b.head(m if isinstance(m, Tensor) else Tensor(m)) for b, m in zip(self.branches, latents)]
        shortcuts = list(xs)
        for i in range(self.config.n_residual_blocks):
            xs = [b.blocks[i](x) for b, x in zip(self.branches, xs)]
            if i in self.config.fusion_positions:
                stage = self.config.fusion_positions.index(i)
                fused = []
                for k in range(self.n_users):
                    acc = xs[k]
                    for j in range(self.n_users):
                        if j != k:
                            acc = F.add(acc, self.fusion_conv(stage, j, k)(xs[j]))
                    fused.append(acc)
                xs = fused
        return [b.finish(x, s) for b, x, s in zip(self.branches, xs, shortcuts)]


# ---------------------------------------------------------------------------
# complete models


def _check_shape(h: np.ndarray, config: CodecConfig) -> None:
    f = config.total_factor
    if h.shape[-2] % f or h.shape[-1] % f:
        raise ValueError(f"CSI shape {h.shape[-2:]} is not a multiple of {f}")


@dataclass
class ModelMeta:
    lam: float = 1.0
    lambda_code: int = 0
    input_scale: float = 1.0
    extra: dict = field(default_factory=dict)


class CsiCodec(Module):
    """Single-user codec: encoder, factorized density, decoder."""

    kind = "single"

    def __init__(self, config: CodecConfig | None = None, seed: int = 0, meta: ModelMeta | None = None):
        self.config = config or CodecConfig()
        rng = np.random.default_rng(seed)
        self.encoder = FeatureEncoder(self.config, rng)
        self.density = FactorizedDensity(self.config.latent_channels, self.config.density_hidden, rng=rng)
        self.decoder = FeatureDecoder(self.config, rng)
        self.meta = meta or ModelMeta()
        self._tables: PmfTable | None = None

    n_users = 1

    # -- array-level pipeline ----------------------------------------------
    def encode_features(self, h: np.ndarray) -> np.ndarray:
        """Latent ``M`` for complex CSI of shape ``(N, N_c, N_t)`` (or a
        single matrix), after input scaling."""
        h = np.asarray(h)
        single = h.ndim == 2
        h = h[None] if single else h
        _check_shape(h, self.config)
        m = self.encoder(split_complex(h * self.meta.input_scale)).data
        return m[0] if single else m

    def decode_features(self, m: np.ndarray) -> np.ndarray:
        m = np.asarray(m, dtype=np.float64)
        single = m.ndim == 3
        m = m[None] if single else m
        h = merge_complex(self.decoder(m).data) / self.meta.input_scale
        return h[0] if single else h

    def reconstruct(self, h: np.ndarray) -> np.ndarray:
        """Eval-mode reconstruction through the quantiser, without the coder."""
        m = self.encode_features(h)
        if self.config.entropy_coding:
            m = quantize(m)
        else:
            m = m.astype(np.float32).astype(np.float64)
        return self.decode_features(m)

    # -- coding ------------------------------------------------------------
    def model_id(self) -> int:
        crc = 0
        for name, value in sorted(self.state_dict().items()):
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(value, dtype="<f4").tobytes(), crc)
        return crc & 0xFFFFFFFF

    def freeze(self) -> None:
        """Round every weight to float32 (checkpoint precision), switch to
        eval mode and build the coding tables."""
        for value in self.state_dict_refs():
            value[...] = value.astype(np.float32).astype(np.float64)
        self.eval()
        self._tables = self.density.discretize(model_id=self.model_id()) if self.config.entropy_coding else None

    def state_dict_refs(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()] + list(self.named_buffers().values())

    @property
    def tables(self) -> PmfTable:
        if self._tables is None:
            self.freeze()
        return self._tables

    def compress(self, h: np.ndarray) -> Bitstream:
        m = self.encode_features(h)
        return compress_latent(m, self, self.tables if self.config.entropy_coding else None)

    def decompress(self, stream: Bitstream) -> np.ndarray:
        m = decompress_latent(stream, self, self.tables if self.config.entropy_coding else None)
        return self.decode_features(m)


class MultiUserCsiCodec(Module):
    """K per-user encoders and densities with one joint decoder."""

    kind = "distributed"

    def __init__(self, config: CodecConfig | None = None, n_users: int = 2, seed: int = 0,
                 meta: ModelMeta | None = None, zero_fusion: bool = False):
        self.config = config or CodecConfig()
        self.n_users = n_users
        rng = np.random.default_rng(seed)
        self.encoders = [FeatureEncoder(self.config, rng) for _ in range(n_users)]
        self.densities = [
            FactorizedDensity(self.config.latent_channels, self.config.density_hidden, rng=rng)
            for _ in range(n_users)
        ]
        self.decoder = JointFeatureDecoder(self.config, n_users, rng, zero_fusion=zero_fusion)
        self.meta = meta or ModelMeta()
        self._tables: list[PmfTable] | None = None

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for k, enc in enumerate(self.encoders):
            out.update(enc.named_parameters(f"{prefix}encoders.{k}."))
        for k, den in enumerate(self.densities):
            out.update(den.named_parameters(f"{prefix}densities.{k}."))
        out.update(self.decoder.named_parameters(f"{prefix}decoder."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for k, enc in enumerate(self.encoders):
            out.update(enc.named_buffers(f"{prefix}encoders.{k}."))
        out.update(self.decoder.named_buffers(f"{prefix}decoder."))
        return out

    def train(self, mode: bool = True):
        self.training = mode
        for e in self.encoders:
            e.train(mode)
        self.decoder.train(mode)
        return self

    @classmethod
    def from_single(cls, single: CsiCodec, n_users: int) -> "MultiUserCsiCodec":
        """Every branch, encoder and density copied from a single-user model;
        combining kernels start at zero."""
        model = cls(single.config, n_users, meta=ModelMeta(**asdict(single.meta)))
        state = single.state_dict()
        for k in range(n_users):
            enc = {n[len("encoder."):]: v for n, v in state.items() if n.startswith("encoder.")}
            den = {n[len("density."):]: v for n, v in state.items() if n.startswith("density.")}
            dec = {n[len("decoder."):]: v for n, v in state.items() if n.startswith("decoder.")}
            model.encoders[k].load_state_dict(enc)
            _load_density(model.densities[k], den)
            model.decoder.branches[k].load_state_dict(dec)
        model.decoder.zero_fusion()
        return model

    def encode_features(self, h: np.ndarray, user: int) -> np.ndarray:
        h = np.asarray(h)
        single = h.ndim == 2
        h = h[None] if single else h
        _check_shape(h, self.config)
        m = self.encoders[user](split_complex(h * self.meta.input_scale)).data
        return m[0] if single else m

    def decode_features(self, latents: list[np.ndarray]) -> list[np.ndarray]:
        single = np.ndim(latents[0]) == 3
        ms = [np.asarray(m, dtype=np.float64)[None] if single else np.asarray(m, dtype=np.float64) for m in latents]
        outs = self.decoder(ms)
        hs = [merge_complex(o.data) / self.meta.input_scale for o in outs]
        return [h[0] for h in hs] if single else hs

    def reconstruct(self, hs: list[np.ndarray]) -> list[np.ndarray]:
        ms = [self.encode_features(h, k) for k, h in enumerate(hs)]
        if self.config.entropy_coding:
            ms = [quantize(m) for m in ms]
        else:
            ms = [m.astype(np.float32).astype(np.float64) for m in ms]
        return self.decode_features(ms)

    model_id = CsiCodec.model_id
    state_dict_refs = CsiCodec.state_dict_refs

    def freeze(self) -> None:
        for value in self.state_dict_refs():
            value[...] = value.astype(np.float32).astype(np.float64)
        self.eval()
        mid = self.model_id()
        if self.config.entropy_coding:
            self._tables = [d.discretize(model_id=mid) for d in self.densities]
        else:
            self._tables = [None] * self.n_users

    @property
    def tables(self) -> list[PmfTable]:
        if self._tables is None:
            self.freeze()
        return self._tables

    def compress(self, h: np.ndarray, user: int) -> Bitstream:
        return compress_latent(self.encode_features(h, user), self, self.tables[user])

    def decompress(self, streams: list[Bitstream]) -> list[np.ndarray]:
        ms = [decompress_latent(s, self, t) for s, t in zip(streams, self.tables)]
        return self.decode_features(ms)


def _load_density(density: FactorizedDensity, state: dict[str, np.ndarray]) -> None:
    params = density.named_parameters()
    for name, value in state.items():
        params[name].data[...] = value


def compress_latent(m: np.ndarray, model, tables: PmfTable | None) -> Bitstream:
    """Quantise and range-code one latent ``(C, h, w)``; without entropy
    coding the raw float32 values are stored instead."""
    m = np.asarray(m)
    if model.config.entropy_coding:
        return rangecoder.encode(quantize(m).astype(np.int64), tables, lambda_code=model.meta.lambda_code)
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    return Bitstream(model.model_id(), model.meta.lambda_code, tuple(m.shape), payload, 8 * len(payload))


def decompress_latent(stream: Bitstream, model, tables: PmfTable | None) -> np.ndarray:
    if model.config.entropy_coding:
        return rangecoder.decode(stream, tables).astype(np.float64)
    if stream.model_id != model.model_id():
        raise rangecoder.ModelMismatchError("stream does not belong to this model")
    return np.frombuffer(stream.payload, dtype="<f4").astype(np.float64).reshape(stream.shape)
