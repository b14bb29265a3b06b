"""The Domain-Bank network: per-domain encoder fronts, decoder backs and
discriminators around one shared high-level encoder/decoder pair."""

from __future__ import annotations

import contextlib
import hashlib
import json
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from .autodiff import Tensor, log_softmax, reduce_mean, sigmoid, softmax
from .errors import ConfigError, ContractError, DimensionError
from .layers import (Conv2d, ConvBlock, Linear, Module, ResidualBlock, Sequential,
                     activate)

SHARED_ROLES = ("enc_top", "dec_top", "disc_top", "classifier")
DOMAIN_ROLES = ("enc_front", "dec_back", "disc_front", "disc_top", "disc_head")


@dataclass(frozen=True)
class ArchConfig:
    image_channels: int = 3
    image_size: int = 32
    channels: tuple[int, int, int] = (16, 32, 64)
    front_res_blocks: int = 1
    shared_res_blocks: int = 2
    disc_channels: tuple[int, int, int] = (16, 32, 64)
    norm: str = "instance"
    disc_norm: bool = True
    tie_disc_top: bool = False
    num_classes: int = 0
    classifier_hidden: int = 32
    # down/up-sampling stages owned by each domain; the rest join the shared stacks
    private_stages: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "disc_channels", tuple(int(c) for c in self.disc_channels))
        if len(self.channels) != 3 or len(self.disc_channels) != 3:
            raise ConfigError("channels and disc_channels need exactly three entries")
        if self.image_size % 8 or self.image_size < 8:
            raise ConfigError(f"image_size must be a positive multiple of 8, got {self.image_size}")
        if self.norm not in ("instance", "none"):
            raise ConfigError(f"norm must be 'instance' or 'none', got {self.norm!r}")
        if self.shared_res_blocks < 0 or self.front_res_blocks < 0:
            raise ConfigError("residual block counts must be non-negative")
        if self.num_classes < 0:
            raise ConfigError("num_classes must be >= 0")
        if not 1 <= self.private_stages <= 3:
            raise ConfigError(f"private_stages must be 1, 2 or 3, got {self.private_stages}")

    @property
    def latent_channels(self) -> int:
        return self.channels[2]

    @property
    def latent_size(self) -> int:
        return self.image_size // 8

    @property
    def adaptation(self) -> bool:
        return self.num_classes > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["disc_channels"] = list(self.disc_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def micro_arch(**overrides) -> ArchConfig:
    """Smallest useful configuration: 1-channel 8x8 images, a few thousand parameters."""
    base = dict(image_channels=1, image_size=8, channels=(4, 4, 4), front_res_blocks=1,
                shared_res_blocks=1, disc_channels=(4, 4, 4), norm="none")
    base.update(overrides)
    return ArchConfig(**base)


@dataclass
class ImageBatch:
    pixels: Tensor
    domain: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.pixels.shape


@dataclass
class LatentCode:
    mu: Tensor
    z: Tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.z.shape


@dataclass(frozen=True)
class ParamCount:
    shared: int
    per_domain: int
    n: int

    @property
    def total(self) -> int:
        return self.shared + self.n * self.per_domain


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        object.__setattr__(self, "items", [])
        for m in items:
            self.append(m)

    def append(self, m: Module) -> None:
        self._children[str(len(self.items))] = m
        self.items.append(m)

    def __getitem__(self, i: int) -> Module:
        return self.items[i]

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[Module]:
        return iter(self.items)


def _norm(arch: ArchConfig) -> bool:
    return arch.norm == "instance"


def _down_stages(arch: ArchConfig, rng, stages: range) -> list[ConvBlock]:
    widths = (arch.image_channels, *arch.channels)
    return [ConvBlock(widths[i], widths[i + 1], 4, 2, 1, "lrelu", _norm(arch), rng)
            for i in stages]


def _up_stages(arch: ArchConfig, rng, stages: range) -> list[ConvBlock]:
    widths = (*arch.channels[::-1], arch.image_channels)
    return [ConvBlock(widths[i], widths[i + 1], 4, 2, 1, "tanh" if i == 2 else "relu",
                      _norm(arch) and i < 2, rng, transpose=True)
            for i in stages]


def build_encoder_front(arch: ArchConfig, rng) -> Sequential:
    k = arch.private_stages
    layers = _down_stages(arch, rng, range(k))
    width = arch.channels[k - 1]
    layers += [ResidualBlock(width, "lrelu", _norm(arch), rng)
               for _ in range(arch.front_res_blocks)]
    return Sequential(*layers)


def build_encoder_top(arch: ArchConfig, rng) -> Sequential:
    layers = _down_stages(arch, rng, range(arch.private_stages, 3))
    layers += [ResidualBlock(arch.latent_channels, "lrelu", _norm(arch), rng)
               for _ in range(arch.shared_res_blocks)]
    return Sequential(*layers)


def build_decoder_top(arch: ArchConfig, rng) -> Sequential:
    layers = [ResidualBlock(arch.latent_channels, "relu", _norm(arch), rng)
              for _ in range(arch.shared_res_blocks)]
    layers += _up_stages(arch, rng, range(3 - arch.private_stages))
    return Sequential(*layers)


def build_decoder_back(arch: ArchConfig, rng) -> Sequential:
    k = arch.private_stages
    width = arch.channels[k - 1]
    layers = [ResidualBlock(width, "relu", _norm(arch), rng)
              for _ in range(arch.front_res_blocks)]
    layers += _up_stages(arch, rng, range(3 - k, 3))
    return Sequential(*layers)


def build_disc_front(arch: ArchConfig, rng) -> Sequential:
    d0, d1, _ = arch.disc_channels
    return Sequential(
        ConvBlock(arch.image_channels, d0, 4, 2, 1, "lrelu", False, rng),
        ConvBlock(d0, d1, 4, 2, 1, "lrelu", _norm(arch) and arch.disc_norm, rng),
    )


def build_disc_top(arch: ArchConfig, rng) -> Sequential:
    _, d1, d2 = arch.disc_channels
    return Sequential(ConvBlock(d1, d2, 4, 2, 1, "lrelu", _norm(arch) and arch.disc_norm, rng))


class Classifier(Module):
    """Hidden affine layer + softmax over globally pooled discriminator features."""

    def __init__(self, in_features: int, hidden: int, num_classes: int, rng):
        super().__init__()
        self.hidden = Linear(in_features, hidden, rng)
        self.out = Linear(hidden, num_classes, rng)

    def logits(self, feats: Tensor) -> Tensor:
        pooled = reduce_mean(feats, axis=(2, 3))
        return self.out(activate(self.hidden(pooled), "lrelu"))

    def forward(self, feats: Tensor) -> Tensor:
        return softmax(self.logits(feats))

    def log_probs(self, feats: Tensor) -> Tensor:
        return log_softmax(self.logits(feats))


class DomainBank(Module):
    """Everything owned by one domain: E_L, G_L, and its discriminator layers."""

    def __init__(self, arch: ArchConfig, seed: int, index: int):
        super().__init__()
        rng = np.random.default_rng([seed, 1, index])
        self.enc_front = build_encoder_front(arch, rng)
        self.dec_back = build_decoder_back(arch, rng)
        self.disc_front = build_disc_front(arch, rng)
        self.disc_top = None if arch.tie_disc_top else build_disc_top(arch, rng)
        self.disc_head = Conv2d(arch.disc_channels[2], 1, 3, 1, 1, rng)


@dataclass(frozen=True)
class EncoderView:
    front: Module
    top: Module

    def __call__(self, x: Tensor) -> Tensor:
        return self.top(self.front(x))


@dataclass(frozen=True)
class DecoderView:
    top: Module
    back: Module

    def __call__(self, z: Tensor) -> Tensor:
        return self.back(self.top(z))


class DomainBankModel(Module):
    def __init__(self, arch: ArchConfig, n: int, seed: int = 0):
        super().__init__()
        if n < 2:
            raise ConfigError(f"a Domain-Bank model needs at least 2 domains, got {n}")
        object.__setattr__(self, "arch", arch)
        object.__setattr__(self, "seed", int(seed))
        rng = np.random.default_rng([seed, 0])
        self.shared = Module()
        self.shared.enc_top = build_encoder_top(arch, rng)
        self.shared.dec_top = build_decoder_top(arch, rng)
        if arch.tie_disc_top:
            self.shared.disc_top = build_disc_top(arch, rng)
        if arch.adaptation:
            self.shared.classifier = Classifier(arch.disc_channels[2], arch.classifier_hidden,
                                                arch.num_classes, rng)
        self.domains = ModuleList(DomainBank(arch, seed, i) for i in range(n))

    @property
    def n(self) -> int:
        return len(self.domains)

    # views -----------------------------------------------------------------
    def _check_domain(self, a: int) -> None:
        if not 0 <= a < self.n:
            raise ContractError(f"domain {a} not registered (model has {self.n})")

    def encoder(self, a: int) -> EncoderView:
        self._check_domain(a)
        return EncoderView(self.domains[a].enc_front, self.shared.enc_top)

    def decoder(self, b: int) -> DecoderView:
        self._check_domain(b)
        return DecoderView(self.shared.dec_top, self.domains[b].dec_back)

    def disc_top(self, a: int) -> Module:
        self._check_domain(a)
        return self.shared.disc_top if self.arch.tie_disc_top else self.domains[a].disc_top

    def disc_features(self, x: Tensor, a: int) -> Tensor:
        return self.disc_top(a)(self.domains[a].disc_front(x))

    def disc_logits(self, x: Tensor, a: int) -> Tensor:
        return self.domains[a].disc_head(self.disc_features(x, a))

    @property
    def classifier(self) -> Classifier | None:
        return getattr(self.shared, "classifier", None)

    # growth ----------------------------------------------------------------
    def add_domain(self) -> int:
        """Append a freshly initialised bank; its init depends only on (seed, index)."""
        idx = self.n
        self.domains.append(DomainBank(self.arch, self.seed, idx))
        return idx

    # parameter groups ------------------------------------------------------
    def generator_named_params(self) -> list[tuple[str, Tensor]]:
        return [(k, p) for k, p in self.named_parameters() if param_role(k) in
                ("enc_top", "dec_top", "enc_front", "dec_back")]

    def discriminator_named_params(self) -> list[tuple[str, Tensor]]:
        return [(k, p) for k, p in self.named_parameters() if param_role(k) in
                ("disc_top", "disc_front", "disc_head", "classifier")]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}


def param_role(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "shared":
        return parts[1]
    if parts[0] == "domains":
        return parts[2]
    raise ValueError(f"unrecognised parameter name {name!r}")


def param_domain(name: str) -> int | None:
    """Owning domain index, or None for shared parameters."""
    parts = name.split(".")
    return int(parts[1]) if parts[0] == "domains" else None


@contextlib.contextmanager
def frozen(params):
    """Treat ``params`` as constants while building graphs inside the block."""
    params = list(params)
    prev = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, r in zip(params, prev):
            p.requires_grad = r


def build(n: int, arch: ArchConfig | None = None, seed: int = 0) -> DomainBankModel:
    return DomainBankModel(arch or ArchConfig(), n, seed)


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _check_image(model: DomainBankModel, x: ImageBatch) -> None:
    arch = model.arch
    s = x.pixels.shape
    if len(s) != 4 or s[1] != arch.image_channels or s[2] % 8 or s[3] % 8:
        raise DimensionError(
            f"expected (N, {arch.image_channels}, H, W) with H, W multiples of 8, got {s}")


def sample_latent(mu: Tensor, stochastic: bool, rng=None) -> Tensor:
    if not stochastic:
        return mu
    eta = _as_rng(rng).standard_normal(mu.shape, dtype=np.float64).astype(mu.dtype)
    return mu + Tensor(eta)


def encode(model: DomainBankModel, x: ImageBatch, a: int, stochastic: bool = False,
           rng=None) -> LatentCode:
    if x.domain != a:
        raise ContractError(f"batch is tagged domain {x.domain} but encoder {a} was requested")
    _check_image(model, x)
    mu = model.encoder(a)(x.pixels)
    return LatentCode(mu, sample_latent(mu, stochastic, rng))


def decode(model: DomainBankModel, z: LatentCode | Tensor, b: int) -> ImageBatch:
    zt = z.z if isinstance(z, LatentCode) else z
    lc = model.arch.latent_channels
    if zt.ndim != 4 or zt.shape[1] != lc:
        raise DimensionError(f"latent code must be (N, {lc}, h, w), got {zt.shape}")
    return ImageBatch(model.decoder(b)(zt), b)


def translate(model: DomainBankModel, x: ImageBatch, a: int, b: int,
              stochastic: bool = False, rng=None) -> ImageBatch:
    return decode(model, encode(model, x, a, stochastic, rng), b)


def cycle(model: DomainBankModel, x: ImageBatch, a: int, b: int, stochastic: bool = False,
          rng=None) -> ImageBatch:
    if a == b:
        raise ContractError("cycle needs two distinct domains")
    rng = _as_rng(rng) if stochastic else None
    return translate(model, translate(model, x, a, b, stochastic, rng), b, a, stochastic, rng)


def discriminate(model: DomainBankModel, x: ImageBatch | Tensor, a: int) -> Tensor:
    """Patch score map in (0, 1), shape (N, 1, H/8, W/8)."""
    pixels = x.pixels if isinstance(x, ImageBatch) else x
    return sigmoid(model.disc_logits(pixels, a))


def classify(model: DomainBankModel, x: ImageBatch | Tensor, a: int) -> Tensor:
    """Class probabilities from domain ``a``'s discriminator features."""
    if model.classifier is None:
        raise ContractError("model was built without a classification head")
    pixels = x.pixels if isinstance(x, ImageBatch) else x
    return model.classifier(model.disc_features(pixels, a))


def param_count(model: DomainBankModel) -> ParamCount:
    per_domain = {m.num_params() for m in model.domains}
    if len(per_domain) != 1:
        raise ContractError("domain banks differ in size")
    return ParamCount(model.shared.num_params(), per_domain.pop(), model.n)


def count_for(arch: ArchConfig, n: int) -> ParamCount:
    """Parameter breakdown for ``n`` domains without building all ``n`` banks."""
    pc = param_count(DomainBankModel(arch, 2, 0))
    return ParamCount(pc.shared, pc.per_domain, n)


def model_digest(model: DomainBankModel) -> str:
    """SHA-256 over every parameter's bytes in name order."""
    h = hashlib.sha256()
    for k, p in sorted(model.named_parameters()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def params_digest(named: list[tuple[str, Tensor]]) -> str:
    h = hashlib.sha256()
    for k, p in sorted(named, key=lambda kv: kv[0]):
        h.update(k.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


__all__ = [
    "ArchConfig", "ImageBatch", "LatentCode", "ParamCount", "DomainBankModel", "DomainBank",
    "build", "encode", "decode", "translate", "cycle", "discriminate", "classify",
    "param_count", "count_for", "micro_arch", "frozen", "param_role", "param_domain",
    "model_digest", "params_digest", "sample_latent",
]
