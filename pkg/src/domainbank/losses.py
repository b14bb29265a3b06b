"""Training objective: VAE, adversarial and cycle-consistency terms.

Reported terms are already multiplied by their weight, so ``total`` is a plain
sum and each term scales linearly with its own lambda.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import Tensor, absolute, clip, log, reduce_mean, reduce_sum, square
from .errors import ConfigError, ContractError
from .model import (DomainBankModel, ImageBatch, _as_rng, discriminate, encode, frozen,
                    sample_latent)

D_CLAMP = 1e-7
TERMS = ("vae_kl", "vae_recon", "gan_d", "gan_g", "cyc_kl", "cyc_recon", "cls")


@dataclass(frozen=True)
class LossWeights:
    lambda0: float = 10.0   # adversarial
    lambda1: float = 0.1    # VAE KL
    lambda2: float = 100.0  # VAE reconstruction
    lambda3: float = 0.1    # cycle KL
    lambda4: float = 100.0  # cycle reconstruction

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(f"{f.name} must be a finite non-negative number, got {v!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class LossReport:
    vae_kl: float = 0.0
    vae_recon: float = 0.0
    gan_d: float = 0.0
    gan_g: float = 0.0
    cyc_kl: float = 0.0
    cyc_recon: float = 0.0
    cls: float = 0.0
    # differentiable scalars for each player of the min-max game
    d_phase: Tensor | None = field(default=None, repr=False, compare=False)
    g_phase: Tensor | None = field(default=None, repr=False, compare=False)

    @property
    def total(self) -> float:
        return sum(getattr(self, k) for k in TERMS)

    def terms(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in TERMS}

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.terms().values())

    def __add__(self, other: "LossReport") -> "LossReport":
        out = LossReport(**{k: getattr(self, k) + getattr(other, k) for k in TERMS})
        out.d_phase = _sum_opt(self.d_phase, other.d_phase)
        out.g_phase = _sum_opt(self.g_phase, other.g_phase)
        return out


def _sum_opt(a: Tensor | None, b: Tensor | None) -> Tensor | None:
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _value(t: Tensor) -> float:
    return float(t.data)


# ---------------------------------------------------------------------------
# elementary terms
# ---------------------------------------------------------------------------

def kl_to_standard_normal(mu: Tensor) -> Tensor:
    """KL(N(mu, I) || N(0, I)) = 0.5 * sum(mu^2), averaged over the batch axis.

    A 1-D ``mu`` is a single sample.
    """
    if not np.all(np.isfinite(mu.data)):
        raise FloatingPointError("kl_to_standard_normal: mu has non-finite entries")
    if mu.ndim <= 1:
        return 0.5 * reduce_sum(square(mu))
    per_sample = reduce_sum(square(mu), axis=tuple(range(1, mu.ndim)))
    return 0.5 * reduce_mean(per_sample)


def l1(x: Tensor, y: Tensor) -> Tensor:
    """Per-pixel mean absolute error, averaged over the batch."""
    return reduce_mean(absolute(x - y))


def _log_clamped(p: Tensor) -> Tensor:
    return log(clip(p, D_CLAMP, 1 - D_CLAMP))


def _detach(x: ImageBatch) -> ImageBatch:
    return ImageBatch(Tensor(x.pixels.data), x.domain)


def gan_loss_discriminator(model: DomainBankModel, real: ImageBatch, fake: ImageBatch,
                           w: LossWeights) -> Tensor:
    """lambda0 * (-mean log D(real) - mean log(1 - D(fake))); fake is detached."""
    if real.domain != fake.domain:
        raise ContractError("real and fake batches must be tagged with the same domain")
    a = real.domain
    d_real = discriminate(model, _detach(real), a)
    d_fake = discriminate(model, _detach(fake), a)
    loss = -reduce_mean(_log_clamped(d_real)) - reduce_mean(_log_clamped(1.0 - d_fake))
    return w.lambda0 * loss


def gan_loss_generator(model: DomainBankModel, fake: ImageBatch, w: LossWeights,
                       saturating: bool = False) -> Tensor:
    """Generator side of the adversarial game, discriminator held constant.

    Non-saturating ``-mean log D(fake)`` by default; ``saturating=True`` gives
    ``mean log(1 - D(fake))``.
    """
    a = fake.domain
    with frozen(p for _, p in model.discriminator_named_params()):
        d_fake = discriminate(model, fake, a)
    if saturating:
        return w.lambda0 * reduce_mean(_log_clamped(1.0 - d_fake))
    return w.lambda0 * -reduce_mean(_log_clamped(d_fake))


def vae_loss(model: DomainBankModel, x: ImageBatch, a: int, w: LossWeights, rng=None,
             stochastic: bool = True) -> LossReport:
    code = encode(model, x, a, stochastic, rng)
    recon = model.decoder(a)(code.z)
    kl = w.lambda1 * kl_to_standard_normal(code.mu)
    rec = w.lambda2 * l1(x.pixels, recon)
    return LossReport(vae_kl=_value(kl), vae_recon=_value(rec), g_phase=kl + rec)


def cycle_loss(model: DomainBankModel, x: ImageBatch, a: int, b: int, w: LossWeights,
               rng=None, stochastic: bool = True) -> LossReport:
    if a == b:
        raise ContractError("cycle loss needs two distinct domains")
    rng = _as_rng(rng)
    code_a = encode(model, x, a, stochastic, rng)
    x_ab = ImageBatch(model.decoder(b)(code_a.z), b)
    code_ab = encode(model, x_ab, b, stochastic, rng)
    x_aba = model.decoder(a)(code_ab.z)
    kl = w.lambda3 * (kl_to_standard_normal(code_a.mu) + kl_to_standard_normal(code_ab.mu))
    rec = w.lambda4 * l1(x.pixels, x_aba)
    return LossReport(cyc_kl=_value(kl), cyc_recon=_value(rec), g_phase=kl + rec)


# ---------------------------------------------------------------------------
# streams for one translation direction
# ---------------------------------------------------------------------------

@dataclass
class DirectionStreams:
    """Generator-side outputs of the a -> b direction before the adversarial term."""

    src: int
    dst: int
    report: LossReport
    translated: ImageBatch          # F_{a->b}(x), graph-connected to E/G
    cycled: ImageBatch | None       # F_{a->b->a}(x) when the cycle stream ran


def direction_streams(model: DomainBankModel, x: ImageBatch, a: int, b: int,
                      w: LossWeights, rng=None, stochastic: bool = True) -> DirectionStreams:
    """VAE and cycle terms for source ``a`` and the translation into ``b``.

    The reconstruction and translation decodes share one pass through the
    shared decoder top, and one latent sample feeds both.
    """
    if a == b:
        raise ContractError("a direction needs two distinct domains")
    rng = _as_rng(rng)
    code_a = encode(model, x, a, stochastic, rng)
    h = model.shared.dec_top(code_a.z)
    kl_a = kl_to_standard_normal(code_a.mu)
    vae_kl = w.lambda1 * kl_a
    recon = model.domains[a].dec_back(h)
    vae_rec = w.lambda2 * l1(x.pixels, recon)
    x_ab = ImageBatch(model.domains[b].dec_back(h), b)
    g = vae_kl + vae_rec
    report = LossReport(vae_kl=_value(vae_kl), vae_recon=_value(vae_rec))
    cycled = None
    if w.lambda3 > 0 or w.lambda4 > 0:
        code_ab = encode(model, x_ab, b, stochastic, rng)
        cycled = ImageBatch(model.decoder(a)(code_ab.z), a)
        cyc_kl = w.lambda3 * (kl_a + kl_to_standard_normal(code_ab.mu))
        cyc_rec = w.lambda4 * l1(x.pixels, cycled.pixels)
        report.cyc_kl = _value(cyc_kl)
        report.cyc_recon = _value(cyc_rec)
        g = g + cyc_kl + cyc_rec
    report.g_phase = g
    return DirectionStreams(a, b, report, x_ab, cycled)


def add_generator_adversarial(streams: DirectionStreams, model: DomainBankModel,
                              w: LossWeights, saturating: bool = False) -> None:
    gan = gan_loss_generator(model, streams.translated, w, saturating)
    streams.report.gan_g += _value(gan)
    streams.report.g_phase = streams.report.g_phase + gan


def _direction_rng(seed, a: int, b: int) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng([0 if seed is None else int(seed), 17, a, b])


def total_objective(model: DomainBankModel, batch_a: ImageBatch, batch_b: ImageBatch,
                    w: LossWeights, seed=0, saturating: bool = False,
                    stochastic: bool = True) -> LossReport:
    """Both directions of one domain pair, split into the two players' scalars.

    ``d_phase`` trains D_a and D_b on real versus translated images (translations
    detached); ``g_phase`` holds every encoder/decoder term with D held fixed.
    """
    a, b = batch_a.domain, batch_b.domain
    if a == b:
        raise ContractError("total_objective needs batches from two distinct domains")
    ab = direction_streams(model, batch_a, a, b, w, _direction_rng(seed, a, b), stochastic)
    ba = direction_streams(model, batch_b, b, a, w, _direction_rng(seed, b, a), stochastic)
    d_loss = (gan_loss_discriminator(model, batch_b, ab.translated, w)
              + gan_loss_discriminator(model, batch_a, ba.translated, w))
    for s in (ab, ba):
        add_generator_adversarial(s, model, w, saturating)
    report = ab.report + ba.report
    report.gan_d = _value(d_loss)
    report.d_phase = d_loss
    return report


def incremental_objective(model: DomainBankModel, batch_c: ImageBatch,
                          existing_domains, w: LossWeights, seed=0,
                          saturating: bool = False, stochastic: bool = True) -> LossReport:
    """Sum over existing domains j of VAE_c + GAN_cj + cyc_cj, using only domain-c images.

    D_c is trained on real c images against cycle outputs c -> j -> c, the only
    translations into c available without samples from other domains.
    """
    c = batch_c.domain
    existing = list(existing_domains)
    if c in existing or not existing:
        raise ContractError("existing domains must be non-empty and exclude the new one")
    report = LossReport()
    d_loss = None
    for j in existing:
        s = direction_streams(model, batch_c, c, j, w, _direction_rng(seed, c, j), stochastic)
        add_generator_adversarial(s, model, w, saturating)
        report = report + s.report
        if s.cycled is not None:
            dj = gan_loss_discriminator(model, batch_c, s.cycled, w)
            d_loss = dj if d_loss is None else d_loss + dj
    if d_loss is not None:
        report.gan_d = _value(d_loss)
        report.d_phase = d_loss
    return report


def classification_loss(log_probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels``."""
    onehot = np.zeros(log_probs.shape, dtype=log_probs.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    return -reduce_mean(reduce_sum(log_probs * Tensor(onehot), axis=1))
