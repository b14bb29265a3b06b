"""Linear fusion of two domain decoders into a new output port."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad
from .data import save_png
from .errors import ConfigError
from .layers import Module
from .model import DecoderView, DomainBankModel, ImageBatch, encode


@dataclass
class FusedDecoder:
    """Blended decoder back ``lam * G_b1 + (1 - lam) * G_b2`` behind the shared top."""

    sources: tuple[int, int]
    lam: float
    back: Module
    top: Module

    def __call__(self, z: Tensor) -> Tensor:
        return DecoderView(self.top, self.back)(z)

    def named_parameters(self):
        return self.back.named_parameters()


def blend(p1: np.ndarray, p2: np.ndarray, lam: float) -> np.ndarray:
    # endpoints are copied rather than computed so they are bit-exact
    if lam == 1.0:
        return p1.copy()
    if lam == 0.0:
        return p2.copy()
    out = lam * p1.astype(np.float64) + (1.0 - lam) * p2.astype(np.float64)
    out = out.astype(p1.dtype)
    # float32 rounding can step just outside the source interval
    return np.clip(out, np.minimum(p1, p2), np.maximum(p1, p2))


def fuse_decoders(model: DomainBankModel, b1: int, b2: int, lam: float) -> FusedDecoder:
    if b1 == b2:
        raise ConfigError("fusion needs two distinct target domains")
    if not (0.0 <= lam <= 1.0):
        raise ConfigError(f"fusion weight must lie in [0, 1], got {lam}")
    model._check_domain(b1)
    model._check_domain(b2)
    back1 = model.domains[b1].dec_back
    back2 = dict(model.domains[b2].dec_back.named_parameters())
    fused = copy.deepcopy(back1)
    for (name, p), (_, p1) in zip(fused.named_parameters(), back1.named_parameters()):
        p.data = blend(p1.data, back2[name].data, float(lam))
        p.requires_grad = False
        p.grad = None
    return FusedDecoder((b1, b2), float(lam), fused, model.shared.dec_top)


def translate_fused(model: DomainBankModel, x: ImageBatch, a: int,
                    fused: FusedDecoder) -> ImageBatch:
    """Deterministic encode with domain ``a``, decode through the fused port."""
    with no_grad():
        code = encode(model, x, a, stochastic=False)
        return ImageBatch(fused(code.z), -1)


def fusion_sweep(model: DomainBankModel, x: ImageBatch, a: int, b1: int, b2: int,
                 steps: int, out_dir=None) -> tuple[np.ndarray, Path | None]:
    """Outputs for lam = 0, 1/(steps-1), ..., 1 tiled left to right.

    ``x`` should hold one image (the first is used otherwise). Returns the
    (C, H, steps*W) strip and, when ``out_dir`` is given, the PNG path.
    """
    if steps < 2:
        raise ConfigError(f"a sweep needs at least 2 steps, got {steps}")
    single = ImageBatch(Tensor(x.pixels.data[:1]), x.domain)
    panels = []
    for lam in np.linspace(0.0, 1.0, steps):
        fused = fuse_decoders(model, b1, b2, float(lam))
        panels.append(translate_fused(model, single, a, fused).pixels.data[0])
    strip = np.concatenate(panels, axis=2)
    path = None
    if out_dir is not None:
        path = Path(out_dir) / f"fuse_{a}_to_{b1}-{b2}_{steps}.png"
        save_png(path, strip)
    return strip, path
