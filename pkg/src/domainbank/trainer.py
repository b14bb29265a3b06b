"""Alternating discriminator/generator optimisation, pair scheduling and incremental growth."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Adam, Tensor, backward
from .data import Dataset, batch_indices
from .errors import ConfigError, ContractError, DivergenceError
from .losses import (TERMS, LossReport, LossWeights, add_generator_adversarial,
                     classification_loss, direction_streams, gan_loss_discriminator)
from .model import DomainBankModel, ImageBatch, frozen, param_domain, param_role

logger = logging.getLogger(__name__)

PAIR_POLICIES = ("round-robin", "uniform-random")
MODES = ("full", "incremental")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 500
    batch_size: int = 16
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    pair_schedule: str = "round-robin"
    checkpoint_every: int = 0
    mode: str = "full"
    new_domain: int | None = None
    d_steps: int = 1
    saturating_gan: bool = False
    stochastic: bool = True
    unfreeze_shared: bool = False
    cls_weight: float = 1.0
    classify_translated: bool = False

    def __post_init__(self):
        if not isinstance(self.iterations, int) or self.iterations < 1:
            raise ConfigError(f"iterations must be a positive integer, got {self.iterations!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if self.pair_schedule not in PAIR_POLICIES:
            raise ConfigError(f"pair_schedule must be one of {PAIR_POLICIES}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.checkpoint_every < 0 or self.d_steps < 1:
            raise ConfigError("checkpoint_every must be >= 0 and d_steps >= 1")
        for name in ("lr", "eps", "cls_weight"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights.from_dict(d["weights"])
        return cls(**d)


# ---------------------------------------------------------------------------
# pair scheduling
# ---------------------------------------------------------------------------

def all_pairs(n: int) -> list[tuple[int, int]]:
    return list(itertools.combinations(range(n), 2))


def schedule_pair(n: int, step: int, policy: str = "round-robin", rng=None) -> tuple[int, int]:
    """The unordered domain pair trained at ``step``.

    Round-robin walks (0,1), (0,2), ..., (n-2,n-1) and repeats. Uniform-random
    draws one pair from ``rng`` (a Generator or seed).
    """
    if n < 2:
        raise ConfigError(f"pair scheduling needs n >= 2, got {n}")
    pairs = all_pairs(n)
    if policy == "round-robin":
        return pairs[step % len(pairs)]
    if policy == "uniform-random":
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        return pairs[int(rng.integers(len(pairs)))]
    raise ConfigError(f"unknown pair policy {policy!r}")


# ---------------------------------------------------------------------------
# freezing
# ---------------------------------------------------------------------------

@dataclass
class FreezeMask:
    """Parameter name -> True if trainable."""

    trainable: dict[str, bool]

    @classmethod
    def everything(cls, model: DomainBankModel, trainable: bool = True) -> "FreezeMask":
        return cls({k: trainable for k, _ in model.named_parameters()})

    @classmethod
    def incremental(cls, model: DomainBankModel, new_domain: int,
                    unfreeze_shared: bool = False) -> "FreezeMask":
        """Only the new domain's encoder front, decoder back and discriminator layers train."""
        mask = {}
        for k, _ in model.named_parameters():
            owner = param_domain(k)
            if owner is None:
                mask[k] = unfreeze_shared and param_role(k) in ("enc_top", "dec_top")
            else:
                mask[k] = owner == new_domain
        return cls(mask)

    def frozen_names(self) -> list[str]:
        return sorted(k for k, v in self.trainable.items() if not v)


def apply_freeze(model: DomainBankModel, mask: FreezeMask, optimizers: Sequence[Adam]) -> list[Tensor]:
    """Mark frozen parameters on every optimizer; returns the frozen tensors.

    The mask has to name every parameter of the model.
    """
    named = dict(model.named_parameters())
    missing = set(named) - set(mask.trainable)
    extra = set(mask.trainable) - set(named)
    if missing or extra:
        raise ContractError(
            f"freeze mask does not match the model: missing {sorted(missing)[:3]}, "
            f"unknown {sorted(extra)[:3]}")
    frozen_params = [named[k] for k in mask.frozen_names()]
    ids = {id(p) for p in frozen_params}
    for opt in optimizers:
        opt.frozen = {id(p) for p in opt.params if id(p) in ids}
    return frozen_params


# ---------------------------------------------------------------------------
# the trainer
# ---------------------------------------------------------------------------

HISTORY_COLUMNS = ("step", "pair") + TERMS + ("total",)


def _finite(t: Tensor | None) -> bool:
    return t is None or bool(np.all(np.isfinite(t.data)))


class Trainer:
    """Owns the model, both optimizers, the step counter and the loss history."""

    def __init__(self, model: DomainBankModel, config: TrainConfig,
                 mask: FreezeMask | None = None):
        self.model = model
        self.config = config
        self.step = 0
        self.history: list[dict] = []
        g = model.generator_named_params()
        d = model.discriminator_named_params()
        opt_kw = dict(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
        self.opt_g = Adam([p for _, p in g], names=[k for k, _ in g], **opt_kw)
        self.opt_d = Adam([p for _, p in d], names=[k for k, _ in d], **opt_kw)
        self.mask = mask
        self.domain_names: list[str] | None = None
        self.extra_meta: dict = {}
        self._frozen: list[Tensor] = []
        if mask is not None:
            self._frozen = apply_freeze(model, mask, (self.opt_g, self.opt_d))

    @property
    def optimizers(self) -> dict[str, Adam]:
        return {"g": self.opt_g, "d": self.opt_d}

    # randomness ---------------------------------------------------------------
    def _noise_rng(self, a: int, b: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, 17, self.step, a, b])

    def batch_for(self, dataset: Dataset, domain: int) -> tuple[ImageBatch, np.ndarray]:
        idx = batch_indices(len(dataset), self.config.batch_size,
                            [self.config.seed, 7, domain], self.step)
        batch = dataset.batch(idx)
        batch.domain = domain
        return batch, idx

    def current_pair(self) -> tuple[int, int]:
        rng = np.random.default_rng([self.config.seed, 31, self.step])
        return schedule_pair(self.model.n, self.step, self.config.pair_schedule, rng)

    # one step -----------------------------------------------------------------
    def _check(self, t: Tensor | None, report: LossReport, phase: str) -> None:
        if not _finite(t) or not report.is_finite():
            raise DivergenceError(
                f"non-finite loss in {phase} phase at step {self.step}: {report.terms()}",
                step=self.step, report=report)

    def _guarded(self, fn, *args):
        try:
            return fn(*args)
        except DivergenceError:
            raise
        except FloatingPointError as exc:
            raise DivergenceError(f"non-finite value at step {self.step}: {exc}",
                                  step=self.step) from exc

    def train_step(self, batch_a: ImageBatch, batch_b: ImageBatch, labels_a=None,
                   on_phase: Callable[[str], None] | None = None) -> LossReport:
        """D update on real vs translated images, then E/G update with D held fixed.

        ``labels_a`` (source labels) adds the classification term to the D phase
        when the model has a classifier head. ``on_phase`` is called with "d"
        and "g" after each phase's parameter update.
        """
        return self._guarded(self._train_step, batch_a, batch_b, labels_a, on_phase)

    def _train_step(self, batch_a, batch_b, labels_a, on_phase) -> LossReport:
        a, b = batch_a.domain, batch_b.domain
        if a == b:
            raise ContractError("train_step needs batches from two distinct domains")
        cfg, model, w = self.config, self.model, self.config.weights
        with frozen(self._frozen):
            ab = direction_streams(model, batch_a, a, b, w, self._noise_rng(a, b), cfg.stochastic)
            ba = direction_streams(model, batch_b, b, a, w, self._noise_rng(b, a), cfg.stochastic)
            report = LossReport()
            for _ in range(cfg.d_steps):
                d_loss = (gan_loss_discriminator(model, batch_b, ab.translated, w)
                          + gan_loss_discriminator(model, batch_a, ba.translated, w))
                report.gan_d = float(d_loss.data)
                if labels_a is not None and model.classifier is not None and cfg.cls_weight > 0:
                    cls = self._classification(batch_a, labels_a, ab.translated)
                    report.cls = float(cls.data)
                    d_loss = d_loss + cls
                self._check(d_loss, report, "discriminator")
                self.opt_d.zero_grad()
                backward(d_loss)
                self.opt_d.step(skip_missing=True)
            if on_phase:
                on_phase("d")
            for s in (ab, ba):
                add_generator_adversarial(s, model, w, cfg.saturating_gan)
            g_total = ab.report + ba.report
            g_total.gan_d, g_total.cls = report.gan_d, report.cls
            report = g_total
            self._check(report.g_phase, report, "generator")
            self.opt_g.zero_grad()
            backward(report.g_phase)
            self.opt_g.step(skip_missing=True)
            if on_phase:
                on_phase("g")
        self._record((a, b), report)
        return report

    def _classification(self, batch_a: ImageBatch, labels: np.ndarray,
                        translated: ImageBatch) -> Tensor:
        model = self.model
        feats = model.disc_features(batch_a.pixels, batch_a.domain)
        loss = classification_loss(model.classifier.log_probs(feats), labels)
        if self.config.classify_translated:
            t = Tensor(translated.pixels.data)
            tfeats = model.disc_features(t, translated.domain)
            loss = loss + classification_loss(model.classifier.log_probs(tfeats), labels)
        return self.config.cls_weight * loss

    def incremental_step(self, batch_c: ImageBatch, existing: Sequence[int]) -> LossReport:
        """One step of the single-domain objective for new domain c against frozen banks."""
        return self._guarded(self._incremental_step, batch_c, existing)

    def _incremental_step(self, batch_c: ImageBatch, existing: Sequence[int]) -> LossReport:
        c = batch_c.domain
        cfg, model, w = self.config, self.model, self.config.weights
        with frozen(self._frozen):
            streams = [direction_streams(model, batch_c, c, j, w, self._noise_rng(c, j),
                                         cfg.stochastic) for j in existing]
            d_loss = None
            for s in streams:
                if s.cycled is not None:
                    dj = gan_loss_discriminator(model, batch_c, s.cycled, w)
                    d_loss = dj if d_loss is None else d_loss + dj
            report = LossReport()
            if d_loss is not None:
                report.gan_d = float(d_loss.data)
                self._check(d_loss, report, "discriminator")
                self.opt_d.zero_grad()
                backward(d_loss)
                self.opt_d.step(skip_missing=True)
            total = LossReport()
            for s in streams:
                add_generator_adversarial(s, model, w, cfg.saturating_gan)
                total = total + s.report
            total.gan_d = report.gan_d
            self._check(total.g_phase, total, "generator")
            self.opt_g.zero_grad()
            backward(total.g_phase)
            self.opt_g.step(skip_missing=True)
        self._record((c,), total)
        return total

    def _record(self, pair: tuple[int, ...], report: LossReport) -> None:
        row = {"step": self.step, "pair": "-".join(map(str, pair))}
        row.update(report.terms())
        row["total"] = report.total
        self.history.append(row)
        self.step += 1

    # loops ----------------------------------------------------------------------
    def run(self, datasets: Sequence[Dataset], until: int | None = None,
            out_dir=None, on_checkpoint: Callable[["Trainer", Path], None] | None = None,
            labels: dict[int, np.ndarray] | None = None) -> list[dict]:
        """Train from the current step up to ``until`` (default: config.iterations)."""
        until = self.config.iterations if until is None else until
        if self.config.mode == "full" and len(datasets) != self.model.n:
            raise ConfigError(f"{len(datasets)} datasets for a {self.model.n}-domain model")
        every = self.config.checkpoint_every
        while self.step < until:
            if self.config.mode == "incremental":
                c = self.config.new_domain
                batch, _ = self.batch_for(datasets[c], c)
                self.incremental_step(batch, [j for j in range(self.model.n) if j != c])
            else:
                a, b = self.current_pair()
                if labels and b in labels and a not in labels:
                    a, b = b, a
                batch_a, idx_a = self.batch_for(datasets[a], a)
                batch_b, _ = self.batch_for(datasets[b], b)
                la = None
                if labels is not None and a in labels:
                    la = labels[a][idx_a]
                self.train_step(batch_a, batch_b, la)
            if out_dir is not None and every and self.step % every == 0:
                path = self.save(Path(out_dir) / f"ckpt_{self.step:06d}.dbk")
                if on_checkpoint:
                    on_checkpoint(self, path)
        if out_dir is not None:
            write_history_csv(Path(out_dir) / "loss_history.csv", self.history)
        return self.history

    # persistence ----------------------------------------------------------------
    def meta(self) -> dict:
        meta = dict(self.extra_meta)
        meta.update({"step": self.step, "seed": self.config.seed,
                     "config": self.config.to_dict(), "history": self.history,
                     "frozen": self.mask.frozen_names() if self.mask is not None else []})
        return meta

    def save(self, path) -> Path:
        from .persistence import save_checkpoint

        return save_checkpoint(path, self.model, self.optimizers, self.meta(), self.domain_names)

    @classmethod
    def resume(cls, path, config: TrainConfig | None = None) -> "Trainer":
        """Rebuild model, optimizers, step counter and history from a checkpoint."""
        from .persistence import load_checkpoint

        ckpt = load_checkpoint(path)
        model = ckpt.build_model()
        cfg = config or TrainConfig.from_dict(ckpt.meta["config"])
        mask = None
        if cfg.mode == "incremental":
            mask = FreezeMask.incremental(model, cfg.new_domain, cfg.unfreeze_shared)
        trainer = cls(model, cfg, mask)
        ckpt.restore_optimizers(trainer.optimizers)
        trainer.step = int(ckpt.meta["step"])
        trainer.history = [dict(r) for r in ckpt.meta.get("history", [])]
        trainer.domain_names = list(ckpt.domain_names)
        trainer.extra_meta = {k: v for k, v in ckpt.meta.items()
                              if k not in ("step", "seed", "config", "history", "frozen")}
        return trainer


def write_history_csv(path, history: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in HISTORY_COLUMNS})


def train_step(trainer: Trainer, batch_a: ImageBatch, batch_b: ImageBatch, **kw) -> LossReport:
    return trainer.train_step(batch_a, batch_b, **kw)


def train(model: DomainBankModel, datasets: Sequence[Dataset], config: TrainConfig,
          out_dir=None, **kw) -> tuple[DomainBankModel, list[dict]]:
    if config.mode != "full":
        raise ConfigError("train() runs full mode; use incremental_train for a new domain")
    if len(datasets) != model.n:
        raise ConfigError(f"{len(datasets)} datasets for a {model.n}-domain model")
    trainer = Trainer(model, config)
    history = trainer.run(datasets, out_dir=out_dir, **kw)
    if out_dir is not None:
        trainer.save(Path(out_dir) / "final.dbk")
    return model, history


def incremental_train(model: DomainBankModel, new_dataset: Dataset, config: TrainConfig,
                      out_dir=None, **kw) -> tuple[DomainBankModel, list[dict], Trainer]:
    """Grow the model by one bank and train only that bank on ``new_dataset``."""
    if config.new_domain is not None and config.new_domain < model.n:
        raise ConfigError(f"domain {config.new_domain} already exists")
    c = model.add_domain()
    config = replace(config, mode="incremental", new_domain=c)
    mask = FreezeMask.incremental(model, c, config.unfreeze_shared)
    trainer = Trainer(model, config, mask)
    placeholders: list[Dataset | None] = [None] * model.n
    placeholders[c] = Dataset(new_dataset.images, c, new_dataset.name)
    history = trainer.run(placeholders, out_dir=out_dir, **kw)
    if out_dir is not None:
        trainer.save(Path(out_dir) / "final.dbk")
    return model, history, trainer
