"""Domain adaptation with tied discriminator tops, and bank-vs-pairwise parameter accounting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import no_grad
from .data import Dataset, LabeledDataset
from .errors import ConfigError, ContractError
from .losses import LossWeights
from .model import ArchConfig, DomainBankModel, classify, count_for
from .trainer import Trainer, TrainConfig


@dataclass(frozen=True)
class AdaptationConfig:
    source: int = 0
    target: int = 1
    num_classes: int = 3
    tie_discriminator_top: bool = True
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        weights=LossWeights(lambda3=0.0, lambda4=0.0)))

    def __post_init__(self):
        if self.source == self.target:
            raise ConfigError("source and target domains must differ")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        w = self.train.weights
        if w.lambda3 != 0 or w.lambda4 != 0:
            # the cycle stream is disabled for adaptation
            object.__setattr__(self, "train", replace(
                self.train, weights=replace(w, lambda3=0.0, lambda4=0.0)))


def build_adaptation_model(n: int, arch: ArchConfig, num_classes: int, seed: int = 0,
                           tie_discriminator_top: bool = True) -> DomainBankModel:
    """Tied discriminator tops plus a classifier head on their pooled features.

    Discriminator normalisation is switched off: pooling instance-normalised
    maps leaves the head with almost nothing to classify.
    """
    arch = replace(arch, num_classes=num_classes, tie_disc_top=tie_discriminator_top,
                   disc_norm=False)
    return DomainBankModel(arch, n, seed)


def train_adaptation(model: DomainBankModel, labeled_source: LabeledDataset,
                     unlabeled_target: Dataset, config: AdaptationConfig) -> Trainer:
    """Joint translation (no cycle stream) and source classification on D features."""
    if model.classifier is None:
        raise ContractError("model has no classification head; use build_adaptation_model")
    if isinstance(unlabeled_target, LabeledDataset):
        raise ContractError("target data must be unlabeled; pass dataset.unlabeled()")
    if not isinstance(labeled_source, LabeledDataset):
        raise ContractError("source data must carry labels")
    datasets: list[Dataset | None] = [None] * model.n
    datasets[config.source] = labeled_source
    datasets[config.target] = unlabeled_target
    if model.n != 2:
        raise ConfigError("adaptation trains exactly one source and one target domain")
    trainer = Trainer(model, config.train)
    trainer.run(datasets, labels={config.source: labeled_source.labels})
    return trainer


def predict(model: DomainBankModel, images: np.ndarray, domain: int,
            batch_size: int = 256) -> np.ndarray:
    from .autodiff import Tensor

    preds = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            probs = classify(model, Tensor(images[i : i + batch_size]), domain)
            preds.append(np.argmax(probs.data, axis=1))
    return np.concatenate(preds)


def evaluate_adaptation(model: DomainBankModel, testset: LabeledDataset,
                        domain: int | None = None) -> float:
    """Accuracy of the classification head on ``testset`` through its domain's discriminator."""
    if len(testset) == 0:
        raise ConfigError("empty test set")
    if model.classifier is None:
        raise ContractError("model has no classification head")
    d = testset.domain if domain is None else domain
    preds = predict(model, testset.images, d)
    return float(np.mean(preds == np.asarray(testset.labels)))


def format_result(task: str, accuracy: float, n_test: int) -> str:
    return f"{task}, {accuracy:.4f}, {n_test}"


# ---------------------------------------------------------------------------
# complexity accounting
# ---------------------------------------------------------------------------

def single_translator_params(arch: ArchConfig) -> int:
    """One encoder, one decoder and one discriminator of the same architecture."""
    flat = replace(arch, tie_disc_top=False, num_classes=0)
    m = DomainBankModel(flat, 2, 0)
    bank = m.domains[0]
    return (m.shared.enc_top.num_params() + m.shared.dec_top.num_params()
            + bank.num_params())


@dataclass(frozen=True)
class ComplexityRow:
    n: int
    bank: int
    pairwise: int

    @property
    def ratio(self) -> float:
        return self.pairwise / self.bank


@dataclass
class ComplexityReport:
    shared: int
    per_domain: int
    single_translator: int
    rows: list[ComplexityRow]

    def bank_params(self, n: int) -> int:
        return self.shared + n * self.per_domain

    def pairwise_params(self, n: int) -> int:
        return n * (n - 1) * self.single_translator

    def table(self) -> str:
        header = ("n", "bank_params", "pairwise_params", "ratio")
        body = [(str(r.n), str(r.bank), str(r.pairwise), f"{r.ratio:.3f}") for r in self.rows]
        widths = [max(len(x) for x in col) for col in zip(header, *body)]
        lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in [header, *body]]
        return "\n".join(lines)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "bank_params", "pairwise_params", "ratio"])
        for r in self.rows:
            w.writerow([r.n, r.bank, r.pairwise, f"{r.ratio:.6f}"])
        return buf.getvalue()


def complexity_report(arch: ArchConfig, n_values) -> ComplexityReport:
    n_values = [int(n) for n in n_values]
    if not n_values or min(n_values) < 2:
        raise ConfigError("complexity report needs domain counts >= 2")
    pc = count_for(arch, 2)
    single = single_translator_params(arch)
    rows = [ComplexityRow(n, pc.shared + n * pc.per_domain, n * (n - 1) * single)
            for n in n_values]
    return ComplexityReport(pc.shared, pc.per_domain, single, rows)
