"""Oracles and harnesses: Monte-Carlo KL, full-stream gradient checks, toy convergence runs."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor, backward, relative_error
from .data import synthetic_domains
from .errors import ConfigError, DivergenceError
from .losses import (LossWeights, cycle_loss, gan_loss_discriminator, gan_loss_generator,
                     incremental_objective, total_objective, vae_loss)
from .model import (ArchConfig, DomainBankModel, ImageBatch, micro_arch, translate)
from .trainer import FreezeMask, Trainer, TrainConfig

# ---------------------------------------------------------------------------
# KL oracle
# ---------------------------------------------------------------------------


def mc_kl_oracle(mu, n_samples: int = 1_000_000, seed: int = 0,
                 chunk: int = 200_000) -> float:
    """Monte-Carlo KL(N(mu, I) || N(0, I)) as the mean log-density ratio under N(mu, I)."""
    if n_samples < 100_000:
        raise ConfigError("the KL oracle needs at least 1e5 samples")
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64)).ravel()
    rng = np.random.default_rng(seed)
    total, done = 0.0, 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        z = mu + rng.standard_normal((k, mu.size))
        # log N(z; mu, I) - log N(z; 0, I); the normalisers cancel
        log_ratio = 0.5 * np.sum(z * z, axis=1) - 0.5 * np.sum((z - mu) ** 2, axis=1)
        total += float(np.sum(log_ratio))
        done += k
    return total / n_samples


# ---------------------------------------------------------------------------
# full-stream gradient checks on the micro model
# ---------------------------------------------------------------------------

STREAMS = ("vae", "gan_g", "gan_d", "cycle", "total", "incremental")


@dataclass
class StreamCheck:
    stream: str
    dtype: str
    max_rel_error: float
    worst_param: str
    checked: list[str]
    excluded: list[str]
    per_param: dict[str, float] = field(repr=False)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol

    def message(self) -> str:
        return (f"{self.stream} ({self.dtype}): max rel. error {self.max_rel_error:.3e} "
                f"at {self.worst_param} over {len(self.checked)} tensors")


def micro_model(seed: int = 0, n: int = 2, dtype=np.float64, **arch_overrides) -> DomainBankModel:
    model = DomainBankModel(micro_arch(**arch_overrides), n, seed)
    return model.astype(dtype) if dtype != np.float32 else model


def micro_batches(model: DomainBankModel, batch: int = 2, seed: int = 0,
                  dtype=np.float64) -> list[ImageBatch]:
    rng = np.random.default_rng([seed, 5])
    a = model.arch
    shape = (batch, a.image_channels, a.image_size, a.image_size)
    return [ImageBatch(Tensor(rng.uniform(-0.9, 0.9, shape).astype(dtype)), d)
            for d in range(model.n)]


def _stream_fn(stream: str, model: DomainBankModel, batches: list[ImageBatch],
               w: LossWeights, new_domain: int | None) -> tuple[Callable[[], Tensor], str]:
    """Returns (loss closure, parameter group) for ``stream``. Latent noise is fixed."""
    xa, xb = batches[0], batches[1]

    def rng():
        return np.random.default_rng(99)

    if stream == "vae":
        return (lambda: vae_loss(model, xa, 0, w, rng()).g_phase), "g"
    if stream == "cycle":
        return (lambda: cycle_loss(model, xa, 0, 1, w, rng()).g_phase), "g"
    if stream == "gan_g":
        return (lambda: gan_loss_generator(model, translate(model, xa, 0, 1, True, rng()), w)), "g"
    if stream == "gan_d":
        fake = translate(model, xa, 0, 1)
        fake = ImageBatch(Tensor(fake.pixels.data), 1)
        return (lambda: gan_loss_discriminator(model, xb, fake, w)), "d"
    if stream == "total":
        return (lambda: total_objective(model, xa, xb, w, seed=3).g_phase), "g"
    if stream == "incremental":
        c = new_domain
        existing = [j for j in range(model.n) if j != c]
        return (lambda: incremental_objective(model, batches[c], existing, w, seed=3).g_phase), "g"
    raise ConfigError(f"unknown stream {stream!r}; expected one of {STREAMS}")


def full_stream_gradcheck(stream: str, dtype=np.float64, seed: int = 0, h: float = 1e-6,
                          max_entries: int | None = None,
                          weights: LossWeights | None = None) -> StreamCheck:
    """Central differences over every trainable parameter of the micro model.

    In 32-bit mode the analytic gradient comes from a float32 model and the
    numeric one from a float64 copy of the same parameters, since float32
    differences are dominated by rounding. ``max_entries`` caps the entries
    probed per tensor (evenly spaced) for quicker runs.
    """
    w = weights or LossWeights()
    n = 3 if stream == "incremental" else 2
    model = micro_model(seed, n, dtype)
    ref = micro_model(seed, n, np.float64)
    # zero-initialised biases put pre-activations exactly on ReLU kinks, so the
    # check runs at a generic point instead
    jitter = np.random.default_rng([seed, 23])
    for k, p in model.named_parameters():
        if k.endswith(("bias", "beta")):
            p.data = (p.data + jitter.normal(0, 0.1, p.data.shape)).astype(p.dtype)
    for (_, p), (_, q) in zip(model.named_parameters(), ref.named_parameters()):
        q.data = p.data.astype(np.float64)
    new_domain = n - 1 if stream == "incremental" else None

    if new_domain is not None:
        mask = FreezeMask.incremental(model, new_domain)
    else:
        mask = FreezeMask.everything(model)
    group = dict(model.generator_named_params())
    f, kind = _stream_fn(stream, model, micro_batches(model, seed=seed, dtype=dtype), w, new_domain)
    f_ref, _ = _stream_fn(stream, ref, micro_batches(ref, seed=seed), w, new_domain)
    if kind == "d":
        group = dict(model.discriminator_named_params())
    checked = [k for k in group if mask.trainable[k]]
    excluded = sorted(set(dict(model.named_parameters())) - set(checked))

    named = dict(model.named_parameters())
    frozen_names = [k for k in named if not mask.trainable[k]]
    for k in frozen_names:
        named[k].requires_grad = False
    try:
        for p in named.values():
            p.grad = None
        backward(f())
    finally:
        for k in frozen_names:
            named[k].requires_grad = True
    ref_named = dict(ref.named_parameters())
    per_param = {}
    for k in checked:
        analytic = named[k].grad if named[k].grad is not None else np.zeros_like(named[k].data)
        q = ref_named[k]
        flat = q.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.unique(np.linspace(0, flat.size - 1, max_entries).astype(int))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f_ref().data)
            flat[i] = orig - h
            fm = float(f_ref().data)
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * h)
        per_param[k] = relative_error(analytic.reshape(-1)[idx].astype(np.float64), numeric)
    worst = max(per_param, key=per_param.get)
    return StreamCheck(stream, np.dtype(dtype).name, per_param[worst], worst, checked,
                       excluded, per_param)


# ---------------------------------------------------------------------------
# toy convergence scenarios
# ---------------------------------------------------------------------------

SCENARIOS = ("two_domain_shapes", "three_domain_shapes", "adaptation_toy")


def ratio_of_moving_averages(values, window: int = 10) -> float:
    """Mean of the last ``window`` values over the mean of the first ``window``."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        raise ConfigError(f"need at least {window} values, got {v.size}")
    return float(v[-window:].mean() / v[:window].mean())


def shapes_arch(size: int = 32) -> ArchConfig:
    return ArchConfig(image_channels=1, image_size=size)


# each pair only sees budget / C(n, 2) steps, so the scenarios train a little faster
# than the library default
SHAPES_LR = 2e-4


def _shapes_scenario(n: int, budget: int, seed: int, batch_size: int) -> dict:
    datasets = synthetic_domains("shapes", n, 512, 32, seed=seed)
    model = DomainBankModel(shapes_arch(), n, seed)
    trainer = Trainer(model, TrainConfig(iterations=budget, batch_size=batch_size, seed=seed,
                                         lr=SHAPES_LR))
    trainer.run(datasets)
    hist = trainer.history
    pairs = {tuple(map(int, r["pair"].split("-"))) for r in hist}
    ordered = sorted({(a, b) for a, b in pairs} | {(b, a) for a, b in pairs})
    return {
        "steps": len(hist),
        "vae_recon_ratio": ratio_of_moving_averages([r["vae_recon"] for r in hist]),
        "cyc_recon_ratio": ratio_of_moving_averages([r["cyc_recon"] for r in hist]),
        "ordered_pairs": [list(p) for p in ordered],
        "all_ordered_pairs": len(ordered) == n * (n - 1),
        "trainer": trainer,
    }


def _adaptation_scenario(budget: int, seed: int, batch_size: int) -> dict:
    from .adaptation import (AdaptationConfig, build_adaptation_model, evaluate_adaptation,
                             train_adaptation)

    size = 16
    train_sets = synthetic_domains("glyphs", 2, 600, size, seed=seed)
    test_sets = synthetic_domains("glyphs", 2, 300, size, seed=seed + 1000)
    source, target_test = train_sets[0], test_sets[1]
    target_train = train_sets[1].unlabeled()
    # one private stage per domain keeps translations local, which stops the
    # translator from permuting glyph classes
    arch = ArchConfig(image_channels=1, image_size=size, private_stages=1)
    model = build_adaptation_model(2, arch, num_classes=3, seed=seed)
    cfg = AdaptationConfig(source=0, target=1, num_classes=3, train=TrainConfig(
        iterations=budget, batch_size=batch_size, seed=seed, lr=ADAPT_LR,
        weights=LossWeights(lambda0=ADAPT_GAN_WEIGHT, lambda3=0.0, lambda4=0.0),
        classify_translated=True))
    trainer = train_adaptation(model, source, target_train, cfg)
    acc = evaluate_adaptation(model, target_test)
    return {
        "steps": len(trainer.history),
        "source_accuracy": evaluate_adaptation(model, test_sets[0]),
        "target_accuracy": acc,
        "chance": 1 / 3,
        "n_test": len(target_test),
        "target_labels_consumed": 0,
        "trainer": trainer,
    }


ADAPT_LR = 1e-3
ADAPT_GAN_WEIGHT = 1.0


def toy_convergence(scenario: str, budget: int = 500, seed: int = 0,
                    batch_size: int = 16) -> dict:
    """Run one registered scenario; returns JSON-ready metrics (plus the live trainer)."""
    t0 = time.time()
    try:
        if scenario == "two_domain_shapes":
            out = _shapes_scenario(2, budget, seed, batch_size)
        elif scenario == "three_domain_shapes":
            out = _shapes_scenario(3, budget, seed, batch_size)
        elif scenario == "adaptation_toy":
            out = _adaptation_scenario(budget, seed, batch_size)
        else:
            raise ConfigError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    except DivergenceError as exc:
        raise DivergenceError(f"{scenario} diverged: {exc}", step=exc.step,
                              report=exc.report) from exc
    out["scenario"] = scenario
    out["budget"] = budget
    out["seconds"] = round(time.time() - t0, 2)
    return out


def results_document(results: dict[str, dict]) -> str:
    """Machine-readable summary; live objects are dropped."""
    clean = {name: {k: v for k, v in r.items() if k != "trainer"} for name, r in results.items()}
    return json.dumps(clean, indent=2, sort_keys=True)
