"""Command line entry point: train, translate, fuse, incr-add, params, eval-da.

Exit codes: 0 success, 2 validation or user error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .adaptation import (AdaptationConfig, build_adaptation_model, complexity_report,
                         evaluate_adaptation, format_result)
from .autodiff import Tensor, no_grad
from .data import (Dataset, LabeledDataset, idx_dataset, image_grid, load_labeled_png_dirs,
                   load_png_dir, save_png, synthetic_domains, _load_png)
from .errors import ConfigError, DivergenceError, DomainBankError
from .fusion import fusion_sweep
from .model import ArchConfig, DomainBankModel, ImageBatch, params_digest, translate
from .persistence import load_checkpoint
from .trainer import FreezeMask, Trainer, TrainConfig, incremental_train, write_history_csv

logger = logging.getLogger("domainbank")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3


class UsageError(DomainBankError):
    """Bad command line input (unknown domain names and the like)."""


# ---------------------------------------------------------------------------
# config documents
# ---------------------------------------------------------------------------

SOURCE_KINDS = ("synthetic", "png_dir", "png_labeled", "idx")


@dataclass
class DomainSpec:
    name: str
    source: dict


@dataclass
class RunConfig:
    domains: list[DomainSpec]
    arch: ArchConfig
    train: TrainConfig
    out_dir: Path
    seed: int = 0
    adaptation: dict | None = None
    base_dir: Path = field(default=Path("."), repr=False)


def _check_keys(d, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _read_yaml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return doc


def _parse_source(src, where: str, base: Path) -> dict:
    _check_keys(src, ("kind", "path", "labels", "generator", "index", "count", "seed"), where)
    kind = src.get("kind")
    if kind not in SOURCE_KINDS:
        raise ConfigError(f"{where}.kind must be one of {SOURCE_KINDS}, got {kind!r}")
    if kind == "synthetic":
        if src.get("generator") not in ("shapes", "glyphs"):
            raise ConfigError(f"{where}.generator must be 'shapes' or 'glyphs'")
    else:
        if "path" not in src:
            raise ConfigError(f"{where}.path is required for {kind} sources")
        for key in ("path", "labels"):
            if key in src:
                p = (base / src[key]).resolve()
                if not p.exists():
                    raise ConfigError(f"{where}.{key}: path does not exist: {p}")
                src = {**src, key: str(p)}
    return src


def parse_run_config(doc: dict, base_dir: Path = Path("."), seed: int | None = None,
                     out_dir=None) -> RunConfig:
    _check_keys(doc, ("domains", "arch", "train", "out_dir", "seed", "adaptation"), "config")
    domains_doc = doc.get("domains")
    if not isinstance(domains_doc, list) or len(domains_doc) < 2:
        raise ConfigError("config.domains must list at least two domains")
    domains = []
    for i, d in enumerate(domains_doc):
        _check_keys(d, ("name", "source"), f"domains[{i}]")
        if "name" not in d or "source" not in d:
            raise ConfigError(f"domains[{i}] needs a name and a source")
        domains.append(DomainSpec(str(d["name"]), _parse_source(d["source"], f"domains[{i}].source",
                                                                base_dir)))
    names = [d.name for d in domains]
    if len(set(names)) != len(names):
        raise ConfigError(f"domain names must be unique: {names}")
    run_seed = int(doc.get("seed", 0) if seed is None else seed)
    arch = ArchConfig.from_dict(doc.get("arch") or {})
    train_doc = dict(doc.get("train") or {})
    train_doc["seed"] = run_seed
    train = TrainConfig.from_dict(train_doc)
    adaptation = doc.get("adaptation")
    if adaptation is not None:
        _check_keys(adaptation, ("source", "target", "num_classes", "classify_translated"),
                    "adaptation")
        for key in ("source", "target"):
            if adaptation.get(key) not in names:
                raise ConfigError(f"adaptation.{key} must name a domain, one of {names}")
    out = Path(out_dir if out_dir is not None else doc.get("out_dir", "run"))
    if not out.is_absolute():
        out = base_dir / out
    return RunConfig(domains, arch, train, out, run_seed, adaptation, base_dir)


def load_source(src: dict, index: int, arch: ArchConfig, seed: int) -> Dataset:
    kind, size = src["kind"], arch.image_size
    if kind == "synthetic":
        count = int(src.get("count", 512))
        which = int(src.get("index", index))
        sets = synthetic_domains(src["generator"], which + 1, count, size,
                                 int(src.get("seed", seed)))
        ds = sets[which]
    elif kind == "png_dir":
        ds = load_png_dir(src["path"], size)
    elif kind == "png_labeled":
        ds = load_labeled_png_dirs(src["path"], size)
    else:
        ds = idx_dataset(src["path"], index, size, src.get("labels"))
    if ds.image_shape[0] != arch.image_channels:
        raise ConfigError(f"source has {ds.image_shape[0]} channels, arch expects "
                          f"{arch.image_channels}")
    if isinstance(ds, LabeledDataset):
        return LabeledDataset(ds.images, index, ds.name, labels=ds.labels)
    return Dataset(ds.images, index, ds.name)


# ---------------------------------------------------------------------------
# sample grids
# ---------------------------------------------------------------------------

def sample_grid(model: DomainBankModel, datasets) -> np.ndarray:
    """Row a: input from domain a, then its deterministic translation into every domain."""
    rows = []
    with no_grad():
        for a, ds in enumerate(datasets):
            x = ImageBatch(Tensor(ds.images[:1]), a)
            row = [x.pixels.data[0]]
            row += [translate(model, x, a, b).pixels.data[0] for b in range(model.n)]
            rows.append(row)
    return image_grid(rows)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    path = Path(args.config)
    run = parse_run_config(_read_yaml(path), path.parent, args.seed, args.out_dir)
    datasets = [load_source(d.source, i, run.arch, run.seed) for i, d in enumerate(run.domains)]
    names = [d.name for d in run.domains]
    labels = None
    extra = {"domain_sources": [d.source for d in run.domains]}
    if run.adaptation:
        src, tgt = names.index(run.adaptation["source"]), names.index(run.adaptation["target"])
        if not isinstance(datasets[src], LabeledDataset):
            raise ConfigError("the adaptation source domain needs labels")
        model = build_adaptation_model(len(names), run.arch,
                                       int(run.adaptation.get("num_classes", 3)), run.seed)
        labels = {src: datasets[src].labels}
        datasets = [ds.unlabeled() if i != src and isinstance(ds, LabeledDataset) else ds
                    for i, ds in enumerate(datasets)]
        cfg = AdaptationConfig(src, tgt, int(run.adaptation.get("num_classes", 3)),
                               train=replace(run.train, classify_translated=bool(
                                   run.adaptation.get("classify_translated", False))))
        train_cfg = cfg.train
        extra["adaptation"] = {"source": src, "target": tgt}
    else:
        model = DomainBankModel(run.arch, len(names), run.seed)
        train_cfg = run.train
    run.out_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(model, train_cfg)
    trainer.domain_names = names
    trainer.extra_meta = extra

    def on_checkpoint(t: Trainer, ckpt: Path) -> None:
        save_png(run.out_dir / f"samples_{t.step:06d}.png", sample_grid(t.model, datasets))

    trainer.run(datasets, out_dir=run.out_dir, on_checkpoint=on_checkpoint, labels=labels)
    final = trainer.save(run.out_dir / "final.dbk")
    save_png(run.out_dir / "samples_final.png", sample_grid(model, datasets))
    print(f"trained {trainer.step} steps; checkpoint {final}")
    return EXIT_OK


def _domain_index(names: list[str], name: str) -> int:
    if name in names:
        return names.index(name)
    raise UsageError(f"unknown domain {name!r}; known domains: {', '.join(names)}")


def _load_input(path, arch: ArchConfig, domain: int) -> ImageBatch:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"input image not found: {path}")
    from .data import normalize

    arr = normalize(_load_png(path, arch.image_size))
    if arr.shape[0] != arch.image_channels:
        raise ConfigError(f"input has {arr.shape[0]} channels, model expects {arch.image_channels}")
    return ImageBatch(Tensor(arr[None]), domain)


def cmd_translate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    a = _domain_index(ckpt.domain_names, args.from_domain)
    b = _domain_index(ckpt.domain_names, args.to_domain)
    x = _load_input(args.input, model.arch, a)
    with no_grad():
        y = translate(model, x, a, b).pixels.data[0]
    out = Path(args.out)
    save_png(out, y)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    names = ckpt.domain_names
    a = _domain_index(names, args.from_domain)
    b1, b2 = _domain_index(names, args.to1), _domain_index(names, args.to2)
    if b1 == b2:
        raise UsageError("--to1 and --to2 must name different domains")
    x = _load_input(args.input, model.arch, a)
    out_dir = Path(args.out) if args.out else Path(args.out_dir or ".")
    _, path = fusion_sweep(model, x, a, b1, b2, args.steps, out_dir)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_incr_add(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    path = Path(args.new_domain_config)
    doc = _read_yaml(path)
    _check_keys(doc, ("name", "source", "train"), "new domain config")
    if "name" not in doc or "source" not in doc:
        raise ConfigError("new domain config needs a name and a source")
    name = str(doc["name"])
    if name in ckpt.domain_names:
        raise UsageError(f"domain {name!r} already exists in {args.checkpoint}")
    seed = int(ckpt.meta.get("seed", 0) if args.seed is None else args.seed)
    train_doc = dict(doc.get("train") or {})
    train_doc["seed"] = seed
    cfg = TrainConfig.from_dict(train_doc)
    source = _parse_source(doc["source"], "source", path.parent)
    ds = load_source(source, model.n, model.arch, seed)
    before = params_digest(model.named_parameters())
    _, _, trainer = incremental_train(model, ds, cfg)
    frozen = set(trainer.mask.frozen_names())
    after = params_digest([(k, p) for k, p in model.named_parameters() if k in frozen])
    trainer.domain_names = list(ckpt.domain_names) + [name]
    trainer.extra_meta = {k: v for k, v in ckpt.meta.items()
                          if k not in ("step", "seed", "config", "history", "frozen")}
    out = trainer.save(args.out_checkpoint)
    status = "unchanged" if before == after else "CHANGED"
    print(f"frozen-hash {after[:16]} {status} ({len(frozen)} frozen tensors)")
    print(f"wrote {out}")
    return EXIT_OK if status == "unchanged" else EXIT_DIVERGED


def _arch_from(path) -> ArchConfig:
    if path is None:
        return ArchConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"architecture source not found: {p}")
    if p.suffix in (".yaml", ".yml"):
        doc = _read_yaml(p)
        return ArchConfig.from_dict(doc.get("arch") or {})
    return load_checkpoint(p).arch


def cmd_params(args) -> int:
    report = complexity_report(_arch_from(args.source), args.n)
    print(report.table())
    if args.csv:
        Path(args.csv).write_text(report.csv())
    return EXIT_OK


def cmd_eval_da(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    info = ckpt.meta.get("adaptation")
    if info is None or not ckpt.arch.adaptation:
        raise UsageError(f"{args.checkpoint} is not an adaptation checkpoint")
    model = ckpt.build_model()
    target = info["target"] if args.domain is None else _domain_index(ckpt.domain_names,
                                                                        args.domain)
    path = Path(args.testset)
    if path.is_dir():
        if not any(path.iterdir()):
            raise ConfigError(f"test set directory {path} is empty")
        test = load_labeled_png_dirs(path, model.arch.image_size, target)
    else:
        if args.labels is None:
            raise ConfigError("an IDX test set needs --labels")
        test = idx_dataset(path, target, model.arch.image_size, args.labels)
    acc = evaluate_adaptation(model, test, target)
    names = ckpt.domain_names
    print(format_result(f"{names[info['source']]}->{names[target]}", acc, len(test)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="domainbank",
                                     description="Multi-domain image translation engine.")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--out-dir", default=None, help="directory for run outputs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a YAML run config")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate one PNG between domains")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("--from", dest="from_domain", required=True)
    p.add_argument("--to", dest="to_domain", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("fuse", help="sweep a blend of two target decoders")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("--from", dest="from_domain", required=True)
    p.add_argument("--to1", required=True)
    p.add_argument("--to2", required=True)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--out", default=None, help="output directory (default: --out-dir)")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("incr-add", help="add a domain to a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("new_domain_config")
    p.add_argument("out_checkpoint")
    p.set_defaults(func=cmd_incr_add)

    p = sub.add_parser("params", help="bank vs pairwise parameter counts")
    p.add_argument("source", nargs="?", default=None, help="YAML config or checkpoint")
    p.add_argument("--n", type=int, nargs="+", default=[2, 3, 4, 5, 6])
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("eval-da", help="target accuracy of an adaptation checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("testset", help="directory of <label>/*.png or an IDX image file")
    p.add_argument("--labels", default=None, help="IDX label file for an IDX test set")
    p.add_argument("--domain", default=None, help="domain to evaluate (default: target)")
    p.set_defaults(func=cmd_eval_da)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DomainBankError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
