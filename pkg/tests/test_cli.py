import csv
import json
import struct

import numpy as np
import pytest
import yaml
from PIL import Image

from domainbank.cli import main
from domainbank.data import denormalize, normalize, save_png, synthetic_domains
from domainbank.model import count_for
from domainbank.persistence import load_checkpoint
from domainbank.adaptation import complexity_report

MICRO_ARCH = {"image_channels": 1, "image_size": 8, "channels": [4, 4, 4],
              "disc_channels": [4, 4, 4], "shared_res_blocks": 1, "norm": "none"}


def write_config(path, iterations=20, arch=None, extra_train=None, domains=None, **top):
    doc = {
        "domains": domains or [
            {"name": "outline", "source": {"kind": "synthetic", "generator": "shapes",
                                           "index": 0, "count": 64}},
            {"name": "filled", "source": {"kind": "synthetic", "generator": "shapes",
                                          "index": 1, "count": 64}},
        ],
        "arch": arch or MICRO_ARCH,
        "train": {"iterations": iterations, "batch_size": 8, "lr": 1e-3,
                  **(extra_train or {})},
        "out_dir": "out",
        "seed": 0,
        **top,
    }
    path.write_text(yaml.safe_dump(doc))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def png_array(path):
    return np.asarray(Image.open(path))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Two-domain 16px shapes model trained long enough to reconstruct well."""
    root = tmp_path_factory.mktemp("trained")
    arch = {"image_channels": 1, "image_size": 16, "channels": [8, 16, 16],
            "disc_channels": [8, 16, 16], "shared_res_blocks": 1, "front_res_blocks": 0}
    weights = {"lambda0": 1.0, "lambda1": 0.002, "lambda3": 0.002, "lambda4": 10.0}
    cfg = write_config(root / "run.yaml", 600, arch,
                       {"lr": 2e-3, "checkpoint_every": 300, "weights": weights},
                       domains=[{"name": n, "source": {"kind": "synthetic", "generator": "shapes",
                                                       "index": i, "count": 128}}
                                for i, n in enumerate(("outline", "filled", "inverted"))][:2])
    assert run("train", cfg) == 0
    ds = synthetic_domains("shapes", 2, 128, 16, seed=0)
    inputs = []
    for k in range(6):
        p = root / f"in{k}.png"
        save_png(p, ds[0].images[k])
        inputs.append(p)
    return root, root / "out" / "final.dbk", inputs


class TestTrain:
    def test_missing_config(self, tmp_path, capsys):
        assert run("train", tmp_path / "nope.yaml") == 2
        assert "nope.yaml" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.yaml", bogus=1)
        assert run("train", cfg) == 2
        assert "bogus" in capsys.readouterr().err

    def test_missing_data_path(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.yaml", domains=[
            {"name": "a", "source": {"kind": "png_dir", "path": "missing"}},
            {"name": "b", "source": {"kind": "synthetic", "generator": "shapes"}}])
        assert run("train", cfg) == 2
        assert "does not exist" in capsys.readouterr().err

    def test_negative_weight(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", extra_train={"weights": {"lambda2": -1}})
        assert run("train", cfg) == 2

    def test_bookkeeping(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", 200, extra_train={"checkpoint_every": 100})
        assert run("train", cfg) == 0
        out = tmp_path / "out"
        with open(out / "loss_history.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 200
        assert len(list(out.glob("ckpt_*.dbk"))) == 2
        assert (out / "samples_000100.png").exists()
        assert png_array(out / "samples_final.png").shape == (16, 24)

    def test_same_seed_same_checkpoint(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", 15)
        assert run("--out-dir", tmp_path / "a", "train", cfg) == 0
        assert run("--out-dir", tmp_path / "b", "train", cfg) == 0
        assert (tmp_path / "a/final.dbk").read_bytes() == (tmp_path / "b/final.dbk").read_bytes()
        assert run("--seed", 5, "--out-dir", tmp_path / "c", "train", cfg) == 0
        assert (tmp_path / "a/final.dbk").read_bytes() != (tmp_path / "c/final.dbk").read_bytes()

    def test_divergence_exit_code(self, tmp_path, monkeypatch, capsys):
        from domainbank.errors import DivergenceError

        def boom(self, *a, **k):
            raise DivergenceError("nan", step=self.step)

        monkeypatch.setattr("domainbank.trainer.Trainer.train_step", boom)
        assert run("train", write_config(tmp_path / "c.yaml", 3)) == 3
        assert "diverged" in capsys.readouterr().err


class TestTranslate:
    def test_reconstruction_of_trained_model(self, trained, tmp_path):
        _, ckpt, inputs = trained
        errs = []
        for p in inputs:
            out = tmp_path / "o.png"
            assert run("translate", ckpt, p, "--from", "outline", "--to", "outline",
                       "--out", out) == 0
            x, y = normalize(png_array(p)), normalize(png_array(out))
            assert x.shape == y.shape
            errs.append(np.abs(x - y).mean())
        assert np.mean(errs) < 0.15

    def test_repeatable(self, trained, tmp_path):
        _, ckpt, inputs = trained
        for name in ("a.png", "b.png"):
            run("translate", ckpt, inputs[0], "--from", "outline", "--to", "filled",
                "--out", tmp_path / name)
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_unknown_domain(self, trained, tmp_path, capsys):
        _, ckpt, inputs = trained
        assert run("translate", ckpt, inputs[0], "--from", "sketch", "--to", "filled",
                   "--out", tmp_path / "x.png") == 2
        err = capsys.readouterr().err
        assert "outline" in err and "filled" in err


class TestFuse:
    def test_endpoints_match_translate(self, trained, tmp_path):
        _, ckpt, inputs = trained
        assert run("fuse", ckpt, inputs[1], "--from", "outline", "--to1", "outline",
                   "--to2", "filled", "--steps", 5, "--out", tmp_path) == 0
        strip = png_array(tmp_path / "fuse_0_to_0-1_5.png")
        assert strip.shape == (16, 80)
        for target, panel in (("filled", strip[:, :16]), ("outline", strip[:, -16:])):
            run("translate", ckpt, inputs[1], "--from", "outline", "--to", target,
                "--out", tmp_path / "t.png")
            np.testing.assert_array_equal(panel, png_array(tmp_path / "t.png"))

    def test_same_targets(self, trained, tmp_path):
        _, ckpt, inputs = trained
        assert run("fuse", ckpt, inputs[0], "--from", "outline", "--to1", "filled",
                   "--to2", "filled", "--out", tmp_path) == 2


class TestIncrAdd:
    def test_adds_a_domain(self, tmp_path, capsys):
        assert run("train", write_config(tmp_path / "c.yaml", 4)) == 0
        base = tmp_path / "out/final.dbk"
        before = base.read_bytes()
        (tmp_path / "new.yaml").write_text(yaml.safe_dump({
            "name": "inverted",
            "source": {"kind": "synthetic", "generator": "shapes", "index": 2, "count": 64},
            "train": {"iterations": 3, "batch_size": 8}}))
        out = tmp_path / "grown.dbk"
        assert run("incr-add", base, tmp_path / "new.yaml", out) == 0
        assert "unchanged" in capsys.readouterr().out
        assert base.read_bytes() == before
        old, new = load_checkpoint(base), load_checkpoint(out)
        assert new.domain_names == ["outline", "filled", "inverted"]
        grown = sum(a.nbytes for a in new.params.values()) - sum(
            a.nbytes for a in old.params.values())
        arch = old.arch
        assert grown == 4 * count_for(arch, 2).per_domain

    def test_duplicate_name(self, tmp_path):
        run("train", write_config(tmp_path / "c.yaml", 2))
        (tmp_path / "new.yaml").write_text(yaml.safe_dump({
            "name": "filled", "source": {"kind": "synthetic", "generator": "shapes"}}))
        assert run("incr-add", tmp_path / "out/final.dbk", tmp_path / "new.yaml",
                   tmp_path / "g.dbk") == 2


class TestParams:
    def test_table(self, capsys, tmp_path):
        assert run("params", "--n", 2, 3, 4, 5, "--csv", tmp_path / "p.csv") == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 1 + 4
        rows = list(csv.DictReader(open(tmp_path / "p.csv")))
        bank = [int(r["bank_params"]) for r in rows]
        assert len(set(np.diff(bank))) == 1
        single = complexity_report(__import__("domainbank").ArchConfig(), [2]).single_translator
        for r in rows:
            n = int(r["n"])
            assert int(r["pairwise_params"]) == n * (n - 1) * single

    def test_from_config(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.yaml")
        assert run("params", cfg, "--n", 2) == 0
        assert capsys.readouterr().out.splitlines()[1].split()[1] == str(
            count_for(__import__("domainbank").ArchConfig(**{**MICRO_ARCH, "channels": (4, 4, 4),
                                                             "disc_channels": (4, 4, 4)}),
                      2).total)


@pytest.fixture(scope="module")
def adapted(tmp_path_factory):
    root = tmp_path_factory.mktemp("da")
    arch = {**MICRO_ARCH, "image_size": 16}
    glyph = lambda i: {"kind": "synthetic", "generator": "glyphs", "index": i, "count": 60}
    cfg = write_config(root / "c.yaml", 10, arch,
                       domains=[{"name": "plain", "source": glyph(0)},
                                {"name": "inverted", "source": glyph(1)}],
                       adaptation={"source": "plain", "target": "inverted",
                                   "num_classes": 3})
    assert run("train", cfg) == 0
    test = synthetic_domains("glyphs", 2, 30, 16, seed=9)[1]
    for k in range(3):
        (root / "test" / str(k)).mkdir(parents=True)
    for i, (img, lab) in enumerate(zip(test.images, test.labels)):
        save_png(root / "test" / str(lab) / f"{i:03d}.png", img)
    return root


class TestEvalDA:
    def test_prints_result_line(self, adapted, capsys):
        assert run("eval-da", adapted / "out/final.dbk", adapted / "test") == 0
        line = capsys.readouterr().out.strip()
        task, acc, n = [s.strip() for s in line.split(",")]
        assert task == "plain->inverted" and n == "30"
        assert 0 <= float(acc) <= 1
        assert run("eval-da", adapted / "out/final.dbk", adapted / "test") == 0
        assert capsys.readouterr().out.strip() == line

    def test_empty_test_dir(self, adapted, tmp_path):
        assert run("eval-da", adapted / "out/final.dbk", tmp_path) == 2

    def test_not_an_adaptation_checkpoint(self, adapted, tmp_path):
        run("train", write_config(tmp_path / "c.yaml", 2))
        assert run("eval-da", tmp_path / "out/final.dbk", adapted / "test") == 2

    def test_idx_test_set(self, adapted, tmp_path, capsys):
        from domainbank.data import write_idx

        test = synthetic_domains("glyphs", 2, 30, 16, seed=9)[1]
        write_idx(tmp_path / "img", denormalize(test.images[:, 0]))
        write_idx(tmp_path / "lab", test.labels)
        assert run("eval-da", adapted / "out/final.dbk", tmp_path / "img",
                   "--labels", tmp_path / "lab") == 0
        assert capsys.readouterr().out.strip().endswith(", 30")


def test_usage_errors_exit_two():
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2
