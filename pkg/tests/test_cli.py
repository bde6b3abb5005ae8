"""CLI subcommands, exit-code contract, config file handling."""

import json

import numpy as np
import pytest

from ihvit.cli import main
from ihvit.config import apply_override, default_config_dict, load_run_config
from ihvit.errors import ConfigError
from ihvit.pipeline import Manifest, read_ppm


SMALL_SYNTH = [
    "--set", 'synth.resolutions=[[96,96]]',
    "--set", 'synth.resolution_weights=[1.0]',
    "--set", ('synth.counts={"normal":8,"scratch":2,"missing_char":2,'
              '"pin_defect":2,"uneven_char":2,"glue_blob":2}'),
]
TINY_MODEL = [
    "--set", "model.vit.depth=1",
    "--set", "model.vit.heads=1",
    "--set", "model.vit.dim=15",
    "--set", "model.vit.mlp_hidden=30",
    "--set", "model.resnet.stem_width=8",
    "--set", "model.resnet.stage_blocks=[1,1]",
    "--set", "model.resnet.stage_widths=[16,32]",
    "--set", "train.batch_size=16",
]


def run_gen(tmp_path, seed=7):
    out = tmp_path / "data"
    rc = main(["gen", "--out", str(out), "--seed", str(seed)] + SMALL_SYNTH)
    assert rc == 0
    return out


class TestGen:
    def test_writes_files_and_manifest(self, tmp_path):
        out = run_gen(tmp_path)
        manifest = Manifest.load(out / "manifest.json")
        assert len(manifest.entries) == 18
        assert all((out / e.path).exists() for e in manifest.entries)

    def test_same_seed_identical_trees(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert main(["gen", "--out", str(a), "--seed", "3"] + SMALL_SYNTH) == 0
        assert main(["gen", "--out", str(b), "--seed", "3"] + SMALL_SYNTH) == 0
        ma = Manifest.load(a / "manifest.json")
        for e in ma.entries:
            assert np.array_equal(read_ppm(a / e.path), read_ppm(b / e.path))

    def test_malformed_config_file_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "cfg.json"
        bad.write_text('{"synth": {,}}')
        rc = main(["gen", "--out", str(tmp_path / "x"), "--config", str(bad)])
        assert rc == 2
        err = capsys.readouterr().err
        assert "line" in err and "column" in err

    def test_unknown_config_key_exits_2(self, tmp_path):
        bad = tmp_path / "cfg.json"
        bad.write_text('{"synht": {}}')
        assert main(["gen", "--out", str(tmp_path / "x"), "--config", str(bad)]) == 2


class TestAugmentSplit:
    def test_augment_adds_14_per_defect(self, tmp_path):
        out = run_gen(tmp_path)
        before = len(Manifest.load(out / "manifest.json").entries)
        assert main(["augment", "--manifest", str(out / "manifest.json")]) == 0
        manifest = Manifest.load(out / "manifest.json")
        assert len(manifest.entries) == before + 10 * 14
        assert all((out / e.path).exists() for e in manifest.entries)

    def test_augment_missing_file_exits_3(self, tmp_path):
        out = run_gen(tmp_path)
        manifest = Manifest.load(out / "manifest.json")
        victim = next(e for e in manifest.entries if not e.defect_free)
        (out / victim.path).unlink()
        assert main(["augment", "--manifest", str(out / "manifest.json")]) == 3

    def test_split_then_resplit_guard(self, tmp_path):
        out = run_gen(tmp_path)
        assert main(["split", "--manifest", str(out / "manifest.json"),
                     "--seed", "1"]) == 0
        manifest = Manifest.load(out / "manifest.json")
        assert len(manifest.subset("train")) + len(manifest.subset("test")) == 18
        assert main(["split", "--manifest", str(out / "manifest.json"),
                     "--seed", "1"]) == 2
        assert main(["split", "--manifest", str(out / "manifest.json"),
                     "--seed", "1", "--force"]) == 0


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("cli_train")
    out = run_gen(tmp_path)
    assert main(["split", "--manifest", str(out / "manifest.json"), "--seed", "1"]) == 0
    run = tmp_path / "run"
    rc = main(["train", "--manifest", str(out / "manifest.json"), "--arm", "vit-conv",
               "--out", str(run), "--epochs", "1", "--seed", "7"] + SMALL_SYNTH + TINY_MODEL)
    assert rc == 0
    return out, run


class TestTrainEval:
    def test_train_emits_artifacts(self, trained):
        _, run = trained
        assert (run / "vit-conv.ckpt").exists()
        report = json.loads((run / "vit-conv.report.json").read_text())
        assert report["arm"] == "vit-conv" and report["epochs_run"] == 1
        assert (run / "vit-conv.loss.csv").read_text().startswith("epoch,loss")

    def test_eval_reproduces_training_accuracy(self, trained, capsys):
        data, run = trained
        report = json.loads((run / "vit-conv.report.json").read_text())
        rc = main(["eval", "--checkpoint", str(run / "vit-conv.ckpt"),
                   "--manifest", str(data / "manifest.json")])
        assert rc == 0
        printed = capsys.readouterr().out
        assert f"{100 * report['accuracy']:.2f}%" in printed

    def test_epochs_zero_exits_2(self, trained):
        data, run = trained
        rc = main(["train", "--manifest", str(data / "manifest.json"), "--arm", "vit",
                   "--out", str(run), "--epochs", "0"])
        assert rc == 2

    def test_unknown_arm_exits_2(self, trained):
        data, run = trained
        with pytest.raises(SystemExit) as exc:
            main(["train", "--manifest", str(data / "manifest.json"),
                  "--arm", "alexnet", "--out", str(run)])
        assert exc.value.code == 2

    def test_eval_on_corrupt_checkpoint_exits_3(self, trained, tmp_path):
        data, run = trained
        blob = (run / "vit-conv.ckpt").read_bytes()
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(blob[:-7])
        assert main(["eval", "--checkpoint", str(bad),
                     "--manifest", str(data / "manifest.json")]) == 3


class TestVerify:
    def test_fresh_build_passes(self, capsys):
        assert main(["verify"]) == 0
        out = capsys.readouterr().out
        assert "gradcheck/conv2d" in out
        assert "9.77%" in out
        assert "FAIL" not in out

    def test_planted_conv_backward_bug_detected(self, monkeypatch, capsys):
        import ihvit.tensor as tensor_mod

        real = tensor_mod._col2im

        def wrong(*args, **kw):
            return 2.0 * real(*args, **kw)

        monkeypatch.setattr(tensor_mod, "_col2im", wrong)
        assert main(["verify"]) == 1
        out = capsys.readouterr().out
        lines = [l for l in out.splitlines() if l.startswith("gradcheck/conv2d")]
        assert lines and "FAIL" in lines[0]


class TestConfigHandling:
    def test_defaulted_document_is_valid(self):
        cfg = load_run_config(None, [])
        assert cfg.train.lr0 == 0.001
        assert cfg.train.beta1 == 0.9
        assert cfg.train.weight_decay == 1e-4
        assert cfg.vit.dim == 75
        assert cfg.resnet.stage_widths == (32, 64, 128, 256)
        assert cfg.fusion.a_resnet == 1.0 and cfg.fusion.a_vit == 1.0
        assert cfg.pipeline.train_fraction == 0.8

    def test_default_dict_roundtrips_through_file(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(default_config_dict()))
        cfg = load_run_config(p, [])
        assert cfg.train.epochs == 20

    def test_flag_beats_file_beats_default(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text('{"train": {"epochs": 5}}')
        cfg = load_run_config(p, ["train.epochs=9"])
        assert cfg.train.epochs == 9
        cfg2 = load_run_config(p, [])
        assert cfg2.train.epochs == 5

    def test_seed_flag_flows_to_synth_and_train(self, tmp_path):
        cfg = load_run_config(None, [], seed=42)
        assert cfg.synth.seed == 42 and cfg.train.seed == 42

    def test_override_unknown_path_rejected(self):
        d = default_config_dict()
        with pytest.raises(ConfigError):
            apply_override(d, "train.momentum=0.9")
        with pytest.raises(ConfigError):
            apply_override(d, "nope.epochs=1")

    def test_override_counts_is_open_map(self):
        d = default_config_dict()
        apply_override(d, "synth.counts.scratch=11")
        assert d["synth"]["counts"]["scratch"] == 11
