import json

import numpy as np
import pytest

from wassweight.cli import main
from wassweight.data import LabeledDataset, SyntheticConfig, load_csv, synth_generate, write_csv
from wassweight.model import AutoencoderClassifier, load_checkpoint

FAST = ["--epochs", "2", "--batch-size", "16", "--latent-dim", "3", "--encoder-hidden", "6",
        "--classifier-hidden", "4"]


@pytest.fixture
def small_csv(tmp_path):
    path = tmp_path / "d.csv"
    assert main(["synth", "--subjects", "3", "--classes", "2", "--dim", "4", "--samples-per-class", "6",
                 "--seed", "5", "-o", str(path)]) == 0
    return path


def _outputs(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


class TestSynth:
    def test_deterministic_bytes(self, tmp_path):
        args = ["synth", "--subjects", "6", "--classes", "3", "--dim", "12", "--seed", "42"]
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        assert main(args + ["-o", str(tmp_path / "a" / "d.csv")]) == 0
        assert main(args + ["-o", str(tmp_path / "b" / "d.csv")]) == 0
        a, b = _outputs(tmp_path / "a"), _outputs(tmp_path / "b")
        assert set(a) == {"d.csv", "d.csv.json", "d.csv.manifest.json"}
        assert a["d.csv"] == b["d.csv"] and a["d.csv.json"] == b["d.csv.json"]
        assert len(load_csv(tmp_path / "a" / "d.csv").roster) == 6

    def test_rerun_in_place_identical(self, tmp_path):
        args = ["synth", "--subjects", "2", "--dim", "3", "-o", str(tmp_path / "d.csv")]
        main(args)
        first = _outputs(tmp_path)
        main(args)
        assert _outputs(tmp_path) == first

    def test_missing_output_is_usage_error(self, capsys):
        assert main(["synth", "--subjects", "3"]) == 1
        assert "-o" in capsys.readouterr().err

    def test_unknown_command(self):
        assert main(["frobnicate"]) == 1

    def test_version(self, capsys):
        assert main(["--version"]) == 0
        assert "wassweight" in capsys.readouterr().out


class TestConfigFile:
    def test_precedence(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("dim: 5\nsubjects: 4\nsamples_per_class: 3\n")
        out = tmp_path / "d.csv"
        assert main(["synth", "--config", str(cfg), "--subjects", "2", "-o", str(out)]) == 0
        ds = load_csv(out)
        assert ds.dim == 5  # from file
        assert ds.roster == ["s00", "s01"]  # flag beats file
        manifest = json.loads((tmp_path / "d.csv.manifest.json").read_text())
        assert manifest["config"]["dim"] == 5 and manifest["config"]["subjects"] == 2
        assert manifest["config"]["classes"] == 3  # default

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("dimension: 5\n")
        assert main(["synth", "--config", str(cfg), "-o", str(tmp_path / "d.csv")]) == 1
        assert "dimension" in capsys.readouterr().err

    def test_bad_value(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("dim: lots\n")
        assert main(["synth", "--config", str(cfg), "-o", str(tmp_path / "d.csv")]) == 1

    def test_missing_file(self, tmp_path):
        assert main(["synth", "--config", str(tmp_path / "none.yaml"), "-o", str(tmp_path / "d.csv")]) == 1

    def test_train_keys_reach_config(self, tmp_path, small_csv):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("epochs: 1\nbeta: 0.3\nencoder_hidden: [5, 4]\nexclude_self: true\n")
        out = tmp_path / "m.json"
        assert main(["train", str(small_csv), "-o", str(out), "--config", str(cfg), "--latent-dim", "2"]) == 0
        ck = load_checkpoint(out)
        assert ck.config.epochs == 1 and ck.config.weighting.beta == 0.3
        assert ck.config.arch.encoder_hidden == (5, 4) and ck.config.arch.latent_dim == 2
        assert ck.config.weighting.estimator.exclude_self is True


class TestWeights:
    def test_identical_subjects_split_budget(self, tmp_path, capsys):
        x = np.random.default_rng(0).normal(size=(8, 3))
        ds = LabeledDataset(np.vstack([x, x]), np.arange(16) % 2, np.array(["a"] * 8 + ["b"] * 8), 2)
        write_csv(ds, tmp_path / "d.csv")
        assert main(["weights", str(tmp_path / "d.csv"), "--beta", "0.4"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["subjects"]["a"]["lambda"] == pytest.approx(0.2)
        assert doc["subjects"]["b"]["lambda"] == pytest.approx(0.2)
        assert doc["lambda_g"] == pytest.approx(0.6)

    def test_paper_mode_three_subjects(self, tmp_path, capsys):
        ds = synth_generate(SyntheticConfig(subjects=3, classes=2, dim=3, samples_per_class=5,
                                            multipliers=(3.0,), seed=1))
        write_csv(ds, tmp_path / "d.csv")
        assert main(["weights", str(tmp_path / "d.csv"), "--mode", "paper"]) == 1
        err = capsys.readouterr().err
        assert "negative group weight" in err and "budget" in err

    @pytest.mark.parametrize("estimator", ["sliced", "exact"])
    def test_outlier_minimal_lambda(self, tmp_path, estimator):
        ds = synth_generate(SyntheticConfig(subjects=5, classes=2, dim=6, samples_per_class=10,
                                            multipliers=(1.0, 1.0, 5.0), seed=3))
        write_csv(ds, tmp_path / "d.csv")
        out = tmp_path / "w.json"
        assert main(["weights", str(tmp_path / "d.csv"), "--estimator", estimator, "-o", str(out)]) == 0
        doc = json.loads(out.read_text())
        lam = {s: v["lambda"] for s, v in doc["subjects"].items()}
        assert min(lam, key=lam.get) == "s02"
        assert doc["mode"] == "budget" and doc["estimator"]["method"] == estimator and doc["seed"] == 0
        assert doc["lambda_g"] + sum(lam.values()) == pytest.approx(1.0, abs=1e-9)
        assert (tmp_path / "w.json.manifest.json").exists()


class TestTrain:
    @pytest.mark.parametrize("mode", ["mse_baseline", "wasserstein_weighted"])
    def test_both_modes(self, tmp_path, small_csv, mode):
        out = tmp_path / "m.json"
        assert main(["train", str(small_csv), "-o", str(out), "--loss-mode", mode] + FAST) == 0
        history = json.loads((tmp_path / "m.json.history.json").read_text())
        assert len(history["epochs"]) == 2
        assert load_checkpoint(out).config.loss_mode == mode

    def test_zero_epochs_is_initialisation(self, tmp_path, small_csv):
        out = tmp_path / "m.json"
        assert main(["train", str(small_csv), "-o", str(out), "--epochs", "0", "--seed", "7"] + FAST[2:]) == 0
        ck = load_checkpoint(out)
        fresh = AutoencoderClassifier.build(4, 2, ck.config.arch, 7)
        for a, b in zip(ck.model.parts(), fresh.parts()):
            assert all(np.array_equal(u, v) for (_, u), (_, v) in zip(a.arrays(), b.arrays()))

    def test_invalid_csv_line_number(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("subject_id,label,f0,f1\na,0,1.0,2.0\nb,1,3.0\n")
        assert main(["train", str(bad), "-o", str(tmp_path / "m.json")]) == 2
        assert "bad.csv:3" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path):
        assert main(["train", str(tmp_path / "none.csv"), "-o", str(tmp_path / "m.json")]) == 2

    def test_invalid_config_value(self, tmp_path, small_csv):
        assert main(["train", str(small_csv), "-o", str(tmp_path / "m.json"), "--beta", "1.5"]) == 1

    def test_idempotent(self, tmp_path, small_csv):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        for d in ("a", "b"):
            assert main(["train", str(small_csv), "-o", str(tmp_path / d / "m.json")] + FAST) == 0
        a, b = _outputs(tmp_path / "a"), _outputs(tmp_path / "b")
        assert a["m.json"] == b["m.json"] and a["m.json.history.json"] == b["m.json.history.json"]


class TestProject:
    def test_untrained_checkpoint(self, tmp_path, small_csv):
        ckpt = tmp_path / "m.json"
        main(["train", str(small_csv), "-o", str(ckpt), "--epochs", "0"] + FAST[2:])
        out = tmp_path / "p.csv"
        assert main(["project", str(ckpt), str(small_csv), "-o", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "pc1,pc2,pc3,label,subject_id,split"
        assert len(lines) == 1 + len(load_csv(small_csv))
        assert all(line.endswith(",train") for line in lines[1:])

    def test_dimension_mismatch(self, tmp_path, small_csv):
        ckpt = tmp_path / "m.json"
        main(["train", str(small_csv), "-o", str(ckpt), "--epochs", "0"])
        other = tmp_path / "o.csv"
        main(["synth", "--dim", "5", "--subjects", "2", "-o", str(other)])
        assert main(["project", str(ckpt), str(other), "-o", str(tmp_path / "p.csv")]) == 2

    def test_not_a_checkpoint(self, tmp_path, small_csv):
        assert main(["project", str(small_csv), str(small_csv), "-o", str(tmp_path / "p.csv")]) == 2


def _degenerate_fold_csv(path):
    # a and b are identical, so holding out c leaves all-zero alphas
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 3))
    feats = np.vstack([x, x, x + 4.0])
    subjects = np.array(["a"] * 6 + ["b"] * 6 + ["c"] * 6)
    write_csv(LabeledDataset(feats, np.arange(18) % 2, subjects, 2), path)


class TestLoso:
    def test_report(self, tmp_path, small_csv):
        out = tmp_path / "l.json"
        assert main(["loso", str(small_csv), "-o", str(out)] + FAST) == 0
        doc = json.loads(out.read_text())
        assert [f["held_out"] for f in doc["folds"]] == ["s00", "s01", "s02"]
        assert doc["failures"] == [] and doc["summary"]["completed"] == 3

    def test_partial_failure(self, tmp_path, capsys):
        path = tmp_path / "d.csv"
        _degenerate_fold_csv(path)
        out = tmp_path / "l.json"
        code = main(["loso", str(path), "-o", str(out), "--on-degenerate", "raise"] + FAST)
        assert code == 3
        doc = json.loads(out.read_text())
        assert [f["held_out"] for f in doc["failures"]] == ["c"]
        assert [f["held_out"] for f in doc["folds"]] == ["a", "b"]
        assert "c" in capsys.readouterr().err

    def test_max_folds(self, tmp_path, small_csv):
        out = tmp_path / "l.json"
        assert main(["loso", str(small_csv), "-o", str(out), "--max-folds", "2"] + FAST) == 0
        assert len(json.loads(out.read_text())["folds"]) == 2

    def test_jobs_env(self, tmp_path, small_csv, monkeypatch):
        monkeypatch.setenv("WASSWEIGHT_JOBS", "many")
        assert main(["loso", str(small_csv), "-o", str(tmp_path / "l.json")] + FAST) == 1
        monkeypatch.setenv("WASSWEIGHT_JOBS", "2")
        assert main(["loso", str(small_csv), "-o", str(tmp_path / "p.json")] + FAST) == 0
        monkeypatch.delenv("WASSWEIGHT_JOBS")
        assert main(["loso", str(small_csv), "-o", str(tmp_path / "s.json")] + FAST) == 0
        par = json.loads((tmp_path / "p.json").read_text())
        ser = json.loads((tmp_path / "s.json").read_text())
        assert par["folds"] == ser["folds"]


class TestCompare:
    def test_identical_modulo_timing(self, tmp_path, small_csv):
        docs = []
        for name in ("a.json", "b.json"):
            assert main(["compare", str(small_csv), "-o", str(tmp_path / name)] + FAST) == 0
            doc = json.loads((tmp_path / name).read_text())
            assert set(doc["timing"]) == {"baseline_seconds", "weighted_seconds"}
            doc.pop("timing")
            docs.append(doc)
        assert docs[0] == docs[1]
        assert (tmp_path / "a.json.manifest.json").read_text().replace("a.json", "X") == \
            (tmp_path / "b.json.manifest.json").read_text().replace("b.json", "X")

    def test_partial_failure(self, tmp_path):
        path = tmp_path / "d.csv"
        _degenerate_fold_csv(path)
        out = tmp_path / "c.json"
        assert main(["compare", str(path), "-o", str(out), "--on-degenerate", "raise"] + FAST) == 3
        doc = json.loads(out.read_text())
        assert [f["held_out"] for f in doc["failures"]] == ["weighted:c"]
        assert [f["held_out"] for f in doc["folds"]] == ["a", "b"]
