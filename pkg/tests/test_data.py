import json

import numpy as np
import pytest

from wassweight.data import (
    LabeledDataset,
    Sample,
    SyntheticConfig,
    apply_normalizer,
    fit_normalizer,
    load_csv,
    loso_splits,
    synth_generate,
    write_csv,
    write_synthetic,
)
from wassweight.errors import ConfigurationError, DataError
from wassweight.ot import EmpiricalDistribution, emd_exact


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoadCsv:
    def test_valid(self, tmp_path):
        ds = load_csv(_write(tmp_path, "subject_id,label,f0,f1\na,0,1.0,2.0\nb,1,3.5,-1e-3\n"))
        assert len(ds) == 2 and ds.dim == 2 and ds.n_classes == 2
        assert ds.roster == ["a", "b"]
        assert ds.features[1, 1] == -1e-3

    def test_ragged_row(self, tmp_path):
        with pytest.raises(DataError, match=":3:"):
            load_csv(_write(tmp_path, "subject_id,label,f0,f1\na,0,1,2\nb,1,3\n"))

    def test_header_only(self, tmp_path):
        with pytest.raises(DataError, match="no samples"):
            load_csv(_write(tmp_path, "subject_id,label,f0\n"))

    def test_non_numeric(self, tmp_path):
        with pytest.raises(DataError, match=":2:"):
            load_csv(_write(tmp_path, "subject_id,label,f0\na,0,abc\n"))

    def test_negative_label(self, tmp_path):
        with pytest.raises(DataError, match="negative"):
            load_csv(_write(tmp_path, "subject_id,label,f0\na,-1,0.5\n"))

    def test_bad_header(self, tmp_path):
        with pytest.raises(DataError, match="header"):
            load_csv(_write(tmp_path, "who,label,f0\na,0,1\n"))

    def test_round_trip(self, tmp_path):
        ds = synth_generate(SyntheticConfig(subjects=3, dim=5, samples_per_class=4, seed=3))
        write_csv(ds, tmp_path / "x.csv")
        back = load_csv(tmp_path / "x.csv")
        assert np.array_equal(back.features, ds.features)
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.subjects, ds.subjects)

    def test_from_samples(self):
        ds = LabeledDataset.from_samples([Sample("a", 0, (1.0, 2.0)), Sample("b", 2, (0.0, 0.0))])
        assert ds.n_classes == 3
        assert list(ds.samples())[1] == Sample("b", 2, (0.0, 0.0))


class TestNormalizer:
    def test_train_standardised(self):
        ds = synth_generate(SyntheticConfig(subjects=4, dim=6, seed=1))
        stats = fit_normalizer(ds)
        z = apply_normalizer(stats, ds).features
        assert np.all(np.abs(z.mean(axis=0)) < 1e-9)
        np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-6)

    def test_constant_column(self):
        x = np.column_stack([np.full(5, 3.0), np.arange(5.0)])
        ds = LabeledDataset(x, np.zeros(5, int), np.array(["a"] * 5), 1)
        stats = fit_normalizer(ds)
        assert stats.clamped == (0,)
        assert np.all(apply_normalizer(stats, ds).features[:, 0] == 0.0)

    def test_no_leakage(self):
        ds = synth_generate(SyntheticConfig(subjects=4, dim=6, subject_shift=3.0, seed=2))
        fold = loso_splits(ds)[0]
        stats = fit_normalizer(fold.train)
        assert stats.fitted_on == fold.train.split
        test_mean = apply_normalizer(stats, fold.test).features.mean(axis=0)
        assert np.max(np.abs(test_mean)) > 1e-3

    def test_refuses_test_split(self):
        ds = synth_generate(SyntheticConfig(subjects=3, seed=0))
        with pytest.raises(ConfigurationError):
            fit_normalizer(loso_splits(ds)[0].test)


class TestLoso:
    def test_three_subjects(self):
        ds = synth_generate(SyntheticConfig(subjects=3, samples_per_class=2, seed=0))
        folds = loso_splits(ds)
        assert [f.held_out for f in folds] == ds.roster
        for f in folds:
            assert f.train_subjects.isdisjoint(f.test_subjects)
            assert f.test_subjects == {f.held_out}
            assert len(f.train) + len(f.test) == len(ds)

    def test_cap_deterministic(self):
        ds = synth_generate(SyntheticConfig(subjects=15, samples_per_class=1, seed=0))
        a = [f.held_out for f in loso_splits(ds, max_folds=10, seed=7)]
        b = [f.held_out for f in loso_splits(ds, max_folds=10, seed=7)]
        assert a == b and len(set(a)) == 10
        assert a == [s for s in ds.roster if s in a]  # roster order kept

    def test_single_subject(self):
        ds = synth_generate(SyntheticConfig(subjects=1, seed=0))
        with pytest.raises(ConfigurationError):
            loso_splits(ds)


class TestSynthetic:
    def test_degenerate(self):
        cfg = SyntheticConfig(subjects=3, classes=2, dim=4, samples_per_class=5,
                              subject_shift=0.0, noise=0.0, seed=0)
        ds = synth_generate(cfg)
        for c in range(2):
            rows = ds.features[ds.labels == c]
            assert np.all(rows == rows[0])
            assert np.linalg.norm(rows[0]) == pytest.approx(cfg.class_separation)

    def test_outlier_has_largest_distance(self):
        cfg = SyntheticConfig(subjects=4, classes=2, dim=3, samples_per_class=10,
                              subject_shift=1.0, multipliers=(1, 1, 10, 1), seed=5)
        ds = synth_generate(cfg)
        dist = {}
        for s in ds.roster:
            mask = ds.subjects == s
            rest = EmpiricalDistribution.uniform(ds.features[~mask])
            dist[s] = emd_exact(EmpiricalDistribution.uniform(ds.features[mask]), rest)[0]
        assert max(dist, key=dist.get) == ds.roster[2]

    def test_byte_identical(self, tmp_path):
        cfg = SyntheticConfig(subjects=3, dim=4, seed=11)
        write_synthetic(cfg, tmp_path / "a.csv")
        write_synthetic(cfg, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        side = json.loads((tmp_path / "a.csv.json").read_text())
        assert side["synthetic_config"]["seed"] == 11

    def test_invalid_config(self):
        with pytest.raises(ConfigurationError):
            SyntheticConfig(subjects=0)
        with pytest.raises(ConfigurationError):
            SyntheticConfig(noise=-1.0)
