import numpy as np
import pytest

from evocast.data import (
    LoadDataset,
    Scaler,
    SynthConfig,
    fit_scaler,
    load_csv,
    save_csv,
    split_blocks,
    synth_generate,
)
from evocast.tensor import ContractError


@pytest.fixture(scope="module")
def ds():
    return synth_generate(SynthConfig(days=120, instants=24, seed=3))


class TestSynth:
    def test_shapes_and_names(self, ds):
        assert ds.x.shape == (120, 24, 20)
        assert ds.y.shape == (120, 24)
        assert len(ds.feature_names) == 20
        assert len(set(ds.feature_names)) == 20

    def test_target_strictly_positive(self, ds):
        assert ds.y.min() > 0

    def test_deterministic(self):
        a = synth_generate(SynthConfig(days=40, seed=9))
        b = synth_generate(SynthConfig(days=40, seed=9))
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)

    def test_seed_changes_data(self):
        a = synth_generate(SynthConfig(days=40, seed=1))
        b = synth_generate(SynthConfig(days=40, seed=2))
        assert not np.allclose(a.y, b.y)

    def test_informative_features_correlate_with_target(self):
        # over a full year each driver moves the target more than the
        # strongest noise column
        full = synth_generate(SynthConfig(days=365, seed=3))
        y = full.y.reshape(-1)
        cors = [
            abs(np.corrcoef(full.x[:, :, j].reshape(-1), y)[0, 1])
            for j in range(full.n_features)
        ]
        assert min(cors[:5]) > max(cors[5:])

    def test_noise_columns_near_zero_correlation(self, ds):
        y = ds.y.reshape(-1)
        for j in range(5, 20):
            assert abs(np.corrcoef(ds.x[:, :, j].reshape(-1), y)[0, 1]) < 0.1

    def test_holiday_days_marked(self):
        full = synth_generate(SynthConfig(days=365, seed=0, start_date="2020-01-01"))
        jan1 = full.dates.index("2020-01-01")
        assert full.x[jan1, :, 3].min() == 1.0
        jan2 = full.dates.index("2020-01-02")
        assert full.x[jan2, :, 3].max() == 0.0


class TestCsv:
    def test_roundtrip(self, ds, tmp_path):
        path = tmp_path / "load.csv"
        save_csv(ds, path)
        back = load_csv(path)
        np.testing.assert_array_equal(back.x, ds.x)
        np.testing.assert_array_equal(back.y, ds.y)
        assert back.feature_names == ds.feature_names
        assert back.dates == ds.dates

    def test_header_checked(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("day,hour,demand\n2020-01-01,0,5\n")
        with pytest.raises(ContractError, match="header"):
            load_csv(path)

    def test_ragged_row_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("date,instant,load,f1\n2020-01-01,0,5\n")
        with pytest.raises(ContractError, match="columns"):
            load_csv(path)

    def test_incomplete_day_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(
            "date,instant,load,f1\n"
            "2020-01-01,0,5,1\n2020-01-01,1,5,1\n2020-01-02,0,5,1\n"
        )
        with pytest.raises(ContractError, match="instants"):
            load_csv(path)

    def test_non_positive_load_rejected_with_row_number(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("date,instant,load,f1\n2020-01-01,0,5,1\n2020-01-01,1,0,1\n")
        with pytest.raises(ContractError, match="bad.csv:3"):
            load_csv(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("date,instant,load,f1\n")
        with pytest.raises(ContractError, match="no data"):
            load_csv(path)


class TestSplit:
    def test_sizes_use_floor(self, ds):
        train, valid, test = split_blocks(ds, (0.7, 0.15, 0.15))
        assert train.days == 84  # floor(120 * 0.7)
        assert valid.days == 18  # floor(120 * 0.15)
        assert test.days == 18  # remainder
        assert train.days + valid.days + test.days == 120

    def test_blocks_are_contiguous_in_time(self, ds):
        train, valid, test = split_blocks(ds)
        assert train.dates[-1] < valid.dates[0] < test.dates[0]
        np.testing.assert_array_equal(valid.y, ds.y[train.days : train.days + valid.days])

    def test_bad_fractions(self, ds):
        with pytest.raises(ContractError):
            split_blocks(ds, (0.5, 0.5, 0.5))
        with pytest.raises(ContractError):
            split_blocks(ds, (1.0, -0.5, 0.5))

    def test_too_few_days(self):
        tiny = synth_generate(SynthConfig(days=4, seed=0))
        with pytest.raises(ContractError, match="too few"):
            split_blocks(tiny, (0.9, 0.05, 0.05))


class TestScaler:
    def test_train_features_standardized(self, ds):
        train, _, _ = split_blocks(ds)
        sc = fit_scaler(train)
        z = sc.transform_x(train.x)
        np.testing.assert_allclose(z.mean(axis=(0, 1)), 0.0, atol=1e-10)
        live = train.x.std(axis=(0, 1)) > 1e-6
        np.testing.assert_allclose(z.std(axis=(0, 1))[live], 1.0, atol=1e-10)

    def test_constant_feature_does_not_blow_up(self):
        x = np.zeros((10, 4, 2))
        x[:, :, 1] = 7.0
        dsc = LoadDataset(x, np.ones((10, 4)), ["a", "b"], [str(i) for i in range(10)])
        sc = fit_scaler(dsc)
        z = sc.transform_x(dsc.x)
        assert np.all(np.isfinite(z))
        np.testing.assert_array_equal(z[:, :, 1], 0.0)

    def test_y_roundtrip(self, ds):
        train, _, _ = split_blocks(ds)
        sc = fit_scaler(train)
        np.testing.assert_allclose(sc.inverse_y(sc.transform_y(ds.y)), ds.y, atol=1e-8)

    def test_stats_come_from_train_only(self, ds):
        train, valid, _ = split_blocks(ds)
        sc = fit_scaler(train)
        np.testing.assert_array_equal(sc.x_mean, train.x.mean(axis=(0, 1)))
        assert not np.allclose(sc.x_mean, valid.x.mean(axis=(0, 1)))


class TestContracts:
    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ContractError):
            LoadDataset(np.zeros((5, 4, 2)), np.zeros((5, 3)), ["a", "b"], ["d"] * 5)
        with pytest.raises(ContractError):
            LoadDataset(np.zeros((5, 4, 2)), np.zeros((5, 4)), ["a"], ["d"] * 5)
        with pytest.raises(ContractError):
            LoadDataset(np.zeros((5, 4, 2)), np.zeros((5, 4)), ["a", "b"], ["d"] * 4)
