import math

import numpy as np
import pytest
from scipy import stats

from ivimdc.errors import InvalidArgumentError
from ivimdc.model import BValueSchedule, IvimParams, SignalCurve, ivim_curve
from ivimdc.simulate import (
    HIGH_BVALUES,
    LOW_BVALUES,
    ParamRanges,
    SimDatasetConfig,
    add_rician_noise,
    generate_dataset,
    rician_noise,
    sample_parameter_array,
    sample_parameters,
    subsample_schedule,
)

from .oracles import rician_mean_zero_signal, rician_second_moment

K2 = (0, 30, 60, 90, 120, 150, 200, 400, 600, 800)
K6 = (0, 90, 200, 400, 600, 800)


class TestSampling:
    def test_degenerate_ranges(self, rng):
        r = ParamRanges(2e-3, 2e-3, 0.3, 0.3, 0.04, 0.04)
        assert sample_parameters(r, rng) == IvimParams(2e-3, 0.3, 0.04)

    def test_mean(self, rng):
        r = ParamRanges(D_min=1e-3, D_max=3e-3)
        draws = sample_parameter_array(r, rng, 100_000)
        assert draws[:, 0].mean() == pytest.approx(2e-3, rel=0.01)
        assert draws[:, 0].min() >= 1e-3 and draws[:, 0].max() <= 3e-3

    def test_deterministic(self):
        a = sample_parameter_array(ParamRanges(), np.random.default_rng(3), 50)
        b = sample_parameter_array(ParamRanges(), np.random.default_rng(3), 50)
        np.testing.assert_array_equal(a, b)

    def test_invalid_ranges(self):
        with pytest.raises(InvalidArgumentError):
            ParamRanges(D_min=2e-3, D_max=1e-3)
        with pytest.raises(InvalidArgumentError):
            ParamRanges(f_max=1.5)


class TestRicianNoise:
    def test_infinite_snr_is_noop(self, rng, full_schedule):
        c = ivim_curve(IvimParams(1e-3, 0.2, 0.02), 1.0, full_schedule)
        assert add_rician_noise(c, math.inf, 1.0, rng) == c

    @pytest.mark.parametrize("snr", [0.0, -1.0])
    def test_bad_snr(self, rng, snr):
        c = SignalCurve([1.0], BValueSchedule([0]))
        with pytest.raises(InvalidArgumentError):
            add_rician_noise(c, snr, 1.0, rng)

    def test_zero_signal_mean(self, rng):
        m = rician_noise(np.zeros(1_000_000), 1.0, rng)
        expected = rician_mean_zero_signal(1.0)
        assert expected == pytest.approx(1.2533, abs=1e-4)
        assert m.mean() == pytest.approx(expected, rel=0.01)

    @pytest.mark.parametrize("nu", [0.0, 1.0, 10.0])
    def test_second_moment(self, rng, nu):
        m = rician_noise(np.full(1_000_000, nu), 1.0, rng)
        assert np.mean(m**2) == pytest.approx(rician_second_moment(nu, 1.0), rel=0.01)

    def test_mean_matches_rice_distribution(self, rng):
        for nu in (0.5, 2.0, 5.0):
            m = rician_noise(np.full(200_000, nu), 1.0, rng)
            assert m.mean() == pytest.approx(stats.rice(nu).mean(), rel=0.01)

    def test_non_negative(self, rng):
        assert np.all(rician_noise(np.zeros(1000), 5.0, rng) >= 0)

    def test_sigma_from_snr(self):
        # sigma = s0 / snr: the same normal draws scaled by sigma
        c = SignalCurve(np.zeros(4), BValueSchedule([0, 1, 2, 3]))
        a = add_rician_noise(c, 10.0, 2.0, np.random.default_rng(1)).samples
        ref = np.random.default_rng(1).normal(0.0, 0.2, size=(2, 4))
        np.testing.assert_allclose(a, np.hypot(ref[0], ref[1]), rtol=1e-15)


class TestSubsample:
    def test_k1_full(self):
        s = subsample_schedule(LOW_BVALUES, HIGH_BVALUES, 1)
        assert s.tolist() == list(LOW_BVALUES + HIGH_BVALUES)
        assert len(s) == 16

    def test_k2(self):
        assert subsample_schedule(LOW_BVALUES, HIGH_BVALUES, 2).tolist() == list(K2)

    def test_k6(self):
        assert subsample_schedule(LOW_BVALUES, HIGH_BVALUES, 6).tolist() == list(K6)

    @pytest.mark.parametrize("k", range(1, 7))
    def test_keeps_anchor_and_split(self, k):
        s = subsample_schedule(LOW_BVALUES, HIGH_BVALUES, k).tolist()
        assert 0 in s and 200 in s
        assert s == sorted(set(s))

    def test_retains_200_from_low(self):
        s = subsample_schedule((0, 50, 100, 150, 200), (400, 800), 3)
        assert s.tolist() == [0, 150, 200, 400, 800]

    @pytest.mark.parametrize("k", [0, -1, 1.5])
    def test_bad_factor(self, k):
        with pytest.raises(InvalidArgumentError):
            subsample_schedule(LOW_BVALUES, HIGH_BVALUES, k)


class TestGenerateDataset:
    def test_noiseless_single(self, full_schedule):
        ds = generate_dataset(SimDatasetConfig(count=1, schedule=full_schedule, snr=math.inf, seed=4))
        expected = ivim_curve(ds.params[0], 1.0, full_schedule)
        assert ds.curves[0] == expected

    def test_rms_deviation_against_rice(self, full_schedule):
        cfg = SimDatasetConfig(count=10_000, schedule=full_schedule, snr=10.0, seed=11)
        noisy = generate_dataset(cfg)
        clean = generate_dataset(SimDatasetConfig(count=10_000, schedule=full_schedule,
                                                  snr=math.inf, seed=11))
        np.testing.assert_array_equal(noisy.labels, clean.labels)
        rms = np.sqrt(np.mean((noisy.signals - clean.signals) ** 2))
        # independent oracle: scipy's Rice sampler with the same clean signals
        oracle_rng = np.random.default_rng(99)
        draws = stats.rice.rvs(clean.signals / 0.1, scale=0.1, random_state=oracle_rng)
        oracle = np.sqrt(np.mean((draws - clean.signals) ** 2))
        assert rms == pytest.approx(oracle, rel=0.10)

    def test_bit_identical(self, full_schedule):
        cfg = SimDatasetConfig(count=500, schedule=full_schedule, snr=10.0, seed=5)
        a, b = generate_dataset(cfg), generate_dataset(cfg)
        assert a.signals.tobytes() == b.signals.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_seed_changes_data(self, full_schedule):
        a = generate_dataset(SimDatasetConfig(count=10, schedule=full_schedule, seed=1))
        b = generate_dataset(SimDatasetConfig(count=10, schedule=full_schedule, seed=2))
        assert not np.array_equal(a.signals, b.signals)

    @pytest.mark.parametrize("kw", [dict(count=0), dict(snr=0.0)])
    def test_invalid_config(self, full_schedule, kw):
        with pytest.raises(InvalidArgumentError):
            SimDatasetConfig(**{"count": 5, "schedule": full_schedule, **kw})
