import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivimdc.errors import (
    DegenerateSignalError,
    InvalidArgumentError,
    ScheduleMismatchError,
)
from ivimdc.model import (
    BValueSchedule,
    IvimParams,
    SignalCurve,
    geometric_trace_average,
    ivim_curve,
    ivim_signal,
    normalize_curve,
)

# value of the forward model at (D=1.5e-3, f=0.1, D*=5e-2, s0=100, b=200),
# frozen from a 50-digit mpmath evaluation (tests/oracles.py)
S_AT_200 = 66.67397619230647

params_st = st.builds(
    IvimParams,
    D=st.floats(1e-5, 5e-3),
    f=st.floats(0.0, 1.0),
    Dstar=st.floats(0.0, 0.5),
)


class TestIvimSignal:
    def test_b0_gives_s0(self):
        assert ivim_signal(IvimParams(1e-3, 0.3, 1e-2), 1.0, 0.0) == 1.0

    def test_f0_is_monoexponential(self):
        got = ivim_signal(IvimParams(1e-3, 0.0, 0.123), 1.0, 1000.0)
        assert got == pytest.approx(math.exp(-1.0), abs=1e-15)
        assert got == pytest.approx(0.367879, abs=1e-6)

    def test_derived_value(self):
        got = ivim_signal(IvimParams(1.5e-3, 0.1, 5e-2), 100.0, 200.0)
        assert got == pytest.approx(S_AT_200, abs=1e-12)

    @pytest.mark.parametrize("s0,b", [(math.nan, 0.0), (1.0, math.inf), (-1.0, 10.0), (1.0, -5.0)])
    def test_invalid_input(self, s0, b):
        with pytest.raises(InvalidArgumentError):
            ivim_signal(IvimParams(1e-3, 0.1, 1e-2), s0, b)

    def test_invalid_params(self):
        with pytest.raises(InvalidArgumentError):
            IvimParams(1e-3, 1.2, 1e-2)
        with pytest.raises(InvalidArgumentError):
            IvimParams(-1e-3, 0.1, 1e-2)
        with pytest.raises(InvalidArgumentError):
            IvimParams(math.nan, 0.1, 1e-2)

    @given(params_st, st.floats(0, 2000), st.floats(0, 2000))
    def test_strictly_decreasing(self, p, b1, b2):
        lo, hi = sorted((b1, b2))
        if hi - lo < 1e-3:
            return
        assert ivim_signal(p, 1.0, hi) < ivim_signal(p, 1.0, lo) or (
            ivim_signal(p, 1.0, hi) == 0.0
        )

    @given(params_st, st.floats(0, 1e4), st.floats(0, 1e4))
    def test_bounded_by_s0(self, p, s0, b):
        s = ivim_signal(p, s0, b)
        assert 0.0 <= s <= s0

    @given(params_st, st.floats(0.1, 100), st.floats(0, 2000))
    def test_biexponential_identity(self, p, s0, b):
        fast = ivim_signal(IvimParams(p.D + p.Dstar, 0.0, 0.0), s0, b)
        slow = ivim_signal(IvimParams(p.D, 0.0, 0.0), s0, b)
        assert ivim_signal(p, s0, b) == pytest.approx(p.f * fast + (1 - p.f) * slow, rel=1e-14, abs=1e-300)


class TestIvimCurve:
    def test_single_b0(self):
        c = ivim_curve(IvimParams(1e-3, 0.2, 0.05), 3.5, [0])
        assert c.samples.tolist() == [3.5]

    def test_monoexponential(self):
        c = ivim_curve(IvimParams(1e-3, 0.0, 0.05), 1.0, [0, 1000])
        np.testing.assert_allclose(c.samples, [1.0, math.exp(-1.0)], rtol=0, atol=1e-15)

    def test_derived(self):
        sched = BValueSchedule([0, 200])
        c = ivim_curve(IvimParams(1.5e-3, 0.1, 5e-2), 100.0, sched)
        np.testing.assert_allclose(c.samples, [100.0, S_AT_200], rtol=0, atol=1e-12)
        assert c.schedule is sched

    def test_matches_pointwise(self, full_schedule):
        p = IvimParams(2e-3, 0.3, 0.02)
        c = ivim_curve(p, 2.0, full_schedule)
        assert c.samples.tolist() == [ivim_signal(p, 2.0, b) for b in full_schedule]


class TestSchedule:
    def test_rejects_unsorted(self):
        with pytest.raises(InvalidArgumentError):
            BValueSchedule([0, 200, 100])

    def test_rejects_duplicates_and_negatives(self):
        with pytest.raises(InvalidArgumentError):
            BValueSchedule([0, 100, 100])
        with pytest.raises(InvalidArgumentError):
            BValueSchedule([-10, 100])

    def test_anchored(self):
        assert BValueSchedule([0, 10]).anchored
        assert not BValueSchedule([5, 10]).anchored

    def test_curve_length_mismatch(self):
        with pytest.raises(ScheduleMismatchError):
            SignalCurve([1.0, 0.5], BValueSchedule([0, 100, 200]))

    def test_curve_rejects_negative(self):
        with pytest.raises(InvalidArgumentError):
            SignalCurve([1.0, -0.5], BValueSchedule([0, 100]))


class TestNormalize:
    def test_simple(self):
        c = normalize_curve(SignalCurve([2.0, 1.0], BValueSchedule([0, 100])))
        assert c.samples.tolist() == [1.0, 0.5]

    def test_derived(self):
        c = normalize_curve(SignalCurve([100.0, 66.674, 30.1], BValueSchedule([0, 200, 800])))
        np.testing.assert_allclose(c.samples, [1.0, 0.66674, 0.301], rtol=1e-15)
        assert c.samples[0] == 1.0

    @given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=10))
    def test_idempotent(self, values):
        c = SignalCurve(values, BValueSchedule(np.arange(len(values)) * 50.0))
        once = normalize_curve(c)
        assert normalize_curve(once) == once
        assert once.samples[0] == 1.0

    def test_zero_first_sample(self):
        with pytest.raises(DegenerateSignalError):
            normalize_curve(SignalCurve([0.0, 1.0], BValueSchedule([0, 100])))

    def test_needs_anchor(self):
        with pytest.raises(InvalidArgumentError):
            normalize_curve(SignalCurve([1.0, 0.5], BValueSchedule([10, 100])))


class TestGeometricAverage:
    sched = BValueSchedule([0, 500])

    def test_single(self):
        c = SignalCurve([4.0, 1.0], self.sched)
        assert geometric_trace_average([c]) == c

    def test_two_curves(self):
        out = geometric_trace_average([SignalCurve([4.0, 1.0], self.sched),
                                       SignalCurve([1.0, 1.0], self.sched)])
        np.testing.assert_allclose(out.samples, [2.0, 1.0], rtol=1e-15)

    def test_constant(self):
        curves = [SignalCurve([0.7, 0.7], self.sched)] * 6
        np.testing.assert_allclose(geometric_trace_average(curves).samples, 0.7, rtol=1e-15)

    def test_permutation_invariant(self, rng):
        curves = [SignalCurve(rng.uniform(0.1, 2, 2), self.sched) for _ in range(4)]
        ref = geometric_trace_average(curves).samples
        for perm in itertools.permutations(curves):
            np.testing.assert_allclose(geometric_trace_average(list(perm)).samples, ref, rtol=1e-15)

    def test_mismatched_schedules(self):
        with pytest.raises(ScheduleMismatchError):
            geometric_trace_average([SignalCurve([1.0, 0.5], self.sched),
                                     SignalCurve([1.0, 0.5], BValueSchedule([0, 400]))])

    def test_zero_sample(self):
        with pytest.raises(DegenerateSignalError):
            geometric_trace_average([SignalCurve([1.0, 0.0], self.sched),
                                     SignalCurve([1.0, 0.5], self.sched)])
