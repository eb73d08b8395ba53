"""IVIM bi-exponential forward model and signal-curve helpers.

The signal at diffusion weighting ``b`` is

    s(b) = s0 * (f * exp(-b * (Dstar + D)) + (1 - f) * exp(-b * D))

with ``D`` and ``Dstar`` in mm^2/s and ``b`` in s/mm^2.  Note the pseudo
diffusion compartment decays with ``Dstar + D``, not ``Dstar`` alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateSignalError,
    InvalidArgumentError,
    ScheduleMismatchError,
)

PARAM_NAMES = ("D", "f", "Dstar")


@dataclass(frozen=True)
class IvimParams:
    D: float
    f: float
    Dstar: float

    def __post_init__(self):
        values = (self.D, self.f, self.Dstar)
        if not all(np.isfinite(v) for v in values):
            raise InvalidArgumentError(f"non-finite IVIM parameters: {values}")
        if self.D < 0 or self.Dstar < 0 or not 0 <= self.f <= 1:
            raise InvalidArgumentError(f"IVIM parameters out of domain: {values}")

    def as_array(self) -> np.ndarray:
        return np.array([self.D, self.f, self.Dstar], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "IvimParams":
        D, f, Dstar = (float(v) for v in values)
        return cls(D=D, f=f, Dstar=Dstar)


@dataclass(frozen=True, eq=False)
class BValueSchedule:
    """Strictly increasing, non-negative b-values in s/mm^2."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size == 0:
            raise InvalidArgumentError("empty b-value schedule")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise InvalidArgumentError("b-values must be finite and >= 0")
        if np.any(np.diff(values) <= 0):
            raise InvalidArgumentError("b-values must be strictly increasing")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def anchored(self) -> bool:
        return self.values[0] == 0.0

    def __len__(self) -> int:
        return self.values.size

    def __getitem__(self, i):
        return self.values[i]

    def __iter__(self):
        return iter(self.values.tolist())

    def __eq__(self, other) -> bool:
        if not isinstance(other, BValueSchedule):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())

    def __repr__(self) -> str:
        return f"BValueSchedule({self.values.tolist()})"

    def tolist(self) -> list[float]:
        return self.values.tolist()


@dataclass(frozen=True, eq=False)
class SignalCurve:
    samples: np.ndarray
    schedule: BValueSchedule = field(repr=False)

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64).reshape(-1)
        if samples.size != len(self.schedule):
            raise ScheduleMismatchError(
                f"curve has {samples.size} samples but schedule has {len(self.schedule)}"
            )
        if not np.all(np.isfinite(samples)):
            raise InvalidArgumentError("curve samples must be finite")
        if np.any(samples < 0):
            raise InvalidArgumentError("curve samples must be non-negative")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, SignalCurve):
            return NotImplemented
        return self.schedule == other.schedule and np.array_equal(
            self.samples, other.samples
        )


def as_schedule(schedule) -> BValueSchedule:
    if isinstance(schedule, BValueSchedule):
        return schedule
    return BValueSchedule(schedule)


def ivim_model(b, D, f, Dstar, s0=1.0):
    """Vectorised forward model; all arguments broadcast with numpy rules."""
    b = np.asarray(b, dtype=np.float64)
    slow = np.exp(-b * D)
    fast = np.exp(-b * (Dstar + D))
    return s0 * (f * fast + (1.0 - f) * slow)


def ivim_signal(params: IvimParams, s0: float, b: float) -> float:
    if not (np.isfinite(s0) and np.isfinite(b)):
        raise InvalidArgumentError(f"non-finite input: s0={s0}, b={b}")
    if s0 < 0 or b < 0:
        raise InvalidArgumentError(f"s0 and b must be >= 0, got s0={s0}, b={b}")
    return float(ivim_model(b, params.D, params.f, params.Dstar, s0))


def ivim_curve(params: IvimParams, s0: float, schedule) -> SignalCurve:
    schedule = as_schedule(schedule)
    if not np.isfinite(s0) or s0 < 0:
        raise InvalidArgumentError(f"s0 must be finite and >= 0, got {s0}")
    samples = ivim_model(schedule.values, params.D, params.f, params.Dstar, s0)
    return SignalCurve(samples, schedule)


def normalize_curve(curve: SignalCurve) -> SignalCurve:
    if not curve.schedule.anchored:
        raise InvalidArgumentError("normalisation needs a schedule starting at b=0")
    s_first = curve.samples[0]
    if s_first <= 0:
        raise DegenerateSignalError("cannot normalise a curve whose b=0 sample is 0")
    samples = curve.samples / s_first
    return SignalCurve(samples, curve.schedule)


def normalize_rows(signals: np.ndarray) -> np.ndarray:
    """Divide each row of a 2-D signal array by its first column."""
    signals = np.asarray(signals, dtype=np.float64)
    first = signals[:, :1]
    if np.any(first <= 0):
        raise DegenerateSignalError("rows with non-positive b=0 sample cannot be normalised")
    return signals / first


def geometric_trace_average(direction_curves: Sequence[SignalCurve]) -> SignalCurve:
    """Trace-weighted curve from per-direction curves by geometric averaging."""
    if len(direction_curves) == 0:
        raise InvalidArgumentError("need at least one direction curve")
    schedule = direction_curves[0].schedule
    for curve in direction_curves[1:]:
        if curve.schedule != schedule:
            raise ScheduleMismatchError("direction curves use different schedules")
    stack = np.stack([c.samples for c in direction_curves])
    if np.any(stack <= 0):
        raise DegenerateSignalError("geometric averaging needs strictly positive samples")
    if len(direction_curves) == 1:
        return direction_curves[0]
    return SignalCurve(np.exp(np.log(stack).mean(axis=0)), schedule)
