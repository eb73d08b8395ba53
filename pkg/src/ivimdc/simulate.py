"""Synthetic IVIM datasets: parameter draws, Rician noise, b-value subsampling."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError, ScheduleMismatchError
from .model import (
    BValueSchedule,
    IvimParams,
    SignalCurve,
    as_schedule,
    ivim_model,
)

LOW_BVALUES = (0, 15, 30, 45, 60, 75, 90, 105, 120, 135, 150, 175)
HIGH_BVALUES = (200, 400, 600, 800)
# b-values the stride is never allowed to drop
RETAINED_BVALUES = (0.0, 200.0)


@dataclass(frozen=True)
class ParamRanges:
    D_min: float = 0.0005
    D_max: float = 0.003
    f_min: float = 0.05
    f_max: float = 0.5
    Dstar_min: float = 0.005
    Dstar_max: float = 0.1

    def __post_init__(self):
        for name in ("D", "f", "Dstar"):
            lo, hi = getattr(self, f"{name}_min"), getattr(self, f"{name}_max")
            if lo < 0 or hi < lo:
                raise InvalidArgumentError(f"invalid {name} range [{lo}, {hi}]")
        if self.f_max > 1:
            raise InvalidArgumentError("f_max must be <= 1")

    def lows(self) -> np.ndarray:
        return np.array([self.D_min, self.f_min, self.Dstar_min])

    def highs(self) -> np.ndarray:
        return np.array([self.D_max, self.f_max, self.Dstar_max])


@dataclass
class SimDatasetConfig:
    count: int
    schedule: BValueSchedule
    snr: float = 10.0
    seed: int = 0
    ranges: ParamRanges = field(default_factory=ParamRanges)
    s0: float = 1.0

    def __post_init__(self):
        self.schedule = as_schedule(self.schedule)
        if isinstance(self.ranges, dict):
            self.ranges = ParamRanges(**self.ranges)
        if int(self.count) != self.count or self.count < 1:
            raise InvalidArgumentError(f"count must be a positive integer, got {self.count}")
        if not self.snr > 0:
            raise InvalidArgumentError(f"snr must be > 0, got {self.snr}")
        if not self.s0 > 0:
            raise InvalidArgumentError(f"s0 must be > 0, got {self.s0}")

    def to_dict(self) -> dict:
        return {
            "count": int(self.count),
            "schedule": self.schedule.tolist(),
            "snr": float(self.snr),
            "seed": int(self.seed),
            "ranges": asdict(self.ranges),
            "s0": float(self.s0),
        }


@dataclass(eq=False)
class LabeledDataset:
    """Noisy curves stored row-wise with optional (D, f, Dstar) labels."""

    signals: np.ndarray
    schedule: BValueSchedule
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.schedule = as_schedule(self.schedule)
        self.signals = np.atleast_2d(np.asarray(self.signals, dtype=np.float64))
        if self.signals.shape[1] != len(self.schedule):
            raise ScheduleMismatchError(
                f"{self.signals.shape[1]} samples per curve, schedule has {len(self.schedule)}"
            )
        if self.labels is not None:
            self.labels = np.atleast_2d(np.asarray(self.labels, dtype=np.float64))
            if self.labels.shape != (self.signals.shape[0], 3):
                raise InvalidArgumentError("labels must have shape (count, 3)")

    def __len__(self) -> int:
        return self.signals.shape[0]

    @property
    def curves(self) -> list:
        return [SignalCurve(row, self.schedule) for row in self.signals]

    @property
    def params(self) -> list:
        if self.labels is None:
            return []
        return [IvimParams.from_array(row) for row in self.labels]

    def subset(self, idx) -> "LabeledDataset":
        labels = None if self.labels is None else self.labels[idx]
        return LabeledDataset(self.signals[idx], self.schedule, labels)


def sample_parameters(ranges: ParamRanges, rng: np.random.Generator) -> IvimParams:
    return IvimParams.from_array(sample_parameter_array(ranges, rng, 1)[0])


def sample_parameter_array(ranges: ParamRanges, rng: np.random.Generator, count: int) -> np.ndarray:
    """``count`` rows of (D, f, Dstar), each uniform on its range."""
    u = rng.random((count, 3))
    return ranges.lows() + u * (ranges.highs() - ranges.lows())


def rician_noise(signal: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Magnitude of the signal plus complex Gaussian noise of per-channel std ``sigma``."""
    signal = np.asarray(signal, dtype=np.float64)
    if sigma == 0:
        return signal.copy()
    real = signal + rng.normal(0.0, sigma, size=signal.shape)
    imag = rng.normal(0.0, sigma, size=signal.shape)
    return np.hypot(real, imag)


def add_rician_noise(curve: SignalCurve, snr: float, s0: float, rng: np.random.Generator) -> SignalCurve:
    """Rician-corrupt ``curve`` with sigma = s0 / snr; ``snr=inf`` is a no-op."""
    if not snr > 0:
        raise InvalidArgumentError(f"snr must be > 0, got {snr}")
    if not s0 > 0:
        raise InvalidArgumentError(f"s0 must be > 0, got {s0}")
    return SignalCurve(rician_noise(curve.samples, s0 / snr, rng), curve.schedule)


def subsample_schedule(low, high, k: int, retain: Sequence[float] = RETAINED_BVALUES) -> BValueSchedule:
    """Every k-th low b-value, plus the retained ones and all high b-values."""
    if int(k) != k or k < 1:
        raise InvalidArgumentError(f"sampling factor must be an integer >= 1, got {k}")
    low = np.asarray(as_schedule(low).values)
    high = np.asarray(as_schedule(high).values)
    if low[0] != 0:
        raise InvalidArgumentError("low b-value schedule must start at 0")
    picked = low[:: int(k)]
    combined = np.concatenate([picked, np.asarray(retain, dtype=np.float64), high])
    # retained values only count when they belong to the acquisition at all
    available = np.concatenate([low, high])
    combined = combined[np.isin(combined, available)]
    return BValueSchedule(np.unique(combined))


def default_schedule(k: int) -> BValueSchedule:
    """The standard 12 low plus 4 high b-value acquisition at sampling factor ``k``."""
    return subsample_schedule(LOW_BVALUES, HIGH_BVALUES, k)


def generate_dataset(config: SimDatasetConfig) -> LabeledDataset:
    """Draw labels, evaluate the forward model and add Rician noise.

    All randomness comes from one generator seeded with ``config.seed``:
    labels are drawn first, then the noise, so the clean labels of a dataset
    do not depend on the noise level.
    """
    rng = np.random.default_rng(config.seed)
    labels = sample_parameter_array(config.ranges, rng, int(config.count))
    b = config.schedule.values
    clean = ivim_model(b, labels[:, :1], labels[:, 1:2], labels[:, 2:3], config.s0)
    sigma = config.s0 / config.snr if np.isfinite(config.snr) else 0.0
    noisy = rician_noise(clean, sigma, rng)
    return LabeledDataset(noisy, config.schedule, labels)
