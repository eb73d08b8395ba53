"""Error metrics and experiment runners (sampling-factor sweep, grid search,
covariate correlation)."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import fitting, network
from .errors import (
    InvalidArgumentError,
    IvimError,
    JoinError,
    UndefinedStatisticError,
)
from .model import PARAM_NAMES, SignalCurve, normalize_rows
from .simulate import (
    HIGH_BVALUES,
    LOW_BVALUES,
    LabeledDataset,
    ParamRanges,
    SimDatasetConfig,
    generate_dataset,
    subsample_schedule,
)

logger = logging.getLogger(__name__)

NEURAL_METHODS = ("super-dc", "ivimnet", "supervised")
CLASSICAL_METHODS = ("lsq", "segmented")
METHODS = NEURAL_METHODS + CLASSICAL_METHODS
STAGE_SPLIT_WEEKS = 25.5


def nrmse(estimates, references) -> float:
    """Root-mean-squared error divided by the mean absolute reference."""
    est = np.asarray(estimates, dtype=np.float64).ravel()
    ref = np.asarray(references, dtype=np.float64).ravel()
    if est.size != ref.size or ref.size == 0:
        raise InvalidArgumentError("nrmse needs two non-empty lists of equal length")
    scale = np.mean(np.abs(ref))
    if scale == 0:
        raise UndefinedStatisticError("nrmse is undefined for an all-zero reference")
    return float(np.sqrt(np.mean((est - ref) ** 2)) / scale)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise InvalidArgumentError("pearson needs two lists of equal length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = dx @ dx, dy @ dy
    if sxx == 0 or syy == 0:
        raise UndefinedStatisticError("pearson correlation is undefined for zero variance")
    r = (dx @ dy) / math.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


# -- estimator dispatch ------------------------------------------------------

def estimate(method: str, signals: np.ndarray, schedule, weights=None,
             bounds: Optional[fitting.FitBounds] = None) -> np.ndarray:
    """(D, f, Dstar) rows for each signal row using the named method."""
    if method in NEURAL_METHODS:
        if weights is None:
            raise InvalidArgumentError(f"method {method!r} needs trained weights")
        return network.predict_batch(weights, normalize_rows(signals))[:, :3]
    if method == "lsq":
        fit = fitting.fit_lsq
    elif method == "segmented":
        fit = fitting.fit_segmented
    else:
        raise InvalidArgumentError(f"unknown method {method!r}")
    out = np.empty((signals.shape[0], 3))
    for i, row in enumerate(signals):
        out[i] = fit(SignalCurve(row, schedule), bounds=bounds).params.as_array()
    return out


def nrmse_by_parameter(estimates: np.ndarray, labels: np.ndarray) -> dict:
    return {name: nrmse(estimates[:, j], labels[:, j]) for j, name in enumerate(PARAM_NAMES)}


# -- sampling factor sweep -----------------------------------------------------

@dataclass
class SweepConfig:
    factors: tuple = (1, 2, 3, 4, 5, 6)
    methods: tuple = ("super-dc", "ivimnet")
    test_count: int = 1000
    train_count: int = 100_000
    snr: float = 10.0
    seed: int = 0
    ranges: ParamRanges = field(default_factory=ParamRanges)
    low_bvalues: tuple = LOW_BVALUES
    high_bvalues: tuple = HIGH_BVALUES
    train: network.TrainingConfig = field(default_factory=network.TrainingConfig)
    net: dict = field(default_factory=dict)

    def __post_init__(self):
        self.factors = tuple(int(k) for k in self.factors)
        self.methods = tuple(self.methods)
        if isinstance(self.ranges, dict):
            self.ranges = ParamRanges(**self.ranges)
        if isinstance(self.train, dict):
            self.train = network.TrainingConfig.from_dict(self.train)
        if not self.factors or not set(self.factors) <= set(range(1, 7)):
            raise InvalidArgumentError(f"sampling factors must lie in 1..6, got {self.factors}")
        unknown = set(self.methods) - set(METHODS)
        if not self.methods or unknown:
            raise InvalidArgumentError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if self.test_count < 1 or self.train_count < 1:
            raise InvalidArgumentError("test_count and train_count must be >= 1")
        if not self.snr > 0:
            raise InvalidArgumentError("snr must be > 0 (use inf for noiseless data)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["factors"] = list(self.factors)
        d["methods"] = list(self.methods)
        d["low_bvalues"] = list(self.low_bvalues)
        d["high_bvalues"] = list(self.high_bvalues)
        return d


@dataclass
class ExperimentResult:
    rows: list
    provenance: dict

    def table(self) -> dict:
        return {(r["method"], r["factor"], r["parameter"]): r["nrmse"] for r in self.rows}

    def get(self, method, factor, parameter) -> float:
        return self.table()[(method, factor, parameter)]


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for a (factor, role, ...) cell, independent of execution order."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


_ROLE_TRAIN, _ROLE_TEST, _ROLE_NET = 0, 1, 2


def _sweep_factor(config: SweepConfig, k: int):
    schedule = subsample_schedule(config.low_bvalues, config.high_bvalues, k)
    seeds = {
        "train_data": derive_seed(config.seed, k, _ROLE_TRAIN),
        "test_data": derive_seed(config.seed, k, _ROLE_TEST),
        "training": derive_seed(config.seed, k, _ROLE_NET),
    }
    test = generate_dataset(SimDatasetConfig(
        count=config.test_count, schedule=schedule, snr=config.snr,
        seed=seeds["test_data"], ranges=config.ranges,
    ))
    train_set = None
    if any(m in NEURAL_METHODS for m in config.methods):
        train_set = generate_dataset(SimDatasetConfig(
            count=config.train_count, schedule=schedule, snr=config.snr,
            seed=seeds["train_data"], ranges=config.ranges,
        ))
    rows, histories = [], {}
    for method in config.methods:
        try:
            weights = None
            if method in NEURAL_METHODS:
                tc = replace(config.train, mode=method, seed=seeds["training"])
                net_config = network.NetworkConfig(input_size=len(schedule), **config.net)
                weights, history = network.train(train_set, net_config, tc)
                histories[method] = {"epochs": len(history.val_loss),
                                     "best_epoch": history.best_epoch,
                                     "best_val_loss": history.best_val_loss}
            est = estimate(method, test.signals, schedule, weights)
            scores = nrmse_by_parameter(est, test.labels)
            for name in PARAM_NAMES:
                rows.append(dict(method=method, factor=k, parameter=name,
                                 nrmse=scores[name], error=""))
        except IvimError as exc:
            logger.warning("sweep cell (%s, k=%d) failed: %s", method, k, exc)
            for name in PARAM_NAMES:
                rows.append(dict(method=method, factor=k, parameter=name,
                                 nrmse=float("nan"), error=f"{type(exc).__name__}: {exc}"))
    info = {"factor": k, "schedule": schedule.tolist(), "seeds": seeds, "training": histories}
    return rows, info


def sampling_factor_sweep(config: SweepConfig, threads: int = 1) -> ExperimentResult:
    """NRMSE of every method at every sampling factor.

    Each factor is an independent job whose seeds derive from ``config.seed``
    and the factor, so the result does not depend on ``threads``.
    """
    if threads > 1 and len(config.factors) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_sweep_factor, [config] * len(config.factors), config.factors))
    else:
        parts = [_sweep_factor(config, k) for k in config.factors]
    rows = [row for part, _ in parts for row in part]
    provenance = {"config": config.to_dict(), "cells": [info for _, info in parts]}
    return ExperimentResult(rows, provenance)


# -- hyperparameter grid search -----------------------------------------------

AXES = ("alpha_D", "alpha_f", "alpha_Dstar", "alpha_dc")


@dataclass
class GridSearchResult:
    axis: str
    best: Optional[float]
    table: list


def grid_search(base: network.TrainingConfig, axis: str, grid: Sequence[float],
                train_dataset: LabeledDataset, eval_dataset: LabeledDataset,
                net_config: Optional[network.NetworkConfig] = None) -> GridSearchResult:
    """Train once per value of one loss weight and keep the best.

    Each trained network is scored by the sum of its per-parameter NRMSE on
    ``eval_dataset``.  Cells whose training fails are kept in the table with
    their error and excluded from the argmin; ties go to the smaller value.
    """
    if axis not in AXES:
        raise InvalidArgumentError(f"axis must be one of {AXES}, got {axis!r}")
    if len(grid) == 0:
        raise InvalidArgumentError("grid must not be empty")
    if eval_dataset.labels is None:
        raise InvalidArgumentError("grid search needs a labelled evaluation dataset")
    table = []
    for value in grid:
        value = float(value)
        row = {"value": value, "score": float("nan"), "error": ""}
        try:
            lw = replace(base.loss_weights, **{axis: value})
            tc = replace(base, loss_weights=lw)
            weights, _ = network.train(train_dataset, net_config, tc)
            est = estimate(tc.mode, eval_dataset.signals, eval_dataset.schedule, weights)
            scores = nrmse_by_parameter(est, eval_dataset.labels)
            row.update(scores)
            row["score"] = float(sum(scores.values()))
        except IvimError as exc:
            logger.warning("grid cell %s=%g failed: %s", axis, value, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        table.append(row)
    ok = [r for r in table if not r["error"] and np.isfinite(r["score"])]
    best = min(ok, key=lambda r: (r["score"], r["value"]))["value"] if ok else None
    return GridSearchResult(axis, best, table)


# -- correlation with a clinical covariate ------------------------------------

@dataclass
class StageCorrelation:
    stage: str
    n: int
    r: float


def correlate_fraction_with_covariate(fit_table: dict, covariate_table: dict,
                                      stage_split: float = STAGE_SPLIT_WEEKS) -> list:
    """Pearson r between f and the covariate within each developmental stage.

    Cases with covariate below ``stage_split`` form the early (canalicular)
    stage, the rest the late (saccular) stage.  A stage with fewer than two
    cases is reported with ``r = nan``.
    """
    missing_cov = sorted(set(fit_table) - set(covariate_table), key=str)
    missing_fit = sorted(set(covariate_table) - set(fit_table), key=str)
    if missing_cov or missing_fit:
        raise JoinError(
            f"case ids do not match: no covariate for {missing_cov[:5]}, "
            f"no fit for {missing_fit[:5]}"
        )
    ids = sorted(fit_table, key=str)
    f = np.array([float(fit_table[i]) for i in ids])
    cov = np.array([float(covariate_table[i]) for i in ids])
    out = []
    for stage, mask in (("canalicular", cov < stage_split), ("saccular", cov >= stage_split)):
        n = int(mask.sum())
        r = pearson(cov[mask], f[mask]) if n >= 2 else float("nan")
        out.append(StageCorrelation(stage, n, r))
    return out
