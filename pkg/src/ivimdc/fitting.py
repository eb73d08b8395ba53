"""Classical IVIM estimators: segmented fit and bounded nonlinear least squares."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import (
    DegenerateSignalError,
    InvalidArgumentError,
    NumericFailureError,
    UnderdeterminedFitError,
)
from .model import IvimParams, SignalCurve, ivim_model

logger = logging.getLogger(__name__)

SPLIT_BVALUE = 200.0

XTOL = 1e-8
FTOL = 1e-10
MAX_ITER = 200


@dataclass(frozen=True)
class FitBounds:
    D: tuple = (0.0, 0.005)
    f: tuple = (0.0, 1.0)
    Dstar: tuple = (0.0, 0.5)
    s0: tuple = (0.0, np.inf)

    def __post_init__(self):
        for name in ("D", "f", "Dstar", "s0"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise InvalidArgumentError(f"bounds for {name} must satisfy lower < upper")

    def lower(self) -> np.ndarray:
        return np.array([self.D[0], self.f[0], self.Dstar[0], self.s0[0]])

    def upper(self) -> np.ndarray:
        return np.array([self.D[1], self.f[1], self.Dstar[1], self.s0[1]])


@dataclass
class FitResult:
    params: IvimParams
    s0_hat: float
    residual_norm: float
    converged: bool
    iterations: int
    cost_history: list = field(default_factory=list, repr=False)


def _residual_and_jacobian(x, b, s):
    D, f, Dstar, s0 = x
    slow = np.exp(-b * D)
    fast = np.exp(-b * (Dstar + D))
    shape = f * fast + (1.0 - f) * slow
    model = s0 * shape
    jac = np.empty((b.size, 4))
    jac[:, 0] = -b * model
    jac[:, 1] = s0 * (fast - slow)
    jac[:, 2] = -b * s0 * f * fast
    jac[:, 3] = shape
    return model - s, jac


def residual_jacobian(params: IvimParams, s0: float, curve: SignalCurve):
    """Residual vector (model - data) and its analytic Jacobian in (D, f, Dstar, s0)."""
    x = np.array([params.D, params.f, params.Dstar, s0])
    return _residual_and_jacobian(x, curve.schedule.values, curve.samples)


def fit_segmented(curve: SignalCurve, b_threshold: float = SPLIT_BVALUE,
                  bounds: Optional[FitBounds] = None) -> FitResult:
    """Segmented IVIM fit.

    A log-linear fit to the samples with ``b >= b_threshold`` gives D and the
    intercept A, then f = 1 - A / s(0), and finally Dstar is fitted on the
    whole curve with D, f and s0 = s(0) held fixed.
    """
    bounds = bounds or FitBounds()
    b, s = curve.schedule.values, curve.samples
    if not curve.schedule.anchored:
        raise InvalidArgumentError("segmented fit needs a schedule starting at b=0")
    high = b >= b_threshold
    if high.sum() < 2 or (~high).sum() < 2:
        raise UnderdeterminedFitError(
            f"segmented fit needs >= 2 b-values on each side of {b_threshold}, "
            f"got {int((~high).sum())} below and {int(high.sum())} above"
        )
    if np.any(s[high] <= 0) or s[0] <= 0:
        raise DegenerateSignalError("segmented fit needs positive samples at b=0 and high b")

    design = np.column_stack([np.ones(high.sum()), -b[high]])
    (log_a, D), *_ = np.linalg.lstsq(design, np.log(s[high]), rcond=None)
    s0 = s[0]
    f = 1.0 - np.exp(log_a) / s0
    D = float(np.clip(D, *bounds.D))
    f = float(np.clip(f, *bounds.f))

    def cost(dstar):
        r = ivim_model(b, D, f, dstar, s0) - s
        return float(r @ r)

    res = minimize_scalar(cost, bounds=bounds.Dstar, method="bounded",
                          options={"xatol": 1e-12, "maxiter": 500})
    Dstar = float(np.clip(res.x, *bounds.Dstar))
    return FitResult(
        params=IvimParams(D=D, f=f, Dstar=Dstar),
        s0_hat=float(s0),
        residual_norm=cost(Dstar),
        converged=bool(res.success),
        iterations=int(res.nit),
    )


def _projected_gradient(x, g, lo, hi):
    pg = g.copy()
    pg[(x <= lo) & (g > 0)] = 0.0
    pg[(x >= hi) & (g < 0)] = 0.0
    return pg


def fit_nlls(curve: SignalCurve, init: IvimParams, s0_init: float,
             bounds: Optional[FitBounds] = None, max_iter: int = MAX_ITER,
             xtol: float = XTOL, ftol: float = FTOL) -> FitResult:
    """Bounded Levenberg-Marquardt fit of (D, f, Dstar, s0).

    Steps are solved with Marquardt's diagonal scaling on the set of free
    parameters (those not pinned at a bound by an outward-pointing gradient)
    and then projected back into the box.  A step is only accepted if it
    lowers the cost, so the accepted cost sequence is non-increasing.
    ``iterations`` counts accepted steps.
    """
    bounds = bounds or FitBounds()
    lo, hi = bounds.lower(), bounds.upper()
    b, s = curve.schedule.values, curve.samples
    x = np.array([init.D, init.f, init.Dstar, s0_init], dtype=np.float64)
    if np.any(x < lo) or np.any(x > hi):
        raise InvalidArgumentError(f"initial guess {x} lies outside the bounds")

    width = np.where(np.isfinite(hi - lo), hi - lo, 0.0)
    signal_scale = max(float(np.abs(s).max()), np.finfo(float).tiny)

    r, jac = _residual_and_jacobian(x, b, s)
    cost = float(r @ r)
    if not np.isfinite(cost):
        raise NumericFailureError("non-finite residual at the initial guess")
    history = [cost]
    lam = 1e-3
    iterations = 0
    converged = False
    exact = 1e-28 * float(s @ s)

    while True:
        if cost <= exact:
            converged = True
            break
        g = jac.T @ r
        pg = _projected_gradient(x, g, lo, hi)
        typical = np.maximum(np.abs(x), 1e-3 * width)
        typical[3] = max(abs(x[3]), 1e-3 * signal_scale)
        # first-order optimality on the active set, in scale-free units
        if np.max(np.abs(pg) * typical) <= 1e-14 * max(cost, exact):
            converged = True
            break
        if iterations >= max_iter:
            break

        free = pg != 0
        free |= (x > lo) & (x < hi)
        A = jac.T @ jac
        diag = np.diag(A).copy()
        diag = np.maximum(diag, 1e-12 * max(diag.max(), np.finfo(float).tiny))
        accepted = False
        while lam < 1e20:
            step = np.zeros(4)
            idx = np.flatnonzero(free)
            M = A[np.ix_(idx, idx)] + lam * np.diag(diag[idx])
            try:
                step[idx] = np.linalg.solve(M, -g[idx])
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = np.clip(x + step, lo, hi)
            r_new, jac_new = _residual_and_jacobian(x_new, b, s)
            cost_new = float(r_new @ r_new)
            if not np.isfinite(cost_new):
                raise NumericFailureError(f"non-finite residual at parameters {x_new}")
            if cost_new < cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # no descent direction left at working precision
            converged = np.max(np.abs(pg) * typical) <= 1e-6 * max(cost, exact) + 1e-300
            break

        iterations += 1
        rel_step = np.max(np.abs(x_new - x) / np.maximum(typical, np.finfo(float).tiny))
        rel_cost = (cost - cost_new) / cost
        x, r, jac, cost = x_new, r_new, jac_new, cost_new
        history.append(cost)
        lam = max(lam / 10.0, 1e-12)
        if rel_step < xtol and rel_cost < ftol:
            converged = True
            break

    return FitResult(
        params=IvimParams.from_array(x[:3]),
        s0_hat=float(x[3]),
        residual_norm=cost,
        converged=bool(converged),
        iterations=iterations,
        cost_history=history,
    )


def fit_lsq(curve: SignalCurve, bounds: Optional[FitBounds] = None,
            b_threshold: float = SPLIT_BVALUE) -> FitResult:
    """Segmented fit followed by full bounded NLLS refinement."""
    bounds = bounds or FitBounds()
    seg = fit_segmented(curve, b_threshold, bounds)
    s0_init = float(np.clip(seg.s0_hat, *bounds.s0))
    return fit_nlls(curve, seg.params, s0_init, bounds)
