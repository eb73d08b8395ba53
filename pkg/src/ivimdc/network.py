"""Per-voxel MLP estimator for IVIM parameters, written directly in numpy.

The network maps a normalised signal curve to (D, f, Dstar) and optionally
s0.  Each raw output ``z`` is squashed into its configured range with
``lo + sigmoid(z) * (hi - lo)`` so predictions are always physical.

Three training objectives are available:

``supervised``
    weighted squared parameter error against the simulation labels.
``ivimnet``
    squared residual between the forward model of the prediction and the
    observed (noisy) curve; labels are ignored.
``super-dc``
    the supervised term plus ``alpha_dc`` times the squared residual between
    the forward model of the prediction and the noise-free reference curve.

Gradients are computed by hand-written backpropagation in float64 and can be
checked against central finite differences with :func:`gradient_check`.
"""

from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    FormatError,
    InvalidArgumentError,
    MissingLabelsError,
    NumericFailureError,
    ShapeError,
)
from .model import (
    PARAM_NAMES,
    IvimParams,
    SignalCurve,
    as_schedule,
    ivim_model,
    normalize_rows,
)

logger = logging.getLogger(__name__)

MODES = ("supervised", "ivimnet", "super-dc")

DEFAULT_OUTPUT_RANGES = {
    "D": (1e-4, 5e-3),
    "f": (0.0, 0.7),
    "Dstar": (1e-3, 0.3),
    "s0": (0.5, 1.5),
}


@dataclass
class NetworkConfig:
    input_size: int
    hidden_layers: int = 3
    hidden_width: Optional[int] = None
    activation: str = "elu"
    output_ranges: dict = field(default_factory=lambda: dict(DEFAULT_OUTPUT_RANGES))
    predict_s0: bool = False
    # "identity" disables the range squashing; only meant for gradient tests.
    output_transform: str = "sigmoid"

    def __post_init__(self):
        if self.hidden_width is None:
            self.hidden_width = self.input_size
        if self.input_size < 1 or self.hidden_width < 1:
            raise InvalidArgumentError("input_size and hidden_width must be >= 1")
        if self.hidden_layers < 1:
            raise InvalidArgumentError("hidden_layers must be >= 1")
        if self.activation not in ("elu", "identity"):
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")
        if self.output_transform not in ("sigmoid", "identity"):
            raise InvalidArgumentError(f"unknown output transform {self.output_transform!r}")
        ranges = dict(DEFAULT_OUTPUT_RANGES)
        ranges.update({k: tuple(float(x) for x in v) for k, v in self.output_ranges.items()})
        for name in self.output_names:
            lo, hi = ranges[name]
            if not lo < hi:
                raise InvalidArgumentError(f"empty output range for {name}: {(lo, hi)}")
        self.output_ranges = ranges

    @property
    def output_names(self) -> tuple:
        return PARAM_NAMES + (("s0",) if self.predict_s0 else ())

    @property
    def n_outputs(self) -> int:
        return len(self.output_names)

    @property
    def layer_sizes(self) -> list:
        return (
            [self.input_size]
            + [self.hidden_width] * self.hidden_layers
            + [self.n_outputs]
        )

    def range_arrays(self):
        lo = np.array([self.output_ranges[n][0] for n in self.output_names])
        hi = np.array([self.output_ranges[n][1] for n in self.output_names])
        return lo, hi

    def to_dict(self) -> dict:
        d = asdict(self)
        d["output_ranges"] = {k: list(v) for k, v in self.output_ranges.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass
class NetworkWeights:
    config: NetworkConfig
    weights: list
    biases: list

    def __post_init__(self):
        sizes = self.config.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ShapeError("number of layers does not match the network config")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ShapeError(
                    f"layer {i}: got {w.shape}/{b.shape}, "
                    f"expected {(sizes[i], sizes[i + 1])}/{(sizes[i + 1],)}"
                )

    def arrays(self) -> list:
        """Flat list of parameter arrays, interleaved as W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(
            copy.deepcopy(self.config),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


@dataclass
class LossWeights:
    alpha_D: float = 1.0 / 3e-3**2
    alpha_f: float = 1.0 / 0.5**2
    alpha_Dstar: float = 1.0 / 0.1**2
    alpha_dc: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise InvalidArgumentError(f"{name} must be finite and >= 0, got {value}")

    def supervised_array(self) -> np.ndarray:
        return np.array([self.alpha_D, self.alpha_f, self.alpha_Dstar])


def init_network(config: NetworkConfig, seed: int = 0) -> NetworkWeights:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    rng = np.random.default_rng(seed)
    sizes = config.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return NetworkWeights(config, weights, biases)


# -- forward / backward ---------------------------------------------------

def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x, y):
    # y = elu(x); derivative is 1 for x > 0 and exp(x) = y + 1 otherwise
    return np.where(x > 0, 1.0, y + 1.0)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward(net: NetworkWeights, x: np.ndarray):
    config = net.config
    pre, post = [], [x]
    h = x
    n_layers = len(net.weights)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        if i < n_layers - 1:
            pre.append(z)
            h = _elu(z) if config.activation == "elu" else z
            post.append(h)
        else:
            raw = z
    if config.output_transform == "sigmoid":
        lo, hi = config.range_arrays()
        sig = _sigmoid(raw)
        # saturated sigmoids would land on the endpoints; stay one ulp inside
        params = np.clip(lo + sig * (hi - lo), np.nextafter(lo, hi), np.nextafter(hi, lo))
        dparams_draw = sig * (1.0 - sig) * (hi - lo)
    else:
        params = raw
        dparams_draw = np.ones_like(raw)
    return params, (pre, post, dparams_draw)


def _backward(net: NetworkWeights, cache, dparams: np.ndarray) -> list:
    """Gradients of the loss w.r.t. W0, b0, W1, b1, ... given dL/dparams."""
    pre, post, dparams_draw = cache
    delta = dparams * dparams_draw
    grads = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        grads[2 * i] = post[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ net.weights[i].T
            if net.config.activation == "elu":
                delta = delta * _elu_grad(pre[i - 1], post[i])
    return grads


def predict_batch(net: NetworkWeights, signals: np.ndarray) -> np.ndarray:
    """Parameter rows (D, f, Dstar[, s0]) for each row of normalised ``signals``."""
    signals = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    if signals.shape[1] != net.config.input_size:
        raise ShapeError(
            f"network expects {net.config.input_size} samples per curve, got {signals.shape[1]}"
        )
    return _forward(net, signals)[0]


def predict(net: NetworkWeights, curve: SignalCurve):
    """Predict IVIM parameters from a normalised curve.

    Returns an :class:`IvimParams`, or ``(IvimParams, s0_hat)`` when the
    network was configured with ``predict_s0``.
    """
    if len(curve) != net.config.input_size:
        raise ShapeError(
            f"network expects {net.config.input_size} samples per curve, got {len(curve)}"
        )
    row = predict_batch(net, curve.samples[None, :])[0]
    params = IvimParams(D=row[0], f=row[1], Dstar=row[2])
    if net.config.predict_s0:
        return params, float(row[3])
    return params


# -- objectives -------------------------------------------------------------

def loss_supervised(predicted: IvimParams, reference: IvimParams, w: LossWeights) -> float:
    err = predicted.as_array() - reference.as_array()
    return float(w.alpha_D * err[0] ** 2 + w.alpha_f * err[1] ** 2 + w.alpha_Dstar * err[2] ** 2)


def _dc_residual(predicted: IvimParams, curve: SignalCurve, s0, schedule):
    schedule = as_schedule(schedule)
    if len(curve) != len(schedule) or curve.schedule != schedule:
        raise ShapeError("curve does not match the schedule")
    model = ivim_model(schedule.values, predicted.D, predicted.f, predicted.Dstar, s0)
    # index 0 is the b=0 anchor used for normalisation; it is left out
    return model[1:] - curve.samples[1:]


def loss_dc(predicted: IvimParams, reference_curve: SignalCurve, s0: float, schedule) -> float:
    r = _dc_residual(predicted, reference_curve, s0, schedule)
    return float(np.sum(r * r))


def loss_unsupervised(predicted: IvimParams, observed_curve: SignalCurve, s0: float, schedule) -> float:
    r = _dc_residual(predicted, observed_curve, s0, schedule)
    return float(np.sum(r * r))


def loss_total(
    predicted: IvimParams,
    reference_params: IvimParams,
    reference_curve: SignalCurve,
    w: LossWeights,
    s0: float = 1.0,
) -> float:
    supervised = loss_supervised(predicted, reference_params, w)
    if w.alpha_dc == 0:
        return supervised
    return supervised + w.alpha_dc * loss_dc(
        predicted, reference_curve, s0, reference_curve.schedule
    )


@dataclass
class Batch:
    """Arrays needed to evaluate a training objective on a set of curves.

    ``signals`` are the normalised network inputs, ``labels`` the (D, f,
    Dstar) references and ``reference`` the noise-free normalised curves used
    by the data-consistency term.
    """

    signals: np.ndarray
    bvalues: np.ndarray
    labels: Optional[np.ndarray] = None
    reference: Optional[np.ndarray] = None

    def subset(self, idx) -> "Batch":
        return Batch(
            self.signals[idx],
            self.bvalues,
            None if self.labels is None else self.labels[idx],
            None if self.reference is None else self.reference[idx],
        )

    def __len__(self):
        return self.signals.shape[0]


def _signal_residual_grad(params, target, bvalues):
    """Summed squared residual over b-values 1..N and its gradient per row."""
    b = bvalues[1:]
    D = params[:, 0:1]
    f = params[:, 1:2]
    Dstar = params[:, 2:3]
    s0 = params[:, 3:4] if params.shape[1] > 3 else 1.0
    slow = np.exp(-b * D)
    fast = np.exp(-b * (Dstar + D))
    shape = f * fast + (1.0 - f) * slow
    model = s0 * shape
    r = model - target[:, 1:]
    loss = np.sum(r * r, axis=1)
    two_r = 2.0 * r
    grad = np.empty_like(params)
    grad[:, 0] = np.sum(two_r * (-b * model), axis=1)
    grad[:, 1] = np.sum(two_r * s0 * (fast - slow), axis=1)
    grad[:, 2] = np.sum(two_r * (-b * s0 * f * fast), axis=1)
    if params.shape[1] > 3:
        grad[:, 3] = np.sum(two_r * shape, axis=1)
    return loss, grad


def _objective(params: np.ndarray, batch: Batch, mode: str, lw: LossWeights):
    """Mean per-curve loss and its gradient w.r.t. the predicted parameters."""
    n = params.shape[0]
    loss = np.zeros(n)
    grad = np.zeros_like(params)
    if mode in ("supervised", "super-dc"):
        if batch.labels is None:
            raise MissingLabelsError(f"mode {mode!r} needs labelled curves")
        alpha = lw.supervised_array()
        err = params[:, :3] - batch.labels
        loss += np.sum(alpha * err * err, axis=1)
        grad[:, :3] += 2.0 * alpha * err
    if mode == "super-dc" and lw.alpha_dc != 0:
        if batch.reference is None:
            raise MissingLabelsError("super-dc needs reference curves")
        dc, dc_grad = _signal_residual_grad(params, batch.reference, batch.bvalues)
        loss += lw.alpha_dc * dc
        grad += lw.alpha_dc * dc_grad
    if mode == "ivimnet":
        loss, grad = _signal_residual_grad(params, batch.signals, batch.bvalues)
    if mode not in MODES:
        raise InvalidArgumentError(f"unknown training mode {mode!r}")
    return float(loss.mean()), grad / n


# overflow shows up as a non-finite loss, which train() turns into NumericFailureError
@np.errstate(over="ignore", invalid="ignore")
def loss_and_gradient(net: NetworkWeights, batch: Batch, mode: str, lw: LossWeights):
    params, cache = _forward(net, batch.signals)
    loss, dparams = _objective(params, batch, mode, lw)
    return loss, _backward(net, cache, dparams)


@np.errstate(over="ignore", invalid="ignore")
def batch_loss(net: NetworkWeights, batch: Batch, mode: str, lw: LossWeights) -> float:
    params, _ = _forward(net, batch.signals)
    return _objective(params, batch, mode, lw)[0]


def numerical_gradient(net, batch, mode, lw, step=1e-5) -> list:
    """Central finite-difference gradient over every weight and bias."""
    probe = net.copy()
    grads = []
    for arr in probe.arrays():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = batch_loss(probe, batch, mode, lw)
            flat[j] = orig - step
            down = batch_loss(probe, batch, mode, lw)
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def gradient_check(net, batch, mode, lw=None, step=1e-5) -> float:
    """Max relative difference between backprop and finite differences.

    Entries are compared relative to ``max(|analytic|, |numeric|)``, floored
    at 1e-6 times the largest gradient entry: below that, a central difference
    with ``step=1e-5`` is dominated by the rounding error of the loss itself.
    """
    lw = lw or LossWeights()
    _, analytic = loss_and_gradient(net, batch, mode, lw)
    numeric = numerical_gradient(net, batch, mode, lw, step)
    a = np.concatenate([g.ravel() for g in analytic])
    n = np.concatenate([g.ravel() for g in numeric])
    scale = max(np.max(np.abs(a)), np.max(np.abs(n)))
    if scale == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6 * scale)
    return float(np.max(np.abs(a - n) / denom))


# -- training ---------------------------------------------------------------

@dataclass
class TrainingConfig:
    mode: str = "super-dc"
    learning_rate: float = 1e-4
    batch_size: int = 128
    validation_fraction: float = 0.10
    patience_epochs: int = 10
    max_epochs: int = 1000
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if self.mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.validation_fraction < 1:
            raise InvalidArgumentError("validation_fraction must lie in (0, 1)")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if self.patience_epochs < 1 or self.max_epochs < 1:
            raise InvalidArgumentError("patience_epochs and max_epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise InvalidArgumentError("learning_rate must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        return cls(**d)


@dataclass
class TrainingHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    initial_val_loss: float = float("nan")
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch]


class EarlyStopping:
    """Track the best validation loss; signal a stop after ``patience`` stale epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value`` for ``epoch``; return True if it is a new best."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return epoch - self.best_epoch >= self.patience


class Adam:
    def __init__(self, arrays, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.arrays = arrays
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def dataset_batch(dataset, normalize=True) -> Batch:
    """Build a :class:`Batch` from a LabeledDataset-like object."""
    signals = np.asarray(dataset.signals, dtype=np.float64)
    if normalize:
        signals = normalize_rows(signals)
    bvalues = np.asarray(dataset.schedule.values, dtype=np.float64)
    labels = reference = None
    if dataset.labels is not None:
        labels = np.asarray(dataset.labels, dtype=np.float64)
        reference = ivim_model(bvalues, labels[:, :1], labels[:, 1:2], labels[:, 2:3])
    return Batch(signals, bvalues, labels, reference)


def split_indices(n: int, validation_fraction: float, rng):
    """Seeded train/validation split over row positions ``0..n-1``."""
    order = rng.permutation(n)
    n_val = max(1, int(round(validation_fraction * n)))
    if n_val >= n:
        raise InvalidArgumentError(f"cannot split {n} curves into train and validation sets")
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def train(dataset, net_config: Optional[NetworkConfig], train_config: TrainingConfig,
          row_ids=None, validation_loss=None, engine: str = "compiled"):
    """Fit network weights with mini-batch Adam and early stopping.

    ``row_ids`` are stable identifiers for the dataset rows (default: row
    position).  Rows are put in id order before the seeded split and shuffles,
    so permuting the rows together with their ids does not change the result.

    ``validation_loss`` optionally replaces the per-epoch validation metric;
    it is called as ``validation_loss(net, epoch)``.

    ``engine="numpy"`` runs the reference numpy implementation instead of the
    compiled epoch loop; both follow the same arithmetic.

    Returns ``(best_weights, history)``.
    """
    n = len(dataset)
    if n == 0:
        raise InvalidArgumentError("cannot train on an empty dataset")
    mode = train_config.mode
    if mode != "ivimnet" and dataset.labels is None:
        raise MissingLabelsError(f"mode {mode!r} needs labelled data")
    if net_config is None:
        net_config = NetworkConfig(input_size=len(dataset.schedule))
    if net_config.input_size != len(dataset.schedule):
        raise ShapeError(
            f"network input size {net_config.input_size} != schedule length {len(dataset.schedule)}"
        )

    full = dataset_batch(dataset)
    if mode == "ivimnet":
        full = Batch(full.signals, full.bvalues)
    if row_ids is not None:
        row_ids = np.asarray(row_ids)
        if row_ids.shape != (n,) or np.unique(row_ids).size != n:
            raise InvalidArgumentError("row_ids must be unique, one per row")
        full = full.subset(np.argsort(row_ids, kind="stable"))

    rng = np.random.default_rng(train_config.seed)
    net = init_network(net_config, seed=int(rng.integers(2**32)))
    train_idx, val_idx = split_indices(n, train_config.validation_fraction, rng)
    train_set, val_set = full.subset(train_idx), full.subset(val_idx)
    lw = train_config.loss_weights

    def val_metric(epoch):
        if validation_loss is not None:
            return float(validation_loss(net, epoch))
        return batch_loss(net, val_set, mode, lw)

    history = TrainingHistory(initial_val_loss=val_metric(-1))
    stopper = EarlyStopping(train_config.patience_epochs)
    best = net.copy()
    if engine == "compiled":
        run_epoch = _compiled_epoch_runner(net, train_set, mode, train_config)
    elif engine == "numpy":
        run_epoch = _numpy_epoch_runner(net, train_set, mode, train_config)
    else:
        raise InvalidArgumentError(f"unknown engine {engine!r}")
    n_train = len(train_set)

    for epoch in range(train_config.max_epochs):
        order = rng.permutation(n_train)
        total = run_epoch(order)
        if not np.isfinite(total):
            history.best_epoch = stopper.best_epoch
            raise NumericFailureError(
                f"non-finite training loss at epoch {epoch}", history=history
            )
        history.train_loss.append(total / n_train)
        val = val_metric(epoch)
        if not np.isfinite(val):
            history.best_epoch = stopper.best_epoch
            raise NumericFailureError(
                f"non-finite validation loss at epoch {epoch}", history=history
            )
        history.val_loss.append(val)
        if stopper.update(epoch, val):
            best = net.copy()
        logger.debug("epoch %d train %.6g val %.6g", epoch, history.train_loss[-1], val)
        if stopper.should_stop(epoch):
            history.stopped_early = True
            break

    history.best_epoch = stopper.best_epoch
    return best, history


def _numpy_epoch_runner(net, train_set, mode, tc):
    opt = Adam(net.arrays(), tc.learning_rate)
    lw = tc.loss_weights

    def run(order):
        total = 0.0
        for start in range(0, order.size, tc.batch_size):
            idx = order[start:start + tc.batch_size]
            loss, grads = loss_and_gradient(net, train_set.subset(idx), mode, lw)
            if not np.isfinite(loss):
                return loss
            opt.step(grads)
            total += loss * idx.size
        return total

    return run


def _compiled_epoch_runner(net, train_set, mode, tc):
    from . import _kernels

    arrays = net.arrays()
    offsets = np.cumsum([0] + [a.size for a in arrays])
    theta = np.concatenate([a.ravel() for a in arrays])
    # rebind the network's arrays as views into the flat vector
    views = [theta[offsets[i]:offsets[i + 1]].reshape(a.shape) for i, a in enumerate(arrays)]
    net.weights[:] = views[0::2]
    net.biases[:] = views[1::2]
    m, v = np.zeros_like(theta), np.zeros_like(theta)
    step = 0
    config = net.config
    lo, hi = config.range_arrays()
    n = len(train_set)
    labels = train_set.labels if train_set.labels is not None else np.zeros((n, 3))
    ref = train_set.reference if train_set.reference is not None else np.zeros_like(train_set.signals)
    lw = tc.loss_weights
    args = dict(
        X=np.ascontiguousarray(train_set.signals), labels=np.ascontiguousarray(labels),
        ref=np.ascontiguousarray(ref), bvals=np.ascontiguousarray(train_set.bvalues),
        mode=_kernels.MODE_CODES[mode], alphas=lw.supervised_array(), alpha_dc=float(lw.alpha_dc),
        lo=lo, hi=hi, use_elu=config.activation == "elu",
        use_sigmoid=config.output_transform == "sigmoid",
        w_off=offsets[0:-1:2].astype(np.int64), b_off=offsets[1::2].astype(np.int64),
        sizes=np.array(config.layer_sizes, dtype=np.int64),
    )

    def run(order):
        nonlocal step
        total, step = _kernels.run_epoch(
            theta, m, v, step, tc.learning_rate, 0.9, 0.999, 1e-8,
            order.astype(np.int64), tc.batch_size, **args)
        return total

    return run


# -- persistence -------------------------------------------------------------

_MAGIC = b"IVIMNET\x00"
_VERSION = 1


def save_weights(net: NetworkWeights, path) -> None:
    """Binary container: magic, version, JSON header, little-endian float64 payload."""
    header = {
        "version": _VERSION,
        "config": net.config.to_dict(),
        "shapes": [list(a.shape) for a in net.arrays()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for a in net.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_weights(path, expected_config: Optional[NetworkConfig] = None) -> NetworkWeights:
    data = Path(path).read_bytes()
    if data[: len(_MAGIC)] != _MAGIC:
        raise FormatError(f"{path}: not an IVIM network weight file")
    off = len(_MAGIC)
    try:
        version, header_len = struct.unpack_from("<II", data, off)
        off += 8
        header = json.loads(data[off: off + header_len].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    off += header_len
    if version != _VERSION or header.get("version") != _VERSION:
        raise FormatError(f"{path}: unsupported weight file version {version}")
    try:
        config = NetworkConfig.from_dict(header["config"])
        shapes = [tuple(s) for s in header["shapes"]]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from exc
    if expected_config is not None and expected_config.layer_sizes != config.layer_sizes:
        raise ShapeError(
            f"{path}: layer sizes {config.layer_sizes} != expected {expected_config.layer_sizes}"
        )
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        nbytes = 8 * count
        if off + nbytes > len(data):
            raise FormatError(f"{path}: truncated weight payload")
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64))
        off += nbytes
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes after weight payload")
    return NetworkWeights(config, arrays[0::2], arrays[1::2])
