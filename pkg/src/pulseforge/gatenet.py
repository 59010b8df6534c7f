"""Angle -> pulse-coefficient multilayer perceptron.

Everything is plain numpy. Two training regimes share one model type:

* ``train_mse``: analytic backprop against dataset coefficients;
* ``train_infidelity``: simulator in the loop, gradients by a finite
  difference per parameter.

Fixed-point behaviour is simulated by :func:`quantize`; a model with a
``quant`` format quantizes its input, weights, biases and every layer
output during the forward pass, and training treats that rounding as the
identity (straight-through).
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._parallel import pmap
from .datasetpipe import AngleDataset, ReductionMap, expand_coefficients
from .qusim import SimulationError, TransmonConfig, config_basis, propagate, trace_fidelity, unitarize

log = logging.getLogger(__name__)

BOOTSTRAP_SIZES = (1, 4, 5)
# Eight dense layers, 760 parameters, 20 coefficients out.
FINETUNE_760_SIZES = (1, 5, 5, 10, 10, 10, 10, 10, 20)


def parameter_count(layer_sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def check_preset(layer_sizes: Sequence[int], expected_params: int) -> tuple[int, ...]:
    n = parameter_count(layer_sizes)
    if n != expected_params:
        raise ValueError(f"layer sizes {list(layer_sizes)} give {n} parameters, expected {expected_params}")
    return tuple(int(s) for s in layer_sizes)


# fixed point ---------------------------------------------------------------


@dataclass(frozen=True)
class FixedPointFormat:
    """Signed two's-complement fixed point: ``W`` bits, ``I`` of them integer (incl. sign)."""

    total_bits: int = 16
    integer_bits: int = 5
    alpha_neg: float = 1.0
    qnoise_factor: float = 1.0

    def __post_init__(self):
        if not 1 <= self.integer_bits < self.total_bits <= 64:
            raise ValueError(
                f"need 1 <= integer_bits < total_bits <= 64, got I={self.integer_bits}, W={self.total_bits}"
            )
        if not 0.0 <= self.qnoise_factor <= 1.0:
            raise ValueError(f"qnoise_factor must be in [0, 1], got {self.qnoise_factor}")

    @property
    def frac_bits(self) -> int:
        return self.total_bits - self.integer_bits

    @property
    def step(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return -(2.0 ** (self.integer_bits - 1))

    @property
    def max_value(self) -> float:
        return 2.0 ** (self.integer_bits - 1) - self.step

    def to_dict(self) -> dict:
        return {
            "total_bits": self.total_bits,
            "integer_bits": self.integer_bits,
            "alpha_neg": self.alpha_neg,
            "qnoise_factor": self.qnoise_factor,
        }


def quantize(x, fmt: FixedPointFormat):
    """Round to the nearest grid point, saturating at the range ends.

    The result is blended with the input as ``x + qnoise_factor * (q - x)``.
    """
    x = np.asarray(x, dtype=float)
    scale = 2.0 ** fmt.frac_bits
    lo = -(2.0 ** (fmt.total_bits - 1))
    hi = 2.0 ** (fmt.total_bits - 1) - 1
    grid = np.clip(np.round(x * scale), lo, hi) / scale
    out = x + fmt.qnoise_factor * (grid - x)
    return float(out) if out.ndim == 0 else out


def saturation_count(values, fmt: FixedPointFormat) -> int:
    v = np.concatenate([np.ravel(a) for a in values]) if isinstance(values, (list, tuple)) else np.ravel(values)
    return int(np.sum((v < fmt.min_value) | (v > fmt.max_value + fmt.step / 2)))


# model ---------------------------------------------------------------------


@dataclass
class MlpModel:
    """Dense network; ``weights[l]`` has shape ``(n_in, n_out)``."""

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    alpha_neg: float = 1.0
    quant: FixedPointFormat | None = None

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and bias vector per layer transition is required")
        for l, (a, b) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            if self.weights[l].shape != (a, b) or self.biases[l].shape != (b,):
                raise ValueError(f"layer {l}: expected weight {(a, b)} and bias {(b,)}")

    @property
    def n_params(self) -> int:
        return parameter_count(self.layer_sizes)

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def hidden_slope(self) -> float:
        return self.quant.alpha_neg if self.quant is not None else self.alpha_neg

    def get_params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def with_params(self, theta: np.ndarray) -> "MlpModel":
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {theta.size}")
        weights, biases, pos = [], [], 0
        for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            weights.append(theta[pos:pos + a * b].reshape(a, b).copy())
            pos += a * b
            biases.append(theta[pos:pos + b].copy())
            pos += b
        return MlpModel(self.layer_sizes, weights, biases, self.alpha_neg, self.quant)

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    # serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "activation": {"hidden": "leaky_relu", "alpha_neg": self.alpha_neg, "output": "linear"},
            "quant": self.quant.to_dict() if self.quant else None,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MlpModel":
        act = obj.get("activation", {})
        if act.get("hidden", "leaky_relu") != "leaky_relu" or act.get("output", "linear") != "linear":
            raise ValueError(f"unsupported activation settings {act}")
        quant = FixedPointFormat(**obj["quant"]) if obj.get("quant") else None
        return cls(obj["layer_sizes"], obj["weights"], obj["biases"], float(act.get("alpha_neg", 1.0)), quant)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "MlpModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_model(layer_sizes=BOOTSTRAP_SIZES, seed: int = 0, alpha_neg: float = 1.0) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for a, b in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = math.sqrt(6.0 / (a + b))
        weights.append(rng.uniform(-limit, limit, (a, b)))
        biases.append(np.zeros(b))
    return MlpModel(tuple(layer_sizes), weights, biases, alpha_neg)


def _as_inputs(angle) -> np.ndarray:
    x = np.asarray(angle, dtype=float)
    return x.reshape(-1, 1) if x.ndim <= 1 else x


def _forward_cache(model: MlpModel, X: np.ndarray):
    q = model.quant
    qz = (lambda a: quantize(a, q)) if q is not None else (lambda a: a)
    slope = model.hidden_slope
    a = qz(X)
    acts, pres = [a], []
    last = len(model.weights) - 1
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ qz(W) + qz(b)
        pres.append(z)
        a = z if l == last else np.where(z >= 0, z, slope * z)
        a = qz(a)
        acts.append(a)
    return acts, pres


def forward(model: MlpModel, angle) -> np.ndarray:
    """Network output for one angle (vector) or many (rows)."""
    scalar = np.ndim(angle) == 0
    acts, _ = _forward_cache(model, _as_inputs(angle))
    return acts[-1][0] if scalar else acts[-1]


def mse_loss(model: MlpModel, X, Y) -> float:
    return float(np.mean((forward(model, X) - np.asarray(Y)) ** 2))


def mse_gradient(model: MlpModel, X, Y) -> tuple[float, np.ndarray]:
    """Loss and analytic gradient (flattened like ``get_params``)."""
    X = _as_inputs(X)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    acts, pres = _forward_cache(model, X)
    diff = acts[-1] - Y
    loss = float(np.mean(diff**2))
    delta = 2.0 * diff / diff.size
    slope = model.hidden_slope
    q = model.quant
    grads_w, grads_b = [], []
    for l in range(len(model.weights) - 1, -1, -1):
        grads_w.append(acts[l].T @ delta)
        grads_b.append(delta.sum(axis=0))
        if l > 0:
            W = quantize(model.weights[l], q) if q is not None else model.weights[l]
            delta = (delta @ W.T) * np.where(pres[l - 1] >= 0, 1.0, slope)
    grads_w.reverse()
    grads_b.reverse()
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in zip(grads_w, grads_b)])
    return loss, flat


# training curves -----------------------------------------------------------


@dataclass
class LossCurve:
    epochs: list[int] = field(default_factory=list)
    train: list[float] = field(default_factory=list)
    val: list[float] = field(default_factory=list)

    def append(self, epoch: int, train: float, val: float) -> None:
        self.epochs.append(int(epoch))
        self.train.append(float(train))
        self.val.append(float(val))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for e, t, v in zip(self.epochs, self.train, self.val):
                w.writerow([e, format(t, ".17g"), format(v, ".17g")])

    @classmethod
    def from_csv(cls, path) -> "LossCurve":
        curve = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                curve.append(int(row["epoch"]), float(row["train_loss"]), float(row["val_loss"]))
        return curve


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, checkpoint: MlpModel, curve: LossCurve):
        self.epoch = epoch
        self.checkpoint = checkpoint
        self.curve = curve
        super().__init__(f"loss became non-finite at epoch {epoch}")


class _Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-7):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta, grad):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class _Sgd:
    def __init__(self, lr, momentum=0.0):
        self.lr, self.momentum = lr, momentum
        self.velocity = None

    def step(self, theta, grad):
        if self.velocity is None:
            self.velocity = np.zeros_like(theta)
        self.velocity = self.momentum * self.velocity - self.lr * grad
        return theta + self.velocity


def _make_optimizer(name: str, lr: float, momentum: float = 0.0):
    if name == "adam":
        return _Adam(lr)
    if name == "sgd":
        return _Sgd(lr, momentum)
    raise ValueError(f"unknown optimizer {name!r}")


def fit_mse(
    model: MlpModel,
    X,
    Y,
    X_val=None,
    Y_val=None,
    epochs: int = 10_000,
    lr: float = 1e-4,
    optimizer: str = "adam",
) -> tuple[MlpModel, LossCurve]:
    """Full-batch MSE descent; returns the best-validation checkpoint and the curve.

    Without validation data the training loss selects the checkpoint.
    """
    X, Y = _as_inputs(X), np.atleast_2d(np.asarray(Y, dtype=float))
    has_val = X_val is not None
    if has_val:
        X_val, Y_val = _as_inputs(X_val), np.atleast_2d(np.asarray(Y_val, dtype=float))
    opt = _make_optimizer(optimizer, lr)
    theta = model.get_params()
    current = model.copy()
    curve = LossCurve()

    def evaluate(m):
        tr = mse_loss(m, X, Y)
        return tr, (mse_loss(m, X_val, Y_val) if has_val else tr)

    tr, va = evaluate(current)
    curve.append(0, tr, va)
    best, best_val = current.copy(), va
    for epoch in range(1, epochs + 1):
        _, grad = mse_gradient(current, X, Y)
        theta = opt.step(theta, grad)
        current = current.with_params(theta)
        tr, va = evaluate(current)
        if not (math.isfinite(tr) and math.isfinite(va)):
            raise TrainingDivergedError(epoch, best, curve)
        curve.append(epoch, tr, va)
        if va < best_val:
            best, best_val = current.copy(), va
    return best, curve


def train_mse(
    model: MlpModel,
    ds: AngleDataset,
    epochs: int = 10_000,
    lr: float = 1e-4,
    optimizer: str = "adam",
) -> tuple[MlpModel, LossCurve]:
    """Bootstrap training on the train split, checkpointing on the val split."""
    if ds.split_tags is None:
        raise ValueError("dataset needs train/val split tags")
    tr, va = ds.subset("train"), ds.subset("val")
    if tr.n_angles == 0 or va.n_angles == 0:
        raise ValueError("dataset needs non-empty train and val splits")
    if ds.n_out != model.n_out:
        raise ValueError(f"model has {model.n_out} outputs but dataset has {ds.n_out} columns")
    return fit_mse(model, tr.angles, tr.coeffs, va.angles, va.coeffs, epochs, lr, optimizer)


class GateNetRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn front end for MSE bootstrap training of :class:`MlpModel`."""

    def __init__(
        self,
        layer_sizes=BOOTSTRAP_SIZES,
        alpha_neg: float = 1.0,
        epochs: int = 10_000,
        learning_rate: float = 1e-4,
        optimizer: str = "adam",
        quant: FixedPointFormat | None = None,
        random_state: int = 0,
    ):
        self.layer_sizes = layer_sizes
        self.alpha_neg = alpha_neg
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.quant = quant
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, multi_output=True)
        y = y.reshape(len(y), -1)
        sizes = tuple(self.layer_sizes)
        if sizes[0] != X.shape[1] or sizes[-1] != y.shape[1]:
            raise ValueError(f"layer_sizes {sizes} do not match X {X.shape} / y {y.shape}")
        model = init_model(sizes, self.random_state, self.alpha_neg)
        model.quant = self.quant
        if X_val is not None:
            X_val = check_array(X_val)
        self.model_, self.loss_curve_ = fit_mse(
            model, X, y, X_val, y_val, self.epochs, self.learning_rate, self.optimizer
        )
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return forward(self.model_, check_array(X))


# simulator-in-the-loop -----------------------------------------------------


def _full_rows(y_rows, rmap: ReductionMap | None) -> np.ndarray:
    y_rows = np.atleast_2d(np.asarray(y_rows, dtype=float))
    if rmap is not None and y_rows.shape[1] == rmap.n_out:
        return expand_coefficients(y_rows, rmap)
    return y_rows


def gate_infidelities(angles, full_rows, config: TransmonConfig, threads: int | None = None) -> np.ndarray:
    basis = config_basis(config)
    angles = np.atleast_1d(np.asarray(angles, dtype=float))

    def one(i):
        try:
            U = unitarize(propagate(config, basis, full_rows[i]))
        except SimulationError as exc:
            raise SimulationError(f"angle index {i} (theta={angles[i]:.6g}): {exc}") from exc
        return 1.0 - trace_fidelity(U, angles[i])

    return np.array(pmap(one, range(angles.size), threads))


def infidelity_loss(
    x,
    y_preds,
    config: TransmonConfig,
    rmap: ReductionMap | None = None,
    y_orig=None,
    threads: int | None = None,
):
    """Per-angle ``1 - F`` of the predicted pulses (and of ``y_orig`` if given)."""
    pred = gate_infidelities(x, _full_rows(y_preds, rmap), config, threads)
    if y_orig is None:
        return pred
    return pred, gate_infidelities(x, _full_rows(y_orig, rmap), config, threads)


def mean_model_infidelity(model, angles, config, rmap=None, threads=None) -> float:
    return float(np.mean(infidelity_loss(angles, forward(model, np.asarray(angles)), config, rmap, threads=threads)))


def infid_grad(
    x,
    model: MlpModel,
    epsilon: float,
    config: TransmonConfig,
    rmap: ReductionMap | None = None,
    mode: str = "forward",
    threads: int | None = None,
    loss_fn: Callable[[MlpModel], float] | None = None,
) -> tuple[np.ndarray, float]:
    """Finite-difference gradient of the mean infidelity over ``x``.

    ``mode="forward"`` perturbs each parameter by ``+epsilon`` and divides
    the change by ``epsilon``; ``"central"`` uses symmetric differences.
    ``loss_fn`` replaces the simulator loss (used for testing).
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if loss_fn is None:
        def loss_fn(m):
            return mean_model_infidelity(m, x, config, rmap, threads)
    theta = model.get_params()
    base = loss_fn(model)
    grad = np.empty_like(theta)
    for j in range(theta.size):
        up = theta.copy()
        up[j] += epsilon
        if mode == "forward":
            grad[j] = (loss_fn(model.with_params(up)) - base) / epsilon
        elif mode == "central":
            dn = theta.copy()
            dn[j] -= epsilon
            grad[j] = (loss_fn(model.with_params(up)) - loss_fn(model.with_params(dn))) / (2 * epsilon)
        else:
            raise ValueError(f"unknown difference mode {mode!r}")
    return grad, base


@dataclass
class InfidelityRun:
    model: MlpModel
    curve: LossCurve
    last_model: MlpModel
    epochs_done: int
    aborted: bool = False


def train_infidelity(
    model: MlpModel,
    ds: AngleDataset,
    epochs: int,
    config: TransmonConfig,
    lr: float = 0.1,
    epsilon: float = 1e-6,
    batch_size: int = 16,
    momentum: float = 0.0,
    seed: int = 0,
    start_epoch: int = 0,
    checkpoint_path=None,
    threads: int | None = None,
) -> InfidelityRun:
    """Simulation-in-the-loop fine-tuning of a bootstrapped model.

    Each epoch shuffles the train split with a seed derived from
    ``(seed, epoch)``, takes one SGD step per batch on the one-sided
    finite-difference gradient, then scores the val split. The best-val
    model is kept (and written to ``checkpoint_path`` if set). Epochs are
    numbered globally so a run restarted with ``start_epoch`` and the saved
    model replays the same batches.
    """
    if ds.split_tags is None:
        raise ValueError("dataset needs train/val split tags")
    tr, va = ds.subset("train"), ds.subset("val")
    rmap = ds.reduction_map
    opt = _make_optimizer("sgd", lr, momentum)
    current = model.copy()
    curve = LossCurve()
    val0 = mean_model_infidelity(current, va.angles, config, rmap, threads)
    curve.append(start_epoch, float("nan"), val0)
    best, best_val = current.copy(), val0
    aborted = False
    done = 0
    for epoch in range(start_epoch + 1, start_epoch + epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))
        order = rng.permutation(tr.n_angles)
        snapshot = current.copy()
        batch_losses = []
        try:
            for start in range(0, tr.n_angles, batch_size):
                idx = order[start:start + batch_size]
                grad, loss = infid_grad(tr.angles[idx], current, epsilon, config, rmap, threads=threads)
                current = current.with_params(opt.step(current.get_params(), grad))
                batch_losses.append(loss)
            val = mean_model_infidelity(current, va.angles, config, rmap, threads)
        except SimulationError as exc:
            log.warning("epoch %d aborted: %s", epoch, exc)
            current = snapshot
            aborted = True
            break
        done += 1
        curve.append(epoch, float(np.mean(batch_losses)), val)
        if val < best_val:
            best, best_val = current.copy(), val
            if checkpoint_path is not None:
                best.save(checkpoint_path)
    return InfidelityRun(best, curve, current, done, aborted)


# quantization --------------------------------------------------------------


def quantize_model(
    model: MlpModel,
    fmt: FixedPointFormat,
    ds: AngleDataset | None = None,
    qat_epochs: int = 0,
    lr: float = 1e-4,
) -> MlpModel:
    """Snap weights to ``fmt`` and make the forward pass quantized.

    With ``ds`` and ``qat_epochs > 0`` the transferred float weights are
    first refined by quantization-aware MSE training. Weights outside the
    representable range saturate; the count is logged and stored on the
    returned model as ``saturated``.
    """
    work = model.copy()
    work.quant = fmt
    if ds is not None and qat_epochs > 0:
        work, _ = train_mse(work, ds, epochs=qat_epochs, lr=lr)
    n_sat = saturation_count(work.weights + work.biases, fmt)
    if n_sat:
        log.warning("%d parameters saturated at the %d.%d fixed-point range", n_sat, fmt.integer_bits, fmt.frac_bits)
    q = MlpModel(
        work.layer_sizes,
        [quantize(w, fmt) for w in work.weights],
        [quantize(b, fmt) for b in work.biases],
        work.alpha_neg,
        fmt,
    )
    q.saturated = n_sat
    return q
