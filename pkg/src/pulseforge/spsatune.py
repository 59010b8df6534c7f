"""SPSA fine-tuning of a pretrained gate model towards different physics.

The model is pretrained on one transmon configuration and adapted to
another (typically an extra guard level with a larger anharmonicity) using
only loss evaluations: each batch costs two, whatever the parameter count.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .arb import ArbConfig, ModelProvider, arb_estimate, wrap_angle
from .datasetpipe import ReductionMap
from .gatenet import LossCurve, MlpModel, infidelity_loss, forward
from .qusim import SimulationError, TransmonConfig

log = logging.getLogger(__name__)

REDUCED_ARB = ArbConfig(lengths=tuple(range(2, 30, 7)), sequences_per_length=20, shots_per_sequence=200)


class SpsaLossError(FloatingPointError):
    def __init__(self, tag: str, value: float):
        self.tag = tag
        self.value = value
        super().__init__(f"non-finite loss at the {tag} evaluation: {value!r}")


@dataclass(frozen=True)
class SpsaParams:
    epsilon: float = 1e-6
    alpha: float = 1e-6
    epochs: int = 10
    mode: str = "one-sided"
    patience: int | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.mode not in ("one-sided", "two-sided"):
            raise ValueError(f"unknown SPSA mode {self.mode!r}")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 or None")


class CountingLoss:
    """Wraps a loss and counts calls."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, theta):
        self.calls += 1
        return self.fn(theta)


def perturbation(n: int, seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.choice(np.array([-1.0, 1.0]), size=n)


def _finite(value, tag):
    value = float(value)
    if not math.isfinite(value):
        raise SpsaLossError(tag, value)
    return value


def spsa_step(loss, theta, params: SpsaParams, seed) -> tuple[np.ndarray, float]:
    """Gradient estimate and the loss at ``theta`` (NaN in two-sided mode).

    One-sided: ``g = (L(theta + eps D) - L(theta)) / eps * D``. Two-sided:
    ``g = (L(theta + eps D) - L(theta - eps D)) / (2 eps) * D``. Both use two
    evaluations. Since ``D`` has entries ``+-1`` it is its own element-wise
    reciprocal.
    """
    theta = np.asarray(theta, dtype=float)
    delta = perturbation(theta.size, seed)
    eps = params.epsilon
    if params.mode == "one-sided":
        base = _finite(loss(theta), "base")
        plus = _finite(loss(theta + eps * delta), "plus")
        return (plus - base) / eps * delta, base
    plus = _finite(loss(theta + eps * delta), "plus")
    minus = _finite(loss(theta - eps * delta), "minus")
    return (plus - minus) / (2 * eps) * delta, float("nan")


def spsa_gradient(loss, theta, params: SpsaParams = SpsaParams(), seed=0) -> np.ndarray:
    return spsa_step(loss, theta, params, seed)[0]


@dataclass
class FinetuneJob:
    model: MlpModel
    physics: TransmonConfig
    rmap: ReductionMap | None = None
    train_mode: str = "fixed"
    n_train: int = 500
    batches: int = 10
    n_val: int = 100
    loss: str = "infidelity"
    seed: int = 0
    arb_config: ArbConfig = REDUCED_ARB
    threads: int | None = None

    def __post_init__(self):
        if self.train_mode not in ("fixed", "resample"):
            raise ValueError(f"train_mode must be 'fixed' or 'resample', got {self.train_mode!r}")
        if self.loss not in ("infidelity", "arb"):
            raise ValueError(f"loss must be 'infidelity' or 'arb', got {self.loss!r}")
        if self.n_train < 1 or self.n_val < 1:
            raise ValueError("n_train and n_val must be positive")
        if not 1 <= self.batches <= self.n_train:
            raise ValueError(f"batches must be in [1, n_train], got {self.batches}")


def sample_angles(n: int, seed_words) -> np.ndarray:
    """``n`` angles uniform on ``[-pi, pi)``, sorted."""
    rng = np.random.default_rng(np.random.SeedSequence(list(seed_words)))
    return np.sort(wrap_angle(rng.uniform(-math.pi, math.pi, n)))


# Named sub-streams of the job seed.
_VAL, _TRAIN, _SPSA, _ARB = 1, 2, 3, 4


def make_loss(job: FinetuneJob, template: MlpModel, angles: np.ndarray, arb_seed: int = 0):
    """Loss over a flat parameter vector for the given angles."""
    if job.loss == "infidelity":
        def loss(theta):
            model = template.with_params(theta)
            return float(np.mean(infidelity_loss(angles, forward(model, angles), job.physics, job.rmap, threads=job.threads)))
    else:
        cfg = replace(job.arb_config, base_seed=int(arb_seed))

        def loss(theta):
            model = template.with_params(theta)
            provider = ModelProvider(model, job.rmap, job.physics, angles, threads=job.threads)
            return 1.0 - arb_estimate(provider, cfg, threads=job.threads).f
    return loss


@dataclass
class FinetuneResult:
    model: MlpModel
    last_model: MlpModel
    curve: LossCurve
    evaluations: int = 0
    skipped_batches: int = 0
    stopped_early: bool = False
    val_angles: np.ndarray = field(default=None, repr=False)

    @property
    def initial_val(self) -> float:
        return self.curve.val[0]

    @property
    def best_val(self) -> float:
        return float(min(self.curve.val))


def _split(order: np.ndarray, batches: int) -> list[np.ndarray]:
    return [b for b in np.array_split(order, batches) if b.size]


def finetune(job: FinetuneJob, params: SpsaParams = SpsaParams()) -> FinetuneResult:
    """SPSA descent ``theta <- theta - alpha * g`` over batches of angles.

    Fixed mode samples the training angles once and shuffles them into
    batches each epoch; resample mode draws fresh angles every epoch. The
    validation set is drawn once. Epoch 0 of the curve is the starting
    model (train loss is the mean over the initial training angles). The
    best-val model is returned; batches whose simulation fails are
    skipped and counted.
    """
    template = job.model
    theta = template.get_params().copy()
    val_angles = sample_angles(job.n_val, [job.seed, _VAL])
    fixed = sample_angles(job.n_train, [job.seed, _TRAIN, 0])
    evaluations = 0

    def val_loss(th):
        nonlocal evaluations
        evaluations += 1
        return make_loss(job, template, val_angles, arb_seed=job.seed)(th)

    curve = LossCurve()
    v0 = val_loss(theta)
    t0 = make_loss(job, template, fixed, arb_seed=job.seed)(theta)
    evaluations += 1
    curve.append(0, t0, v0)
    best_theta, best_val = theta.copy(), v0
    skipped = 0
    stale = 0
    stopped = False
    for epoch in range(1, params.epochs + 1):
        if job.train_mode == "fixed":
            pool = fixed
        else:
            pool = sample_angles(job.n_train, [job.seed, _TRAIN, epoch])
        order = np.random.default_rng(np.random.SeedSequence([job.seed, _TRAIN, epoch, 1])).permutation(pool.size)
        batch_losses = []
        for b, idx in enumerate(_split(order, job.batches)):
            arb_seed = int(np.random.SeedSequence([job.seed, _ARB, epoch, b]).generate_state(1)[0])
            loss = CountingLoss(make_loss(job, template, pool[np.sort(idx)], arb_seed))
            try:
                g, base = spsa_step(loss, theta, params, np.random.SeedSequence([job.seed, _SPSA, epoch, b]))
            except (SimulationError, SpsaLossError) as exc:
                skipped += 1
                log.warning("epoch %d batch %d skipped: %s", epoch, b, exc)
                continue
            finally:
                evaluations += loss.calls
            theta = theta - params.alpha * g
            batch_losses.append(base)
        train = float(np.mean(batch_losses)) if batch_losses else float("nan")
        val = val_loss(theta)
        curve.append(epoch, train, val)
        if val < best_val:
            best_theta, best_val, stale = theta.copy(), val, 0
        else:
            stale += 1
            if params.patience is not None and stale >= params.patience:
                stopped = True
                break
    return FinetuneResult(
        template.with_params(best_theta),
        template.with_params(theta),
        curve,
        evaluations,
        skipped,
        stopped,
        val_angles,
    )


def loss_variance(curve: LossCurve, which: str = "train") -> float:
    """Variance of the epoch-to-epoch differences of a loss curve (epoch 0 excluded)."""
    values = np.asarray(curve.train if which == "train" else curve.val, dtype=float)[1:]
    values = values[np.isfinite(values)]
    if values.size < 3:
        raise ValueError("need at least 3 finite epochs")
    return float(np.var(np.diff(values)))
