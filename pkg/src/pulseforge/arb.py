"""Adapted randomized benchmarking for arbitrary Rx(theta) gate sets.

For each sequence length ``m``, ``K`` random sequences of ``m - 1`` gates
drawn from the gate set are closed with the inverse rotation
``Rx(-sum theta)``, measured ``N`` times in the Z basis, and averaged. The
survival curve is fitted to ``A + B f**m`` with box bounds ``[0, 1]`` and
a Student-t interval is put on ``f``.

Gate indices are 0-based. Per-sequence randomness comes from
``SeedSequence([base_seed, m, k])`` so results do not depend on the
order in which sequences are evaluated.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize, stats
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._parallel import pmap
from .qusim import (
    ShotRecord,
    TransmonConfig,
    config_basis,
    measure_survival,
    propagate,
    rx_stack,
    rx_unitary,
    standard_error,
    unitarize,
)

DEFAULT_LENGTHS = tuple(range(2, 150, 10))


class ArbFitError(RuntimeError):
    """The decay fit failed; ``table`` holds ``(m, avg_p, se)`` rows."""

    def __init__(self, message: str, table=None):
        self.table = table
        super().__init__(message)


class FitRankError(ValueError):
    pass


class GateRealizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArbConfig:
    lengths: tuple[int, ...] = DEFAULT_LENGTHS
    sequences_per_length: int = 500
    shots_per_sequence: int = 1000
    alpha_level: float = 0.05
    base_seed: int = 0
    se_convention: str = "standard"

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(int(m) for m in self.lengths))
        if any(m < 2 for m in self.lengths):
            raise ValueError("every sequence length must be >= 2")
        if len(set(self.lengths)) <= 3:
            raise ValueError("need more than 3 distinct lengths for a 3-parameter fit")
        if self.sequences_per_length < 2:
            raise ValueError("need at least 2 sequences per length")
        if self.shots_per_sequence < 1:
            raise ValueError("need at least 1 shot per sequence")
        if not 0.0 < self.alpha_level <= 1.0:
            raise ValueError(f"alpha_level must be in (0, 1], got {self.alpha_level}")
        if self.se_convention not in ("standard", "literal"):
            raise ValueError(f"unknown SE convention {self.se_convention!r}")


def wrap_angle(x):
    """Map to ``[-pi, pi)``."""
    return (np.asarray(x) + math.pi) % (2 * math.pi) - math.pi


def embed(U2: np.ndarray, dim: int) -> np.ndarray:
    if dim == 2:
        return U2
    out = np.eye(dim, dtype=complex)
    out[:2, :2] = U2
    return out


def compose(gates: np.ndarray) -> np.ndarray:
    """Product of a stack of gates applied in order: ``gates[-1] @ ... @ gates[0]``."""
    g = np.asarray(gates)
    while g.shape[0] > 1:
        tail = None
        if g.shape[0] % 2:
            tail, g = g[-1:], g[:-1]
        g = g[1::2] @ g[0::2]
        if tail is not None:
            g = np.concatenate([g, tail])
    return g[0]


# providers ----------------------------------------------------------------


class GateProvider:
    """A gate set plus a rule for realizing each gate and the closing inverse.

    Subclasses implement :meth:`realize` and :meth:`inverse`. ``rng`` is
    the sequence's generator, so any randomness in a realization is tied
    to the sequence seed and the gate's position.
    """

    inverse_rule = "exact"

    def __init__(self, gate_angles):
        self.gate_angles = np.asarray(gate_angles, dtype=float)
        if self.gate_angles.ndim != 1 or self.gate_angles.size == 0:
            raise ValueError("gate set must be a non-empty 1-d array of angles")

    @property
    def dim(self) -> int:
        return 2

    def __len__(self) -> int:
        return self.gate_angles.size

    def realize(self, indices: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def inverse(self, total_angle: float, rng: np.random.Generator) -> np.ndarray:
        return embed(rx_unitary(-total_angle), self.dim)


class GaussianPerturbedProvider(GateProvider):
    """Direct 2x2 gates ``Rx(theta_i + eps)`` with ``eps ~ N(0, sigma)``.

    ``noise="fresh"`` draws a new ``eps`` for every use; ``"frozen"`` fixes
    one ``eps`` per gate index at construction. ``inverse="exact"`` closes
    with the exact angle sum; ``"noisy"`` adds one more Gaussian draw.
    """

    def __init__(self, gate_angles, sigma: float, seed: int = 0, noise: str = "fresh", inverse: str = "exact"):
        super().__init__(gate_angles)
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        if noise not in ("fresh", "frozen") or inverse not in ("exact", "noisy"):
            raise ValueError(f"bad provider mode noise={noise!r} inverse={inverse!r}")
        self.sigma = float(sigma)
        self.noise = noise
        self.inverse_rule = inverse
        self._frozen = np.random.default_rng(seed).normal(0.0, self.sigma, self.gate_angles.size)

    def realize(self, indices, rng):
        theta = self.gate_angles[indices]
        if self.noise == "fresh":
            eps = rng.normal(0.0, self.sigma, theta.size) if self.sigma > 0 else 0.0
        else:
            eps = self._frozen[indices]
        return rx_stack(theta + eps)

    def inverse(self, total_angle, rng):
        extra = rng.normal(0.0, self.sigma) if self.inverse_rule == "noisy" and self.sigma > 0 else 0.0
        return rx_unitary(-total_angle + extra)


def gaussian_perturbed_provider(n_angles: int = 1000, sigma: float = 0.1, seed: int = 0, **kwargs):
    """Gate set of ``n_angles`` evenly spaced on ``[-pi, pi]`` with Gaussian angle noise."""
    return GaussianPerturbedProvider(np.linspace(-math.pi, math.pi, n_angles), sigma, seed, **kwargs)


def perfect_provider(n_angles: int = 1000) -> GaussianPerturbedProvider:
    return gaussian_perturbed_provider(n_angles, 0.0)


class UnitaryProvider(GateProvider):
    """Fixed, externally supplied unitaries (one per gate angle); exact inverse."""

    def __init__(self, gate_angles, unitaries):
        super().__init__(gate_angles)
        self.unitaries = np.asarray(unitaries, dtype=complex)
        if self.unitaries.shape[0] != self.gate_angles.size:
            raise ValueError("one unitary per gate angle is required")

    @property
    def dim(self) -> int:
        return self.unitaries.shape[1]

    def realize(self, indices, rng):
        return self.unitaries[indices]


class ModelProvider(GateProvider):
    """Gates realized by simulating the pulses a model predicts for each angle.

    The gate-set unitaries are simulated once up front. With
    ``inverse="realized"`` the closing rotation is also simulated from the
    model's pulse for ``wrap(-sum theta)``; ``"exact"`` uses the ideal
    rotation on the computational block.
    """

    def __init__(self, model, rmap, config: TransmonConfig, gate_angles, inverse: str = "realized", threads=None):
        super().__init__(gate_angles)
        if inverse not in ("realized", "exact"):
            raise ValueError(f"unknown inverse rule {inverse!r}")
        self.model = model
        self.rmap = rmap
        self.config = config
        self.inverse_rule = inverse
        self.threads = threads
        self.unitaries = np.array(pmap(self.gate_unitary, self.gate_angles, threads))

    @property
    def dim(self) -> int:
        return self.config.dim

    def gate_unitary(self, theta: float) -> np.ndarray:
        from .gatenet import _full_rows, forward

        try:
            row = _full_rows(forward(self.model, np.array([theta])), self.rmap)[0]
            return unitarize(propagate(self.config, config_basis(self.config), row))
        except Exception as exc:
            raise GateRealizationError(f"realizing Rx({theta:.6g}) failed: {exc}") from exc

    def realize(self, indices, rng):
        return self.unitaries[indices]

    def inverse(self, total_angle, rng):
        if self.inverse_rule == "exact":
            return super().inverse(total_angle, rng)
        return self.gate_unitary(float(wrap_angle(-total_angle)))


def model_provider(model, rmap, config: TransmonConfig, gate_angles, **kwargs) -> ModelProvider:
    return ModelProvider(model, rmap, config, gate_angles, **kwargs)


# sequences ----------------------------------------------------------------


def sequence_rng(base_seed: int, m: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), int(m), int(k)]))


def sample_sequence(m: int, gate_count: int, seed) -> np.ndarray:
    """``m - 1`` gate indices drawn uniformly (with repetition) from ``range(gate_count)``."""
    if m < 2:
        raise ValueError(f"sequence length must be >= 2, got {m}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.integers(0, gate_count, size=m - 1)


def sequence_unitary(provider: GateProvider, indices, rng) -> np.ndarray:
    indices = np.asarray(indices, dtype=int)
    gates = provider.realize(indices, rng)
    total = float(np.sum(provider.gate_angles[indices]))
    return provider.inverse(total, rng) @ compose(gates)


def run_sequence(provider: GateProvider, indices, n_shots: int, seed, se_convention: str = "standard") -> ShotRecord:
    """Apply the gates in order, close with the inverse, and sample Z-basis shots."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    U = sequence_unitary(provider, indices, rng)
    return measure_survival(U, n_shots, rng, se_convention)


# fitting ------------------------------------------------------------------


def decay_model(m, A, B, f):
    return A + B * np.power(f, np.asarray(m, dtype=float))


@dataclass
class DecayFit:
    A: float
    B: float
    f: float
    covariance: np.ndarray
    dof: int
    reduced_chi2: float
    identifiable: bool = True

    @property
    def f_se(self) -> float:
        return float(math.sqrt(self.covariance[2, 2])) if np.isfinite(self.covariance[2, 2]) else math.inf


def _initial_guesses(ms, ps):
    A0 = float(np.min(ps))
    B0 = float(np.max(ps) - np.min(ps))
    shifted = ps - A0
    mask = shifted > 1e-12
    f0 = 0.99
    if np.count_nonzero(mask) >= 2:
        slope = np.polyfit(ms[mask], np.log(shifted[mask]), 1)[0]
        f0 = float(np.exp(slope))
    guesses = [(A0, B0, f0), (0.5, 0.5, f0), (0.5, float(np.max(ps)) - 0.5, 0.99), (0.0, float(np.max(ps)), f0)]
    eps = 1e-9
    return [tuple(min(max(v, eps), 1 - eps) for v in g) for g in guesses]


def fit_decay(ms, avg_ps, errs) -> DecayFit:
    """Weighted, box-bounded least squares fit of ``A + B f**m``.

    The covariance is ``(J^T W J)^-1`` scaled by the reduced chi-square. A
    rank-deficient Jacobian (e.g. a flat curve, where ``f`` is not
    identifiable) yields an infinite covariance rather than an error.
    Non-positive errors are replaced by the smallest positive one, or by
    unit weights when none is positive.
    """
    ms = np.asarray(ms, dtype=float)
    ps = np.asarray(avg_ps, dtype=float)
    errs = np.asarray(errs, dtype=float)
    if not (ms.shape == ps.shape == errs.shape) or ms.ndim != 1:
        raise ValueError("ms, avg_ps and errs must be 1-d arrays of equal length")
    if np.unique(ms).size < 4:
        raise FitRankError(f"need at least 4 distinct lengths, got {np.unique(ms).size}")
    if np.any(~np.isfinite(ps)) or np.any(~np.isfinite(errs)):
        raise ArbFitError("non-finite survival data", np.column_stack([ms, ps, errs]))
    if np.any(errs < 0):
        raise ValueError("standard errors must be non-negative")
    positive = errs[errs > 0]
    sigma = np.where(errs > 0, errs, positive.min() if positive.size else 1.0)

    def residuals(x):
        return (decay_model(ms, *x) - ps) / sigma

    def jac(x):
        A, B, f = x
        fm = np.power(f, ms)
        dfm = ms * np.power(f, ms - 1.0)
        return np.column_stack([np.ones_like(ms), fm, B * dfm]) / sigma[:, None]

    best = None
    for x0 in _initial_guesses(ms, ps):
        res = optimize.least_squares(
            residuals, x0, jac=jac, bounds=([0, 0, 0], [1, 1, 1]), method="trf",
            x_scale="jac", ftol=1e-15, xtol=1e-15, gtol=1e-15, max_nfev=5000,
        )
        if best is None or res.cost < best.cost:
            best = res
    if best is None or not np.all(np.isfinite(best.x)):
        raise ArbFitError("decay fit did not converge", np.column_stack([ms, ps, errs]))

    dof = ms.size - 3
    chi2 = float(2.0 * best.cost)
    red = chi2 / dof if dof > 0 else math.inf
    J = jac(best.x)
    s = np.linalg.svd(J, compute_uv=False)
    identifiable = bool(s[-1] > 1e-10 * s[0])
    if identifiable:
        cov = np.linalg.inv(J.T @ J) * red
    else:
        cov = np.full((3, 3), math.inf)
    A, B, f = (float(v) for v in best.x)
    return DecayFit(A, B, f, cov, dof, red, identifiable)


class DecayFitter(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_decay`: ``fit(m, p, sigma=...)``, ``predict(m)``."""

    def __init__(self, alpha_level: float = 0.05):
        self.alpha_level = alpha_level

    def fit(self, X, y, sigma=None):
        m = np.asarray(X, dtype=float).reshape(-1)
        y = np.asarray(y, dtype=float).reshape(-1)
        sigma = np.ones_like(y) if sigma is None else np.asarray(sigma, dtype=float)
        self.fit_ = fit_decay(m, y, sigma)
        self.A_, self.B_, self.f_ = self.fit_.A, self.fit_.B, self.fit_.f
        self.covariance_ = self.fit_.covariance
        self.dof_ = self.fit_.dof
        self.f_ci_ = confidence_interval(self.f_, self.covariance_, self.dof_, self.alpha_level)
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return decay_model(np.asarray(X, dtype=float).reshape(-1), self.A_, self.B_, self.f_)


def t_critical(dof: int, alpha: float) -> float:
    if alpha >= 1.0:
        return 0.0
    return float(stats.t.ppf(1.0 - alpha / 2.0, dof))


def confidence_interval(f_hat: float, cov, dof: int, alpha: float = 0.05) -> tuple[float, float]:
    """Two-sided Student-t interval ``f +- t * sqrt(var_f)``, clamped to ``[0, 1]``.

    ``cov`` is the 3x3 fit covariance (``f`` last) or the variance of ``f``.
    """
    if dof < 1:
        raise ValueError(f"need at least one degree of freedom, got {dof}")
    var = float(np.asarray(cov)[2, 2]) if np.ndim(cov) == 2 else float(cov)
    t = t_critical(dof, alpha)
    if t == 0.0 or var == 0.0:
        half = 0.0
    else:
        half = t * math.sqrt(var)
    lo = max(0.0, f_hat - half) if math.isfinite(half) else 0.0
    hi = min(1.0, f_hat + half) if math.isfinite(half) else 1.0
    return lo, hi


def average_standard_error(ses) -> float:
    """Standard error of a mean of ``K`` estimates: ``sqrt(sum SE_k^2) / K``."""
    ses = np.asarray(ses, dtype=float)
    return float(np.sqrt(np.sum(ses**2)) / ses.size)


# the estimator -------------------------------------------------------------


@dataclass
class ArbResult:
    lengths: np.ndarray
    avg_p: np.ndarray
    se: np.ndarray
    A: float
    B: float
    f: float
    covariance: np.ndarray
    f_ci: tuple[float, float]
    dof: int
    t_crit: float
    alpha_level: float
    se_convention: str
    p_hat: np.ndarray = field(repr=False, default=None)

    @property
    def infidelity(self) -> float:
        return 1.0 - self.f

    def table(self) -> np.ndarray:
        return np.column_stack([self.lengths, self.avg_p, self.se])

    def to_dict(self) -> dict:
        def clean(x):
            x = float(x)
            return x if math.isfinite(x) else None

        return {
            "A": self.A,
            "B": self.B,
            "f": self.f,
            "cov": [[clean(v) for v in row] for row in np.asarray(self.covariance)],
            "ci": list(self.f_ci),
            "dof": self.dof,
            "t_crit": self.t_crit,
            "alpha": self.alpha_level,
            "se_convention": self.se_convention,
        }

    def write(self, directory, stem: str = "arb") -> dict[str, Path]:
        """Per-length CSV, fit JSON and a dense decay-curve CSV."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "lengths": directory / f"{stem}_lengths.csv",
            "fit": directory / f"{stem}_fit.json",
            "curve": directory / f"{stem}_curve.csv",
        }
        with open(paths["lengths"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["m", "avg_p", "se"])
            for m, p, s in zip(self.lengths, self.avg_p, self.se):
                w.writerow([int(m), format(p, ".17g"), format(s, ".17g")])
        paths["fit"].write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        grid = np.arange(int(self.lengths.min()), int(self.lengths.max()) + 1)
        with open(paths["curve"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["m", "fit"])
            for m, y in zip(grid, decay_model(grid, self.A, self.B, self.f)):
                w.writerow([int(m), format(y, ".17g")])
        return paths


def _measure_length(provider: GateProvider, cfg: ArbConfig, m: int) -> tuple[np.ndarray, np.ndarray]:
    p_hat = np.empty(cfg.sequences_per_length)
    se = np.empty(cfg.sequences_per_length)
    for k in range(cfg.sequences_per_length):
        rng = sequence_rng(cfg.base_seed, m, k)
        idx = sample_sequence(m, len(provider), rng)
        rec = run_sequence(provider, idx, cfg.shots_per_sequence, rng, cfg.se_convention)
        p_hat[k] = rec.p_hat
        se[k] = rec.se
    return p_hat, se


def arb_estimate(provider: GateProvider, cfg: ArbConfig = ArbConfig(), threads: int | None = None) -> ArbResult:
    """Run the full benchmark and fit the survival decay."""
    per_length = pmap(lambda m: _measure_length(provider, cfg, m), cfg.lengths, threads)
    lengths = np.array(cfg.lengths, dtype=float)
    p_hat = np.array([p for p, _ in per_length])
    avg_p = p_hat.mean(axis=1)
    se = np.array([average_standard_error(s) for _, s in per_length])
    try:
        fit = fit_decay(lengths, avg_p, se)
    except (ArbFitError, FitRankError) as exc:
        raise ArbFitError(str(exc), np.column_stack([lengths, avg_p, se])) from exc
    ci = confidence_interval(fit.f, fit.covariance, fit.dof, cfg.alpha_level)
    return ArbResult(
        lengths=lengths.astype(int),
        avg_p=avg_p,
        se=se,
        A=fit.A,
        B=fit.B,
        f=fit.f,
        covariance=fit.covariance,
        f_ci=ci,
        dof=fit.dof,
        t_crit=t_critical(fit.dof, cfg.alpha_level),
        alpha_level=cfg.alpha_level,
        se_convention=cfg.se_convention,
        p_hat=p_hat,
    )


def gaussian_oracle_f(sigma: float) -> float:
    """Closed-form decay constant for fresh Gaussian angle noise: ``exp(-sigma^2/2)``."""
    return math.exp(-0.5 * sigma * sigma)


def gaussian_oracle_survival(m, sigma: float):
    """Expected survival ``1/2 + exp(-(m-1) sigma^2 / 2) / 2`` with an exact inverse."""
    return 0.5 + 0.5 * np.exp(-0.5 * (np.asarray(m, dtype=float) - 1.0) * sigma * sigma)
