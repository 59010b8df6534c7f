"""Optimal-control data generation: pulse coefficients that realise Rx(theta)."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._parallel import pmap
from .qusim import TransmonConfig, config_basis, propagate, trace_fidelity, unitarize
from .splinepulse import PulseCoefficients, grid_matrix, repr_float

log = logging.getLogger(__name__)

# Analytic Rabi relation theta = 2*pi*u*T*1e-3 at theta = pi/2, T = 125 ns.
DEFAULT_BASELINE = 2.0
NOISE_FRACTION = 0.1
FD_STEP = 1e-4
PENALTY_WEIGHT = 1e-2


@dataclass(frozen=True)
class OptimJob:
    theta: float
    seed: int = 0
    baseline_amp: float = DEFAULT_BASELINE
    max_iters: int = 200
    target_infidelity: float = 1e-4

    def __post_init__(self):
        if abs(self.theta) > math.pi + 1e-12:
            raise ValueError(f"|theta| must be <= pi, got {self.theta}")
        if not self.target_infidelity > 0:
            raise ValueError(f"target_infidelity must be positive, got {self.target_infidelity}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be >= 0, got {self.max_iters}")


@dataclass
class OptimResult:
    coeffs: PulseCoefficients
    fidelity: float
    converged: bool
    n_iter: int
    history: list[float] = field(default_factory=list, repr=False)

    def __iter__(self):
        # Unpacks as (coeffs, fidelity) for the common case.
        yield self.coeffs
        yield self.fidelity


def initial_guess(job: OptimJob, n_coeff: int = 10) -> PulseCoefficients:
    """Sign-dependent baseline plus seeded uniform noise.

    The real quadrature starts at ``sign(theta) * baseline_amp``; both
    quadratures get noise uniform in ``+-10%`` of the baseline.
    """
    rng = np.random.default_rng(job.seed)
    scale = NOISE_FRACTION * job.baseline_amp
    re = np.sign(job.theta) * job.baseline_amp + rng.uniform(-scale, scale, n_coeff)
    im = rng.uniform(-scale, scale, n_coeff)
    return PulseCoefficients(re, im)


class _Objective:
    def __init__(self, theta: float, config: TransmonConfig):
        self.theta = theta
        self.config = config
        self.basis = config_basis(config)
        self.B = grid_matrix(self.basis, 1024)
        self.n_evals = 0

    def infidelity(self, x: np.ndarray) -> float:
        self.n_evals += 1
        U = unitarize(propagate(self.config, self.basis, x))
        return 1.0 - trace_fidelity(U, self.theta)

    def penalty(self, x: np.ndarray) -> float:
        n = self.basis.n_coeff
        mag = np.hypot(self.B @ x[:n], self.B @ x[n:])
        excess = np.maximum(mag - self.config.max_amplitude, 0.0)
        return PENALTY_WEIGHT * float(np.mean(excess**2))

    def __call__(self, x: np.ndarray) -> float:
        return self.infidelity(x) + self.penalty(x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        g = np.empty_like(x)
        for j in range(x.size):
            e = np.zeros_like(x)
            e[j] = FD_STEP
            g[j] = (self(x + e) - self(x - e)) / (2 * FD_STEP)
        return g


def optimize_pulse(
    job: OptimJob,
    config: TransmonConfig,
    learning_rate: float = 20.0,
    momentum: float = 0.7,
) -> OptimResult:
    """Minimise ``1 - trace_fidelity`` from :func:`initial_guess`.

    Heavy-ball descent on central finite-difference gradients. A step that
    raises the objective is rejected, the velocity is dropped and the step
    size halved, so the best objective never increases.
    """
    obj = _Objective(job.theta, config)
    x = initial_guess(job, config.n_coeff).to_vector()
    best = obj(x)
    best_infid = obj.infidelity(x)
    history = [best_infid]
    velocity = np.zeros_like(x)
    lr = learning_rate
    n_iter = 0
    while best_infid > job.target_infidelity and n_iter < job.max_iters:
        n_iter += 1
        grad = obj.gradient(x)
        for _ in range(30):
            step = momentum * velocity - lr * grad
            trial = x + step
            value = obj(trial)
            if value < best:
                x, best, velocity = trial, value, step
                lr *= 1.2
                break
            velocity = np.zeros_like(x)
            lr *= 0.5
        else:
            break
        best_infid = obj.infidelity(x)
        history.append(best_infid)
    converged = best_infid <= job.target_infidelity
    if not converged:
        log.debug("theta=%.6f seed=%d stopped at infidelity %.3g", job.theta, job.seed, best_infid)
    return OptimResult(
        PulseCoefficients.from_vector(x), 1.0 - best_infid, converged, n_iter, history
    )


def job_seed(base_seed: int, angle_index: int, seed_index: int) -> int:
    """Deterministic per-job seed independent of execution order."""
    ss = np.random.SeedSequence([int(base_seed), int(angle_index), int(seed_index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def angle_grid(n_angles: int) -> np.ndarray:
    if n_angles < 2:
        raise ValueError(f"n_angles must be >= 2, got {n_angles}")
    return np.linspace(-math.pi, math.pi, n_angles)


@dataclass(frozen=True)
class RawRecord:
    angle: float
    seed: int
    coeffs: np.ndarray
    fidelity: float
    converged: bool


def raw_header(n_coeff_total: int = 20) -> list[str]:
    return ["angle", "seed"] + [f"c{j}" for j in range(n_coeff_total)] + ["fidelity", "converged"]


def _record_row(rec: RawRecord) -> list[str]:
    return (
        [repr_float(rec.angle), str(rec.seed)]
        + [repr_float(c) for c in rec.coeffs]
        + [repr_float(rec.fidelity), str(int(rec.converged))]
    )


def read_raw_dataset(path) -> list[RawRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        ncols = len([k for k in reader.fieldnames or [] if k.startswith("c") and k[1:].isdigit()])
        for row in reader:
            out.append(
                RawRecord(
                    angle=float(row["angle"]),
                    seed=int(row["seed"]),
                    coeffs=np.array([float(row[f"c{j}"]) for j in range(ncols)]),
                    fidelity=float(row["fidelity"]),
                    converged=bool(int(row["converged"])),
                )
            )
    return out


def generate_raw_dataset(
    n_angles: int,
    n_seeds: int,
    config: TransmonConfig,
    base_seed: int = 0,
    path=None,
    threads: int | None = None,
    job_defaults: dict | None = None,
) -> list[RawRecord]:
    """Optimise every (seed, angle) pair on a uniform grid over ``[-pi, pi]``.

    Records are ordered seed-major. With ``path`` set, each record is
    appended to the CSV as soon as it is produced, and an existing file is
    treated as a checkpoint: its rows are kept and generation resumes after
    them.
    """
    if n_seeds < 1:
        raise ValueError(f"n_seeds must be >= 1, got {n_seeds}")
    angles = angle_grid(n_angles)
    jobs = [
        (si, ai, OptimJob(float(angles[ai]), job_seed(base_seed, ai, si), **(job_defaults or {})))
        for si in range(n_seeds)
        for ai in range(n_angles)
    ]
    done: list[RawRecord] = []
    fh = writer = None
    if path is not None:
        path = Path(path)
        if path.exists() and path.stat().st_size > 0:
            done = read_raw_dataset(path)
            for rec, (si, ai, job) in zip(done, jobs):
                if rec.seed != si or not math.isclose(rec.angle, job.theta, abs_tol=1e-12):
                    raise ValueError(f"checkpoint {path} does not match the requested grid")
            fh = open(path, "a", newline="")
            writer = csv.writer(fh, lineterminator="\n")
        else:
            fh = open(path, "w", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(raw_header(2 * config.n_coeff))
            fh.flush()
    remaining = jobs[len(done):]
    records = list(done)

    def run(item):
        si, ai, job = item
        res = optimize_pulse(job, config)
        return RawRecord(job.theta, si, res.coeffs.to_vector(), res.fidelity, res.converged)

    try:
        chunk = max(1, (threads or 1) * 4)
        for start in range(0, len(remaining), chunk):
            for rec in pmap(run, remaining[start:start + chunk], threads):
                records.append(rec)
                if writer is not None:
                    writer.writerow(_record_row(rec))
                    fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return records
