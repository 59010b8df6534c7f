"""Quadratic B-spline control envelopes.

A pulse is described by two coefficient vectors (real and imaginary
quadrature) over a shared clamped-uniform quadratic basis on
``[0, duration]``. Coefficients carry MHz directly; no physics lives here.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

DEGREE = 2
AMPLITUDE_SAMPLES = 1024


class SplineDomainError(ValueError):
    """Raised when an envelope is evaluated outside ``[0, duration]``."""


class AmplitudeBoundError(ValueError):
    """Raised when an envelope exceeds the configured amplitude bound."""

    def __init__(self, peak: float, bound: float, t_peak: float):
        self.peak = peak
        self.bound = bound
        self.t_peak = t_peak
        super().__init__(
            f"envelope magnitude {peak:.6g} MHz exceeds bound {bound:.6g} MHz at t={t_peak:.6g} ns"
        )


@dataclass(frozen=True)
class SplineBasis:
    n_coeff: int
    duration: float
    knots: tuple[float, ...] = field(repr=False)

    @property
    def degree(self) -> int:
        return DEGREE

    def evaluate(self, t) -> np.ndarray:
        """Basis values at ``t``, shape ``(len(t), n_coeff)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any((t < 0.0) | (t > self.duration)) or not np.all(np.isfinite(t)):
            bad = t[(t < 0.0) | (t > self.duration) | ~np.isfinite(t)]
            raise SplineDomainError(
                f"t={bad[0]!r} outside [0, {self.duration}] ns"
            )
        return _basis_matrix(np.asarray(self.knots), self.n_coeff, t)


def build_basis(n_coeff: int, duration: float) -> SplineBasis:
    """Clamped uniform quadratic basis with ``n_coeff`` functions."""
    if int(n_coeff) != n_coeff or n_coeff < DEGREE + 1:
        raise ValueError(
            f"quadratic splines need at least {DEGREE + 1} basis functions, got {n_coeff}"
        )
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration}")
    n_coeff = int(n_coeff)
    interior = np.linspace(0.0, duration, n_coeff - DEGREE + 1)
    knots = np.concatenate([[0.0] * DEGREE, interior, [float(duration)] * DEGREE])
    return SplineBasis(n_coeff=n_coeff, duration=float(duration), knots=tuple(knots.tolist()))


def _basis_matrix(knots: np.ndarray, n_coeff: int, t: np.ndarray) -> np.ndarray:
    # Cox-de Boor recursion, vectorised over t. The last span is closed on
    # the right so that t == duration picks up the final basis function.
    n_spans = len(knots) - 1
    B = np.zeros((t.size, n_spans))
    last = np.max(np.nonzero(knots[1:] > knots[:-1])[0])
    for j in range(n_spans):
        lo, hi = knots[j], knots[j + 1]
        if hi <= lo:
            continue
        if j == last:
            B[:, j] = (t >= lo) & (t <= hi)
        else:
            B[:, j] = (t >= lo) & (t < hi)
    for p in range(1, DEGREE + 1):
        nxt = np.zeros((t.size, n_spans - p))
        for j in range(n_spans - p):
            d1 = knots[j + p] - knots[j]
            d2 = knots[j + p + 1] - knots[j + 1]
            if d1 > 0:
                nxt[:, j] += (t - knots[j]) / d1 * B[:, j]
            if d2 > 0:
                nxt[:, j] += (knots[j + p + 1] - t) / d2 * B[:, j + 1]
        B = nxt
    return B[:, :n_coeff]


@lru_cache(maxsize=64)
def _grid_matrix(knots: tuple[float, ...], n_coeff: int, duration: float, n_points: int) -> np.ndarray:
    t = np.linspace(0.0, duration, n_points)
    m = _basis_matrix(np.asarray(knots), n_coeff, t)
    m.setflags(write=False)
    return m


def grid_matrix(basis: SplineBasis, n_points: int) -> np.ndarray:
    """Cached basis matrix on ``n_points`` uniform samples of ``[0, duration]``."""
    return _grid_matrix(basis.knots, basis.n_coeff, basis.duration, int(n_points))


@dataclass(frozen=True)
class PulseCoefficients:
    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = np.asarray(self.re, dtype=float).reshape(-1)
        im = np.asarray(self.im, dtype=float).reshape(-1)
        if re.shape != im.shape:
            raise ValueError(f"re/im length mismatch: {re.size} vs {im.size}")
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    @classmethod
    def from_vector(cls, vector: Sequence[float]) -> "PulseCoefficients":
        """Split a flat ``(re_0..re_{n-1}, im_0..im_{n-1})`` vector."""
        v = np.asarray(vector, dtype=float).reshape(-1)
        if v.size % 2:
            raise ValueError(f"coefficient vector must have even length, got {v.size}")
        half = v.size // 2
        return cls(v[:half], v[half:])

    @classmethod
    def zeros(cls, n_coeff: int = 10) -> "PulseCoefficients":
        return cls(np.zeros(n_coeff), np.zeros(n_coeff))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.re, self.im])

    def __len__(self) -> int:
        return self.re.size


def _check_arity(basis: SplineBasis, coeffs: PulseCoefficients) -> None:
    if len(coeffs) != basis.n_coeff:
        raise ValueError(
            f"basis has {basis.n_coeff} functions but coefficients have {len(coeffs)}"
        )


def envelope(basis: SplineBasis, coeffs: PulseCoefficients, t):
    """Evaluate the in-phase and quadrature envelopes ``(u, v)`` in MHz.

    Scalar ``t`` gives a pair of floats, array ``t`` a pair of arrays.
    """
    _check_arity(basis, coeffs)
    scalar = np.ndim(t) == 0
    B = basis.evaluate(t)
    u = B @ coeffs.re
    v = B @ coeffs.im
    if scalar:
        return float(u[0]), float(v[0])
    return u, v


def peak_amplitude(basis: SplineBasis, coeffs: PulseCoefficients, n_samples: int = AMPLITUDE_SAMPLES):
    """Largest sampled ``sqrt(u^2 + v^2)`` and where it happens."""
    _check_arity(basis, coeffs)
    B = grid_matrix(basis, n_samples)
    mag = np.hypot(B @ coeffs.re, B @ coeffs.im)
    i = int(np.argmax(mag))
    return float(mag[i]), float(i * basis.duration / (n_samples - 1))


def check_amplitude(basis: SplineBasis, coeffs: PulseCoefficients, bound: float) -> float:
    """Raise :class:`AmplitudeBoundError` if the envelope exceeds ``bound``.

    Returns the sampled peak. The envelope is never clipped.
    """
    peak, t_peak = peak_amplitude(basis, coeffs)
    if peak > bound:
        raise AmplitudeBoundError(peak, bound, t_peak)
    return peak


def format_coefficients_row(coeffs: PulseCoefficients) -> list[str]:
    return [repr_float(x) for x in coeffs.to_vector()]


def repr_float(x: float) -> str:
    return format(float(x), ".17g")


def coefficients_to_csv(rows: Iterable[PulseCoefficients], header: bool = True) -> str:
    """Serialise coefficient vectors as ``re0..re9, im0..im9`` CSV text."""
    rows = list(rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header and rows:
        n = len(rows[0])
        writer.writerow([f"re{j}" for j in range(n)] + [f"im{j}" for j in range(n)])
    for c in rows:
        writer.writerow(format_coefficients_row(c))
    return buf.getvalue()


def coefficients_from_csv(text: str) -> list[PulseCoefficients]:
    reader = csv.reader(io.StringIO(text))
    out = []
    for row in reader:
        if not row:
            continue
        if row[0].startswith("re"):
            continue
        out.append(PulseCoefficients.from_vector([float(x) for x in row]))
    return out
