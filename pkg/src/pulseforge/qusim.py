"""Driven transmon simulation in the rotating frame of the qubit drive.

Units: frequencies in MHz, times in ns. The only place the two meet is
``RAD_PER_MHZ_NS``: a frequency ``f`` held for ``t`` ns accumulates
``2*pi*f*t*1e-3`` radians.

The Hamiltonian on ``d = 2 + guard_levels`` levels is::

    H(t) / (2*pi) = -(eta/2) N(N-1) + u(t) (a + a^dag)/2 + v(t) i(a^dag - a)/2

so on the two computational levels a real envelope ``u`` drives ``Rx``.
"""

from __future__ import annotations

import configparser
import json
import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numba
import numpy as np

from .splinepulse import (
    PulseCoefficients,
    SplineBasis,
    build_basis,
    check_amplitude,
    grid_matrix,
)

RAD_PER_MHZ_NS = 2.0 * math.pi * 1e-3
MIN_STEPS = 500
DEFAULT_STEPS = 2000
# Largest phase |H|*dt (rad) a single RK4 step may accumulate when dt is automatic.
MAX_PHASE_PER_STEP = 0.1


class SimulationError(RuntimeError):
    """Integration produced non-finite values."""


class ProjectionError(ValueError):
    """Polar projection of a (near) singular matrix."""


@dataclass(frozen=True)
class TransmonConfig:
    anharmonicity: float = 200.0
    guard_levels: int = 0
    duration: float = 125.0
    max_amplitude: float = 20.0
    dt: float | None = None
    n_coeff: int = field(default=10, repr=False)

    def __post_init__(self):
        if not self.anharmonicity > 0:
            raise ValueError(f"anharmonicity must be positive, got {self.anharmonicity}")
        if int(self.guard_levels) != self.guard_levels or self.guard_levels < 0:
            raise ValueError(f"guard_levels must be a non-negative integer, got {self.guard_levels}")
        object.__setattr__(self, "guard_levels", int(self.guard_levels))
        if not self.duration > 0:
            raise ValueError(f"duration must be positive, got {self.duration}")
        if not self.max_amplitude > 0:
            raise ValueError(f"max_amplitude must be positive, got {self.max_amplitude}")
        if self.dt is None:
            object.__setattr__(self, "dt", self.duration / auto_steps(self))
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        ratio = self.duration / self.dt
        if ratio < MIN_STEPS - 1e-9:
            raise ValueError(
                f"duration/dt = {ratio:.1f} is below the resolution floor of {MIN_STEPS}"
            )
        if abs(ratio - round(ratio)) > 1e-6 * ratio:
            raise ValueError(f"duration {self.duration} is not a whole number of dt={self.dt} steps")

    @property
    def dim(self) -> int:
        return 2 + self.guard_levels

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    def basis(self) -> SplineBasis:
        return build_basis(self.n_coeff, self.duration)

    def replace(self, **changes) -> "TransmonConfig":
        values = asdict(self)
        if "duration" in changes and "dt" not in changes:
            values["dt"] = None
        values.update(changes)
        return TransmonConfig(**values)

    # key-value file I/O --------------------------------------------------

    _FILE_KEYS = {
        "anharmonicity_mhz": "anharmonicity",
        "guard_levels": "guard_levels",
        "duration_ns": "duration",
        "max_amp_mhz": "max_amplitude",
        "dt_ns": "dt",
    }

    def to_text(self) -> str:
        lines = ["[transmon]"]
        for key, attr in self._FILE_KEYS.items():
            lines.append(f"{key} = {getattr(self, attr)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, section: str = "transmon") -> "TransmonConfig":
        parser = configparser.ConfigParser()
        if not any(line.strip().startswith("[") for line in text.splitlines()):
            text = f"[{section}]\n" + text
        parser.read_string(text)
        if parser.has_section(section):
            items = dict(parser.items(section))
        else:
            items = {}
        unknown = set(items) - set(cls._FILE_KEYS)
        if unknown:
            raise ValueError(f"unknown transmon config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in items.items():
            attr = cls._FILE_KEYS[key]
            kwargs[attr] = int(value) if attr == "guard_levels" else float(value)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "TransmonConfig":
        return cls.from_text(Path(path).read_text())


def auto_steps(config) -> int:
    """Default step count: 2000, doubled until the fastest frequency is resolved.

    With guard levels the drift reaches ``eta * G (G+1) / 2`` MHz, which at
    2 GHz would put RK4 far outside its accurate range at 2000 steps.
    """
    d = 2 + int(config.guard_levels)
    top = 0.5 * config.anharmonicity * (d - 1) * (d - 2)
    omega = RAD_PER_MHZ_NS * (top + config.max_amplitude * math.sqrt(d - 1))
    steps = DEFAULT_STEPS
    while omega * config.duration / steps > MAX_PHASE_PER_STEP:
        steps *= 2
    return steps


@lru_cache(maxsize=32)
def drift_diagonal(config: TransmonConfig) -> np.ndarray:
    n = np.arange(config.dim, dtype=float)
    out = -0.5 * config.anharmonicity * n * (n - 1.0)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=32)
def config_basis(config: TransmonConfig) -> SplineBasis:
    return config.basis()


_STAGE_OFFSET = (0, 1, 1, 2)
_STAGE_WEIGHT = (0.0, 0.5, 0.5, 1.0)


@numba.njit(cache=True, nogil=True)
def _rk4_propagator(u, v, drift, dt, scale):
    # u, v are sampled at half steps: index 2k is t_k, 2k+1 is t_k + dt/2.
    # H is tridiagonal: H[n-1, n] = (u - iv) sqrt(n)/2, H[n, n-1] = conj.
    d = drift.shape[0]
    n_steps = (u.shape[0] - 1) // 2
    hd = drift * scale
    cx = np.zeros(d)
    for n in range(1, d):
        cx[n] = math.sqrt(n) * scale * 0.5
    U = np.eye(d, dtype=np.complex128)
    K = np.empty((4, d, d), dtype=np.complex128)
    tmp = np.empty((d, d), dtype=np.complex128)
    for k in range(n_steps):
        for s in range(4):
            idx = 2 * k + _STAGE_OFFSET[s]
            up = complex(u[idx], -v[idx])
            lo = complex(u[idx], v[idx])
            a = _STAGE_WEIGHT[s] * dt
            for r in range(d):
                for c in range(d):
                    if s == 0:
                        tmp[r, c] = U[r, c]
                    else:
                        tmp[r, c] = U[r, c] + a * K[s - 1, r, c]
            for r in range(d):
                for c in range(d):
                    acc = hd[r] * tmp[r, c]
                    if r + 1 < d:
                        acc += up * cx[r + 1] * tmp[r + 1, c]
                    if r > 0:
                        acc += lo * cx[r] * tmp[r - 1, c]
                    K[s, r, c] = complex(acc.imag, -acc.real)
        for r in range(d):
            for c in range(d):
                U[r, c] += dt / 6.0 * (K[0, r, c] + 2.0 * K[1, r, c] + 2.0 * K[2, r, c] + K[3, r, c])
    return U


def sample_envelope(config: TransmonConfig, basis: SplineBasis, vectors: np.ndarray):
    """Envelopes at every RK4 half step for a stack of 2n-vectors.

    ``vectors`` has shape ``(..., 2 * n_coeff)``; returns ``(u, v)`` with
    shape ``(..., 2 * n_steps + 1)``.
    """
    B = grid_matrix(basis, 2 * config.n_steps + 1)
    n = basis.n_coeff
    vectors = np.asarray(vectors, dtype=float)
    return vectors[..., :n] @ B.T, vectors[..., n:] @ B.T


def propagate(config: TransmonConfig, basis: SplineBasis, vector: np.ndarray) -> np.ndarray:
    """Raw RK4 propagator (not unitarized) for a flat coefficient vector."""
    u, v = sample_envelope(config, basis, vector)
    U = _rk4_propagator(
        np.ascontiguousarray(u), np.ascontiguousarray(v), drift_diagonal(config), config.dt, RAD_PER_MHZ_NS
    )
    if not np.all(np.isfinite(U)):
        hmax = RAD_PER_MHZ_NS * (np.max(np.abs(drift_diagonal(config))) + np.max(np.hypot(u, v)) * math.sqrt(config.dim))
        raise SimulationError(
            f"non-finite propagator: dt={config.dt} ns, n_steps={config.n_steps}, "
            f"dim={config.dim}, |H|*dt~{hmax * config.dt:.3g}"
        )
    return U


def evolve(
    config: TransmonConfig,
    basis: SplineBasis,
    coeffs: PulseCoefficients,
    check_bound: bool = True,
) -> np.ndarray:
    """Gate unitary produced by the pulse, projected onto the unitary group."""
    if check_bound:
        check_amplitude(basis, coeffs, config.max_amplitude)
    return unitarize(propagate(config, basis, coeffs.to_vector()))


def evolve_vector(config: TransmonConfig, vector, basis: SplineBasis | None = None, check_bound: bool = False):
    """Like :func:`evolve` but takes a flat 20-vector; skips the bound check by default."""
    basis = basis or config_basis(config)
    coeffs = PulseCoefficients.from_vector(vector)
    return evolve(config, basis, coeffs, check_bound=check_bound)


def unitarize(m: np.ndarray) -> np.ndarray:
    """Nearest unitary to ``m`` in Frobenius norm (polar factor)."""
    m = np.asarray(m, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    W, s, Vh = np.linalg.svd(m)
    if s[-1] <= 1e-12 * max(s[0], 1e-300):
        raise ProjectionError(f"matrix is singular (singular values {s})")
    return W @ Vh


def unitarity_error(U: np.ndarray) -> float:
    U = np.asarray(U)
    return float(np.max(np.abs(U.conj().T @ U - np.eye(U.shape[0]))))


def rx_unitary(theta: float) -> np.ndarray:
    c, s = math.cos(theta / 2.0), math.sin(theta / 2.0)
    return np.array([[c, -1j * s], [-1j * s, c]], dtype=complex)


def rx_stack(thetas) -> np.ndarray:
    thetas = np.asarray(thetas, dtype=float)
    c, s = np.cos(thetas / 2.0), np.sin(thetas / 2.0)
    out = np.empty(thetas.shape + (2, 2), dtype=complex)
    out[..., 0, 0] = c
    out[..., 1, 1] = c
    out[..., 0, 1] = -1j * s
    out[..., 1, 0] = -1j * s
    return out


def trace_fidelity(U: np.ndarray, target_theta: float) -> float:
    """``|Tr(P U P Rx(theta)^dag)|^2 / 4`` on the computational subspace."""
    U = np.asarray(U)
    if U.ndim != 2 or U.shape[0] < 2:
        raise ValueError(f"gate must be at least 2x2, got shape {U.shape}")
    target = rx_unitary(target_theta)
    overlap = np.trace(U[:2, :2] @ target.conj().T)
    return float(abs(overlap) ** 2 / 4.0)


@dataclass(frozen=True)
class ShotRecord:
    n_shots: int
    zeros: int
    p_hat: float
    se: float


def standard_error(p_hat, n_shots, convention: str = "standard"):
    """Binomial standard error of an estimated outcome probability.

    ``"standard"`` is ``sqrt(p(1-p)/N)``; ``"literal"`` is
    ``sqrt(p(1-p))/N``.
    """
    var = np.asarray(p_hat) * (1.0 - np.asarray(p_hat))
    if convention == "standard":
        return np.sqrt(var / n_shots)
    if convention == "literal":
        return np.sqrt(var) / n_shots
    raise ValueError(f"unknown SE convention {convention!r}")


def survival_probability(U: np.ndarray) -> float:
    # Leakage out of |0> is counted as outcome 1.
    return float(min(1.0, abs(U[0, 0]) ** 2))


def measure_survival(U: np.ndarray, n_shots: int, rng_seed, se_convention: str = "standard") -> ShotRecord:
    """Sample ``n_shots`` Z-basis measurements of ``U|0>``.

    ``rng_seed`` is an integer seed or an existing ``numpy.random.Generator``.
    """
    if n_shots < 1:
        raise ValueError(f"n_shots must be >= 1, got {n_shots}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    p0 = survival_probability(U)
    zeros = int(rng.binomial(n_shots, p0))
    p_hat = zeros / n_shots
    return ShotRecord(n_shots, zeros, p_hat, float(standard_error(p_hat, n_shots, se_convention)))


def unitary_to_json(U: np.ndarray) -> str:
    U = np.asarray(U, dtype=complex)
    entries = [[float(z.real), float(z.imag)] for z in U.reshape(-1)]
    return json.dumps({"dim": int(U.shape[0]), "entries": entries})


def unitary_from_json(text: str) -> np.ndarray:
    obj = json.loads(text)
    d = int(obj["dim"])
    flat = np.array([complex(re, im) for re, im in obj["entries"]])
    if flat.size != d * d:
        raise ValueError(f"expected {d * d} entries, got {flat.size}")
    return flat.reshape(d, d)


def config_fields() -> list[str]:
    return [f.name for f in fields(TransmonConfig)]
