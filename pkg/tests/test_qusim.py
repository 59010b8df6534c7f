import math

import numpy as np
import pytest
from scipy.linalg import expm

from pulseforge.qusim import (
    RAD_PER_MHZ_NS,
    ProjectionError,
    SimulationError,
    TransmonConfig,
    auto_steps,
    evolve_vector,
    measure_survival,
    propagate,
    config_basis,
    rx_stack,
    rx_unitary,
    standard_error,
    survival_probability,
    trace_fidelity,
    unitarity_error,
    unitarize,
    unitary_from_json,
    unitary_to_json,
)
from pulseforge.splinepulse import AmplitudeBoundError


def constant_vector(u, v=0.0):
    return np.concatenate([np.full(10, u), np.full(10, v)])


def hamiltonian(cfg, u, v):
    d = cfg.dim
    a = np.diag(np.sqrt(np.arange(1, d)), 1).astype(complex)
    n = np.arange(d)
    H = np.diag(-0.5 * cfg.anharmonicity * n * (n - 1)).astype(complex)
    H += u * (a + a.conj().T) / 2 + v * 1j * (a.conj().T - a) / 2
    return RAD_PER_MHZ_NS * H


@pytest.mark.parametrize("u,v", [(2.0, 0.0), (0.0, 2.0), (4.0, 0.0), (1.3, -2.1)])
def test_constant_drive_matches_rotation(qubit, u, v):
    U = evolve_vector(qubit, constant_vector(u, v))
    theta = RAD_PER_MHZ_NS * 125.0 * math.hypot(u, v)
    phi = math.atan2(v, u)
    X = np.array([[0, 1], [1, 0]])
    Y = np.array([[0, -1j], [1j, 0]])
    ref = math.cos(theta / 2) * np.eye(2) - 1j * math.sin(theta / 2) * (math.cos(phi) * X + math.sin(phi) * Y)
    assert np.max(np.abs(U - ref)) < 1e-10


def test_two_megahertz_is_half_pi(qubit):
    assert 1.0 - trace_fidelity(evolve_vector(qubit, constant_vector(2.0)), math.pi / 2) < 1e-12


@pytest.mark.parametrize("cfg", [TransmonConfig(guard_levels=1), TransmonConfig(guard_levels=2, anharmonicity=300.0)])
def test_guarded_constant_drive_matches_expm(cfg):
    cfg = cfg.replace(dt=cfg.duration / 32000)
    U = propagate(cfg, config_basis(cfg), constant_vector(3.0, 1.0))
    ref = expm(-1j * hamiltonian(cfg, 3.0, 1.0) * cfg.duration)
    # The top level rotates fastest and carries the largest phase error.
    assert np.max(np.abs(U[:2, :2] - ref[:2, :2])) < 1e-8
    assert np.max(np.abs(U - ref)) < 1e-5


def test_trace_fidelity_identity():
    for eps in np.linspace(-1.0, 1.0, 21):
        for theta in (-math.pi, -0.7, 0.0, 1.1, math.pi):
            assert abs(trace_fidelity(rx_unitary(theta + eps), theta) - math.cos(eps / 2) ** 2) < 1e-10


def test_trace_fidelity_ignores_global_phase():
    U = rx_unitary(0.4) * np.exp(0.3j)
    assert trace_fidelity(U, 0.4) == pytest.approx(1.0, abs=1e-14)
    assert trace_fidelity(rx_unitary(0.4 + 2 * math.pi), 0.4) == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("guard,tol", [(0, 1e-9), (1, 1e-7)])
def test_rk4_step_halving(guard, tol):
    # A guard level adds a 200 MHz phase the default 2000 steps resolve less tightly.
    coarse = TransmonConfig(guard_levels=guard)
    fine = coarse.replace(dt=coarse.dt / 2)
    rng = np.random.default_rng(3)
    for _ in range(10):
        x = rng.uniform(-7, 7, 20)
        theta = rng.uniform(-math.pi, math.pi)
        Fc = trace_fidelity(unitarize(propagate(coarse, config_basis(coarse), x)), theta)
        Ff = trace_fidelity(unitarize(propagate(fine, config_basis(fine), x)), theta)
        assert abs(Fc - Ff) < tol


def test_unitarity_after_projection():
    rng = np.random.default_rng(4)
    for d in (2, 3, 4):
        M = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
        assert unitarity_error(unitarize(M)) < 1e-12
    U = rx_unitary(0.3)
    assert np.max(np.abs(unitarize(U) - U)) < 1e-14


def test_projection_is_nearest_unitary():
    rng = np.random.default_rng(5)
    M = rx_unitary(1.0) + 0.05 * rng.normal(size=(2, 2))
    P = unitarize(M)
    for _ in range(50):
        Q = unitarize(P + 0.01 * (rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))))
        assert np.linalg.norm(M - P) <= np.linalg.norm(M - Q) + 1e-12


def test_singular_projection_raises():
    with pytest.raises(ProjectionError):
        unitarize(np.zeros((2, 2)))


def test_zero_pulse_is_identity_on_qubit(qubit):
    assert np.max(np.abs(evolve_vector(qubit, np.zeros(20)) - np.eye(2))) < 1e-12


def test_auto_steps():
    assert auto_steps(TransmonConfig()) == 2000
    assert auto_steps(TransmonConfig(guard_levels=1)) == 2000
    assert auto_steps(TransmonConfig(guard_levels=1, anharmonicity=2000.0)) == 16000
    assert TransmonConfig(guard_levels=1, anharmonicity=2000.0).n_steps == 16000


def test_config_validation():
    with pytest.raises(ValueError):
        TransmonConfig(dt=1.0)  # only 125 steps
    with pytest.raises(ValueError):
        TransmonConfig(dt=0.07)  # not a whole number of steps
    with pytest.raises(ValueError):
        TransmonConfig(guard_levels=-1)
    with pytest.raises(ValueError):
        TransmonConfig(anharmonicity=0.0)


def test_config_text_round_trip():
    cfg = TransmonConfig(anharmonicity=2000.0, guard_levels=1)
    assert TransmonConfig.from_text(cfg.to_text()) == cfg
    assert TransmonConfig.from_text("guard_levels = 1\n").guard_levels == 1
    with pytest.raises(ValueError):
        TransmonConfig.from_text("[transmon]\nwidth = 3\n")


def test_amplitude_bound_enforced(qubit):
    with pytest.raises(AmplitudeBoundError):
        evolve_vector(qubit, constant_vector(25.0), check_bound=True)


def test_non_finite_input_raises(qubit):
    x = constant_vector(1.0)
    x[3] = np.nan
    with pytest.raises(SimulationError):
        propagate(qubit, config_basis(qubit), x)


def test_standard_error_conventions():
    assert standard_error(0.3, 1000) == pytest.approx(math.sqrt(0.21 / 1000))
    assert standard_error(0.3, 1000, "literal") == pytest.approx(math.sqrt(0.21) / 1000)
    assert standard_error(1.0, 10) == 0.0
    with pytest.raises(ValueError):
        standard_error(0.5, 10, "other")


def test_survival_and_leakage():
    U = np.zeros((3, 3), dtype=complex)
    U[2, 0] = U[0, 1] = U[1, 2] = 1.0
    assert survival_probability(U) == 0.0
    assert survival_probability(rx_unitary(math.pi / 2)) == pytest.approx(0.5)


def test_measure_survival_is_seeded():
    U = rx_unitary(1.0)
    a = measure_survival(U, 1000, 42)
    b = measure_survival(U, 1000, 42)
    assert a == b
    assert a.p_hat == a.zeros / 1000
    assert measure_survival(np.eye(2), 50, 0).p_hat == 1.0
    with pytest.raises(ValueError):
        measure_survival(U, 0, 0)


def test_unitary_json_round_trip():
    U = unitarize(np.random.default_rng(6).normal(size=(3, 3)) + 0j)
    assert np.array_equal(unitary_from_json(unitary_to_json(U)), U)


def test_rx_stack_matches_scalar():
    th = np.array([-2.0, 0.1, 3.0])
    assert np.allclose(rx_stack(th), np.array([rx_unitary(t) for t in th]))
