import math

import numpy as np
import pytest
from sklearn.base import clone

from pulseforge.gatenet import (
    BOOTSTRAP_SIZES,
    FINETUNE_760_SIZES,
    FixedPointFormat,
    GateNetRegressor,
    MlpModel,
    TrainingDivergedError,
    check_preset,
    fit_mse,
    forward,
    infid_grad,
    init_model,
    mean_model_infidelity,
    mse_gradient,
    mse_loss,
    parameter_count,
    quantize,
    quantize_model,
    saturation_count,
    train_infidelity,
    train_mse,
)

from conftest import SQUARE_GAIN


def exact_square_model(alpha_neg=1.0):
    W1 = np.zeros((1, 4))
    W1[0, 0] = 1.0
    W2 = np.zeros((4, 5))
    W2[0] = SQUARE_GAIN
    return MlpModel(BOOTSTRAP_SIZES, [W1, W2], [np.zeros(4), np.zeros(5)], alpha_neg)


def test_parameter_counts():
    assert parameter_count(BOOTSTRAP_SIZES) == 33
    assert parameter_count(FINETUNE_760_SIZES) == 760
    assert FINETUNE_760_SIZES[-1] == 20 and len(FINETUNE_760_SIZES) == 9
    assert init_model().n_params == 33
    with pytest.raises(ValueError):
        check_preset((1,) + (12,) * 6 + (5,), 760)


def test_fixed_point_grid():
    fmt = FixedPointFormat(16, 5)
    assert fmt.step == 2.0**-11
    assert quantize(0.5, fmt) == 0.5
    assert abs(quantize(0.1, fmt) - 0.1) <= fmt.step / 2
    assert quantize(100.0, fmt) == fmt.max_value == 16 - 2.0**-11
    assert quantize(-100.0, fmt) == fmt.min_value == -16
    assert saturation_count([np.array([20.0, 0.0, -17.0])], fmt) == 2
    assert np.array_equal(quantize(np.array([0.123, 3.3]), FixedPointFormat(16, 5, qnoise_factor=0.0)), [0.123, 3.3])
    with pytest.raises(ValueError):
        FixedPointFormat(8, 8)


def test_forward_shapes():
    m = init_model(seed=1)
    assert forward(m, 0.3).shape == (5,)
    assert forward(m, np.array([0.1, 0.2, 0.3])).shape == (3, 5)
    assert np.array_equal(forward(m, 0.2), forward(m, np.array([0.2]))[0])


@pytest.mark.parametrize("alpha_neg", [1.0, 0.1])
def test_mse_gradient_matches_finite_differences(alpha_neg):
    rng = np.random.default_rng(0)
    m = init_model((1, 6, 6, 3), seed=2, alpha_neg=alpha_neg)
    m = m.with_params(m.get_params() + rng.normal(0, 0.3, m.n_params))
    X, Y = rng.uniform(-3, 3, 17), rng.normal(size=(17, 3))
    _, g = mse_gradient(m, X, Y)
    theta = m.get_params()
    h = 1e-6
    for j in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[j] += h
        dn[j] -= h
        fd = (mse_loss(m.with_params(up), X, Y) - mse_loss(m.with_params(dn), X, Y)) / (2 * h)
        assert g[j] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_model_round_trip(tmp_path):
    m = init_model(FINETUNE_760_SIZES, seed=3, alpha_neg=0.2)
    m.save(tmp_path / "m.json")
    back = MlpModel.load(tmp_path / "m.json")
    assert np.array_equal(back.get_params(), m.get_params())
    assert back.layer_sizes == m.layer_sizes and back.alpha_neg == 0.2


def test_params_round_trip():
    m = init_model(seed=4)
    assert np.array_equal(m.with_params(m.get_params()).get_params(), m.get_params())
    with pytest.raises(ValueError):
        m.with_params(np.zeros(5))


def test_train_mse_zero_epochs_is_identity(square_dataset):
    m = init_model(seed=5)
    out, curve = train_mse(m, square_dataset, epochs=0)
    assert np.array_equal(out.get_params(), m.get_params())
    assert curve.epochs == [0]


def test_train_mse_learns_square_pulses(square_dataset, qubit):
    m, curve = train_mse(init_model(seed=6), square_dataset, epochs=1500, lr=1e-2)
    assert curve.val[-1] < curve.val[0] / 100
    va = square_dataset.subset("val")
    assert 1 - mean_model_infidelity(m, va.angles, qubit, square_dataset.reduction_map) > 0.999


def test_exact_model_has_unit_fidelity(square_dataset, qubit):
    assert mean_model_infidelity(exact_square_model(), square_dataset.angles, qubit, square_dataset.reduction_map) < 1e-12


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(square_dataset):
    tr = square_dataset.subset("train")
    with pytest.raises(TrainingDivergedError) as info:
        fit_mse(init_model(seed=7), tr.angles, tr.coeffs * 1e150, epochs=50, lr=1e10, optimizer="sgd")
    assert info.value.epoch >= 1 and np.all(np.isfinite(info.value.checkpoint.get_params()))


def test_regressor_estimator_api(square_dataset):
    tr = square_dataset.subset("train")
    est = GateNetRegressor(epochs=300, learning_rate=1e-2)
    assert clone(est).get_params()["epochs"] == 300
    est.fit(tr.angles.reshape(-1, 1), tr.coeffs)
    assert est.predict(tr.angles.reshape(-1, 1)).shape == (tr.n_angles, 5)
    assert est.score(tr.angles.reshape(-1, 1), tr.coeffs) > 0.9


def test_infid_grad_on_quadratic():
    m = init_model(seed=8)
    theta = m.get_params()

    def loss(model):
        return float(np.sum(model.get_params() ** 2))

    g_fwd, base = infid_grad(None, m, 1e-6, None, loss_fn=loss)
    g_ctr, _ = infid_grad(None, m, 1e-6, None, mode="central", loss_fn=loss)
    assert base == pytest.approx(np.sum(theta**2))
    assert np.allclose(g_fwd, 2 * theta + 1e-6, atol=1e-8)
    assert np.allclose(g_ctr, 2 * theta, atol=1e-8)


def test_infid_grad_matches_central_on_simulator(square_dataset, qubit):
    m = exact_square_model()
    m = m.with_params(m.get_params() + np.random.default_rng(9).normal(0, 1e-2, 33))
    x = square_dataset.angles[::6]
    g_fwd, _ = infid_grad(x, m, 1e-6, qubit, square_dataset.reduction_map)
    g_ctr, _ = infid_grad(x, m, 1e-5, qubit, square_dataset.reduction_map, mode="central")
    assert np.max(np.abs(g_fwd - g_ctr)) < 1e-3 * np.max(np.abs(g_ctr))


def perturbed_model(scale=3e-2):
    m = exact_square_model()
    return m.with_params(m.get_params() + np.random.default_rng(10).normal(0, scale, 33))


def test_train_infidelity_zero_epochs(square_dataset, qubit):
    m = perturbed_model()
    run = train_infidelity(m, square_dataset, 0, qubit)
    assert np.array_equal(run.model.get_params(), m.get_params()) and run.epochs_done == 0


def test_train_infidelity_improves_and_resumes(square_dataset, qubit, tmp_path):
    m = perturbed_model()
    full = train_infidelity(m, square_dataset, 2, qubit, lr=0.1, batch_size=8, seed=1, checkpoint_path=tmp_path / "ck.json")
    assert full.curve.val[-1] < full.curve.val[0]
    first = train_infidelity(m, square_dataset, 1, qubit, lr=0.1, batch_size=8, seed=1)
    second = train_infidelity(first.last_model, square_dataset, 1, qubit, lr=0.1, batch_size=8, seed=1, start_epoch=1)
    assert second.curve.train[1] == full.curve.train[2]
    assert np.array_equal(second.last_model.get_params(), full.last_model.get_params())
    assert np.array_equal(MlpModel.load(tmp_path / "ck.json").get_params(), full.model.get_params())


def test_quantization_degrades_monotonically(square_dataset, qubit):
    m, _ = train_mse(init_model(seed=11), square_dataset, epochs=1500, lr=1e-2)
    va = square_dataset.subset("val")
    rmap = square_dataset.reduction_map
    f_float = 1 - mean_model_infidelity(m, va.angles, qubit, rmap)
    q16 = quantize_model(m, FixedPointFormat(16, 5))
    q6 = quantize_model(m, FixedPointFormat(6, 3))
    f16 = 1 - mean_model_infidelity(q16, va.angles, qubit, rmap)
    f6 = 1 - mean_model_infidelity(q6, va.angles, qubit, rmap)
    assert f_float - f16 <= 1e-3
    assert f_float - f6 > f_float - f16
    assert q16.saturated == 0
    assert all(np.array_equal(w, quantize(w, q16.quant)) for w in q16.weights)


def test_quantization_aware_training_runs(square_dataset):
    m, _ = train_mse(init_model(seed=12), square_dataset, epochs=200, lr=1e-2)
    q = quantize_model(m, FixedPointFormat(10, 4), square_dataset, qat_epochs=50, lr=1e-3)
    assert q.quant.total_bits == 10


def test_saturation_is_counted():
    m = init_model(seed=13)
    m.weights[0][0, 0] = 40.0
    assert quantize_model(m, FixedPointFormat(16, 5)).saturated == 1
