import math

import numpy as np
import pytest
from sklearn.base import clone

from pulseforge.datasetpipe import (
    AngleDataset,
    CoefficientReducer,
    CoefficientSmoother,
    DatasetHoleError,
    ReductionInfeasibleError,
    ReductionMap,
    average_over_seeds,
    expand_coefficients,
    reduce_coefficients,
    smooth,
    split,
    split_counts,
    total_variation,
)
from pulseforge.pulseoptim import RawRecord

GRID = np.linspace(-math.pi, math.pi, 9)


def records(angles, n_seeds, rng):
    return [RawRecord(float(a), s, rng.normal(size=4), 1.0, True) for s in range(n_seeds) for a in angles]


def test_average_over_seeds():
    rng = np.random.default_rng(0)
    recs = records(GRID, 3, rng)
    ds = average_over_seeds(recs)
    assert np.array_equal(ds.angles, GRID)
    expected = np.mean([[r.coeffs for r in recs if r.angle == a] for a in GRID], axis=1)
    assert np.allclose(ds.coeffs, expected, rtol=0, atol=1e-15)
    assert ds.provenance["seeds_per_angle"] == [3] * 9


def test_hole_is_reported():
    recs = records(np.delete(GRID, [2, 5]), 2, np.random.default_rng(1))
    with pytest.raises(DatasetHoleError) as info:
        average_over_seeds(recs)
    assert info.value.missing == [2, 5]
    with pytest.raises(DatasetHoleError):
        average_over_seeds(records(GRID[:-1], 1, np.random.default_rng(1)), expected_angles=GRID)


def test_non_uniform_grid_is_not_a_hole():
    angles = np.array([-3.0, -1.0, 0.0, 0.5, 2.9])
    assert average_over_seeds((angles, np.zeros((5, 2)))).n_angles == 5


def test_dataset_validation():
    with pytest.raises(ValueError):
        AngleDataset(np.array([0.0, 0.0]), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        AngleDataset(np.array([0.0, 4.0]), np.zeros((2, 3)))


def ramp(n=40, cols=3):
    x = np.linspace(-math.pi, math.pi, n)
    return AngleDataset(x, np.column_stack([x * (j + 1) + j for j in range(cols)]))


@pytest.mark.parametrize("window", [1, 2, 5, 8, 11])
def test_smoothing_preserves_linear_trends(window):
    ds = ramp()
    assert np.allclose(smooth(ds, window).coeffs, ds.coeffs, atol=1e-12)


def test_smoothing_window_one_is_identity():
    ds = AngleDataset(GRID, np.random.default_rng(2).normal(size=(9, 2)))
    assert np.array_equal(smooth(ds, 1).coeffs, ds.coeffs)


def test_even_window_uses_half_weight_ends():
    X = np.random.default_rng(3).normal(size=(12, 1))
    out = CoefficientSmoother(4).fit_transform(X)
    i = 6
    ref = (0.5 * X[i - 2] + X[i - 1] + X[i] + X[i + 1] + 0.5 * X[i + 2]) / 4
    assert out[i] == pytest.approx(ref)
    assert out[1] == pytest.approx(X[:3].mean())
    assert out[0] == X[0]


def test_smoothing_reduces_variation():
    x = np.linspace(-math.pi, math.pi, 200)
    noisy = np.column_stack([np.sin(x), np.cos(x)]) + np.random.default_rng(4).normal(0, 0.1, (200, 2))
    ds = AngleDataset(x, noisy)
    assert np.all(total_variation(smooth(ds, 10)) < total_variation(ds))


def test_oversized_window_raises():
    with pytest.raises(ValueError):
        smooth(ramp(5), 6)


def grouped_matrix():
    x = np.linspace(-math.pi, math.pi, 50)
    base = [np.sin(x), x, np.cos(x) * 3, x**2 / 3, -x]
    cols = []
    for j in range(20):
        if j >= 12:
            cols.append(np.full(50, 0.01 * j))
        else:
            cols.append(base[j % 5] + 1e-4 * j)
    return x, np.column_stack(cols)


def test_reduction_recovers_groups():
    x, X = grouped_matrix()
    red, rmap = reduce_coefficients(AngleDataset(x, X))
    assert rmap.fixed_columns == tuple(range(12, 20))
    assert rmap.outputs == ((0, 5, 10), (1, 6, 11), (2, 7), (3, 8), (4, 9))
    assert red.n_out == 5 and red.reduction_map is rmap
    back = expand_coefficients(red.coeffs, rmap)
    assert np.max(np.abs(back - X)) < 1e-3


def test_reduction_infeasible():
    x = np.linspace(-math.pi, math.pi, 30)
    X = np.column_stack([np.sin((j + 1) * x) for j in range(8)])
    with pytest.raises(ReductionInfeasibleError) as info:
        reduce_coefficients(AngleDataset(x, X), 0.05, 5)
    assert info.value.achievable == 8


def test_map_json_round_trip_and_validation():
    rmap = ReductionMap(4, ((0, 2), (1,)), (3,), (0.25,))
    assert ReductionMap.from_json(rmap.to_json()) == rmap
    with pytest.raises(ValueError):
        ReductionMap(4, ((0, 2), (1, 2)), (3,), (0.25,))
    assert np.array_equal(expand_coefficients(np.array([1.0, 2.0]), rmap), [1.0, 2.0, 1.0, 0.25])


def test_reducer_estimator_api():
    x, X = grouped_matrix()
    est = CoefficientReducer(variation_threshold=0.05, n_out=5)
    assert est.get_params() == {"variation_threshold": 0.05, "n_out": 5}
    Z = est.fit_transform(X)
    assert Z.shape == (50, 5)
    assert clone(est).get_params() == est.get_params()
    assert est.inverse_transform(Z).shape == X.shape


def test_split_counts():
    assert split_counts(64, (0.8, 0.1, 0.1)) == [51, 7, 6]
    assert split_counts(10, (0.8, 0.1, 0.1)) == [8, 1, 1]
    assert sum(split_counts(4096, (0.8, 0.1, 0.1))) == 4096


def test_split_is_seeded_partition():
    ds = ramp(64)
    a, b = split(ds, seed=3), split(ds, seed=3)
    assert np.array_equal(a.split_tags, b.split_tags)
    assert sorted(map(str, set(a.split_tags))) == ["test", "train", "val"]
    assert [a.subset(t).n_angles for t in ("train", "val", "test")] == [51, 7, 6]
    assert not np.array_equal(split(ds, seed=4).split_tags, a.split_tags)
    with pytest.raises(ValueError):
        split(ds, (0.5, 0.5, 0.5))


def test_save_load_round_trip(tmp_path, square_dataset):
    square_dataset.save(tmp_path)
    back = AngleDataset.load(tmp_path)
    assert np.array_equal(back.angles, square_dataset.angles)
    assert np.array_equal(back.coeffs, square_dataset.coeffs)
    assert back.reduction_map == square_dataset.reduction_map
    assert list(back.split_tags) == list(square_dataset.split_tags)
