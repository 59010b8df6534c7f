"""From raw multi-seed optimiser output to the training dataset.

Stages: seed averaging, moving-average smoothing over angle, reduction of
the 20 coefficients to a handful of model outputs, and a seeded
train/val/test split. The smoothing and reduction stages are also exposed
as scikit-learn transformers.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .splinepulse import repr_float

SPLITS = ("train", "val", "test")


class DatasetHoleError(ValueError):
    def __init__(self, missing: Sequence[int]):
        self.missing = list(missing)
        super().__init__(f"angles without any seed record at grid indices {self.missing}")


class ReductionInfeasibleError(ValueError):
    def __init__(self, achievable: int, target: int):
        self.achievable = achievable
        self.target = target
        super().__init__(
            f"cannot reduce to {target} outputs with this threshold; achievable count is {achievable}"
        )


@dataclass(frozen=True)
class ReductionMap:
    """How a reduced output vector expands back to the full coefficient set.

    ``outputs[k]`` lists the columns that output ``k`` is copied into;
    ``fixed_columns`` never vary with angle and are restored from
    ``fixed_means``.
    """

    n_columns: int
    outputs: tuple[tuple[int, ...], ...]
    fixed_columns: tuple[int, ...] = ()
    fixed_means: tuple[float, ...] = ()

    def __post_init__(self):
        seen = [c for g in self.outputs for c in g] + list(self.fixed_columns)
        if sorted(seen) != list(range(self.n_columns)):
            raise ValueError("reduction groups must partition all columns exactly once")
        if len(self.fixed_columns) != len(self.fixed_means):
            raise ValueError("fixed_columns and fixed_means differ in length")

    @property
    def n_out(self) -> int:
        return len(self.outputs)

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_columns": self.n_columns,
                "groups": [list(g) for g in self.outputs],
                "fixed_columns": list(self.fixed_columns),
                "means": [float(m) for m in self.fixed_means],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "ReductionMap":
        obj = json.loads(text)
        return cls(
            n_columns=int(obj["n_columns"]),
            outputs=tuple(tuple(int(c) for c in g) for g in obj["groups"]),
            fixed_columns=tuple(int(c) for c in obj["fixed_columns"]),
            fixed_means=tuple(float(m) for m in obj["means"]),
        )


@dataclass
class AngleDataset:
    angles: np.ndarray
    coeffs: np.ndarray
    reduction_map: ReductionMap | None = None
    split_tags: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float)
        self.coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if self.coeffs.shape[0] != self.angles.size:
            raise ValueError(f"{self.angles.size} angles but {self.coeffs.shape[0]} coefficient rows")
        if self.angles.size > 1 and not np.all(np.diff(self.angles) > 0):
            raise ValueError("angles must be strictly increasing")
        if self.angles.size and (self.angles[0] < -math.pi - 1e-12 or self.angles[-1] > math.pi + 1e-12):
            raise ValueError("angles must lie in [-pi, pi]")
        if self.reduction_map is not None and self.reduction_map.n_out != self.n_out:
            raise ValueError("reduction map arity does not match coefficient columns")
        if self.split_tags is not None:
            self.split_tags = np.asarray(self.split_tags, dtype=object)
            if self.split_tags.size != self.angles.size:
                raise ValueError("one split tag per angle is required")

    @property
    def n_angles(self) -> int:
        return self.angles.size

    @property
    def n_out(self) -> int:
        return self.coeffs.shape[1]

    def subset(self, tag: str) -> "AngleDataset":
        if self.split_tags is None:
            raise ValueError("dataset has no split tags")
        mask = self.split_tags == tag
        return AngleDataset(
            self.angles[mask], self.coeffs[mask], self.reduction_map, self.split_tags[mask], dict(self.provenance)
        )

    def full_coefficients(self) -> np.ndarray:
        """Rows expanded back to the simulator's coefficient layout."""
        if self.reduction_map is None:
            return self.coeffs.copy()
        return expand_coefficients(self.coeffs, self.reduction_map)

    # I/O -----------------------------------------------------------------

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["angle"] + [f"c{j}" for j in range(self.n_out)] + ["split"])
            tags = self.split_tags if self.split_tags is not None else [""] * self.n_angles
            for a, row, tag in zip(self.angles, self.coeffs, tags):
                w.writerow([repr_float(a)] + [repr_float(x) for x in row] + [tag])

    @classmethod
    def from_csv(cls, path, reduction_map: ReductionMap | None = None) -> "AngleDataset":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path} has no records")
        n_out = len([k for k in rows[0] if k.startswith("c") and k[1:].isdigit()])
        angles = np.array([float(r["angle"]) for r in rows])
        coeffs = np.array([[float(r[f"c{j}"]) for j in range(n_out)] for r in rows])
        tags = [r.get("split", "") for r in rows]
        split_tags = np.array(tags, dtype=object) if any(tags) else None
        return cls(angles, coeffs, reduction_map, split_tags)

    def save(self, directory, stem: str = "dataset") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.to_csv(directory / f"{stem}.csv")
        if self.reduction_map is not None:
            (directory / f"{stem}_map.json").write_text(self.reduction_map.to_json())

    @classmethod
    def load(cls, directory, stem: str = "dataset") -> "AngleDataset":
        directory = Path(directory)
        map_path = directory / f"{stem}_map.json"
        rmap = ReductionMap.from_json(map_path.read_text()) if map_path.exists() else None
        return cls.from_csv(directory / f"{stem}.csv", rmap)


# averaging -----------------------------------------------------------------


def average_over_seeds(raw, expected_angles=None, decimals: int = 12) -> AngleDataset:
    """Per-angle mean over all seed records.

    ``raw`` is a sequence of records with ``angle`` and ``coeffs``
    attributes, or a pair ``(angles, coeffs)`` of arrays. Holes are
    detected against ``expected_angles`` or, by default, against the
    uniform grid implied by the smallest angle spacing.
    """
    if isinstance(raw, tuple) and len(raw) == 2:
        angles = np.asarray(raw[0], dtype=float)
        coeffs = np.atleast_2d(np.asarray(raw[1], dtype=float))
    else:
        raw = list(raw)
        if not raw:
            raise ValueError("raw dataset is empty")
        angles = np.array([r.angle for r in raw], dtype=float)
        coeffs = np.array([r.coeffs for r in raw], dtype=float)
    keys = np.round(angles, decimals)
    uniq, first, inverse, counts = np.unique(keys, return_index=True, return_inverse=True, return_counts=True)
    sums = np.zeros((uniq.size, coeffs.shape[1]))
    np.add.at(sums, inverse, coeffs)
    means = sums / counts[:, None]

    if expected_angles is None and uniq.size > 2:
        # Only a grid whose gaps are whole multiples of the smallest one can
        # be said to have holes.
        gaps = np.diff(uniq) / np.min(np.diff(uniq))
        if np.allclose(gaps, np.round(gaps), atol=1e-6) and np.any(np.round(gaps) > 1):
            n = int(round(np.sum(np.round(gaps)))) + 1
            expected_angles = np.linspace(uniq[0], uniq[-1], n)
    if expected_angles is not None:
        expected = np.round(np.asarray(expected_angles, dtype=float), decimals)
        present = np.isin(expected, uniq) | np.array(
            [np.any(np.isclose(e, uniq, atol=10.0**-decimals * 10)) for e in expected]
        )
        if not np.all(present):
            raise DatasetHoleError(np.nonzero(~present)[0].tolist())

    # Keep the recorded angle, not its rounded key.
    return AngleDataset(angles[first], means, provenance={"seeds_per_angle": counts.tolist()})


# smoothing -----------------------------------------------------------------


def _smooth_matrix(X: np.ndarray, window: int) -> np.ndarray:
    # Centred moving average. An even window spans window+1 samples with
    # half weight on the two ends so it stays centred. Near the edges the
    # window shrinks symmetrically, so linear trends pass through unchanged.
    if window == 1:
        return X.copy()
    n = X.shape[0]
    h_full = window // 2
    csum = np.vstack([np.zeros((1, X.shape[1])), np.cumsum(X, axis=0)])
    out = np.empty_like(X)
    for i in range(n):
        reach = min(i, n - 1 - i)
        if h_full <= reach:
            h = h_full
            total = csum[i + h + 1] - csum[i - h]
            if window % 2 == 0:
                total = total - 0.5 * (X[i - h] + X[i + h])
            out[i] = total / window
        else:
            h = reach
            out[i] = (csum[i + h + 1] - csum[i - h]) / (2 * h + 1)
    return out


class CoefficientSmoother(TransformerMixin, BaseEstimator):
    """Column-wise centred moving average over rows ordered by angle."""

    def __init__(self, window: int = 50):
        self.window = window

    def fit(self, X, y=None):
        X = check_array(X)
        self._check_window(X.shape[0])
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X)
        self._check_window(X.shape[0])
        return _smooth_matrix(X, int(self.window))

    def _check_window(self, n):
        if int(self.window) != self.window or self.window < 1:
            raise ValueError(f"window must be a positive integer, got {self.window}")
        if self.window > n:
            raise ValueError(f"window {self.window} exceeds the {n} available angles")


def smooth(ds: AngleDataset, window: int = 50) -> AngleDataset:
    out = CoefficientSmoother(window).fit_transform(ds.coeffs)
    prov = dict(ds.provenance, smoothing_window=int(window))
    return replace(ds, coeffs=out, provenance=prov)


def total_variation(ds) -> np.ndarray:
    """Sum of absolute successive differences per column."""
    X = ds.coeffs if isinstance(ds, AngleDataset) else np.asarray(ds, dtype=float)
    X = np.atleast_2d(X.T).T if X.ndim == 1 else X
    if X.shape[0] < 2:
        raise ValueError("total variation needs at least two angles")
    return np.sum(np.abs(np.diff(X, axis=0)), axis=0)


# reduction -----------------------------------------------------------------


class CoefficientReducer(TransformerMixin, BaseEstimator):
    """Collapse coefficient columns to ``n_out`` model outputs.

    Columns whose range over angle is below ``variation_threshold`` times
    the global coefficient range are frozen at their mean. The remaining
    columns are merged by complete-linkage agglomeration, where the
    distance between two columns is their largest per-angle difference
    relative to the same global range; merging stops at ``n_out`` clusters
    and never joins clusters further apart than the threshold. Each output
    is the per-angle mean of its cluster.
    """

    def __init__(self, variation_threshold: float = 0.05, n_out: int = 5):
        self.variation_threshold = variation_threshold
        self.n_out = n_out

    def fit(self, X, y=None):
        X = check_array(X)
        n_cols = X.shape[1]
        scale = float(np.max(X) - np.min(X))
        limit = self.variation_threshold * scale
        ranges = np.ptp(X, axis=0)
        fixed = [j for j in range(n_cols) if ranges[j] < limit or scale == 0.0]
        free = [j for j in range(n_cols) if j not in fixed]
        clusters = [[j] for j in free]

        def distance(a, b):
            return max(np.max(np.abs(X[:, i] - X[:, j])) for i in a for j in b)

        while len(clusters) > self.n_out:
            best = None
            for p in range(len(clusters)):
                for q in range(p + 1, len(clusters)):
                    dist = distance(clusters[p], clusters[q])
                    if best is None or dist < best[0]:
                        best = (dist, p, q)
            if best[0] >= limit:
                break
            _, p, q = best
            clusters[p] = sorted(clusters[p] + clusters[q])
            del clusters[q]

        if len(clusters) != self.n_out:
            raise ReductionInfeasibleError(len(clusters), self.n_out)
        clusters.sort(key=lambda g: g[0])
        self.map_ = ReductionMap(
            n_columns=n_cols,
            outputs=tuple(tuple(g) for g in clusters),
            fixed_columns=tuple(fixed),
            fixed_means=tuple(float(X[:, j].mean()) for j in fixed),
        )
        self.n_features_in_ = n_cols
        return self

    def transform(self, X):
        check_is_fitted(self, "map_")
        X = check_array(X)
        if X.shape[1] != self.map_.n_columns:
            raise ValueError(f"expected {self.map_.n_columns} columns, got {X.shape[1]}")
        return np.column_stack([X[:, list(g)].mean(axis=1) for g in self.map_.outputs])

    def inverse_transform(self, X):
        check_is_fitted(self, "map_")
        return expand_coefficients(check_array(X), self.map_)


def reduce_coefficients(ds: AngleDataset, variation_threshold: float = 0.05, n_out: int = 5):
    """Returns ``(reduced_dataset, reduction_map)``."""
    if ds.reduction_map is not None:
        raise ValueError("dataset is already reduced")
    reducer = CoefficientReducer(variation_threshold, n_out).fit(ds.coeffs)
    reduced = replace(ds, coeffs=reducer.transform(ds.coeffs), reduction_map=reducer.map_)
    return reduced, reducer.map_


def expand_coefficients(reduced, rmap: ReductionMap) -> np.ndarray:
    """Inverse of the reduction: one output fans out to its whole cluster."""
    arr = np.asarray(reduced, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != rmap.n_out:
        raise ValueError(f"expected {rmap.n_out} reduced values, got {arr.shape[1]}")
    out = np.empty((arr.shape[0], rmap.n_columns))
    for k, group in enumerate(rmap.outputs):
        out[:, list(group)] = arr[:, [k]]
    for col, mean in zip(rmap.fixed_columns, rmap.fixed_means):
        out[:, col] = mean
    return out[0] if single else out


# splitting -----------------------------------------------------------------


def split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of ``n * fractions``; ties go to earlier splits."""
    raw = [n * f for f in fractions]
    counts = [int(math.floor(x)) for x in raw]
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[: n - sum(counts)]:
        counts[k] += 1
    return counts


def split(ds: AngleDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> AngleDataset:
    """Assign every angle to train/val/test with a seeded permutation."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    counts = split_counts(ds.n_angles, fractions)
    for name, frac, count in zip(SPLITS, fractions, counts):
        if frac > 0 and count == 0:
            raise ValueError(f"split {name!r} would be empty for {ds.n_angles} angles")
    perm = np.random.default_rng(seed).permutation(ds.n_angles)
    tags = np.empty(ds.n_angles, dtype=object)
    start = 0
    for name, count in zip(SPLITS, counts):
        tags[perm[start:start + count]] = name
        start += count
    prov = dict(ds.provenance, split_seed=int(seed), split_fractions=list(fractions))
    return replace(ds, split_tags=tags, provenance=prov)
