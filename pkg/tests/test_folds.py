import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bcrkit import folds
from bcrkit.errors import DataError
from bcrkit.folds import StratumLabels


def random_cohort(rng, n):
    return [StratumLabels(bool(rng.random() < 0.3), int(rng.choice(5, p=[0.3, 0.3, 0.2, 0.1, 0.1])) + 1,
                          folds.era_flag(int(rng.integers(1990, 2018)))) for _ in range(n)]


def max_deviation(assign, labels, k):
    return max(float(np.abs(c - c.sum() / k).max()) for c in assign.counts(labels).values())


def test_partition_and_bound_over_random_cohorts():
    rng = np.random.default_rng(0)
    bound = 1 + 3  # one plus the number of label dimensions
    for _ in range(100):
        n = int(rng.integers(20, 400))
        labels = random_cohort(rng, n)
        a = folds.stratified_kfold(labels, 5, seed=int(rng.integers(1 << 30)))
        assert a.fold.shape == (n,) and set(np.unique(a.fold)) <= set(range(5))
        assert sum(a.members(j).size for j in range(5)) == n
        assert a.sizes().max() - a.sizes().min() <= 1
        assert max_deviation(a, labels, 5) < bound


def test_balanced_binary_label():
    labels = [(i % 2,) for i in range(10)]
    a = folds.stratified_kfold(labels, 5, seed=3)
    for j in range(5):
        assert sorted(labels[i][0] for i in a.members(j)) == [0, 1]


def test_single_label_value_sizes():
    a = folds.stratified_kfold([(1,)] * 23, 5, seed=0)
    assert a.sizes().max() - a.sizes().min() <= 1


def test_known_joint_counts_within_one():
    labels = [lab for lab in itertools.product([0, 1], range(1, 6), [0, 1]) for _ in range(5)]
    for seed in range(10):
        a = folds.stratified_kfold(labels, 5, seed=seed)
        assert max_deviation(a, labels, 5) <= 1


def test_deterministic_under_seed():
    labels = random_cohort(np.random.default_rng(1), 150)
    a = folds.stratified_kfold(labels, 5, seed=42)
    b = folds.stratified_kfold(labels, 5, seed=42)
    c = folds.stratified_kfold(labels, 5, seed=43)
    np.testing.assert_array_equal(a.fold, b.fold)
    assert not np.array_equal(a.fold, c.fold)
    assert max_deviation(c, labels, 5) < 4


@given(st.integers(2, 8), st.integers(0, 1000), st.lists(st.tuples(st.integers(0, 1), st.integers(1, 5)),
                                                        min_size=8, max_size=120))
def test_partition_property(k, seed, labels):
    if k > len(labels):
        return
    a = folds.stratified_kfold(labels, k, seed)
    assert np.all((a.fold >= 0) & (a.fold < k))
    assert a.sizes().sum() == len(labels)
    assert a.sizes().max() - a.sizes().min() <= 1


def test_errors():
    with pytest.raises(DataError):
        folds.stratified_kfold([(0,)] * 3, 5)
    with pytest.raises(DataError):
        folds.stratified_kfold([(0,)] * 3, 1)
    with pytest.raises(DataError):
        StratumLabels(True, 6, 0)


@pytest.mark.parametrize("year,flag", [(1999, 0), (2004, 0), (2005, 1), (2015, 1)])
def test_era_boundary(year, flag):
    assert folds.era_flag(year) == flag


def test_csv_round_trip(tmp_path):
    labels = random_cohort(np.random.default_rng(2), 30)
    ids = [f"P{i}" for i in range(30)]
    a = folds.stratified_kfold(labels, 3, seed=0, patient_ids=ids)
    path = tmp_path / "folds.csv"
    a.to_csv(path, header_lines=["provenance: test"])
    assert path.read_text().startswith("# provenance: test\npatient_id,fold\n")
    assert folds.read_folds(path) == {p: int(f) for p, f in zip(ids, a.fold)}
