import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from plma.data import PlasmidRecord
from plma.grouping import (SequenceGroup, groups_spanning, group_lab_sequences, levenshtein, make_cv_folds,
                           read_split, split_grouped, write_split)


def full_dp(a, b):
    """Textbook (|a|+1) x (|b|+1) matrix."""
    d = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    d[:, 0] = np.arange(len(a) + 1)
    d[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return int(d[-1, -1])


def test_levenshtein_examples():
    assert levenshtein("", "AACG") == 4
    assert levenshtein("ACGT", "ACGT") == 0
    assert levenshtein("GATTACA", "GCATGCU") == 4
    assert full_dp("GATTACA", "GCATGCU") == 4


def test_levenshtein_random_pairs_match_full_dp():
    r = np.random.default_rng(0)
    for _ in range(150):
        a = "".join(r.choice(list("ACGTN"), size=r.integers(0, 201)))
        b = "".join(r.choice(list("ACGTN"), size=r.integers(0, 201)))
        assert levenshtein(a, b) == full_dp(a, b)


def test_levenshtein_metric_axioms():
    r = np.random.default_rng(1)
    for _ in range(1000):
        a, b, c = ("".join(r.choice(list("ACG"), size=r.integers(0, 30))) for _ in range(3))
        ab, ba = levenshtein(a, b), levenshtein(b, a)
        assert ab == ba
        assert (ab == 0) == (a == b)
        assert levenshtein(a, c) <= ab + levenshtein(b, c)


@given(st.text("ACGT", max_size=50), st.text("ACGT", max_size=50), st.integers(0, 60))
def test_cutoff_is_exact_below_and_flags_above(a, b, cutoff):
    exact = full_dp(a, b)
    got = levenshtein(a, b, cutoff=cutoff)
    if exact <= cutoff:
        assert got == exact
    else:
        assert got > cutoff


def test_non_ascii_strings():
    assert levenshtein("héllo", "hello") == 1


def rec(sid, lab, seq):
    return PlasmidRecord(sid, lab, seq)


def test_identical_sequences_group():
    groups = group_lab_sequences([rec("a", "L", "ACGTACGT"), rec("b", "L", "ACGTACGT")])
    assert [g.members for g in groups] == [["a", "b"]]


def test_distant_sequences_split_groups():
    a, b = "A" * 20, "A" * 10 + "C" * 10
    assert full_dp(a, b) == 10
    groups = group_lab_sequences([rec("a", "L", a), rec("b", "L", b)], threshold=5)
    assert len(groups) == 2
    assert len(group_lab_sequences([rec("a", "L", a), rec("b", "L", b)], threshold=10)) == 1


def test_fractional_threshold_uses_shorter_length():
    a, b = "A" * 20, "A" * 18 + "CC"
    assert len(group_lab_sequences([rec("a", "L", a), rec("b", "L", b)], threshold=0.1)) == 1
    assert len(group_lab_sequences([rec("a", "L", a), rec("b", "L", b)], threshold=0.05)) == 2


def test_single_linkage_chains():
    s = ["AAAAAAAAAA", "AAAAAAAAAC", "AAAAAAAACC"]
    groups = group_lab_sequences([rec(str(i), "L", x) for i, x in enumerate(s)], threshold=1)
    assert len(groups) == 1


def test_labs_never_share_a_group():
    groups = group_lab_sequences([rec("a", "L1", "ACGT"), rec("b", "L2", "ACGT")])
    assert len(groups) == 2
    assert all(len({g.lab_id}) == 1 for g in groups)


def singletons(n):
    return [SequenceGroup("L", [f"s{i}"]) for i in range(n)]


def test_one_group_stays_in_train_with_warning():
    with pytest.warns(UserWarning):
        plan = split_grouped([SequenceGroup("L", ["a", "b", "c"])], 0.15)
    assert set(plan.assignment.values()) == {"train"}


def test_ten_singletons_fraction_point_two():
    plan = split_grouped(singletons(10), 0.2, seed=3)
    assert plan.counts()["validation"] == 2
    assert plan.counts()["train"] == 8


@given(st.lists(st.integers(1, 5), min_size=1, max_size=25), st.floats(0.05, 0.6), st.integers(0, 50))
def test_split_properties(sizes, frac, seed):
    groups = [SequenceGroup(f"L{i % 3}", [f"g{i}_{j}" for j in range(n)]) for i, n in enumerate(sizes)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        plan = split_grouped(groups, frac, seed=seed)
    all_ids = [m for g in groups for m in g.members]
    assert sorted(plan.assignment) == sorted(all_ids)
    assert groups_spanning(plan, groups) == []
    n_val = plan.counts()["validation"]
    train_groups = [g for g in groups if plan.assignment[g.members[0]] == "train"]
    # either the share was reached, or only the always-kept last group is left in train
    assert n_val / len(all_ids) >= frac or len(train_groups) == 1
    assert train_groups


def test_test_ids_are_untouched():
    groups = singletons(6)
    plan = split_grouped(groups, 0.3, seed=0, test_ids=["s0", "s1"])
    assert plan.assignment["s0"] == plan.assignment["s1"] == "test"
    assert "test" not in {plan.assignment[f"s{i}"] for i in range(2, 6)}


def test_cv_folds_counting_and_partition():
    groups = singletons(10)
    folds = make_cv_folds(groups, 5, seed=0)
    assert len(folds) == 5
    buckets = [sorted(s for s, a in f.assignment.items() if a == "validation") for f in folds]
    assert all(len(b) == 2 for b in buckets)
    flat = [s for b in buckets for s in b]
    assert sorted(flat) == sorted(f"s{i}" for i in range(10))
    for f in folds:
        assert groups_spanning(f, groups) == []


def test_cv_folds_errors():
    with pytest.raises(ValueError):
        make_cv_folds(singletons(3), 5)
    with pytest.raises(ValueError):
        make_cv_folds(singletons(3), 1)


def test_split_file_roundtrip(tmp_path):
    groups = [SequenceGroup("L", ["a", "b"]), SequenceGroup("L", ["c"]), SequenceGroup("M", ["d"]),
              SequenceGroup("M", ["e"]), SequenceGroup("M", ["f"])]
    plan = split_grouped(groups, 0.3, seed=1)
    folds = make_cv_folds(groups, 5, seed=1)
    write_split(tmp_path / "s.csv", plan, folds)
    text = (tmp_path / "s.csv").read_text().splitlines()
    assert text[0] == "sequence_id,assignment,fold"
    fold_of = {l.split(",")[0]: int(l.split(",")[2]) for l in text[1:]}
    assert fold_of["a"] == fold_of["b"]
    assert sorted(set(fold_of.values())) == [0, 1, 2, 3, 4]
    assert read_split(tmp_path / "s.csv").assignment == plan.assignment
    fold2 = read_split(tmp_path / "s.csv", fold=2)
    assert fold2.assignment == folds[2].assignment
