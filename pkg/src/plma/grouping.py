"""Leak-free partitioning: edit-distance grouping, grouped splits, k-fold buckets."""

from __future__ import annotations

import csv
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._kernels import levenshtein_kernel
from .data import PlasmidRecord

ASSIGNMENTS = ("train", "validation", "test")


def _codes(s: str) -> np.ndarray:
    try:
        return np.frombuffer(s.encode("ascii"), dtype=np.uint8)
    except UnicodeEncodeError:
        return np.frombuffer(s.encode("utf-32-le"), dtype=np.uint32)


def levenshtein(a: str, b: str, cutoff: int | None = None) -> int:
    """Minimum number of unit-cost insertions, deletions and substitutions.

    With ``cutoff``, any distance above it is reported as ``cutoff + 1``
    (banded early exit).
    """
    ca, cb = _codes(a), _codes(b)
    if ca.dtype != cb.dtype:
        ca, cb = ca.astype(np.uint32), cb.astype(np.uint32)
    return int(levenshtein_kernel(ca, cb, -1 if cutoff is None else int(cutoff)))


@dataclass
class SequenceGroup:
    lab_id: str
    members: list[str]

    @property
    def representative(self) -> str:
        return self.members[0]

    def __len__(self) -> int:
        return len(self.members)


@dataclass
class SplitPlan:
    assignment: dict[str, str]
    fold: int | None = None

    def ids(self, which: str) -> list[str]:
        return [sid for sid, a in self.assignment.items() if a == which]

    def counts(self) -> Counter:
        return Counter(self.assignment.values())


def _pair_cutoff(threshold, len_a: int, len_b: int) -> int:
    if isinstance(threshold, float) and threshold < 1:
        return int(math.floor(threshold * min(len_a, len_b)))
    return int(threshold)


def group_lab_sequences(records: Sequence[PlasmidRecord], threshold: float | int = 0.1) -> list[SequenceGroup]:
    """Single-linkage groups within each lab.

    Two sequences are linked when their edit distance is at most the
    threshold: an int is an absolute distance, a float below 1 a fraction of
    the shorter sequence's length. Groups come out in order of their first
    member; members keep input order.
    """
    by_lab: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        by_lab.setdefault(r.lab_id, []).append(i)
    parent = list(range(len(records)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    codes = [_codes(r.sequence) for r in records]
    for members in by_lab.values():
        for x, i in enumerate(members):
            for j in members[x + 1:]:
                ri, rj = find(i), find(j)
                if ri == rj:
                    continue
                cut = _pair_cutoff(threshold, len(codes[i]), len(codes[j]))
                if levenshtein_kernel(codes[i], codes[j], cut) <= cut:
                    parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, SequenceGroup] = {}
    for i, r in enumerate(records):
        root = find(i)
        groups.setdefault(root, SequenceGroup(r.lab_id, [])).members.append(r.sequence_id)
    return list(groups.values())


def split_grouped(groups: Sequence[SequenceGroup], val_fraction: float = 0.15, seed: int = 0,
                  test_ids: Sequence[str] = ()) -> SplitPlan:
    """Assign whole groups to validation until its record share reaches ``val_fraction``.

    Groups are visited in seeded-shuffle order. The last group always stays
    in train, so a single group yields an empty validation set (with a
    warning). Sequences in ``test_ids`` are marked test and never moved.
    """
    test = set(test_ids)
    pool = [g for g in groups if not all(m in test for m in g.members)]
    assignment = {m: "test" for g in groups for m in g.members if m in test}
    total = sum(sum(m not in test for m in g.members) for g in pool)
    order = np.random.default_rng(seed).permutation(len(pool))
    n_val = 0
    chosen: set[int] = set()
    for rank, gi in enumerate(order):
        if total == 0 or n_val / total >= val_fraction or rank == len(order) - 1:
            break
        chosen.add(int(gi))
        n_val += sum(m not in test for m in pool[gi].members)
    if not chosen:
        warnings.warn("split_grouped: not enough groups to form a validation set", stacklevel=2)
    for gi, g in enumerate(pool):
        side = "validation" if gi in chosen else "train"
        for m in g.members:
            assignment.setdefault(m, side)
    labs_single = [lab for lab, n in Counter(g.lab_id for g in pool).items() if n == 1]
    if labs_single:
        warnings.warn(f"split_grouped: {len(labs_single)} lab(s) have a single group and land on one side",
                      stacklevel=2)
    return SplitPlan(assignment)


def make_cv_folds(groups: Sequence[SequenceGroup], k: int = 5, seed: int = 0,
                  test_ids: Sequence[str] = ()) -> list[SplitPlan]:
    """Deal shuffled groups round-robin into ``k`` buckets; fold i validates on bucket i."""
    if k < 2:
        raise ValueError("k-fold needs k >= 2")
    test = set(test_ids)
    pool = [g for g in groups if not all(m in test for m in g.members)]
    if len(pool) < k:
        raise ValueError(f"{len(pool)} groups cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(pool))
    bucket = {int(gi): pos % k for pos, gi in enumerate(order)}
    plans = []
    for fold in range(k):
        assignment = {m: "test" for g in groups for m in g.members if m in test}
        for gi, g in enumerate(pool):
            for m in g.members:
                assignment.setdefault(m, "validation" if bucket[gi] == fold else "train")
        plans.append(SplitPlan(assignment, fold))
    return plans


def fold_column(folds: Sequence[SplitPlan]) -> dict[str, int]:
    """sequence_id -> index of the fold that validates on it."""
    out: dict[str, int] = {}
    for plan in folds:
        for sid, a in plan.assignment.items():
            if a == "validation":
                out[sid] = plan.fold
    return out


def write_split(path, plan: SplitPlan, folds: Sequence[SplitPlan] = (), order: Sequence[str] | None = None) -> None:
    fold_of = fold_column(folds)
    ids = list(order) if order is not None else list(plan.assignment)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence_id", "assignment", "fold"])
        for sid in ids:
            f = fold_of.get(sid)
            w.writerow([sid, plan.assignment[sid], "" if f is None else f])


def read_split(path, fold: int | None = None) -> SplitPlan:
    """Load a split file. With ``fold``, validation is that CV bucket instead."""
    assignment: dict[str, str] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"sequence_id", "assignment"}:
            raise ValueError(f"{path}: not a split file")
        for row in reader:
            a = row["assignment"]
            if a not in ASSIGNMENTS:
                raise ValueError(f"{path}: unknown assignment {a!r}")
            if fold is not None and a != "test":
                if row.get("fold", "") == "":
                    raise ValueError(f"{path}: no fold column for {row['sequence_id']}")
                a = "validation" if int(row["fold"]) == fold else "train"
            assignment[row["sequence_id"]] = a
    return SplitPlan(assignment, fold)


def groups_spanning(plan: SplitPlan, groups: Sequence[SequenceGroup]) -> list[SequenceGroup]:
    """Groups whose members land on both train and validation (should be empty)."""
    bad = []
    for g in groups:
        sides = {plan.assignment.get(m) for m in g.members} & {"train", "validation"}
        if len(sides) > 1:
            bad.append(g)
    return bad
