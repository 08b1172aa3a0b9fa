"""Ranking labs for a query, test-time augmentation and the evaluation protocols."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import LabCatalog, PlasmidRecord, UNKNOWN_LAB
from .model import AttributionModel, lab_matrix
from .tokenizer import BpeModel
from .training import circular_shift, encode_truncated, infer_outputs, lab_scores, substream

MUTATION_BASES = np.array(list("NGCTA"))


class DegenerateInputError(ValueError):
    pass


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


@dataclass
class RankResult:
    sequence_id: str
    entries: list[tuple[int, float]]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def order(self) -> list[int]:
        return [i for i, _ in self.entries]

    def position_of(self, lab_index: int) -> int:
        """1-based rank of ``lab_index``."""
        return self.order.index(lab_index) + 1


def rank_from_scores(sequence_id: str, scores: np.ndarray) -> RankResult:
    """Sort descending by score, ties broken by lab index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    return RankResult(sequence_id, [(int(i), float(scores[i])) for i in order])


def tta_offsets(length: int, rounds: int) -> list[int]:
    if rounds < 1:
        raise ValueError("TTA needs at least one round")
    return [j * length // rounds for j in range(rounds)]


def _exact_mean(rows: np.ndarray) -> np.ndarray:
    """Column means with exactly rounded sums (independent of row order)."""
    return np.array([math.fsum(col) for col in rows.T]) / rows.shape[0]


def tta_outputs(model: AttributionModel, records: Sequence[PlasmidRecord], bpe: BpeModel, rounds: int = 1,
                max_tokens: int | None = None) -> np.ndarray:
    """Per record: mean output over ``rounds`` evenly spaced circular shifts.

    Embeddings are re-normalised after averaging; softmax outputs are averaged
    class probabilities. One round is the plain, unshifted output.
    """
    max_tokens = max_tokens or model.config.max_tokens
    tokens, metas, owner = [], [], []
    for i, r in enumerate(records):
        for off in tta_offsets(len(r.sequence), rounds):
            tokens.append(encode_truncated(bpe, circular_shift(r.sequence, off), max_tokens))
            metas.append(r.metadata)
            owner.append(i)
    if not tokens:
        return np.zeros((0, model.config.metric_dim if model.head == "triplet" else model.config.num_labs))
    outs = infer_outputs(model, tokens, metas)
    if rounds == 1:
        return outs
    outs = outs.reshape(len(records), rounds, -1)
    merged = np.stack([_exact_mean(o) for o in outs])
    if model.head == "triplet":
        merged /= np.sqrt((merged * merged).sum(axis=1, keepdims=True))
    return merged


def tta_embed(model: AttributionModel, record: PlasmidRecord, bpe: BpeModel, rounds: int = 8) -> np.ndarray:
    if model.head != "triplet":
        raise TypeError("tta_embed needs a triplet-head model")
    return tta_outputs(model, [record], bpe, rounds)[0]


def score_records(model: AttributionModel, records: Sequence[PlasmidRecord], bpe: BpeModel,
                  tta_rounds: int = 1) -> np.ndarray:
    """[N, L] lab scores: cosine similarity (triplet) or class probability (softmax)."""
    return lab_scores(model, tta_outputs(model, records, bpe, tta_rounds))


def rank_labs(model: AttributionModel, record: PlasmidRecord, bpe: BpeModel, tta_rounds: int = 1) -> RankResult:
    return rank_from_scores(record.sequence_id, score_records(model, [record], bpe, tta_rounds)[0])


def rank_many(model, records, bpe, tta_rounds: int = 1) -> list[RankResult]:
    scores = score_records(model, records, bpe, tta_rounds)
    return [rank_from_scores(r.sequence_id, s) for r, s in zip(records, scores)]


def top_k_accuracy(results: Sequence[RankResult], truths: Sequence[int], k: int) -> float:
    if len(results) != len(truths):
        raise ValueError("results and truths differ in length")
    if not results:
        raise ValueError("top-k accuracy of an empty result set")
    hits = sum(truth in res.order[:k] for res, truth in zip(results, truths))
    return hits / len(results)


def one_shot_quantiles(positions: Sequence[int], quantiles: Sequence[int] = (50, 60, 70, 80, 90)) -> dict[int, int]:
    """Nearest-rank empirical quantiles of the true lab's rank."""
    if not len(positions):
        raise ValueError("no positions")
    xs = sorted(int(p) for p in positions)
    n = len(xs)
    return {q: xs[max(1, math.ceil(q / 100 * n)) - 1] for q in quantiles}


# ---------------------------------------------------------------------------
# Few-shot


@dataclass
class ExemplarStore:
    exemplars: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def add(self, lab_id: str, embedding) -> None:
        v = np.asarray(embedding, dtype=np.float64)
        n = math.sqrt(float(v @ v))
        if n == 0.0:
            raise DegenerateInputError("zero embedding")
        self.exemplars.setdefault(lab_id, []).append(v / n)

    def score(self, query: np.ndarray, lab_id: str, aggregate: str = "max") -> float:
        sims = np.stack(self.exemplars[lab_id]) @ query
        return float(sims.max() if aggregate == "max" else sims.mean())


@dataclass
class FewShotReport:
    heldout_labs: list[str]
    top10: list[float]
    positions: list[int]

    @property
    def mean(self) -> float:
        return float(np.mean(self.top10))

    @property
    def std(self) -> float:
        return float(np.std(self.top10))


def choose_heldout_labs(catalog: LabCatalog, n: int, seed: int) -> list[str]:
    pool = [lab for lab in catalog.labs if lab != UNKNOWN_LAB]
    if n > len(pool):
        raise ValueError(f"cannot hold out {n} of {len(pool)} labs")
    pick = substream(seed, "heldout").permutation(len(pool))[:n]
    return [pool[i] for i in sorted(pick)]


def few_shot_protocol(model: AttributionModel, records: Sequence[PlasmidRecord], catalog: LabCatalog,
                      bpe: BpeModel, heldout: Sequence[str] | int = 50, sample: int | float = 1,
                      repetitions: int = 20, seed: int = 0, k: int = 10, aggregate: str = "max",
                      tta_rounds: int = 1) -> FewShotReport:
    """Attribute plasmids of labs unseen in training using a few stored exemplars.

    Per repetition each held-out lab is represented by ``sample`` plasmids (an
    int count or a fraction of the lab); its other plasmids are queries.
    Known labs are scored with their learned embeddings, held-out labs with
    the best (or mean) cosine over their exemplars.
    """
    if model.head != "triplet":
        raise TypeError("few-shot protocol needs a triplet-head model")
    if isinstance(heldout, int):
        heldout = choose_heldout_labs(catalog, heldout, seed)
    heldout = list(heldout)
    held = set(heldout)
    known = [lab for lab in catalog.labs if lab not in held]
    labs = lab_matrix(model)
    known_vecs = labs[[catalog.index[lab] for lab in known]]
    members = {lab: [r for r in records if r.lab_id == lab] for lab in heldout}
    pool = [r for lab in heldout for r in members[lab]]
    outputs = tta_outputs(model, pool, bpe, tta_rounds)
    emb = {r.sequence_id: outputs[i] for i, r in enumerate(pool)}
    candidates = known + heldout
    top10, positions = [], []
    warned = False
    for rep in range(repetitions):
        rng = substream(seed, "fewshot", rep)
        store = ExemplarStore()
        queries: list[tuple[np.ndarray, str]] = []
        for lab in heldout:
            rs = members[lab]
            n_s = sample if isinstance(sample, int) else max(1, int(round(sample * len(rs))))
            if n_s >= len(rs):
                if not warned:
                    warnings.warn(f"lab {lab} has {len(rs)} plasmids for a sample of {n_s}; using all",
                                  stacklevel=2)
                    warned = True
                n_s = len(rs)
            pick = set(rng.permutation(len(rs))[:n_s].tolist())
            for i, r in enumerate(rs):
                if i in pick:
                    store.add(lab, emb[r.sequence_id])
                else:
                    queries.append((emb[r.sequence_id], lab))
        if not queries:
            continue
        hits = 0
        for q, truth in queries:
            scores = np.concatenate([known_vecs @ q, [store.score(q, lab, aggregate) for lab in heldout]])
            res = rank_from_scores("", scores)
            pos = res.position_of(candidates.index(truth))
            positions.append(pos)
            hits += pos <= k
        top10.append(hits / len(queries))
    return FewShotReport(heldout, top10, positions)


# ---------------------------------------------------------------------------
# Point mutations


def mutate_sequence(sequence: str, n_mutations: int, rng: np.random.Generator) -> str:
    """Overwrite ``n`` uniformly chosen positions (with replacement) with a uniform base from NGCTA."""
    if n_mutations > len(sequence):
        raise ValueError("more mutations than positions")
    if n_mutations <= 0:
        return sequence
    chars = list(sequence)
    pos = rng.integers(0, len(chars), size=n_mutations)
    bases = MUTATION_BASES[rng.integers(0, len(MUTATION_BASES), size=n_mutations)]
    for p, b in zip(pos, bases):
        chars[p] = b
    return "".join(chars)


@dataclass
class MutationRow:
    n: int
    mean_rank: float
    median_rank: float


def mutation_robustness(model: AttributionModel, record: PlasmidRecord, bpe: BpeModel, truth: int,
                        n_list: Sequence[int] = tuple(range(1, 1001)), runs_per_n: int = 100, seed: int = 0,
                        tta_rounds: int = 1) -> list[MutationRow]:
    """Mean and median rank of the true lab over repeated random mutation runs per ``n``."""
    from dataclasses import replace

    rows = []
    for n in n_list:
        rng = substream(seed, "mutate", record.sequence_id, n)
        variants = [replace(record, sequence=mutate_sequence(record.sequence, n, rng)) for _ in range(runs_per_n)]
        scores = score_records(model, variants, bpe, tta_rounds)
        ranks = [rank_from_scores("", s).position_of(truth) for s in scores]
        rows.append(MutationRow(int(n), float(np.mean(ranks)), float(np.median(ranks))))
    return rows
