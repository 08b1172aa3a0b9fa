"""Token importance from embedding-table gradients, lab comparisons, k-means and export."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import PlasmidRecord
from .model import AttributionModel, encode_sequence, hidden_features, lab_matrix, sequence_embedding, softmax_logits
from .tokenizer import BpeModel
from .training import encode_truncated, infer_outputs, lab_scores


def prediction_scalar(model: AttributionModel, tokens, metadata, target: int | None = None) -> tuple[T.Tensor, int]:
    """The scalar F explained by token importance, and the lab it targets.

    Triplet: cosine between the sequence embedding and a lab embedding.
    Softmax: that lab's logit. Default target = the top-ranked lab.
    """
    if target is None:
        scores = lab_scores(model, infer_outputs(model, [tokens], [metadata]))[0]
        target = int(np.argsort(-scores, kind="stable")[0])
    feats = encode_sequence(model, tokens, metadata, mode="infer")
    if model.head == "triplet":
        emb = sequence_embedding(model, feats)
        lab = T.l2_normalize(T.take_row(model.lab_table, target))
        return T.rowdot(emb, lab), target
    return T.take_row(softmax_logits(model, feats), target), target


def token_importance(model: AttributionModel, record: PlasmidRecord, bpe: BpeModel,
                     target: int | None = None) -> np.ndarray:
    """Mean |dF/d table[i, k]| over the embedding dimension, for every token id i."""
    tokens = encode_truncated(bpe, record.sequence, model.config.max_tokens)
    model.zero_grad()
    f, _ = prediction_scalar(model, tokens, record.metadata, target)
    T.backward(f)
    grad = model.token_table.grad
    model.zero_grad()
    return np.abs(grad.astype(np.float64)).mean(axis=1)


def normalize_nti(importance) -> np.ndarray:
    v = np.asarray(importance, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        warnings.warn("constant importance vector; NTI is all zeros", stacklevel=2)
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def lab_token_importance(model: AttributionModel, records: Sequence[PlasmidRecord], bpe: BpeModel,
                         target: int | None = None) -> np.ndarray:
    if not records:
        raise ValueError("lab has no sequences")
    return np.mean([token_importance(model, r, bpe, target) for r in records], axis=0)


def nti_difference(lab_nti, global_nti) -> np.ndarray:
    a, b = np.asarray(lab_nti, dtype=np.float64), np.asarray(global_nti, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("NTI vectors differ in length")
    return a - b


def top_tokens(values, n: int = 30) -> list[int]:
    """Token ids of the ``n`` largest entries (ties: lower id first)."""
    v = np.asarray(values)
    return [int(i) for i in np.argsort(-v, kind="stable")[:n]]


def furthest_lab(model: AttributionModel, lab_index: int) -> int:
    labs = lab_matrix(model)
    if labs.shape[0] < 2:
        raise ValueError("need at least two labs")
    sims = labs @ labs[lab_index]
    sims[lab_index] = np.inf
    return int(np.argmin(sims))


# ---------------------------------------------------------------------------
# k-means


@dataclass
class ClusterAssignment:
    k: int
    centroids: np.ndarray
    labels: np.ndarray
    distortion: float
    history: list[float] = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return (diff * diff).sum(axis=-1)


def farthest_point_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    chosen = [int(rng.integers(points.shape[0]))]
    d = _sq_dists(points, points[chosen])[:, 0]
    while len(chosen) < k:
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, _sq_dists(points, points[[nxt]])[:, 0])
    return points[chosen].copy()


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6,
           init: np.ndarray | None = None) -> ClusterAssignment:
    """Lloyd's algorithm from a seeded farthest-point start (or ``init`` centroids).

    ``history`` holds the distortion after every assignment step; an empty
    cluster is reseeded at the point farthest from its own centroid.
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds {n} points")
    if k < 1:
        raise ValueError("k must be positive")
    c = farthest_point_init(x, k, np.random.default_rng(seed)) if init is None else np.array(init, dtype=np.float64)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, c)
        labels = np.argmin(d, axis=1)
        history.append(float(d[np.arange(n), labels].sum()))
        new_c = c.copy()
        point_d = d[np.arange(n), labels]
        taken: set[int] = set()
        for j in range(k):
            members = labels == j
            if members.any():
                new_c[j] = x[members].mean(axis=0)
            else:
                for p in np.argsort(-point_d, kind="stable"):
                    if int(p) not in taken:
                        taken.add(int(p))
                        new_c[j] = x[p]
                        break
        shift = float(np.sqrt(((new_c - c) ** 2).sum(axis=1)).max())
        c = new_c
        if shift < tol:
            break
    d = _sq_dists(x, c)
    labels = np.argmin(d, axis=1)
    distortion = float(d[np.arange(n), labels].sum())
    history.append(distortion)
    return ClusterAssignment(k, c, labels, distortion, history, it)


def elbow_scores(points, k_range: Sequence[int] = tuple(range(2, 31)), seed: int = 0,
                 n_seeds: int = 5) -> list[tuple[int, float]]:
    """Best distortion per k over ``n_seeds`` seeded runs.

    A run warm-started from the previous k's best centroids plus the farthest
    point is also a candidate, which keeps the table non-increasing in k.
    """
    x = np.asarray(points, dtype=np.float64)
    ks = sorted(k_range)
    if ks and ks[-1] > x.shape[0]:
        raise ValueError("largest k exceeds the number of points")
    table = []
    prev: ClusterAssignment | None = None
    for k in ks:
        runs = [kmeans(x, k, seed=seed * 1000 + s) for s in range(n_seeds)]
        if prev is not None and prev.k < k:
            c = prev.centroids
            for _ in range(k - prev.k):
                far = int(np.argmax(_sq_dists(x, c).min(axis=1)))
                c = np.vstack([c, x[far]])
            runs.append(kmeans(x, k, init=c))
        best = min(runs, key=lambda r: r.distortion)
        table.append((k, best.distortion))
        prev = best
    return table


# ---------------------------------------------------------------------------
# Embedding export


def embedding_rows(model: AttributionModel, records: Sequence[PlasmidRecord], bpe: BpeModel,
                   include_labs: bool = True, labs: Sequence[str] | None = None) -> list[tuple[str, str, np.ndarray]]:
    rows = []
    if model.head == "triplet":
        if include_labs:
            names = labs if labs is not None else [str(i) for i in range(model.config.num_labs)]
            rows += [(name, "lab", v) for name, v in zip(names, lab_matrix(model))]
        if records:
            tokens = [encode_truncated(bpe, r.sequence, model.config.max_tokens) for r in records]
            outs = infer_outputs(model, tokens, [r.metadata for r in records])
            rows += [(r.sequence_id, "sequence", v) for r, v in zip(records, outs)]
    else:
        for r in records:
            tokens = encode_truncated(bpe, r.sequence, model.config.max_tokens)
            rows.append((r.sequence_id, "sequence", hidden_features(model, tokens).astype(np.float64)))
    return rows


def export_embeddings(path, rows: Sequence[tuple[str, str, np.ndarray]], preamble: Sequence[str] = ()) -> None:
    """CSV ``id,kind,e0..`` with full-precision floats, written atomically."""
    from .checkpoint import atomic_write_text
    from .reports import render_csv

    dim = len(rows[0][2]) if rows else 0
    body = [[ident, kind, *[float(v) for v in vec]] for ident, kind, vec in rows]
    atomic_write_text(path, render_csv(["id", "kind"] + [f"e{i}" for i in range(dim)], body, preamble))


def load_embeddings(path) -> tuple[list[str], list[str], np.ndarray]:
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    next(reader)
    ids, kinds, vecs = [], [], []
    for row in reader:
        ids.append(row[0])
        kinds.append(row[1])
        vecs.append([float(v) for v in row[2:]])
    return ids, kinds, np.array(vecs, dtype=np.float64)
