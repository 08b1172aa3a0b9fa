"""Augmentation, losses, hard negative mining, Adam + One-Cycle, and the epoch loop."""

from __future__ import annotations

import logging
import math
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import LabCatalog, PlasmidRecord, UNKNOWN_LAB
from .grouping import SplitPlan
from .model import AttributionModel, EncoderConfig, encode_batch, lab_matrix, sequence_embedding, softmax_logits
from .tokenizer import BpeModel, bpe_encode

log = logging.getLogger(__name__)


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for a named stage (and optional sub-keys) of one seed."""
    key = [int(seed) & 0xFFFFFFFF]
    for n in names:
        key.append(zlib.crc32(n.encode()) if isinstance(n, str) else int(n) & 0xFFFFFFFF)
    return np.random.default_rng(key)


@dataclass
class TrainConfig:
    head: str = "triplet"
    margin: float = 0.2
    batch_size: int = 64
    max_lr: float = 1e-3
    epochs: int = 200
    weight_decay: float = 1e-5
    dropout: float = 0.2
    seed: int = 0
    kernel_sizes: tuple[int, ...] = tuple(range(1, 13))
    filters: int = 256
    embed_dim: int = 200
    metric_dim: int = 200
    max_tokens: int = 1000
    val_fraction: float = 0.15
    group_threshold: float = 0.1
    folds: int = 5
    warmup_fraction: float = 0.3
    div_start: float = 25.0
    div_final: float = 1e4
    precision: str = "float32"
    exclude_unknown_negative: bool = False
    restore_best: bool = True

    def encoder_config(self, vocab_size: int, num_labs: int) -> EncoderConfig:
        return EncoderConfig(vocab_size=vocab_size, token_embed_dim=self.embed_dim,
                             kernel_sizes=tuple(self.kernel_sizes), filters_per_kernel=self.filters,
                             max_tokens=self.max_tokens, head=self.head, metric_dim=self.metric_dim,
                             num_labs=num_labs, dropout_rate=self.dropout)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d


# ---------------------------------------------------------------------------
# Augmentation


def circular_shift(seq, offset: int):
    """Rotate left by ``offset`` (mod length); works for strings, lists and arrays."""
    n = len(seq)
    if n == 0:
        return seq
    o = int(offset) % n
    if isinstance(seq, np.ndarray):
        return np.concatenate([seq[o:], seq[:o]])
    return seq[o:] + seq[:o]


def encode_truncated(bpe: BpeModel, sequence: str, max_tokens: int = 1000) -> np.ndarray:
    return bpe_encode(bpe, sequence)[:max_tokens]


def augment_for_training(record: PlasmidRecord, bpe: BpeModel, rng: np.random.Generator,
                         max_tokens: int = 1000, offset: int | None = None) -> np.ndarray:
    """Random circular shift of the raw bases, then BPE, then keep the first ``max_tokens``."""
    if offset is None:
        offset = int(rng.integers(len(record.sequence)))
    return encode_truncated(bpe, circular_shift(record.sequence, offset), max_tokens)


# ---------------------------------------------------------------------------
# Mining and losses


def _normalized_rows(x: np.ndarray) -> np.ndarray:
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.where(n > T.NORM_EPS, n, 1.0)


def hardest_negative_indices(lab_indices, anchor_embeddings, lab_embeddings, exclude: Sequence[int] = ()) -> np.ndarray:
    """Per anchor, the most similar lab other than its own (ties: lowest index).

    Mask every row's positive lab, L2-normalise the lab embeddings, take dot
    products with the anchors and arg-max. ``exclude`` removes labs from the
    candidate set entirely.
    """
    lab_indices = np.asarray(lab_indices, dtype=np.int64)
    anchors = np.asarray(anchor_embeddings.data if isinstance(anchor_embeddings, T.Tensor) else anchor_embeddings)
    labs = np.asarray(lab_embeddings.data if isinstance(lab_embeddings, T.Tensor) else lab_embeddings)
    n_labs = labs.shape[0]
    if n_labs < 2:
        raise ValueError("hard negative mining needs at least two labs")
    if lab_indices.size and (lab_indices.min() < 0 or lab_indices.max() >= n_labs):
        raise IndexError("lab index outside the lab table")
    b = lab_indices.shape[0]
    mask = np.ones((b, n_labs), dtype=bool)
    mask[np.arange(b), lab_indices] = False
    if len(exclude):
        mask[:, list(exclude)] = False
    if not mask.any(axis=1).all():
        raise ValueError("no eligible negative lab for some anchor")
    candidates = _normalized_rows(labs)
    sims = (anchors[:, None, :] * candidates[None, :, :]).sum(axis=-1)
    sims = np.where(mask, sims, -np.inf)
    return np.argmax(sims, axis=1)


def mine_hard_negatives(lab_indices, anchor_embeddings, lab_table: T.Tensor,
                        exclude: Sequence[int] = ()) -> T.Tensor:
    """Normalised embeddings [B,E] of each anchor's hardest negative lab.

    Selection happens outside the graph; the gathered rows stay differentiable,
    so gradients reach just the selected lab_table rows.
    """
    idx = hardest_negative_indices(lab_indices, anchor_embeddings, lab_table, exclude)
    return T.l2_normalize(T.embedding_lookup(lab_table, idx))


def triplet_loss(anchor: T.Tensor, positive: T.Tensor, negative: T.Tensor, margin: float = 0.2) -> T.Tensor:
    """mean_b max(0, margin - cos(a,p) + cos(a,n)) for unit-norm rows."""
    if margin <= 0:
        warnings.warn(f"triplet margin {margin} <= 0: loss is trivially satisfiable", stacklevel=2)
    gap = T.sub(T.rowdot(anchor, negative), T.rowdot(anchor, positive))
    return T.mean(T.relu(T.add(gap, float(margin))))


def cross_entropy_loss(logits: T.Tensor, targets) -> T.Tensor:
    return T.cross_entropy(logits, targets)


# ---------------------------------------------------------------------------
# Optimisation


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0


def adam_step(state: OptimizerState, params: dict[str, T.Tensor], lr: float) -> bool:
    """One bias-corrected Adam update with decoupled weight decay, in place.

    Returns False (and leaves everything untouched) when any gradient is
    non-finite.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            state.skipped += 1
            log.warning("adam: non-finite gradient in %s, step skipped", name)
            return False
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p.data -= (lr * state.weight_decay) * p.data
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (lr * update).astype(p.dtype, copy=False)
    return True


@dataclass
class OneCycleSchedule:
    max_lr: float = 1e-3
    total_epochs: int = 200
    warmup_fraction: float = 0.3
    div_start: float = 25.0
    div_final: float = 1e4

    @property
    def initial_lr(self) -> float:
        return self.max_lr / self.div_start

    @property
    def final_lr(self) -> float:
        return self.initial_lr / self.div_final


def _cos_anneal(start: float, end: float, pct: float) -> float:
    return end + (start - end) / 2.0 * (1.0 + math.cos(math.pi * pct))


def one_cycle_lr(schedule: OneCycleSchedule, step: int, steps_per_epoch: int) -> float:
    """Cosine rise to ``max_lr`` over the warm-up fraction, then cosine decay to the final lr."""
    total = schedule.total_epochs * steps_per_epoch
    if total <= 0:
        raise ValueError("schedule has no steps")
    if step >= total:
        warnings.warn(f"step {step} beyond a {total}-step schedule; clamping to final lr", stacklevel=2)
        return schedule.final_lr
    peak = int(round(schedule.warmup_fraction * (total - 1)))
    last = total - 1
    if step <= peak:
        if peak == 0:
            return schedule.max_lr
        return _cos_anneal(schedule.initial_lr, schedule.max_lr, step / peak)
    return _cos_anneal(schedule.max_lr, schedule.final_lr, (step - peak) / (last - peak))


# ---------------------------------------------------------------------------
# Inference used by validation and evaluation


def infer_outputs(model: AttributionModel, token_seqs: Sequence, metadata: Sequence) -> np.ndarray:
    """Rows of unit embeddings (triplet) or class probabilities (softmax)."""
    from .model import softmax

    with T.no_grad():
        feats = encode_batch(model, token_seqs, metadata, mode="infer")
        if model.head == "triplet":
            return np.stack([sequence_embedding(model, f).data for f in feats]).astype(np.float64)
        return softmax(np.stack([softmax_logits(model, f).data for f in feats]))


def lab_scores(model: AttributionModel, outputs: np.ndarray) -> np.ndarray:
    """Per-lab scores: cosine to lab embeddings (triplet) or the probabilities themselves."""
    if model.head == "triplet":
        # one matrix-vector product per row: a query's scores never depend on its batch-mates
        labs = lab_matrix(model)
        return np.stack([labs @ o for o in outputs]) if len(outputs) else np.zeros((0, labs.shape[0]))
    return outputs


def true_ranks(scores: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """1-based rank of each true lab; ties resolved by lab index."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return np.argmax(order == np.asarray(truth)[:, None], axis=1) + 1


# ---------------------------------------------------------------------------
# Training loop


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    val_top1: float
    val_top10: float
    lr: float


@dataclass
class FitResult:
    model: AttributionModel
    log: list[EpochMetrics]
    best_epoch: int
    best_state: dict[str, np.ndarray]


METRICS_COLUMNS = ("epoch", "train_loss", "val_loss", "val_top1", "val_top10", "lr")


def _batch_loss(model, cfg: TrainConfig, token_seqs, metas, targets, rng, exclude):
    feats = encode_batch(model, token_seqs, metas, mode="train", rng=rng)
    if model.head == "triplet":
        anchors = T.stack([sequence_embedding(model, f) for f in feats])
        positives = T.l2_normalize(T.embedding_lookup(model.lab_table, targets))
        negatives = mine_hard_negatives(targets, anchors, model.lab_table, exclude)
        return triplet_loss(anchors, positives, negatives, cfg.margin)
    logits = T.stack([softmax_logits(model, f) for f in feats])
    return cross_entropy_loss(logits, targets)


def _validation(model, cfg, tokens, metas, targets, exclude):
    if not len(targets):
        return float("nan"), float("nan"), float("nan")
    outputs = infer_outputs(model, tokens, metas)
    scores = lab_scores(model, outputs)
    if model.head == "triplet":
        labs = lab_matrix(model)
        neg = hardest_negative_indices(targets, outputs, labs, exclude)
        rows = np.arange(len(targets))
        hinge = cfg.margin - scores[rows, targets] + scores[rows, neg]
        loss = float(np.maximum(hinge, 0.0).mean())
    else:
        loss = float(-np.log(np.maximum(scores[np.arange(len(targets)), targets], 1e-300)).mean())
    ranks = true_ranks(scores, targets)
    return loss, float((ranks <= 1).mean()), float((ranks <= 10).mean())


def fit(model: AttributionModel, records: Sequence[PlasmidRecord], split: SplitPlan, bpe: BpeModel,
        catalog: LabCatalog, config: TrainConfig, progress=None) -> FitResult:
    """Train in place. Logs one EpochMetrics per epoch and tracks the best-validation state."""
    by_id = {r.sequence_id: r for r in records}
    train = [by_id[s] for s in split.ids("train") if s in by_id]
    val = [by_id[s] for s in split.ids("validation") if s in by_id]
    if not train:
        raise ValueError("split has no training records")
    target_of = lambda r: catalog.index[r.lab_id]  # noqa: E731
    exclude = [catalog.index[UNKNOWN_LAB]] if config.exclude_unknown_negative and model.head == "triplet" else []

    val_tokens = [encode_truncated(bpe, r.sequence, config.max_tokens) for r in val]
    val_meta = [r.metadata for r in val]
    val_targets = np.array([target_of(r) for r in val], dtype=np.int64)

    spe = math.ceil(len(train) / config.batch_size)
    schedule = OneCycleSchedule(config.max_lr, config.epochs, config.warmup_fraction, config.div_start,
                                config.div_final)
    state = OptimizerState(weight_decay=config.weight_decay)
    history: list[EpochMetrics] = []
    best_key, best_epoch, best_state = None, -1, model.state()
    bad_batches = 0
    step = 0
    for epoch in range(config.epochs):
        rng = substream(config.seed, "train", epoch)
        order = rng.permutation(len(train))
        losses = []
        lr = schedule.initial_lr
        for start in range(0, len(order), config.batch_size):
            batch = [train[i] for i in order[start:start + config.batch_size]]
            tokens = [augment_for_training(r, bpe, rng, config.max_tokens) for r in batch]
            targets = np.array([target_of(r) for r in batch], dtype=np.int64)
            model.zero_grad()
            loss = _batch_loss(model, config, tokens, [r.metadata for r in batch], targets, rng, exclude)
            lr = one_cycle_lr(schedule, step, spe)
            step += 1
            value = float(loss.data)
            if not math.isfinite(value):
                bad_batches += 1
                log.warning("epoch %d: non-finite loss (%d in a row)", epoch, bad_batches)
                if bad_batches >= 3:
                    raise TrainingDiverged(f"loss non-finite for 3 consecutive batches at epoch {epoch}")
                continue
            bad_batches = 0
            losses.append(value)
            if loss.requires_grad:
                T.backward(loss)
                adam_step(state, model.params, lr)
        val_loss, top1, top10 = _validation(model, config, val_tokens, val_meta, val_targets, exclude)
        metrics = EpochMetrics(epoch, float(np.mean(losses)) if losses else float("nan"), val_loss, top1, top10, lr)
        history.append(metrics)
        if progress is not None:
            progress(metrics)
        key = (-1.0 if math.isnan(top1) else top1, -(val_loss if math.isfinite(val_loss) else np.inf))
        if best_key is None or key > best_key:
            best_key, best_epoch, best_state = key, epoch, model.state()
    model.zero_grad()
    if config.restore_best:
        model.load_state(best_state)
    return FitResult(model, history, best_epoch, best_state)
