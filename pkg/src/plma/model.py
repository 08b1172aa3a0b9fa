"""Multi-kernel CNN encoder with a softmax head or a metric-embedding head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import METADATA_DIM
from .tokenizer import DEFAULT_VOCAB, PAD_ID

HEADS = ("softmax", "triplet")


@dataclass
class EncoderConfig:
    vocab_size: int = DEFAULT_VOCAB
    token_embed_dim: int = 200
    kernel_sizes: tuple[int, ...] = tuple(range(1, 13))
    filters_per_kernel: int = 256
    metadata_dim: int = METADATA_DIM
    max_tokens: int = 1000
    head: str = "triplet"
    metric_dim: int = 200
    num_labs: int = 2
    dropout_rate: float = 0.2

    def __post_init__(self):
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        dims = (self.vocab_size, self.token_embed_dim, self.filters_per_kernel, self.metric_dim,
                self.num_labs, self.max_tokens, *self.kernel_sizes)
        if not self.kernel_sizes or min(dims) <= 0 or self.metadata_dim < 0:
            raise ValueError("all model dimensions must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def hidden_dim(self) -> int:
        return self.filters_per_kernel * len(self.kernel_sizes)

    @property
    def feature_dim(self) -> int:
        return self.hidden_dim + self.metadata_dim

    @property
    def min_tokens(self) -> int:
        return max(self.kernel_sizes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"token_table": (config.vocab_size, config.token_embed_dim)}
    for k in config.kernel_sizes:
        shapes[f"conv{k}.weight"] = (config.filters_per_kernel, k, config.token_embed_dim)
        shapes[f"conv{k}.bias"] = (config.filters_per_kernel,)
    out_dim = config.num_labs if config.head == "softmax" else config.metric_dim
    shapes["head.weight"] = (out_dim, config.feature_dim)
    shapes["head.bias"] = (out_dim,)
    if config.head == "triplet":
        shapes["lab_table"] = (config.num_labs, config.metric_dim)
    return shapes


def parameter_count(config: EncoderConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(config).values()))


@dataclass
class AttributionModel:
    config: EncoderConfig
    params: dict[str, T.Tensor] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: EncoderConfig, seed: int = 0, dtype=np.float32) -> "AttributionModel":
        """Tables ~ U(-0.05, 0.05); conv/dense weights ~ N(0, 1/fan_in) (SeLU-matched); biases 0."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(config).items():
            if name in ("token_table", "lab_table"):
                data = rng.uniform(-0.05, 0.05, size=shape)
            elif name.endswith(".bias"):
                data = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                data = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
            params[name] = T.Tensor(data, requires_grad=True, dtype=dtype, name=name)
        return cls(config, params)

    @property
    def dtype(self):
        return self.params["token_table"].dtype

    @property
    def head(self) -> str:
        return self.config.head

    @property
    def token_table(self) -> T.Tensor:
        return self.params["token_table"]

    @property
    def lab_table(self) -> T.Tensor:
        if self.head != "triplet":
            raise TypeError("softmax model has no lab embedding table")
        return self.params["lab_table"]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = state[k].astype(p.dtype, copy=True)
            p.zero_grad()

    def astype(self, dtype) -> "AttributionModel":
        params = {k: T.Tensor(p.data, requires_grad=True, dtype=dtype, name=k) for k, p in self.params.items()}
        return AttributionModel(self.config, params)


def pad_tokens(tokens, min_len: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape[0] < min_len:
        tokens = np.concatenate([tokens, np.full(min_len - tokens.shape[0], PAD_ID, dtype=np.int64)])
    return tokens


def _check_tokens(model: AttributionModel, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape[0] == 0:
        raise ValueError("cannot encode an empty token sequence")
    if tokens.shape[0] > model.config.max_tokens:
        raise ValueError(f"{tokens.shape[0]} tokens exceed max_tokens={model.config.max_tokens}; truncate first")
    return pad_tokens(tokens, model.config.min_tokens)


def conv_features(model: AttributionModel, embedded: T.Tensor) -> T.Tensor:
    """12 parallel conv -> SeLU -> global max-pool stacks, concatenated."""
    pooled = []
    for k in model.config.kernel_sizes:
        h = T.conv1d(embedded, model.params[f"conv{k}.weight"], model.params[f"conv{k}.bias"])
        pooled.append(T.global_max_pool(T.selu(h)))
    return T.concat(pooled)


def _features(model: AttributionModel, embedded: T.Tensor, metadata) -> T.Tensor:
    meta = np.asarray(metadata, dtype=model.dtype).reshape(-1)
    if meta.shape[0] != model.config.metadata_dim:
        raise ValueError(f"expected {model.config.metadata_dim} metadata flags, got {meta.shape[0]}")
    return T.concat([conv_features(model, embedded), T.Tensor(meta, dtype=model.dtype)])


def encode_sequence(model: AttributionModel, tokens, metadata, mode: str = "infer", rng=None,
                    dropout_mask: np.ndarray | None = None) -> T.Tensor:
    """Feature vector (conv features ++ metadata) for one token sequence.

    In ``train`` mode the token embeddings go through shared-mask dropout,
    either with ``dropout_mask`` (per-column scale factors) or a mask drawn
    from ``rng``.
    """
    return encode_batch(model, [tokens], [metadata], mode, rng, dropout_mask)[0]


def encode_batch(model: AttributionModel, token_seqs: Sequence, metadata: Sequence, mode: str = "infer",
                 rng=None, dropout_mask: np.ndarray | None = None) -> list[T.Tensor]:
    """Encode several sequences; train mode shares ONE dropout mask across the batch."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    padded = [_check_tokens(model, t) for t in token_seqs]
    embedded = [T.embedding_lookup(model.token_table, ids) for ids in padded]
    if mode == "train":
        embedded = T.shared_mask_dropout(embedded, model.config.dropout_rate, rng, training=True,
                                         mask=dropout_mask)
    return [_features(model, e, m) for e, m in zip(embedded, metadata)]


def hidden_features(model: AttributionModel, tokens) -> np.ndarray:
    """Conv feature block without metadata (the 3072-d layer at default size)."""
    with T.no_grad():
        e = T.embedding_lookup(model.token_table, _check_tokens(model, tokens))
        return conv_features(model, e).data.copy()


def sequence_embedding(model: AttributionModel, features: T.Tensor) -> T.Tensor:
    if model.head != "triplet":
        raise TypeError("sequence_embedding needs a triplet-head model")
    return T.l2_normalize(T.dense(features, model.params["head.weight"], model.params["head.bias"]))


def softmax_logits(model: AttributionModel, features: T.Tensor) -> T.Tensor:
    if model.head != "softmax":
        raise TypeError("softmax_logits needs a softmax-head model")
    return T.dense(features, model.params["head.weight"], model.params["head.bias"])


def lab_embedding(model: AttributionModel, lab_index: int) -> T.Tensor:
    n = model.config.num_labs
    if not 0 <= lab_index < n:
        raise IndexError(f"lab index {lab_index} outside [0, {n})")
    return T.l2_normalize(T.take_row(model.lab_table, lab_index))


def lab_matrix(model: AttributionModel) -> np.ndarray:
    """All lab embeddings, L2-normalised row-wise (plain array)."""
    tab = model.lab_table.data.astype(np.float64)
    norms = np.sqrt((tab * tab).sum(axis=1, keepdims=True))
    return tab / np.where(norms > T.NORM_EPS, norms, 1.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
