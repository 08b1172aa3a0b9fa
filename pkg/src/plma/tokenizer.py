"""Byte pair encoding over DNA strings.

Id 0 is the unknown token (also used for padding), followed by the base
alphabet and then one id per learned merge. Every learned token is a new
string: a candidate pair whose concatenation already exists in the vocabulary
is skipped, so token strings are unique and encoding is a pure function of
the ordered merge list.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._kernels import bpe_encode_ids

UNK_ID = 0
PAD_ID = UNK_ID
UNK_TOKEN = "<unk>"
UNK_DECODE = "N"
DEFAULT_VOCAB = 1001
FILE_MAGIC = "BPE v1"


@dataclass
class BpeModel:
    vocab: list[str]
    merges: list[tuple[int, int]]
    vocab_size: int = DEFAULT_VOCAB
    _index: dict[str, int] = field(init=False, repr=False)
    _rank: np.ndarray = field(init=False, repr=False)
    _merged: np.ndarray = field(init=False, repr=False)
    _base: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.vocab or self.vocab[UNK_ID] != UNK_TOKEN:
            raise ValueError("vocab[0] must be the unknown token")
        if len(self.vocab) > self.vocab_size:
            raise ValueError(f"vocab of {len(self.vocab)} exceeds id space {self.vocab_size}")
        n_base = len(self.vocab) - len(self.merges)
        if n_base < 2:
            raise ValueError("vocabulary needs at least one base symbol")
        self._index = {tok: i for i, tok in enumerate(self.vocab)}
        if len(self._index) != len(self.vocab):
            raise ValueError("duplicate token strings in vocabulary")
        v = len(self.vocab)
        self._rank = np.full((v, v), -1, dtype=np.int64)
        self._merged = np.zeros((v, v), dtype=np.int64)
        for r, (a, b) in enumerate(self.merges):
            new_id = n_base + r
            if a >= new_id or b >= new_id or self.vocab[a] + self.vocab[b] != self.vocab[new_id]:
                raise ValueError(f"merge {r} ({a},{b}) does not build token {new_id}")
            self._rank[a, b] = r
            self._merged[a, b] = new_id
        self._base = np.zeros(128, dtype=np.int64)
        for i in range(1, n_base):
            if len(self.vocab[i]) != 1 or ord(self.vocab[i]) >= 128:
                raise ValueError("base symbols must be single ASCII characters")
            self._base[ord(self.vocab[i])] = i

    @property
    def alphabet(self) -> str:
        return "".join(self.vocab[1:len(self.vocab) - len(self.merges)])

    def token_id(self, token: str) -> int:
        return self._index[token]

    def to_base_ids(self, sequence: str) -> np.ndarray:
        raw = np.frombuffer(sequence.encode("ascii", errors="replace"), dtype=np.uint8)
        return self._base[raw]

    def encode(self, sequence: str) -> np.ndarray:
        return bpe_encode(self, sequence)

    def decode(self, ids) -> str:
        return bpe_decode(self, ids)

    def to_text(self) -> str:
        lines = [f"{FILE_MAGIC} {self.vocab_size}", *self.vocab, "#MERGES"]
        lines += [f"{self.vocab[a]} {self.vocab[b]}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BpeModel":
        lines = text.splitlines()
        if not lines or not lines[0].startswith(FILE_MAGIC + " "):
            raise ValueError("not a BPE model file")
        size = int(lines[0].split()[-1])
        try:
            sep = lines.index("#MERGES")
        except ValueError:
            raise ValueError("BPE model file lacks #MERGES section") from None
        vocab = lines[1:sep]
        index = {t: i for i, t in enumerate(vocab)}
        merges = []
        for line in lines[sep + 1:]:
            left, right = line.split(" ")
            merges.append((index[left], index[right]))
        return cls(vocab, merges, size)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "BpeModel":
        return cls.from_text(Path(path).read_text())


def bpe_train(corpus: Iterable[str], target_vocab: int = DEFAULT_VOCAB, alphabet: str = "ACGTN") -> BpeModel:
    """Learn merges until the vocabulary reaches ``target_vocab`` entries.

    Each round merges the most frequent adjacent pair (ties: lexicographically
    smallest pair of token strings); training stops early once no pair occurs
    at least twice. Pairs involving the unknown token are never merged.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot train BPE on an empty corpus")
    if target_vocab < len(alphabet) + 1:
        raise ValueError(f"target_vocab must be at least {len(alphabet) + 1}")
    vocab = [UNK_TOKEN] + list(alphabet)
    index = {t: i for i, t in enumerate(vocab)}
    base = {c: i + 1 for i, c in enumerate(alphabet)}

    # One flat linked list over the whole corpus; -1 marks sequence ends.
    tok: list[int] = []
    nxt: list[int] = []
    prv: list[int] = []
    for seq in corpus:
        start = len(tok)
        for i, ch in enumerate(seq):
            tok.append(base.get(ch, UNK_ID))
            prv.append(start + i - 1 if i else -1)
            nxt.append(start + i + 1)
        if seq:
            nxt[-1] = -1

    positions: dict[tuple[int, int], set[int]] = {}
    for p, q in enumerate(nxt):
        if q >= 0 and tok[p] != UNK_ID and tok[q] != UNK_ID:
            positions.setdefault((tok[p], tok[q]), set()).add(p)

    heap = [(-len(ps), vocab[a], vocab[b], a, b) for (a, b), ps in positions.items()]
    heapq.heapify(heap)
    merges: list[tuple[int, int]] = []
    banned: set[tuple[int, int]] = set()

    def add_pair(pair, p, touched):
        if pair[0] == UNK_ID or pair[1] == UNK_ID:
            return
        positions.setdefault(pair, set()).add(p)
        touched.add(pair)

    def drop_pair(pair, p):
        ps = positions.get(pair)
        if ps is not None:
            ps.discard(p)

    while len(vocab) < target_vocab and heap:
        neg, sa, sb, a, b = heapq.heappop(heap)
        pair = (a, b)
        current = len(positions.get(pair, ()))
        if pair in banned or current == 0:
            continue
        if current != -neg:
            heapq.heappush(heap, (-current, sa, sb, a, b))
            continue
        if current < 2:
            break
        new_str = sa + sb
        if new_str in index:
            banned.add(pair)
            continue
        new_id = len(vocab)
        vocab.append(new_str)
        index[new_str] = new_id
        merges.append(pair)
        touched: set[tuple[int, int]] = set()
        for p in sorted(positions.pop(pair)):
            q = nxt[p]
            if tok[p] != a or q < 0 or tok[q] != b:
                continue
            before, after = prv[p], nxt[q]
            if before >= 0:
                drop_pair((tok[before], a), before)
            if after >= 0:
                drop_pair((b, tok[after]), q)
            tok[p] = new_id
            tok[q] = -1
            nxt[p] = after
            if after >= 0:
                prv[after] = p
            if before >= 0:
                add_pair((tok[before], new_id), before, touched)
            if after >= 0:
                add_pair((new_id, tok[after]), p, touched)
        positions.pop(pair, None)
        for t in touched:
            ps = positions.get(t)
            if ps and t not in banned:
                heapq.heappush(heap, (-len(ps), vocab[t[0]], vocab[t[1]], t[0], t[1]))
    return BpeModel(vocab, merges, max(target_vocab, len(vocab)))


def bpe_encode(model: BpeModel, sequence: str) -> np.ndarray:
    """Token ids for ``sequence``; characters outside the alphabet map to the unknown id."""
    if not sequence:
        return np.zeros(0, dtype=np.int64)
    return bpe_encode_ids(model.to_base_ids(sequence), model._rank, model._merged)


def bpe_decode(model: BpeModel, ids: Sequence[int]) -> str:
    out = []
    n = len(model.vocab)
    for i in ids:
        i = int(i)
        if i >= model.vocab_size or i < 0:
            raise ValueError(f"token id {i} outside [0, {model.vocab_size})")
        if i >= n:
            raise ValueError(f"token id {i} is not assigned in this vocabulary")
        out.append(UNK_DECODE if i == UNK_ID else model.vocab[i])
    return "".join(out)
