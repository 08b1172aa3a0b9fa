"""Synthetic motif benchmark: every lab stamps its own motif into random plasmids."""

from __future__ import annotations

import numpy as np

from .data import METADATA_DIM, PlasmidRecord

BASES = np.array(list("ACGT"))


def random_dna(rng: np.random.Generator, length: int) -> str:
    return "".join(BASES[rng.integers(0, 4, size=length)])


def make_motif_dataset(n_labs: int = 20, per_lab: int = 30, motif_len: int = 30, backbone_len: int = 2000,
                       seed: int = 0, metadata_rate: float = 0.1) -> tuple[list[PlasmidRecord], dict[str, str]]:
    """Records plus the lab -> motif map.

    Each plasmid is a fresh random backbone with its lab's motif inserted and
    the whole circle rotated by a random offset, so the motif may wrap around
    the sequence end. Metadata flags are random and carry no lab signal.
    """
    rng = np.random.default_rng(seed)
    motifs = {f"lab{l:02d}": random_dna(rng, motif_len) for l in range(n_labs)}
    records = []
    for lab, motif in motifs.items():
        for j in range(per_lab):
            circle = motif + random_dna(rng, backbone_len)
            offset = int(rng.integers(len(circle)))
            seq = circle[offset:] + circle[:offset]
            meta = tuple(int(v) for v in (rng.random(METADATA_DIM) < metadata_rate))
            records.append(PlasmidRecord(f"{lab}_p{j:02d}", lab, seq, meta))
    return records, motifs
