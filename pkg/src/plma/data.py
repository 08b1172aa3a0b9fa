"""Plasmid records, the canonical CSV schema and FASTA + sidecar ingest."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

ALPHABET = "ACGTN"
UNKNOWN_LAB = "Unknown Engineered"

METADATA_GROUPS: dict[str, list[str]] = {
    "growth_strain": [
        "growth_strain_ccdb_survival", "growth_strain_dh10b", "growth_strain_dh5alpha",
        "growth_strain_neb_stable", "growth_strain_other", "growth_strain_stbl3",
        "growth_strain_top10", "growth_strain_xl1_blue",
    ],
    "growth_temp": ["growth_temp_30", "growth_temp_37", "growth_temp_other"],
    "copy_number": ["copy_number_high_copy", "copy_number_low_copy", "copy_number_unknown"],
    "species": [
        "species_budding_yeast", "species_fly", "species_human", "species_mouse",
        "species_mustard_weed", "species_nematode", "species_other", "species_rat",
        "species_synthetic", "species_zebrafish",
    ],
    "bacterial_resistance": [
        "bacterial_resistance_ampicillin", "bacterial_resistance_chloramphenicol",
        "bacterial_resistance_kanamycin", "bacterial_resistance_other",
        "bacterial_resistance_spectinomycin",
    ],
    "selectable_markers": [
        "selectable_markers_blasticidin", "selectable_markers_his3", "selectable_markers_hygromycin",
        "selectable_markers_leu2", "selectable_markers_neomycin", "selectable_markers_other",
        "selectable_markers_puromycin", "selectable_markers_trp1", "selectable_markers_ura3",
        "selectable_markers_zeocin",
    ],
}
METADATA_COLUMNS: list[str] = [c for cols in METADATA_GROUPS.values() for c in cols]
METADATA_DIM = len(METADATA_COLUMNS)
ID_COLUMNS = ["sequence_id", "lab_id", "sequence"]
CSV_COLUMNS = ID_COLUMNS + METADATA_COLUMNS
# Optional trailing column carrying a fixed (e.g. lineage-based) test membership.
SPLIT_COLUMN = "split"


class DatasetError(ValueError):
    """Fatal problem with an input file (missing column, duplicate id, ...)."""


@dataclass(frozen=True)
class PlasmidRecord:
    sequence_id: str
    lab_id: str
    sequence: str
    metadata: tuple[int, ...] = (0,) * METADATA_DIM
    split: str | None = None

    def __post_init__(self):
        if not self.sequence:
            raise ValueError(f"{self.sequence_id}: empty sequence")
        bad = set(self.sequence) - set(ALPHABET)
        if bad:
            raise ValueError(f"{self.sequence_id}: characters outside {ALPHABET}: {''.join(sorted(bad))}")
        if len(self.metadata) != METADATA_DIM or any(v not in (0, 1) for v in self.metadata):
            raise ValueError(f"{self.sequence_id}: metadata must be {METADATA_DIM} flags in {{0,1}}")


@dataclass
class LabCatalog:
    labs: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if len(set(self.labs)) != len(self.labs):
            raise DatasetError("duplicate lab ids in catalog")
        if self.labs.count(UNKNOWN_LAB) != 1:
            raise DatasetError(f"catalog must contain {UNKNOWN_LAB!r} exactly once")
        self.index = {lab: i for i, lab in enumerate(self.labs)}

    def __len__(self) -> int:
        return len(self.labs)

    @classmethod
    def from_records(cls, records: Iterable[PlasmidRecord]) -> "LabCatalog":
        """Labs in first-appearance order; the auxiliary class always last."""
        seen: dict[str, None] = {}
        for r in records:
            if r.lab_id and r.lab_id != UNKNOWN_LAB:
                seen.setdefault(r.lab_id)
        return cls(list(seen) + [UNKNOWN_LAB])


@dataclass
class Rejection:
    line: int
    sequence_id: str
    reason: str

    def __str__(self) -> str:
        return f"line {self.line} ({self.sequence_id}): {self.reason}"


@dataclass
class ParsedDataset:
    records: list[PlasmidRecord]
    catalog: LabCatalog
    rejected: list[Rejection]


def normalize_sequence(seq: str) -> str:
    return "".join(seq.split()).upper()


def _make_record(seq_id, lab, seq, flags, split, line, rejected) -> PlasmidRecord | None:
    seq = normalize_sequence(seq)
    if not seq:
        rejected.append(Rejection(line, seq_id, "empty sequence"))
        return None
    bad = sorted(set(seq) - set(ALPHABET))
    if bad:
        pos = min(seq.index(c) for c in bad)
        rejected.append(Rejection(line, seq_id, f"invalid base {seq[pos]!r} at position {pos + 1}"))
        return None
    try:
        meta = tuple(int(v) for v in flags)
    except ValueError:
        rejected.append(Rejection(line, seq_id, "metadata flags must be 0 or 1"))
        return None
    if any(v not in (0, 1) for v in meta):
        rejected.append(Rejection(line, seq_id, "metadata flags must be 0 or 1"))
        return None
    return PlasmidRecord(seq_id, lab, seq, meta, split or None)


def _check_header(header: Sequence[str] | None, required: Sequence[str], path) -> None:
    if header is None:
        raise DatasetError(f"{path}: empty file")
    missing = [c for c in required if c not in header]
    if missing:
        raise DatasetError(f"{path}: missing column(s) {', '.join(missing)}")


def parse_csv(path) -> ParsedDataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    records: list[PlasmidRecord] = []
    rejected: list[Rejection] = []
    seen: set[str] = set()
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames, CSV_COLUMNS, path)
        for row in reader:
            line = reader.line_num
            sid = row["sequence_id"]
            if sid in seen:
                raise DatasetError(f"{path}: duplicate sequence_id {sid!r} at line {line}")
            seen.add(sid)
            rec = _make_record(sid, row["lab_id"], row["sequence"], [row[c] for c in METADATA_COLUMNS],
                               row.get(SPLIT_COLUMN), line, rejected)
            if rec is not None:
                records.append(rec)
    return ParsedDataset(records, LabCatalog.from_records(records), rejected)


def read_fasta(path) -> list[tuple[str, str, int]]:
    """(id, sequence, header line number) per entry."""
    entries: list[tuple[str, str, int]] = []
    current: tuple[str, int] | None = None
    chunks: list[str] = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith(">"):
                if current is not None:
                    entries.append((current[0], "".join(chunks), current[1]))
                current = (line[1:].split()[0] if line[1:].split() else "", lineno)
                chunks = []
            elif current is None:
                raise DatasetError(f"{path}: sequence data before first '>' header (line {lineno})")
            else:
                chunks.append(line)
    if current is not None:
        entries.append((current[0], "".join(chunks), current[1]))
    return entries


def parse_fasta(path, sidecar=None) -> ParsedDataset:
    """FASTA sequences; lab and metadata come from a sidecar CSV keyed by sequence_id.

    Without a sidecar every record gets an empty lab and all-zero metadata
    (useful for ranking unlabeled queries).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    side: dict[str, dict[str, str]] = {}
    if sidecar is not None:
        with Path(sidecar).open(newline="") as fh:
            reader = csv.DictReader(fh)
            _check_header(reader.fieldnames, ["sequence_id", "lab_id"] + METADATA_COLUMNS, sidecar)
            for row in reader:
                side[row["sequence_id"]] = row
    records: list[PlasmidRecord] = []
    rejected: list[Rejection] = []
    seen: set[str] = set()
    for sid, seq, line in read_fasta(path):
        if sid in seen:
            raise DatasetError(f"{path}: duplicate sequence_id {sid!r} at line {line}")
        seen.add(sid)
        if sidecar is not None:
            if sid not in side:
                rejected.append(Rejection(line, sid, "no sidecar row"))
                continue
            row = side[sid]
            lab, flags, split = row["lab_id"], [row[c] for c in METADATA_COLUMNS], row.get(SPLIT_COLUMN)
        else:
            lab, flags, split = "", [0] * METADATA_DIM, None
        rec = _make_record(sid, lab, seq, flags, split, line, rejected)
        if rec is not None:
            records.append(rec)
    return ParsedDataset(records, LabCatalog.from_records(records), rejected)


def parse_dataset(path, format: str | None = None, sidecar=None) -> ParsedDataset:
    """Load records from ``csv`` or ``fasta`` (+ sidecar); format inferred from the suffix."""
    if format is None:
        suffix = Path(path).suffix.lower()
        format = "fasta" if suffix in {".fa", ".fasta", ".fna"} else "csv"
    if format == "csv":
        return parse_csv(path)
    if format == "fasta":
        return parse_fasta(path, sidecar)
    raise DatasetError(f"unknown dataset format {format!r}")


def write_csv(records: Iterable[PlasmidRecord], path, include_split: bool | None = None) -> None:
    records = list(records)
    if include_split is None:
        include_split = any(r.split for r in records)
    cols = CSV_COLUMNS + ([SPLIT_COLUMN] if include_split else [])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in records:
            row = [r.sequence_id, r.lab_id, r.sequence, *r.metadata]
            if include_split:
                row.append(r.split or "")
            w.writerow(row)


def encode_metadata(record: PlasmidRecord) -> np.ndarray:
    return np.asarray(record.metadata, dtype=np.float64)


def relabel_small_labs(records: Sequence[PlasmidRecord], min_count: int = 10) -> list[PlasmidRecord]:
    """Fold labs with fewer than ``min_count`` records into the auxiliary class."""
    counts = Counter(r.lab_id for r in records)
    small = {lab for lab, n in counts.items() if n < min_count}
    if small:
        log.info("relabelled %d small labs to %r", len(small), UNKNOWN_LAB)
    return [replace(r, lab_id=UNKNOWN_LAB) if r.lab_id in small else r for r in records]
