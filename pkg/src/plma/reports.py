"""CSV report writers. Every report opens with ``#`` provenance lines."""

from __future__ import annotations

import csv
import io
import json
from typing import Iterable, Sequence

FULL_CORPUS_REFERENCE = {
    "top10_triplet": 0.9039,
    "top10_softmax": 0.8936,
    "one_shot_top10": 0.581,
    "one_shot_rank_quantiles": {"50": 7, "60": 17, "70": 37, "80": 180, "90": 685},
    "elbow_k": 17,
}


def provenance_lines(run: dict, checkpoint_sha256: str | None = None, notes: Sequence[str] = ()) -> list[str]:
    lines = [f"run_config: {json.dumps(run, sort_keys=True, separators=(',', ':'))}"]
    if checkpoint_sha256 is not None:
        lines.append(f"checkpoint_sha256: {checkpoint_sha256}")
    lines.extend(notes)
    return lines


def fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_csv(header: Sequence[str], rows: Iterable[Sequence], preamble: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in preamble:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def read_report(text: str) -> tuple[list[str], list[list[str]], list[str]]:
    """(header, rows, comment lines) of a rendered report."""
    comments, body = [], []
    for ln in text.splitlines():
        (comments if ln.startswith("#") else body).append(ln)
    rows = list(csv.reader(body))
    return rows[0], rows[1:], [c[2:] for c in comments]
