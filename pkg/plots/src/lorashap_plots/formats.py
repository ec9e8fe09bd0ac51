"""Parsers for the pipeline's documented artifact formats.

Importance CSV:     header `layer,kind,rank_index,score`
Allocation document: `layer.kind = count` lines plus `# meta:` comments
Sweep summary CSV:  header `method,total_ranks,dev_loss,test_loss`
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

KINDS = ("Q", "K", "V", "O", "G", "U", "D")

IMPORTANCE_HEADER = ["layer", "kind", "rank_index", "score"]
SWEEP_HEADER = ["method", "total_ranks", "dev_loss", "test_loss"]


class FormatError(Exception):
    """An input file does not follow its documented format."""


@dataclass
class ImportanceTable:
    # (layer, kind, rank_index) -> score
    scores: dict[tuple[int, str, int], float] = field(default_factory=dict)

    @property
    def layers(self) -> list[int]:
        return sorted({layer for layer, _, _ in self.scores})

    def max_rank_index(self, layer: int) -> int:
        return max(i for l, _, i in self.scores if l == layer)

    def module_scores(self, layer: int, kind: str) -> dict[int, float]:
        return {i: s for (l, k, i), s in self.scores.items()
                if l == layer and k == kind}


def load_importance(path: str) -> ImportanceTable:
    table = ImportanceTable()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != IMPORTANCE_HEADER:
            raise FormatError(f"{path}: expected header "
                              f"{','.join(IMPORTANCE_HEADER)!r}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                layer, kind, index, score = int(row[0]), row[1], int(row[2]), float(row[3])
            except (IndexError, ValueError) as exc:
                raise FormatError(f"{path}: line {lineno}: bad row {row}") from exc
            if kind not in KINDS:
                raise FormatError(f"{path}: line {lineno}: unknown module kind {kind!r}")
            table.scores[(layer, kind, index)] = score
    if not table.scores:
        raise FormatError(f"{path}: no score rows")
    return table


def load_allocation(path: str) -> tuple[dict[tuple[int, str], int], dict[str, str]]:
    counts: dict[tuple[int, str], int] = {}
    meta: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if body.startswith("meta:"):
                    key, _, value = body[len("meta:"):].partition("=")
                    meta[key.strip()] = value.strip()
                continue
            name, eq, count = line.partition("=")
            if not eq:
                raise FormatError(f"{path}: line {lineno}: expected 'layer.kind = count'")
            try:
                layer_text, kind = name.strip().split(".")
                counts[(int(layer_text), kind)] = int(count.strip())
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: bad entry {line!r}") from exc
    if not counts:
        raise FormatError(f"{path}: no allocation rows")
    return counts, meta


def load_sweep(path: str) -> list[dict]:
    rows: list[dict] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SWEEP_HEADER:
            raise FormatError(f"{path}: expected header "
                              f"{','.join(SWEEP_HEADER)!r}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append({"method": row[0], "total_ranks": int(row[1]),
                             "dev_loss": float(row[2]), "test_loss": float(row[3])})
            except (IndexError, ValueError) as exc:
                raise FormatError(f"{path}: line {lineno}: bad row {row}") from exc
    if not rows:
        raise FormatError(f"{path}: no sweep rows")
    return rows
