"""Edit-distance candidate generation."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

DEFAULT_CANDIDATES = 16


@dataclass(frozen=True)
class CandidateSet:
    mention_id: str
    entries: tuple[tuple[str, int], ...]
    gold_injected: bool = False

    @property
    def ids(self) -> list[str]:
        return [e for e, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, entity_id: str) -> bool:
        return any(e == entity_id for e, _ in self.entries)


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit costs on case-folded code points."""
    a, b = a.casefold(), b.casefold()
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


class NameIndex:
    """Entity names packed as code-point arrays for many-against-one distances."""

    def __init__(self, names: Mapping[str, str]):
        if not names:
            raise ValueError("entity name pool is empty")
        self.ids = sorted(names)
        folded = [names[i].casefold() for i in self.ids]
        self.lengths = np.array([len(s) for s in folded], dtype=np.int64)
        width = max(int(self.lengths.max()), 1)
        self.codes = np.full((len(folded), width), -1, dtype=np.int64)
        for r, s in enumerate(folded):
            self.codes[r, : len(s)] = [ord(c) for c in s]

    def distances(self, query: str) -> np.ndarray:
        q = [ord(c) for c in query.casefold()]
        n, width = self.codes.shape
        cols = np.arange(width + 1)
        prev = np.broadcast_to(cols, (n, width + 1)).copy()
        for i, c in enumerate(q, 1):
            # substitution/deletion first, then insertion as a running min along the row
            sub = prev[:, :-1] + (self.codes != c)
            best = np.empty_like(prev)
            best[:, 0] = i
            best[:, 1:] = np.minimum(prev[:, 1:] + 1, sub)
            prev = np.minimum.accumulate(best - cols, axis=1) + cols
        return prev[np.arange(n), self.lengths]

    def top(self, query: str, C: int) -> CandidateSet:
        return self.top_for("", query, C)

    def top_for(self, mention_id: str, query: str, C: int) -> CandidateSet:
        if C < 1:
            raise ValueError("candidate size C must be >= 1")
        d = self.distances(query)
        # ids are pre-sorted, so a stable sort on distance breaks ties by id
        order = np.argsort(d, kind="stable")[:C]
        return CandidateSet(mention_id, tuple((self.ids[i], int(d[i])) for i in order))


def generate_candidates(mention_surface: str, entity_names: Mapping[str, str], C: int = DEFAULT_CANDIDATES,
                        mention_id: str = "") -> CandidateSet:
    """The C entities closest in edit distance, ties broken by ascending id."""
    return NameIndex(entity_names).top_for(mention_id, mention_surface, C)


def ensure_gold(cands: CandidateSet, gold_id: str, gold_distance: int | None = None) -> CandidateSet:
    """Guarantee the gold entity is present, evicting the worst entry if needed.

    Training only; evaluation must see the raw candidate set.
    """
    if gold_id in cands:
        return cands
    entries = list(cands.entries)
    worst = entries.pop()[1] if entries else 0
    entries.append((gold_id, worst if gold_distance is None else gold_distance))
    return replace(cands, entries=tuple(entries), gold_injected=True)


def recall_at(cands: Sequence[CandidateSet], golds: Sequence[str], C: int | None = None) -> float:
    hits = sum(g in (c.ids if C is None else c.ids[:C]) for c, g in zip(cands, golds))
    return hits / len(golds) if golds else 0.0
