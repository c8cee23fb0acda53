"""Array view of a dataset with candidate sets precomputed once per run."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .candidates import DEFAULT_CANDIDATES, CandidateSet, NameIndex, edit_distance, ensure_gold
from .data import Dataset
from .encoders import EncoderConfig, embed_mentions
from .numeric import ContractViolation, Tape, Var


class Corpus:
    def __init__(self, dataset: Dataset, candidate_size: int = DEFAULT_CANDIDATES):
        if candidate_size < 1:
            raise ContractViolation("candidate size must be >= 1")
        self.dataset = dataset
        self.C = candidate_size
        ents = sorted(dataset.entities, key=lambda e: e.id)
        self.entity_ids = [e.id for e in ents]
        self.entity_row = {eid: i for i, eid in enumerate(self.entity_ids)}
        self.entity_names = {e.id: e.surface_name for e in ents}
        self.ent_text = np.stack([e.text_feature for e in ents])
        has_vis = all(e.vision_feature is not None for e in ents)
        self.ent_vision = np.stack([e.vision_feature for e in ents]) if has_vis else None
        self.mentions = dataset.mentions
        self.gold_rows = np.array([self.entity_row[m.gold_id] for m in self.mentions], dtype=np.int64)
        index = NameIndex(self.entity_names)
        self.raw_candidates: list[CandidateSet] = [
            index.top_for(m.id, m.surface_name, candidate_size) for m in self.mentions
        ]
        self._train_rows: dict[int, np.ndarray] = {}

    @property
    def splits(self) -> dict[str, list[int]]:
        return self.dataset.splits

    def candidate_rows(self, mention: int) -> np.ndarray:
        return np.array([self.entity_row[e] for e in self.raw_candidates[mention].ids], dtype=np.int64)

    def training_candidate_set(self, mention: int) -> CandidateSet:
        m = self.mentions[mention]
        cands = self.raw_candidates[mention]
        return ensure_gold(cands, m.gold_id, edit_distance(m.surface_name, self.entity_names[m.gold_id]))

    def negative_rows(self, mention: int) -> np.ndarray:
        """Training candidates (gold injected) minus the gold entity, as entity rows."""
        rows = self._train_rows.get(mention)
        if rows is None:
            gold = self.mentions[mention].gold_id
            ids = [e for e in self.training_candidate_set(mention).ids if e != gold]
            rows = np.array([self.entity_row[e] for e in ids], dtype=np.int64)
            self._train_rows[mention] = rows
        return rows

    def negative_matrix(self, mentions: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Padded (B, K) entity rows and validity mask; padding sits after the valid entries."""
        lists = [self.negative_rows(i) for i in mentions]
        K = max(1, max(len(r) for r in lists))
        rows = np.zeros((len(lists), K), dtype=np.int64)
        mask = np.zeros((len(lists), K), dtype=bool)
        for b, r in enumerate(lists):
            rows[b, : len(r)] = r
            mask[b, : len(r)] = True
        return rows, mask

    def embed_mentions(self, tape: Tape, w, mentions: Sequence[int], config: EncoderConfig, drop=None) -> Var:
        ms = [self.mentions[i] for i in mentions]
        return embed_mentions(tape, w, [m.token_features for m in ms], [m.vision_feature for m in ms], config, drop)

    def entity_features(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        return self.ent_text[rows], None if self.ent_vision is None else self.ent_vision[rows]
