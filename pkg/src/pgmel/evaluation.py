"""Inference (rank raw candidates by the discriminator) and Top-k accuracy."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numeric as nm
from .candidates import DEFAULT_CANDIDATES, generate_candidates
from .corpus import Corpus
from .encoders import EncoderConfig, FeatureRecord, embed_entities
from .numeric import ContractViolation, InvariantError, Tape
from .scoring import ModelParams, match_scores, score_candidates

DEFAULT_KS = (1, 5, 10, 20)


@dataclass
class LinkResult:
    mention_id: str
    ranked: list[tuple[str, float]]
    gold_id: str
    gold_rank: int | None  # 1-based; None when the gold entity is not a candidate

    @property
    def top1(self) -> tuple[str, float] | None:
        return self.ranked[0] if self.ranked else None


class FrozenScorer:
    """Scores (mention, entity) pairs with fixed parameters.

    Entity embeddings are computed once at construction, so the scorer must be
    rebuilt after the parameters change.
    """

    def __init__(self, params: ModelParams, corpus: Corpus, config: EncoderConfig, chunk: int = 512):
        self.params, self.corpus, self.config, self.chunk = params, corpus, config, chunk
        n = len(corpus.entity_ids)
        parts = []
        for lo in range(0, n, chunk):
            rows = np.arange(lo, min(lo + chunk, n))
            tape = Tape()
            w = params.bind(tape, trainable=False)
            parts.append(embed_entities(tape, w, *corpus.entity_features(rows), config).value)
        self.entity_emb = np.concatenate(parts)

    def scores(self, mentions: Sequence[int], rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Psi and phi for every (mentions[b], rows[b, k]) pair, each (B, K)."""
        rows = np.asarray(rows, dtype=np.int64)
        B, K = rows.shape
        psi = np.empty((B, K))
        phi = np.empty((B, K))
        step = max(1, self.chunk // max(K, 1))
        for lo in range(0, B, step):
            hi = min(lo + step, B)
            tape = Tape()
            w = self.params.bind(tape, trainable=False)
            m = self.corpus.embed_mentions(tape, w, mentions[lo:hi], self.config)
            m_rep = nm.gather(m, (np.repeat(np.arange(hi - lo), K),))
            e = tape.constant(self.entity_emb[rows[lo:hi].ravel()])
            s = match_scores(m_rep, e, w)
            psi[lo:hi] = s.value.reshape(hi - lo, K)
            phi[lo:hi] = nm.sigmoid(s).value.reshape(hi - lo, K)
        return psi, phi


def rank_order(ids: Sequence[str], phi: Sequence[float]) -> list[int]:
    """Indices sorted by descending phi, ties by ascending entity id."""
    return sorted(range(len(ids)), key=lambda i: (-phi[i], ids[i]))


def assert_rank_consistent(order: Sequence[int], psi: Sequence[float], phi: Sequence[float]) -> None:
    """Ranking by phi must agree with ranking by psi (sigmoid is monotone)."""
    for a, b in zip(order, order[1:]):
        if phi[a] > phi[b] and psi[a] < psi[b]:
            raise InvariantError(f"phi order disagrees with psi order ({psi[a]} < {psi[b]})")
    for p in phi:
        if not 0.0 < p < 1.0:
            raise InvariantError(f"phi {p} outside (0, 1)")


def _result(mention_id: str, gold_id: str, ids: Sequence[str], psi, phi) -> LinkResult:
    order = rank_order(ids, phi)
    assert_rank_consistent(order, psi, phi)
    ranked = [(ids[i], float(phi[i])) for i in order]
    rank = next((r for r, (eid, _) in enumerate(ranked, 1) if eid == gold_id), None)
    return LinkResult(mention_id, ranked, gold_id, rank)


def link(mention: FeatureRecord, disc: ModelParams, entities: Sequence[FeatureRecord], config: EncoderConfig,
         C: int = DEFAULT_CANDIDATES) -> LinkResult:
    """Link one mention against an entity collection (no gold injection)."""
    if not entities:
        return LinkResult(mention.id, [], mention.gold_id, None)
    by_id = {e.id: e for e in entities}
    cands = generate_candidates(mention.surface_name, {e.id: e.surface_name for e in entities}, C, mention.id)
    scored = score_candidates(mention, [by_id[i] for i in cands.ids], disc, config)
    return _result(mention.id, mention.gold_id, [s.entity_id for s in scored],
                   [s.psi for s in scored], [s.phi for s in scored])


def link_all(corpus: Corpus, mentions: Sequence[int], disc: ModelParams, config: EncoderConfig,
             scorer: FrozenScorer | None = None) -> list[LinkResult]:
    """Batched ``link`` over corpus mentions using precomputed raw candidate sets."""
    mentions = list(mentions)
    if not mentions:
        return []
    scorer = scorer or FrozenScorer(disc, corpus, config)
    rows_list = [corpus.candidate_rows(i) for i in mentions]
    K = max(len(r) for r in rows_list)
    rows = np.zeros((len(mentions), K), dtype=np.int64)
    for b, r in enumerate(rows_list):
        rows[b, : len(r)] = r
    psi, phi = scorer.scores(mentions, rows)
    results = []
    for b, i in enumerate(mentions):
        m = corpus.mentions[i]
        n = len(rows_list[b])
        ids = [corpus.entity_ids[r] for r in rows_list[b]]
        results.append(_result(m.id, m.gold_id, ids, psi[b, :n], phi[b, :n]))
    return results


def top_k_accuracy(results: Sequence[LinkResult], ks: Iterable[int] = DEFAULT_KS) -> dict[int, float]:
    if not results:
        raise ContractViolation("top_k_accuracy: no results")
    ks = sorted(set(ks))
    if any(k < 1 for k in ks):
        raise ContractViolation("top_k_accuracy: k must be >= 1")
    ranks = [r.gold_rank for r in results]
    acc = {k: sum(1 for g in ranks if g is not None and g <= k) / len(ranks) for k in ks}
    vals = [acc[k] for k in ks]
    if any(a > b for a, b in zip(vals, vals[1:])) or not all(0.0 <= v <= 1.0 for v in vals):
        raise InvariantError(f"accuracy not monotone in k: {acc}")
    return acc


def write_results_csv(results: Sequence[LinkResult], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["mention_id", "gold_rank", "top1_id", "top1_phi"])
        for r in results:
            top = r.top1
            out.writerow([r.mention_id, "absent" if r.gold_rank is None else r.gold_rank,
                          "" if top is None else top[0], "" if top is None else repr(top[1])])


def write_metrics_csv(acc: Mapping[int, float], n: int, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["k", "accuracy", "mentions"])
        for k in sorted(acc):
            out.writerow([k, repr(acc[k]), n])
