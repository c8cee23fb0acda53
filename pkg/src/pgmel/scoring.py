"""Score function: multimodal embeddings plus the matching layer.

Psi = tanh([m, e, cos(m, e)] . Q + B) is the raw similarity, phi = sigmoid(Psi)
the normalised score in (0, 1).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numeric as nm
from .encoders import EncoderConfig, FeatureRecord, embed_entities, embed_mentions, init_encoder
from .numeric import ContractViolation, Parameter, Tape, Var

log = logging.getLogger(__name__)

# Glorot-initialised readouts on the raw embeddings let per-entity biases swamp the
# single cosine coordinate; starting from a pure cosine scorer lets both towers align.
INITIAL_COS_WEIGHT = 3.0


@dataclass
class MatchParams:
    weight: Parameter  # (2*d3 + 1, 1)
    bias: Parameter    # (1,)

    @classmethod
    def init(cls, d3: int, cos_weight: float = INITIAL_COS_WEIGHT) -> "MatchParams":
        """Start as a pure cosine scorer: zero weight on the raw embeddings."""
        weight = np.zeros((2 * d3 + 1, 1))
        weight[-1, 0] = cos_weight
        return cls(Parameter("match.weight", weight), Parameter("match.bias", np.zeros(1)))


@dataclass
class ModelParams:
    """All weights of one score function (one discriminator or one generator)."""

    encoder: dict[str, Parameter]
    match: MatchParams

    @classmethod
    def init(cls, config: EncoderConfig, rng: np.random.Generator) -> "ModelParams":
        return cls(init_encoder(config, rng), MatchParams.init(config.d3))

    def parameters(self) -> list[Parameter]:
        return [*self.encoder.values(), self.match.weight, self.match.bias]

    def named(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        named = self.named()
        if set(state) != set(named):
            missing = set(named) ^ set(state)
            raise ContractViolation(f"parameter set mismatch: {sorted(missing)}")
        for name, value in state.items():
            if value.shape != named[name].shape:
                raise ContractViolation(f"{name}: shape {value.shape} != {named[name].shape}")
            named[name].value = np.array(value, dtype=np.float64)
            named[name].zero_grad()

    def clone(self) -> "ModelParams":
        enc = {n: Parameter(n, p.value.copy()) for n, p in self.encoder.items()}
        return ModelParams(enc, MatchParams(Parameter("match.weight", self.match.weight.value.copy()),
                                            Parameter("match.bias", self.match.bias.value.copy())))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def bind(self, tape: Tape, trainable: bool) -> dict[str, Var]:
        return {p.name: tape.watch(p, trainable) for p in self.parameters()}


@dataclass(frozen=True)
class ScoredCandidate:
    entity_id: str
    psi: float
    phi: float


def match_scores(m_emb: Var, e_emb: Var, w: Mapping[str, Var]) -> Var:
    """Raw similarity Psi for row-aligned (N, d3) mention/entity embeddings -> (N,)."""
    if m_emb.shape != e_emb.shape:
        raise ContractViolation(f"match: embedding shapes differ {m_emb.shape} vs {e_emb.shape}")
    n = m_emb.shape[0]
    cos = nm.reshape(nm.cosine(m_emb, e_emb), (n, 1))
    x = nm.concat([m_emb, e_emb, cos], axis=-1)
    return nm.reshape(nm.tanh(x @ w["match.weight"] + w["match.bias"]), (n,))


def pair_scores(m_emb: Var, e_emb: Var, m_idx: np.ndarray, e_idx: np.ndarray,
                w: Mapping[str, Var]) -> Var:
    """Psi for pairs (m_emb[m_idx[i]], e_emb[e_idx[i]])."""
    return match_scores(nm.gather(m_emb, (np.asarray(m_idx),)), nm.gather(e_emb, (np.asarray(e_idx),)), w)


def cos_sim(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"cos_sim: widths differ {a.shape} vs {b.shape}")
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        log.warning("cos_sim: zero-norm vector, similarity defined as 0")
        return 0.0
    return float(a @ b / denom)


def match(m_emb: np.ndarray, e_emb: np.ndarray, params: MatchParams, entity_id: str = "") -> ScoredCandidate:
    tape = Tape()
    w = {"match.weight": tape.watch(params.weight, False), "match.bias": tape.watch(params.bias, False)}
    m = tape.constant(np.asarray(m_emb, dtype=np.float64)[None, :])
    e = tape.constant(np.asarray(e_emb, dtype=np.float64)[None, :])
    if m.shape[1] != params.weight.shape[0] // 2:
        raise ContractViolation(f"match: embedding width {m.shape[1]} does not fit weight {params.weight.shape}")
    psi = match_scores(m, e, w)
    return ScoredCandidate(entity_id, float(psi.value[0]), float(nm.sigmoid(psi).value[0]))


def score_candidates(
    mention: FeatureRecord,
    candidates: Sequence[FeatureRecord],
    params: ModelParams,
    config: EncoderConfig,
) -> list[ScoredCandidate]:
    """Score every candidate against one mention, in input order."""
    if not candidates:
        raise ContractViolation("score_candidates: no candidates")
    tape = Tape()
    w = params.bind(tape, trainable=False)
    m = embed_mentions(tape, w, [mention.token_features], [mention.vision_feature], config)
    texts = np.stack([c.text_feature for c in candidates])
    visions = None
    if config.entity_vision:
        if any(c.vision_feature is None for c in candidates):
            raise ContractViolation("score_candidates: candidate lacks a vision feature")
        visions = np.stack([c.vision_feature for c in candidates])
    e = embed_entities(tape, w, texts, visions, config)
    n = len(candidates)
    psi = pair_scores(m, e, np.zeros(n, dtype=np.int64), np.arange(n), w)
    phi = nm.sigmoid(psi)
    return [ScoredCandidate(c.id, float(s), float(p)) for c, s, p in zip(candidates, psi.value, phi.value)]
