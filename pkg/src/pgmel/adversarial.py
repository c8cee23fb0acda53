"""Discriminator/generator training with policy-gradient hard-negative sampling.

The discriminator is a score function trained with a triplet hinge on
(gold, negative) pairs. The generator is a second, independently initialised
score function whose softmax over raw scores defines a sampling distribution
over non-gold candidates; it is trained with REINFORCE on the reward
``-log phi_disc`` so that it learns to propose negatives the discriminator
currently scores high.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numeric as nm
from .corpus import Corpus
from .encoders import ABLATIONS, Dropout, EncoderConfig, apply_ablation, embed_entities
from .evaluation import DEFAULT_KS, FrozenScorer, link_all, top_k_accuracy
from .numeric import ContractViolation, InvariantError, NumericFault, Tape, Var
from .scoring import ModelParams, pair_scores

log = logging.getLogger(__name__)

MODES = ("pgmel", "mel-rn", "pgmel-pretrain")
MAX_ENUMERATION = 64
REWARD_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 128
    margin: float = 0.5
    negatives: int = 5
    epochs: int = 10
    seed: int = 0
    clip: float = 1.0
    mode: str = "pgmel"
    ablation: str = "full"
    candidate_size: int = 16
    warmup_epochs: int = 10
    train_fraction: float = 1.0
    eval_ks: tuple[int, ...] = DEFAULT_KS
    # dropout in the generator's gradient pass makes it differentiate a different
    # distribution from the one it sampled from, which biases the estimator
    generator_dropout: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.margin <= 0 or self.clip <= 0:
            raise ContractViolation("lr, margin and clip must be > 0")
        if self.negatives < 1:
            raise ContractViolation("negatives per mention must be >= 1")
        if self.negatives >= self.candidate_size:
            raise ContractViolation(f"negatives ({self.negatives}) must be < candidate_size ({self.candidate_size})")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_epochs < 0:
            raise ContractViolation("batch_size >= 1, epochs >= 0 and warmup_epochs >= 0 required")
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}: {self.mode!r}")
        if self.ablation not in ABLATIONS:
            raise ContractViolation(f"ablation must be one of {ABLATIONS}: {self.ablation!r}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ContractViolation("train_fraction must lie in (0, 1]")
        object.__setattr__(self, "eval_ks", tuple(sorted(set(self.eval_ks))))


@dataclass
class EpochReport:
    epoch: int
    disc_loss: float
    gen_reward: float | None
    val_top_k: dict[int, float]
    wallclock_s: float = 0.0
    phase: str = "adversarial"  # "adversarial", "random" (mel-rn) or "warmup"
    aborted_steps: int = 0

    def __post_init__(self):
        vals = [self.val_top_k[k] for k in sorted(self.val_top_k)]
        if any(not 0.0 <= v <= 1.0 for v in vals) or any(a > b for a, b in zip(vals, vals[1:])):
            raise InvariantError(f"epoch {self.epoch}: bad accuracies {self.val_top_k}")

    def to_record(self) -> dict:
        """Serialisable form without wall-clock time (kept out of deterministic artefacts)."""
        d = asdict(self)
        d.pop("wallclock_s")
        d["val_top_k"] = [[k, v] for k, v in sorted(self.val_top_k.items())]
        return d

    @classmethod
    def from_record(cls, d: Mapping) -> "EpochReport":
        d = dict(d)
        d["val_top_k"] = {int(k): float(v) for k, v in d["val_top_k"]}
        return cls(**d)


# ---------------------------------------------------------------------------
# sampling distribution
# ---------------------------------------------------------------------------

def softmax_probs(psi: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis of raw scores, restricted to ``mask``."""
    psi = np.asarray(psi, dtype=np.float64)
    if psi.ndim == 0 or psi.shape[-1] == 0:
        raise ContractViolation("sampling distribution needs at least one candidate")
    tape = Tape()
    p = nm.softmax(tape.constant(psi), mask).value
    check_distribution(p, mask)
    return p


def check_distribution(p: np.ndarray, mask: np.ndarray | None = None, tol: float = 1e-12) -> None:
    valid = np.ones(p.shape, dtype=bool) if mask is None else mask
    if np.any(p[valid] <= 0) or np.any(p[~valid] != 0):
        raise InvariantError("sampling probabilities must be positive exactly on the candidates")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise InvariantError("sampling probabilities do not sum to 1")


def _gen_psi(tape: Tape, w: Mapping[str, Var], corpus: Corpus, mentions: Sequence[int], rows: np.ndarray,
             config: EncoderConfig, drop: Dropout | None) -> Var:
    B, K = rows.shape
    uniq, inv = np.unique(rows, return_inverse=True)
    m = corpus.embed_mentions(tape, w, mentions, config, drop)
    e = embed_entities(tape, w, *corpus.entity_features(uniq), config, drop)
    psi = pair_scores(m, e, np.repeat(np.arange(B), K), inv.reshape(-1), w)
    return nm.reshape(psi, (B, K))


def sampling_distribution(corpus: Corpus, mentions: Sequence[int], gen: ModelParams, config: EncoderConfig,
                          rows: np.ndarray | None = None, mask: np.ndarray | None = None) -> np.ndarray:
    """Generator probabilities over each mention's non-gold candidates, (B, K).

    ``rows``/``mask`` default to the training candidate matrix.
    """
    if rows is None:
        rows, mask = corpus.negative_matrix(mentions)
    if mask is None:
        mask = np.ones(rows.shape, dtype=bool)
    tape = Tape()
    psi = _gen_psi(tape, gen.bind(tape, False), corpus, mentions, rows, config, None)
    return softmax_probs(psi.value, mask)


def sample_negatives(probs: np.ndarray, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``n`` i.i.d. draws with replacement per row; returns (indices, their probabilities)."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if probs.shape[-1] == 0:
        raise ContractViolation("sample_negatives: no candidates")
    if n < 1:
        raise ContractViolation("sample_negatives: n must be >= 1")
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((probs.shape[0], n))
    idx = (u[:, :, None] >= cdf[:, None, :]).sum(axis=2)
    # guard against round-off in the last cdf entry: fall back to the last positive entry
    last = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
    idx = np.minimum(idx, last[:, None])
    return idx, np.take_along_axis(probs, idx, axis=1)


def uniform_negatives(mask: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ContractViolation("uniform_negatives: a mention has no negatives")
    return np.floor(rng.random((mask.shape[0], n)) * counts[:, None]).astype(np.int64)


def rewards_from_phi(phi: np.ndarray) -> np.ndarray:
    """Reward ``-log phi``; phi that underflows to 0 is floored and logged."""
    phi = np.asarray(phi, dtype=np.float64)
    zero = phi <= 0
    if np.any(zero):
        log.warning("reward: %d discriminator scores underflowed to 0; clamped", int(zero.sum()))
        phi = np.where(zero, phi + REWARD_FLOOR, phi)
    return -np.log(phi)


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

def triplet_loss(phi_pos: Var, phi_neg: Var, margin: float) -> Var:
    """Mean over pairs of max(0, margin + phi_neg - phi_pos); inputs row-aligned."""
    return nm.mean(nm.relu(phi_neg - phi_pos + margin))


def discriminator_step(corpus: Corpus, mentions: Sequence[int], negatives: np.ndarray, disc: ModelParams,
                       config: EncoderConfig, cfg: TrainConfig, drop: Dropout | None = None) -> float:
    """One triplet-loss update of ``disc``; ``negatives`` holds (B, n) entity rows."""
    mentions = list(mentions)
    negatives = np.asarray(negatives, dtype=np.int64)
    B, n = negatives.shape
    gold = corpus.gold_rows[mentions]
    if np.any(negatives == gold[:, None]):
        raise ContractViolation("discriminator_step: a negative equals its gold entity")
    tape = Tape()
    w = disc.bind(tape, trainable=True)
    m = corpus.embed_mentions(tape, w, mentions, config, drop)
    uniq, inv = np.unique(np.concatenate([gold, negatives.reshape(-1)]), return_inverse=True)
    e = embed_entities(tape, w, *corpus.entity_features(uniq), config, drop)
    phi_pos = nm.sigmoid(pair_scores(m, e, np.arange(B), inv[:B], w))
    phi_neg = nm.sigmoid(pair_scores(m, e, np.repeat(np.arange(B), n), inv[B:], w))
    both = np.concatenate([phi_pos.value, phi_neg.value])
    if np.any(both <= 0) or np.any(both >= 1):
        raise InvariantError("discriminator score left (0, 1)")
    loss = triplet_loss(nm.gather(phi_pos, (np.repeat(np.arange(B), n),)), phi_neg, cfg.margin)
    nm.backward(tape, loss)
    nm.sgd_step(disc.parameters(), cfg.lr, cfg.clip)
    return float(loss.value)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

def _reinforce_backward(corpus: Corpus, mentions: Sequence[int], rows: np.ndarray, mask: np.ndarray,
                        idx: np.ndarray, rewards: np.ndarray, gen: ModelParams, config: EncoderConfig,
                        drop: Dropout | None) -> None:
    """Accumulate grad of mean_s log P(sample_s) * r_s into ``gen``."""
    B, n = idx.shape
    tape = Tape()
    w = gen.bind(tape, trainable=True)
    p = nm.softmax(_gen_psi(tape, w, corpus, mentions, rows, config, drop), mask)
    check_distribution(p.value, mask)
    logp = nm.log_(nm.gather(p, (np.repeat(np.arange(B), n), idx.reshape(-1))))
    nm.backward(tape, nm.mean(logp * rewards.reshape(-1)))


def generator_step(corpus: Corpus, mentions: Sequence[int], gen: ModelParams, disc_scorer: FrozenScorer,
                   config: EncoderConfig, cfg: TrainConfig, rng: np.random.Generator,
                   drop: Dropout | None = None) -> float:
    """One REINFORCE update of ``gen`` against a frozen discriminator; returns the mean reward."""
    mentions = list(mentions)
    rows, mask = corpus.negative_matrix(mentions)
    probs = sampling_distribution(corpus, mentions, gen, config, rows, mask)
    idx, _ = sample_negatives(probs, cfg.negatives, rng)
    _, phi = disc_scorer.scores(mentions, np.take_along_axis(rows, idx, axis=1))
    r = rewards_from_phi(phi)
    _reinforce_backward(corpus, mentions, rows, mask, idx, r, gen, config, drop)
    nm.sgd_step(gen.parameters(), cfg.lr, cfg.clip)
    return float(r.mean())


def _grads(params: ModelParams) -> dict[str, np.ndarray]:
    out = {p.name: p.grad.copy() for p in params.parameters()}
    params.zero_grad()
    return out


def _single_rewards(corpus: Corpus, mention: int, rows: np.ndarray, disc: ModelParams,
                    config: EncoderConfig) -> np.ndarray:
    _, phi = FrozenScorer(disc, corpus, config).scores([mention], rows[None, :])
    return rewards_from_phi(phi[0])


def exact_generator_gradient(corpus: Corpus, mention: int, gen: ModelParams, disc: ModelParams,
                             config: EncoderConfig, rows: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradient of sum_e P(e|m) * (-log phi_disc(e|m)) by full enumeration."""
    rows = corpus.negative_rows(mention) if rows is None else np.asarray(rows, dtype=np.int64)
    K = len(rows)
    if K == 0:
        raise ContractViolation("exact_generator_gradient: no candidates")
    if K > MAX_ENUMERATION:
        raise ContractViolation(f"exact_generator_gradient: {K} candidates exceed {MAX_ENUMERATION}")
    r = _single_rewards(corpus, mention, rows, disc, config)
    gen.zero_grad()
    tape = Tape()
    w = gen.bind(tape, trainable=True)
    p = nm.softmax(_gen_psi(tape, w, corpus, [mention], rows[None, :], config, None))
    nm.backward(tape, nm.sum_(p * r[None, :]))
    return _grads(gen)


def reinforce_gradient(corpus: Corpus, mention: int, gen: ModelParams, disc: ModelParams, config: EncoderConfig,
                       samples: int, rng: np.random.Generator,
                       rows: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Monte Carlo estimate of the same gradient, using the training estimator."""
    rows = corpus.negative_rows(mention) if rows is None else np.asarray(rows, dtype=np.int64)
    r = _single_rewards(corpus, mention, rows, disc, config)
    mask = np.ones((1, len(rows)), dtype=bool)
    probs = sampling_distribution(corpus, [mention], gen, config, rows[None, :], mask)
    idx, _ = sample_negatives(probs, samples, rng)
    gen.zero_grad()
    _reinforce_backward(corpus, [mention], rows[None, :], mask, idx, r[idx], gen, config, None)
    return _grads(gen)


def peer_mass(corpus: Corpus, mentions: Sequence[int], gen: ModelParams, config: EncoderConfig,
              peers: Mapping[str, Sequence[str]], batch: int = 256) -> float:
    """Mean generator probability placed on the gold entity's confusable peers."""
    total, count = 0.0, 0
    mentions = list(mentions)
    for lo in range(0, len(mentions), batch):
        chunk = mentions[lo:lo + batch]
        rows, mask = corpus.negative_matrix(chunk)
        probs = sampling_distribution(corpus, chunk, gen, config, rows, mask)
        for b, i in enumerate(chunk):
            peer_rows = {corpus.entity_row[e] for e in peers.get(corpus.mentions[i].gold_id, ())}
            hit = np.array([r in peer_rows for r in rows[b]]) & mask[b]
            total += float(probs[b, hit].sum())
            count += 1
    return total / count if count else 0.0


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    disc: ModelParams
    gen: ModelParams
    rng: np.random.Generator
    epoch: int
    reports: list[EpochReport] = field(default_factory=list)


def seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent generators for discriminator init, generator init and the run itself."""
    disc_ss, gen_ss, run_ss = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(disc_ss), np.random.default_rng(gen_ss), np.random.default_rng(run_ss)


def initial_state(cfg: TrainConfig, config: EncoderConfig) -> TrainState:
    disc_rng, gen_rng, run_rng = seed_streams(cfg.seed)
    return TrainState(ModelParams.init(config, disc_rng), ModelParams.init(config, gen_rng), run_rng, 0)


def total_epochs(cfg: TrainConfig) -> int:
    return cfg.epochs + (cfg.warmup_epochs if cfg.mode == "pgmel-pretrain" else 0)


def epoch_phase(cfg: TrainConfig, epoch: int) -> str:
    if cfg.mode == "mel-rn":
        return "random"
    if cfg.mode == "pgmel-pretrain" and epoch <= cfg.warmup_epochs:
        return "warmup"
    return "adversarial"


def training_mentions(corpus: Corpus, cfg: TrainConfig) -> list[int]:
    train = list(corpus.splits["train"])
    keep = max(1, math.floor(cfg.train_fraction * len(train) + 0.5))
    return train[:keep]


def _batches(order: np.ndarray, size: int):
    for lo in range(0, len(order), size):
        yield [int(i) for i in order[lo:lo + size]]


def run_epoch(corpus: Corpus, state: TrainState, cfg: TrainConfig, config: EncoderConfig,
              train_idx: Sequence[int], val_idx: Sequence[int]) -> EpochReport:
    epoch = state.epoch + 1
    phase = epoch_phase(cfg, epoch)
    rng = state.rng
    drop = Dropout(rng, config.dropout) if config.dropout > 0 else None
    t0 = time.perf_counter()
    aborted = 0

    # discriminator phase, generator frozen
    losses = []
    order = rng.permutation(np.asarray(train_idx))
    for batch in _batches(order, cfg.batch_size):
        rows, mask = corpus.negative_matrix(batch)
        if phase == "adversarial":
            probs = sampling_distribution(corpus, batch, state.gen, config, rows, mask)
            idx, _ = sample_negatives(probs, cfg.negatives, rng)
        else:
            idx = uniform_negatives(mask, cfg.negatives, rng)
        try:
            losses.append(discriminator_step(corpus, batch, np.take_along_axis(rows, idx, axis=1),
                                             state.disc, config, cfg, drop))
        except NumericFault as exc:
            aborted += 1
            log.warning("epoch %d: discriminator step aborted: %s", epoch, exc)

    # generator phase, discriminator frozen
    rewards: list[float] = []
    if phase == "adversarial":
        disc_scorer = FrozenScorer(state.disc, corpus, config)
        order = rng.permutation(np.asarray(train_idx))
        for batch in _batches(order, cfg.batch_size):
            try:
                rewards.append(generator_step(corpus, batch, state.gen, disc_scorer, config, cfg, rng,
                                              drop if cfg.generator_dropout else None))
            except NumericFault as exc:
                aborted += 1
                log.warning("epoch %d: generator step aborted: %s", epoch, exc)

    results = link_all(corpus, val_idx, state.disc, config)
    acc = top_k_accuracy(results, cfg.eval_ks) if results else {k: 0.0 for k in cfg.eval_ks}
    state.epoch = epoch
    report = EpochReport(
        epoch=epoch,
        disc_loss=float(np.mean(losses)) if losses else float("nan"),
        gen_reward=(float(np.mean(rewards)) if rewards else float("nan")) if phase == "adversarial" else None,
        val_top_k=acc,
        wallclock_s=time.perf_counter() - t0,
        phase=phase,
        aborted_steps=aborted,
    )
    state.reports.append(report)
    return report


def train(corpus: Corpus, cfg: TrainConfig, config: EncoderConfig, state: TrainState | None = None,
          disc_init: Mapping[str, np.ndarray] | None = None,
          on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Alternating training for ``total_epochs(cfg)`` epochs.

    ``config`` must already carry the ablation (see ``resolve_encoder``).
    ``state`` resumes a previous run; ``disc_init`` seeds the discriminator from
    saved weights while the generator starts fresh from the seed.
    """
    if corpus.C != cfg.candidate_size:
        raise ContractViolation(f"corpus built with C={corpus.C}, config asks for {cfg.candidate_size}")
    if not corpus.splits.get("train"):
        raise ContractViolation("dataset has no training mentions")
    if state is None:
        state = initial_state(cfg, config)
        if disc_init is not None:
            state.disc.load_state_dict(disc_init)
    train_idx = training_mentions(corpus, cfg)
    val_idx = corpus.splits.get("validation", [])
    while state.epoch < total_epochs(cfg):
        report = run_epoch(corpus, state, cfg, config, train_idx, val_idx)
        log.info("epoch %d [%s] loss=%.4f reward=%s top1=%.4f", report.epoch, report.phase, report.disc_loss,
                 report.gen_reward, report.val_top_k.get(1, float("nan")))
        if on_epoch is not None:
            on_epoch(state)
    return state


def resolve_encoder(config: EncoderConfig, cfg: TrainConfig) -> EncoderConfig:
    return apply_ablation(config, cfg.ablation)
