"""Finite-difference checks over every primitive and the composed score function."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numeric as nm
from .encoders import EncoderConfig, embed_entities, embed_mentions
from .scoring import ModelParams, match_scores

TOLERANCE = 1e-4


@dataclass
class OpReport:
    op: str
    cases: int
    max_error: float

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def _away_from_zero(x: np.ndarray, gap: float = 0.05) -> np.ndarray:
    # keeps finite differences off the kinks of relu-like ops
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def _scalarize(tape: nm.Tape, y: nm.Var, seed: int) -> nm.Var:
    # the same random projection on every call, so finite differences see one function
    w = tape.constant(np.random.default_rng(seed).standard_normal(y.shape))
    return nm.sum_(y * w)


def _case(op: str, rng: np.random.Generator) -> tuple[Callable, list[np.ndarray]]:
    """A scalar-valued function exercising ``op`` and a random evaluation point."""
    n, m = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    seed = int(rng.integers(2**32))

    def scal(fn):
        def f(tape, *xs):
            return _scalarize(tape, fn(*xs), seed)
        return f

    a, b = rng.standard_normal((n, m)), rng.standard_normal((n, m))
    if op == "add":
        return scal(lambda x, y: x + y), [a, rng.standard_normal(m)]
    if op == "sub":
        return scal(lambda x, y: x - y), [a, b]
    if op == "mul":
        return scal(lambda x, y: x * y), [a, b]
    if op == "matmul":
        return scal(lambda x, y: x @ y), [a, rng.standard_normal((m, 3))]
    if op == "concat":
        return scal(lambda x, y: nm.concat([x, y], axis=-1)), [a, rng.standard_normal((n, 2))]
    if op == "tanh":
        return scal(nm.tanh), [a]
    if op == "sigmoid":
        return scal(nm.sigmoid), [a]
    if op == "leaky_relu":
        return scal(nm.leaky_relu), [_away_from_zero(a)]
    if op == "relu":
        return scal(nm.relu), [_away_from_zero(a)]
    if op == "log":
        return scal(nm.log_), [np.abs(a) + 0.5]
    if op == "softmax":
        mask = rng.random((n, m)) < 0.7
        mask[:, 0] = True
        return scal(lambda x: nm.softmax(x, mask)), [a]
    if op == "conv1d":
        L, F, D = int(rng.integers(3, 6)), 3, 2
        k = int(rng.integers(1, 4))
        return scal(nm.conv1d), [rng.standard_normal((2, L, F)), rng.standard_normal((k, F, D))]
    if op == "maxpool":
        x = rng.permutation(40)[: 2 * 5 * 3].reshape(2, 5, 3) / 10.0  # distinct values, no ties
        valid = rng.integers(1, 6, size=2)
        return scal(lambda v: nm.maxpool(v, valid)), [x]
    if op == "cosine":
        return scal(nm.cosine), [a, b]
    if op == "dropout":
        mask = rng.random((n, m)) >= 0.3
        return scal(lambda x: nm.dropout(x, mask, 0.3)), [a]
    if op == "gather":
        idx = rng.integers(0, n, size=6)
        return scal(lambda x: nm.gather(x, (idx,))), [a]
    if op == "reshape":
        return scal(lambda x: nm.reshape(x, (m, n))), [a]
    if op == "sum":
        return (lambda tape, x: nm.sum_(nm.tanh(x))), [a]
    if op == "mean":
        return (lambda tape, x: nm.mean(nm.tanh(x))), [a]
    raise KeyError(op)


PRIMITIVES = ("add", "sub", "mul", "matmul", "concat", "tanh", "sigmoid", "leaky_relu", "relu", "log",
              "softmax", "conv1d", "maxpool", "cosine", "dropout", "gather", "reshape", "sum", "mean")


def _phi_case(rng: np.random.Generator, ablation_vision: bool = True) -> tuple[Callable, list[np.ndarray]]:
    """phi(e|m) for one mention and one entity with every model weight as an input."""
    F = 4
    config = EncoderConfig(d1=2, d2=3, d3=3, feature_dim_in=F, dropout=0.0,
                           mention_vision=ablation_vision, entity_vision=ablation_vision)
    params = ModelParams.init(config, rng)
    for p in params.parameters():  # non-trivial biases and match weights
        p.value = p.value + 0.3 * rng.standard_normal(p.shape)
    names = [p.name for p in params.parameters()]
    tokens = rng.standard_normal((int(rng.integers(1, 5)), F))
    mv, et, ev = rng.standard_normal(F), rng.standard_normal(F), rng.standard_normal(F)

    def f(tape, *vs):
        w = dict(zip(names, vs))
        m = embed_mentions(tape, w, [tokens], [mv], config)
        e = embed_entities(tape, w, et[None, :], ev[None, :] if ablation_vision else None, config)
        return nm.sum_(nm.sigmoid(match_scores(m, e, w)))

    return f, [p.value for p in params.parameters()]


def run_gradchecks(seed: int = 0, cases_per_op: int = 6, phi_cases: int = 4) -> list[OpReport]:
    rng = np.random.default_rng(seed)
    reports = []
    for op in PRIMITIVES:
        worst = 0.0
        for _ in range(cases_per_op):
            fn, point = _case(op, rng)
            worst = max(worst, nm.check_gradients(fn, point))
        reports.append(OpReport(op, cases_per_op, float(worst)))
    worst = 0.0
    for i in range(phi_cases):
        fn, point = _phi_case(rng, ablation_vision=i % 2 == 0)
        worst = max(worst, nm.check_gradients(fn, point))
    reports.append(OpReport("phi", phi_cases, float(worst)))
    return reports
