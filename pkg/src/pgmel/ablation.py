"""Variant matrix: train each model variant under one budget and compare Top-k."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .adversarial import TrainConfig, resolve_encoder, train
from .corpus import Corpus
from .encoders import EncoderConfig
from .evaluation import link_all, top_k_accuracy

log = logging.getLogger(__name__)

VARIANTS = ("pgmel", "mel-rn", "text-only", "entity-text-only", "no-gated-fusion", "cnn-k1", "cnn-k12")


def variant_config(variant: str, cfg: TrainConfig) -> TrainConfig:
    """Training config for a named variant; ablations train in pgmel mode."""
    if variant == "pgmel":
        return replace(cfg, mode="pgmel", ablation="full")
    if variant == "mel-rn":
        return replace(cfg, mode="mel-rn", ablation="full")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return replace(cfg, mode="pgmel", ablation=variant)


@dataclass
class VariantResult:
    variant: str
    runs: dict[int, dict[int, float]] = field(default_factory=dict)  # seed -> k -> accuracy
    errors: dict[int, str] = field(default_factory=dict)

    def mean(self, k: int) -> float:
        vals = [r[k] for r in self.runs.values()]
        return float(np.mean(vals)) if vals else float("nan")

    def sd(self, k: int) -> float:
        vals = [r[k] for r in self.runs.values()]
        return float(np.std(vals)) if vals else float("nan")


def run_variant(corpus: Corpus, variant: str, seed: int, cfg: TrainConfig, config: EncoderConfig,
                split: str = "test") -> dict[int, float]:
    vcfg = replace(variant_config(variant, cfg), seed=seed)
    enc = resolve_encoder(config, vcfg)
    state = train(corpus, vcfg, enc)
    return top_k_accuracy(link_all(corpus, corpus.splits[split], state.disc, enc), vcfg.eval_ks)


def run_ablation(corpus: Corpus, seeds: Sequence[int], cfg: TrainConfig, config: EncoderConfig,
                 variants: Iterable[str] = VARIANTS, split: str = "test") -> list[VariantResult]:
    results = []
    for variant in variants:
        res = VariantResult(variant)
        for seed in seeds:
            try:
                res.runs[seed] = run_variant(corpus, variant, seed, cfg, config, split)
            except Exception as exc:  # one failing variant must not sink the table
                log.error("variant %s seed %d failed: %s", variant, seed, exc)
                res.errors[seed] = f"{type(exc).__name__}: {exc}"
        results.append(res)
    return results


def format_table(results: Sequence[VariantResult], ks: Sequence[int]) -> str:
    header = f"{'variant':<18}" + "".join(f"{'Top-' + str(k):>16}" for k in ks) + "  runs"
    lines = [header, "-" * len(header)]
    for r in results:
        cells = "".join(f"{r.mean(k):>9.3f}±{r.sd(k):<6.3f}" for k in ks)
        note = f"  {len(r.runs)}" + (f" ({len(r.errors)} failed)" if r.errors else "")
        lines.append(f"{r.variant:<18}{cells}{note}")
    return "\n".join(lines)


def write_table_csv(results: Sequence[VariantResult], ks: Sequence[int], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["variant", "runs", "failed"] + [f"top{k}_{s}" for k in ks for s in ("mean", "sd")] + ["errors"])
        for r in results:
            row = [r.variant, len(r.runs), len(r.errors)]
            for k in ks:
                row += [repr(r.mean(k)), repr(r.sd(k))]
            row.append("; ".join(f"seed {s}: {e}" for s, e in sorted(r.errors.items())))
            out.writerow(row)
