"""Command-line entry point: synth, train, eval, gradcheck, ablate.

Exit codes: 0 success, 1 runtime or data failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .ablation import VARIANTS, format_table, run_ablation, write_table_csv
from .adversarial import EpochReport, TrainConfig, TrainState, initial_state, resolve_encoder, train
from .corpus import Corpus
from .data import (PRESETS, Checkpoint, CheckpointError, DatasetError, SyntheticSpec, generate_synthetic,
                   load_checkpoint, load_dataset, save_checkpoint, save_dataset)
from .encoders import ABLATIONS, EncoderConfig
from .evaluation import link_all, top_k_accuracy, write_metrics_csv, write_results_csv
from .gradcheck import TOLERANCE, run_gradchecks
from .numeric import ContractViolation, NumericFault
from .scoring import ModelParams

log = logging.getLogger("pgmel")

SEED_ENV = "PGMEL_SEED"
REPORT_COLUMNS = ["epoch", "disc_loss", "gen_reward", "top1", "top5", "top10", "top20", "seconds"]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

_TRAIN_FLAGS = {
    "lr": float, "batch_size": int, "margin": float, "negatives": int, "epochs": int, "clip": float,
    "candidate_size": int, "warmup_epochs": int, "train_fraction": float,
}
_ENCODER_FLAGS = {"d1": int, "d2": int, "d3": int, "dropout": float}


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int, help=f"run seed (falls back to ${SEED_ENV}, then 0)")
    for name, typ in {**_TRAIN_FLAGS, **_ENCODER_FLAGS}.items():
        p.add_argument("--" + name.replace("_", "-"), type=typ, dest=name)
    p.add_argument("--mode", choices=["pgmel", "mel-rn", "pgmel-pretrain"])
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--gated-modality", choices=["text", "vision"], dest="gated_modality")
    p.add_argument("--filter-widths", dest="filter_widths",
                   type=lambda s: tuple(int(x) for x in s.split(",") if x), help="comma list, e.g. 1,2,3")
    p.add_argument("--generator-dropout", dest="generator_dropout", action="store_true", default=None,
                   help="keep dropout on in the generator's gradient pass")


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from None


def resolve_run_config(args: argparse.Namespace, feature_dim: int) -> tuple[TrainConfig, EncoderConfig, dict]:
    """Defaults < config file < flags; the seed falls back to the environment."""
    train_vals: dict[str, Any] = {}
    enc_vals: dict[str, Any] = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(raw) - {"train", "encoder", "data", "out"}
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        train_vals.update(raw.get("train", {}))
        enc_vals.update(raw.get("encoder", {}))
    train_names = {f.name for f in fields(TrainConfig)}
    enc_names = {f.name for f in fields(EncoderConfig)}
    for key, value in vars(args).items():
        if value is None:
            continue
        if key in train_names and key != "seed":
            train_vals[key] = value
        elif key in enc_names:
            enc_vals[key] = value
    if args.seed is not None:
        train_vals["seed"] = args.seed
    elif "seed" not in train_vals:
        env = _env_seed()
        train_vals["seed"] = 0 if env is None else env
    if enc_vals.get("feature_dim_in", feature_dim) != feature_dim:
        raise UsageError(f"config feature_dim_in {enc_vals['feature_dim_in']} != dataset feature_dim {feature_dim}")
    enc_vals["feature_dim_in"] = feature_dim
    try:
        cfg = TrainConfig(**train_vals)
        enc = EncoderConfig(**enc_vals)
    except (TypeError, ContractViolation) as exc:
        raise UsageError(str(exc)) from None
    return cfg, enc, {"train": _jsonable(asdict(cfg)), "encoder": _jsonable(asdict(enc))}


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def configs_from_snapshot(snapshot: dict) -> tuple[TrainConfig, EncoderConfig]:
    return TrainConfig(**snapshot["train"]), EncoderConfig(**snapshot["encoder"])


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    overrides = {k: getattr(args, k) for k in ("num_entities", "num_clusters", "mentions_per_entity", "noise",
                                              "cluster_spread", "name_length", "name_edits", "token_count",
                                              "feature_dim") if getattr(args, k) is not None}
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    try:
        spec = SyntheticSpec(**{**PRESETS[args.preset], "preset": args.preset, "seed": seed, **overrides})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dataset = generate_synthetic(spec)
    manifest = save_dataset(dataset, args.out)
    extra = dataset.manifest.extra
    print(f"preset {spec.preset}: {spec.num_entities} entities in {spec.num_clusters} clusters "
          f"({extra['min_cluster_size']}-{extra['max_cluster_size']} per cluster), {len(dataset.mentions)} mentions")
    print("splits: " + ", ".join(f"{k}={len(v)}" for k, v in dataset.splits.items()))
    for name in ("manifest.json", dataset.manifest.entity_file, dataset.manifest.mention_file):
        print(manifest.parent / name)
    return 0


def _report_row(r: EpochReport) -> list[str]:
    top = [repr(r.val_top_k[k]) if k in r.val_top_k else "" for k in (1, 5, 10, 20)]
    reward = "" if r.gen_reward is None else repr(r.gen_reward)
    # wall-clock seconds live in timing.csv so this file stays byte-reproducible
    return [str(r.epoch), repr(r.disc_loss), reward, *top, ""]


def write_reports_csv(reports: Sequence[EpochReport], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(REPORT_COLUMNS)
        for r in reports:
            out.writerow(_report_row(r))


def _checkpoint(state: TrainState, snapshot: dict) -> Checkpoint:
    return Checkpoint(snapshot, state.disc.state_dict(), state.gen.state_dict(), state.rng.bit_generator.state,
                      state.epoch, [r.to_record() for r in state.reports])


def cmd_train(args: argparse.Namespace) -> int:
    corpus_data = load_dataset(args.data)
    cfg, enc, snapshot = resolve_run_config(args, corpus_data.manifest.feature_dim)
    out = Path(args.out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {**snapshot, "data": str(args.data), "out": str(out)})
    corpus = Corpus(corpus_data, cfg.candidate_size)
    model_enc = resolve_encoder(enc, cfg)

    state = None
    disc_init = None
    if args.resume:
        cp = load_checkpoint(args.resume)
        saved = dict(cp.config["train"])
        mine = dict(snapshot["train"])
        saved.pop("epochs"), mine.pop("epochs")
        if saved != mine or cp.config["encoder"] != snapshot["encoder"]:
            raise CheckpointError(f"{args.resume}: run config differs from the checkpoint's")
        state = initial_state(cfg, model_enc)
        state.disc.load_state_dict(cp.disc)
        state.gen.load_state_dict(cp.gen)
        state.rng.bit_generator.state = cp.rng_state
        state.epoch = cp.epoch
        state.reports = [EpochReport.from_record(r) for r in cp.reports]
    elif args.init_disc:
        disc_init = load_checkpoint(args.init_disc).disc

    timing = out / "timing.csv"
    if state is None:
        timing.write_text("epoch,seconds\n", encoding="utf-8")

    def on_epoch(s: TrainState) -> None:
        save_checkpoint(_checkpoint(s, snapshot), ckpt_dir / f"epoch_{s.epoch:03d}.ckpt")
        write_reports_csv(s.reports, out / "reports.csv")
        with open(timing, "a", encoding="utf-8") as fh:
            fh.write(f"{s.epoch},{s.reports[-1].wallclock_s:.3f}\n")
        r = s.reports[-1]
        print(f"epoch {r.epoch:3d} [{r.phase}] loss {r.disc_loss:.4f} "
              f"reward {'-' if r.gen_reward is None else f'{r.gen_reward:.4f}'} "
              + " ".join(f"top{k} {v:.3f}" for k, v in sorted(r.val_top_k.items())), flush=True)

    if state is None:
        state = initial_state(cfg, model_enc)
        if disc_init is not None:
            state.disc.load_state_dict(disc_init)
        save_checkpoint(_checkpoint(state, snapshot), ckpt_dir / "epoch_000.ckpt")
        write_reports_csv([], out / "reports.csv")
    state = train(corpus, cfg, model_enc, state=state, on_epoch=on_epoch)
    if state.epoch == 0:  # nothing trained: the initial checkpoint is the only one
        print(ckpt_dir / "epoch_000.ckpt")
        return 0
    save_checkpoint(_checkpoint(state, snapshot), ckpt_dir / "final.ckpt")
    print(ckpt_dir / "final.ckpt")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cp = load_checkpoint(args.checkpoint)
    cfg, enc = configs_from_snapshot(cp.config)
    model_enc = resolve_encoder(enc, cfg)
    dataset = load_dataset(args.data)
    if dataset.manifest.feature_dim != enc.feature_dim_in:
        raise DatasetError(f"dataset feature_dim {dataset.manifest.feature_dim} != model {enc.feature_dim_in}")
    corpus = Corpus(dataset, cfg.candidate_size)
    disc = ModelParams.init(model_enc, np.random.default_rng(0))
    disc.load_state_dict(cp.disc)
    results = link_all(corpus, corpus.splits[args.split], disc, model_enc)
    if not results:
        raise DatasetError(f"split {args.split!r} is empty")
    acc = top_k_accuracy(results, cfg.eval_ks)
    if args.out:
        write_metrics_csv(acc, len(results), args.out)
    if args.per_mention:
        write_results_csv(results, args.per_mention)
    print(f"split {args.split}: {len(results)} mentions")
    for k, v in sorted(acc.items()):
        print(f"top{k} {v:.4f}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    reports = run_gradchecks(seed, args.cases_per_op, args.phi_cases)
    total = sum(r.cases for r in reports)
    print(f"{'op':<12}{'cases':>6}  {'max rel err':>12}  status")
    for r in reports:
        print(f"{r.op:<12}{r.cases:>6}  {r.max_error:>12.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.op for r in reports if not r.passed]
    print(f"{total} cases, tolerance {TOLERANCE:g}: " + ("all passed" if not failed else f"FAILED {failed}"))
    return 1 if failed else 0


def cmd_ablate(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    cfg, enc, snapshot = resolve_run_config(args, dataset.manifest.feature_dim)
    seeds = args.seeds if args.seeds is not None else list(range(cfg.seed, cfg.seed + args.num_seeds))
    if not seeds:
        raise UsageError("need at least one seed")
    variants = args.variants or list(VARIANTS)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; expected a subset of {list(VARIANTS)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {**snapshot, "data": str(args.data), "out": str(out),
                                      "seeds": seeds, "variants": variants, "split": args.split})
    corpus = Corpus(dataset, cfg.candidate_size)
    results = run_ablation(corpus, seeds, cfg, enc, variants, args.split)
    write_table_csv(results, cfg.eval_ks, out / "ablation.csv")
    print(format_table(results, cfg.eval_ks))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _seed_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgmel", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="separable")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)
    for name, typ in (("num_entities", int), ("num_clusters", int), ("mentions_per_entity", int),
                      ("noise", float), ("cluster_spread", float), ("name_length", int), ("name_edits", int),
                      ("token_count", int), ("feature_dim", int)):
        p.add_argument("--" + name.replace("_", "-"), type=typ, dest=name)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train discriminator and generator")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_training_flags(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--resume", type=Path, help="continue from a checkpoint of this run")
    g.add_argument("--init-disc", type=Path, help="initialise the discriminator from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Top-k accuracy of a checkpoint on a split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=["train", "validation", "test"], default="test")
    p.add_argument("--out", type=Path, help="metrics CSV")
    p.add_argument("--per-mention", type=Path, help="per-mention results CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and the score function")
    p.add_argument("--seed", type=int)
    p.add_argument("--cases-per-op", type=int, default=6)
    p.add_argument("--phi-cases", type=int, default=4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train every variant over several seeds and tabulate Top-k")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=_seed_list, help="comma list of seeds")
    p.add_argument("--num-seeds", type=int, default=5)
    p.add_argument("--variants", type=lambda s: s.split(","), help=f"subset of {','.join(VARIANTS)}")
    p.add_argument("--split", choices=["validation", "test"], default="test")
    _add_training_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on bad flags
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pgmel: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, NumericFault, ContractViolation, OSError) as exc:
        print(f"pgmel: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
