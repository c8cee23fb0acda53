"""Dataset files, deterministic splits, synthetic corpora and checkpoints.

On-disk layout of a dataset directory::

    manifest.json     one JSON object (name, feature_dim, file names, split, seed)
    entities.jsonl    one entity per line: id, name, text_row, vision_row
    entities.feat     binary feature rows referenced by the jsonl
    mentions.jsonl    one mention per line: id, surface, gold, token_row, token_count, vision_row
    mentions.feat

Feature files start with a fixed header ``<4sIQI`` (magic, version, row count,
dim) followed by little-endian float32 rows.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .encoders import FeatureRecord

FEATURE_MAGIC = b"PGMF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIQI")

CHECKPOINT_MAGIC = b"PGCK"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIQ")

DEFAULT_SPLIT = (0.7, 0.1, 0.2)
SPLIT_NAMES = ("train", "validation", "test")


class DatasetError(Exception):
    def __init__(self, message: str, record_id: str | None = None):
        super().__init__(message if record_id is None else f"{message} (record {record_id})")
        self.record_id = record_id


class CheckpointError(Exception):
    pass


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

def write_features(path: str | os.PathLike, rows: np.ndarray) -> None:
    rows = np.asarray(rows)
    if rows.ndim != 2:
        raise ValueError(f"feature rows must be 2-D, got {rows.shape}")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows.shape[0], rows.shape[1]))
        fh.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())


def read_features(path: str | os.PathLike) -> np.ndarray:
    """Read a feature file into float64 rows."""
    raw = Path(path).read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, version, count, dim = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DatasetError(f"{path}: unsupported feature file version {version}")
    expected = _FEATURE_HEADER.size + 4 * count * dim
    if len(raw) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes, found {len(raw)} (truncated or padded)")
    data = np.frombuffer(raw, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(count, dim)
    return data.astype(np.float64)


# ---------------------------------------------------------------------------
# manifest, splits, dataset
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    name: str
    feature_dim: int
    entity_file: str = "entities.jsonl"
    mention_file: str = "mentions.jsonl"
    split: tuple[float, float, float] = DEFAULT_SPLIT
    seed: int = 0
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.split = tuple(float(f) for f in self.split)
        if len(self.split) != 3 or min(self.split) <= 0 or not math.isclose(sum(self.split), 1.0, abs_tol=1e-9):
            raise DatasetError(f"split fractions must be three positive numbers summing to 1: {self.split}")


def split_sizes(n: int, fractions: Sequence[float] = DEFAULT_SPLIT) -> tuple[int, int, int]:
    """Train and validation sizes are rounded; test takes the remainder."""
    n_train = math.floor(fractions[0] * n + 0.5)
    n_val = math.floor(fractions[1] * n + 0.5)
    return n_train, n_val, n - n_train - n_val


def assign_splits(mention_ids: Sequence[str], fractions: Sequence[float], seed: int) -> dict[str, set[str]]:
    """Seeded shuffle of the sorted id set, cut into train/validation/test."""
    ids = sorted(mention_ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_train, n_val, _ = split_sizes(len(ids), fractions)
    shuffled = [ids[i] for i in perm]
    return {
        "train": set(shuffled[:n_train]),
        "validation": set(shuffled[n_train:n_train + n_val]),
        "test": set(shuffled[n_train + n_val:]),
    }


@dataclass
class Dataset:
    manifest: DatasetManifest
    entities: list[FeatureRecord]
    mentions: list[FeatureRecord]
    splits: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.splits:
            self.resplit()

    def resplit(self) -> None:
        groups = assign_splits([m.id for m in self.mentions], self.manifest.split, self.manifest.seed)
        self.splits = {name: [i for i, m in enumerate(self.mentions) if m.id in groups[name]]
                       for name in SPLIT_NAMES}


def _dump_jsonl(path: Path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def _feature_path(jsonl: Path) -> Path:
    return jsonl.with_suffix(".feat")


def save_dataset(dataset: Dataset, directory: str | os.PathLike) -> Path:
    """Write a dataset directory; returns the manifest path."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    man = dataset.manifest

    ent_rows, ent_meta = [], []
    vis_rows = []
    for e in dataset.entities:
        ent_meta.append({"id": e.id, "name": e.surface_name, "text_row": len(ent_rows), "vision_row": None})
        ent_rows.append(e.text_feature)
    for meta, e in zip(ent_meta, dataset.entities):
        if e.vision_feature is not None:
            meta["vision_row"] = len(ent_rows) + len(vis_rows)
            vis_rows.append(e.vision_feature)
    write_features(_feature_path(out / man.entity_file), np.array(ent_rows + vis_rows).reshape(-1, man.feature_dim))
    _dump_jsonl(out / man.entity_file, ent_meta)

    tok_rows, m_meta = [], []
    for m in dataset.mentions:
        m_meta.append({"id": m.id, "surface": m.surface_name, "gold": m.gold_id,
                       "token_row": len(tok_rows), "token_count": int(m.token_features.shape[0]),
                       "vision_row": None})
        tok_rows.extend(m.token_features)
    vis_rows = []
    for meta, m in zip(m_meta, dataset.mentions):
        if m.vision_feature is not None:
            meta["vision_row"] = len(tok_rows) + len(vis_rows)
            vis_rows.append(m.vision_feature)
    write_features(_feature_path(out / man.mention_file), np.array(tok_rows + vis_rows).reshape(-1, man.feature_dim))
    _dump_jsonl(out / man.mention_file, m_meta)

    manifest_path = out / "manifest.json"
    payload = {"format_version": 1, **asdict(man), "split": list(man.split)}
    manifest_path.write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DatasetError(f"missing file {path}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
    return rows


def _row(feats: np.ndarray, idx, rid: str, what: str) -> np.ndarray | None:
    if idx is None:
        return None
    if not isinstance(idx, int) or not 0 <= idx < feats.shape[0]:
        raise DatasetError(f"{what} row {idx} out of range", rid)
    return feats[idx]


def load_manifest(path: str | os.PathLike) -> tuple[DatasetManifest, Path]:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    try:
        payload = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError(f"missing manifest {p}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{p}: malformed manifest ({exc.msg})") from None
    if payload.pop("format_version", 1) != 1:
        raise DatasetError(f"{p}: unsupported manifest version")
    try:
        return DatasetManifest(**payload), p.parent
    except TypeError as exc:
        raise DatasetError(f"{p}: {exc}") from None


def load_dataset(path: str | os.PathLike) -> Dataset:
    """Load a dataset directory (or its manifest.json) and compute splits."""
    man, root = load_manifest(path)
    ent_path, men_path = root / man.entity_file, root / man.mention_file
    for p in (_feature_path(ent_path), _feature_path(men_path)):
        if not p.exists():
            raise DatasetError(f"missing feature file {p}")
    ent_feats = read_features(_feature_path(ent_path))
    men_feats = read_features(_feature_path(men_path))
    for p, feats in ((ent_path, ent_feats), (men_path, men_feats)):
        if feats.shape[1] != man.feature_dim:
            raise DatasetError(f"{_feature_path(p)}: dim {feats.shape[1]} != manifest feature_dim {man.feature_dim}")

    entities, seen = [], set()
    for row in _read_jsonl(ent_path):
        rid = str(row.get("id"))
        if rid in seen:
            raise DatasetError("duplicate entity id", rid)
        seen.add(rid)
        text = _row(ent_feats, row.get("text_row"), rid, "text")
        if text is None:
            raise DatasetError("entity has no text feature", rid)
        entities.append(FeatureRecord(rid, row.get("name", ""), text_feature=text,
                                      vision_feature=_row(ent_feats, row.get("vision_row"), rid, "vision")))

    mentions, mseen = [], set()
    for row in _read_jsonl(men_path):
        rid = str(row.get("id"))
        if rid in mseen:
            raise DatasetError("duplicate mention id", rid)
        mseen.add(rid)
        gold = row.get("gold")
        if gold not in seen:
            raise DatasetError(f"gold entity {gold!r} not in entity file", rid)
        start, count = row.get("token_row"), row.get("token_count")
        if not isinstance(start, int) or not isinstance(count, int) or count < 1 \
                or start < 0 or start + count > men_feats.shape[0]:
            raise DatasetError(f"token rows [{start}, +{count}) out of range", rid)
        mentions.append(FeatureRecord(rid, row.get("surface", ""), token_features=men_feats[start:start + count],
                                      vision_feature=_row(men_feats, row.get("vision_row"), rid, "vision"),
                                      gold_id=gold))
    if not entities:
        raise DatasetError(f"{ent_path}: no entities")
    if not mentions:
        raise DatasetError(f"{men_path}: a dataset needs at least one mention")
    return Dataset(man, entities, mentions)


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

_ALPHABET = "abcdefghijklmnopqrstuvwxyz"


@dataclass
class SyntheticSpec:
    """Parameters of a generated corpus.

    Entity prototypes are unit-variance Gaussian vectors; entities of one
    cluster share a centroid and differ by ``cluster_spread``-scaled offsets.
    Each entity owns ``token_count`` token prototypes; its pooled text vector
    is their sum scaled by 1/sqrt(token_count), which keeps unit variance. A
    mention copies its gold entity's token prototypes and vision vector, each
    with independent N(0, noise^2) noise, so no single token identifies the
    entity and wider n-gram windows see more of the signal.

    Separability threshold: the pooled mention text carries isotropic noise of
    standard deviation ``noise`` per coordinate. For two entities whose pooled
    vectors are distance D apart, the bisecting hyperplane classifies a mention
    correctly with probability Phi(D / (2 * noise)), so in expectation a mention
    sits on its gold side by more than one noise standard deviation while
    ``noise < D / 2``. Independent prototypes give D ~ sqrt(2 * feature_dim),
    hence the threshold ``noise < sqrt(feature_dim / 2)`` (about 5.7 at the
    default width; the separable preset uses 1.0).
    """

    num_entities: int = 500
    num_clusters: int = 500
    mentions_per_entity: int = 4
    noise: float = 1.0
    cluster_spread: float = 0.5
    name_length: int = 8
    name_edits: int = 1
    token_count: int = 6
    feature_dim: int = 64
    seed: int = 0
    preset: str = "custom"

    def __post_init__(self):
        if self.num_entities < 1 or self.num_clusters < 1:
            raise ValueError("num_entities and num_clusters must be >= 1")
        if self.num_clusters > self.num_entities:
            raise ValueError("num_clusters cannot exceed num_entities")
        if self.noise < 0 or self.cluster_spread < 0:
            raise ValueError("noise and cluster_spread must be >= 0")
        if self.mentions_per_entity < 1 or self.token_count < 1 or self.feature_dim < 1:
            raise ValueError("mentions_per_entity, token_count and feature_dim must be >= 1")
        if self.name_length < 2 or self.name_edits < 0:
            raise ValueError("name_length must be >= 2 and name_edits >= 0")


PRESETS: dict[str, dict[str, Any]] = {
    "separable": dict(num_entities=500, num_clusters=500, mentions_per_entity=4, noise=1.0),
    "confusable": dict(num_entities=500, num_clusters=100, mentions_per_entity=4, noise=1.0,
                       cluster_spread=0.5),
}


def preset_spec(name: str, **overrides) -> SyntheticSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return SyntheticSpec(**{**PRESETS[name], "preset": name, **overrides})


def _perturb(name: str, edits: int, rng: np.random.Generator) -> str:
    s = list(name)
    for _ in range(edits):
        op = rng.integers(3) if len(s) > 1 else 1
        if op == 0:  # substitute
            s[rng.integers(len(s))] = _ALPHABET[rng.integers(26)]
        elif op == 1:  # insert
            s.insert(int(rng.integers(len(s) + 1)), _ALPHABET[rng.integers(26)])
        else:  # delete
            del s[rng.integers(len(s))]
    return "".join(s)


def _f32(x: np.ndarray) -> np.ndarray:
    # keep in-memory values exactly representable on disk
    return x.astype(np.float32).astype(np.float64)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    F, K, N = spec.feature_dim, spec.num_clusters, spec.num_entities
    cluster_of = np.arange(N) * K // N  # balanced, contiguous clusters
    T = spec.token_count
    tok_c = rng.standard_normal((K, T, F))
    vis_c = rng.standard_normal((K, F))
    tokens_proto = tok_c[cluster_of] + spec.cluster_spread * rng.standard_normal((N, T, F))
    vis = vis_c[cluster_of] + spec.cluster_spread * rng.standard_normal((N, F))
    if K == N:
        tokens_proto, vis = tok_c, vis_c
    text = tokens_proto.sum(axis=1) / np.sqrt(T)

    names: list[str] = []
    used: set[str] = set()
    for k in range(K):
        while True:
            base = "".join(_ALPHABET[i] for i in rng.integers(26, size=spec.name_length))
            if base not in used:
                break
        members = np.flatnonzero(cluster_of == k)
        positions = rng.permutation(spec.name_length)
        for j, _ in enumerate(members):
            if j == 0:
                name = base
            else:
                # one substitution per member at distinct positions where possible
                chars = list(base)
                pos = positions[(j - 1) % spec.name_length]
                choices = [c for c in _ALPHABET if c != chars[pos]]
                chars[pos] = choices[rng.integers(len(choices))]
                name = "".join(chars)
                while name in used:
                    name = _perturb(name, 1, rng)
            used.add(name)
            names.append(name)

    entities = [FeatureRecord(f"E{i:05d}", names[i].capitalize(), text_feature=_f32(text[i]),
                              vision_feature=_f32(vis[i])) for i in range(N)]
    mentions = []
    for i in range(N):
        for _ in range(spec.mentions_per_entity):
            tokens = tokens_proto[i] + spec.noise * rng.standard_normal((T, F))
            v = vis[i] + spec.noise * rng.standard_normal(F)
            surface = _perturb(names[i], spec.name_edits, rng)
            mid = f"M{len(mentions):06d}"
            mentions.append(FeatureRecord(mid, surface, token_features=_f32(tokens), vision_feature=_f32(v),
                                          gold_id=entities[i].id))

    sizes = np.bincount(cluster_of, minlength=K)
    manifest = DatasetManifest(
        name=f"synthetic-{spec.preset}", feature_dim=F, seed=spec.seed,
        extra={"synthetic": asdict(spec), "min_cluster_size": int(sizes.min()), "max_cluster_size": int(sizes.max())},
    )
    return Dataset(manifest, entities, mentions)


def cluster_members(dataset: Dataset) -> dict[str, list[str]]:
    """Entity id -> ids of the other entities in its synthetic cluster."""
    spec = dataset.manifest.extra.get("synthetic")
    if spec is None:
        raise DatasetError("dataset carries no synthetic cluster information")
    N, K = spec["num_entities"], spec["num_clusters"]
    cluster_of = np.arange(N) * K // N
    ids = [e.id for e in dataset.entities]
    out = {}
    for i, eid in enumerate(ids):
        out[eid] = [ids[j] for j in np.flatnonzero(cluster_of == cluster_of[i]) if j != i]
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict[str, Any]
    disc: dict[str, np.ndarray]
    gen: dict[str, np.ndarray]
    rng_state: dict[str, Any]
    epoch: int
    reports: list[dict[str, Any]] = field(default_factory=list)
    format_version: int = CHECKPOINT_VERSION


def checkpoint_bytes(cp: Checkpoint) -> bytes:
    tensors, blobs, offset = [], [], 0
    for group, state in (("disc", cp.disc), ("gen", cp.gen)):
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype="<f8")
            tensors.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    header = json.dumps({"config": cp.config, "epoch": cp.epoch, "rng_state": cp.rng_state,
                         "reports": cp.reports, "tensors": tensors}, sort_keys=True).encode("utf-8")
    body = _CKPT_HEADER.pack(CHECKPOINT_MAGIC, cp.format_version, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(cp: Checkpoint, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(cp))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size + 32:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    magic, version, hlen = _CKPT_HEADER.unpack_from(body)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(body[_CKPT_HEADER.size:_CKPT_HEADER.size + hlen].decode("utf-8"))
    data = body[_CKPT_HEADER.size + hlen:]
    groups: dict[str, dict[str, np.ndarray]] = {"disc": {}, "gen": {}}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=t["offset"]).reshape(t["shape"])
        groups[t["group"]][t["name"]] = arr.astype(np.float64)
    return Checkpoint(header["config"], groups["disc"], groups["gen"], header["rng_state"], header["epoch"],
                      header["reports"], version)
