"""Mention/entity encoders: n-gram CNN over token features, linear projections,
and gated multimodal fusion into a shared embedding space."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Mapping

import numpy as np

from . import numeric as nm
from .numeric import ContractViolation, Parameter, Tape, Var


@dataclass(frozen=True)
class EncoderConfig:
    d1: int = 128
    d2: int = 256
    d3: int = 256
    gated_modality: str = "text"
    filter_widths: tuple[int, ...] = (1, 2, 3)
    use_gated_fusion: bool = True
    feature_dim_in: int = 768
    mention_vision: bool = True
    entity_vision: bool = True
    dropout: float = 0.3

    def __post_init__(self):
        if min(self.d1, self.d2, self.d3) < 1:
            raise ContractViolation("d1, d2, d3 must be >= 1")
        if not self.filter_widths or not set(self.filter_widths) <= {1, 2, 3}:
            raise ContractViolation(f"filter_widths must be a nonempty subset of {{1,2,3}}: {self.filter_widths}")
        if self.gated_modality not in ("text", "vision"):
            raise ContractViolation(f"gated_modality must be 'text' or 'vision': {self.gated_modality}")
        if self.feature_dim_in < 1:
            raise ContractViolation("feature_dim_in must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractViolation("dropout must lie in [0, 1)")
        object.__setattr__(self, "filter_widths", tuple(sorted(set(self.filter_widths))))

    @property
    def text_width(self) -> int:
        return len(self.filter_widths) * self.d1


ABLATIONS = ("full", "text-only", "entity-text-only", "no-gated-fusion", "cnn-k1", "cnn-k12")


def apply_ablation(config: EncoderConfig, ablation: str) -> EncoderConfig:
    if ablation == "full":
        return config
    if ablation == "text-only":
        return replace(config, mention_vision=False, entity_vision=False)
    if ablation == "entity-text-only":
        return replace(config, entity_vision=False)
    if ablation == "no-gated-fusion":
        return replace(config, use_gated_fusion=False)
    if ablation == "cnn-k1":
        return replace(config, filter_widths=(1,))
    if ablation == "cnn-k12":
        return replace(config, filter_widths=(1, 2))
    raise ContractViolation(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")


@dataclass
class FeatureRecord:
    """A mention (token sequence) or an entity (pooled text vector)."""

    id: str
    surface_name: str
    token_features: np.ndarray | None = None
    text_feature: np.ndarray | None = None
    vision_feature: np.ndarray | None = None
    gold_id: str | None = None

    @property
    def is_mention(self) -> bool:
        return self.token_features is not None


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _side_shapes(config: EncoderConfig, side: str) -> dict[str, tuple[int, ...]]:
    F, d1, d2, d3 = config.feature_dim_in, config.d1, config.d2, config.d3
    has_vision = config.mention_vision if side == "mention" else config.entity_vision
    shapes: dict[str, tuple[int, ...]] = {}
    if side == "mention":
        for k in config.filter_widths:
            shapes[f"mention.conv{k}.weight"] = (k, F, d1)
            shapes[f"mention.conv{k}.bias"] = (d1,)
        text_in = config.text_width
    else:
        shapes["entity.text_in.weight"] = (F, 3 * d1)
        shapes["entity.text_in.bias"] = (3 * d1,)
        text_in = 3 * d1
    shapes[f"{side}.text_joint.weight"] = (text_in, d2)
    if has_vision:
        shapes[f"{side}.vision_in.weight"] = (F, 3 * d1)
        shapes[f"{side}.vision_in.bias"] = (3 * d1,)
        shapes[f"{side}.vision_joint.weight"] = (3 * d1, d2)
        if config.use_gated_fusion:
            shapes[f"{side}.gate.weight"] = (2 * d2, d2)
            shapes[f"{side}.gate.bias"] = (d2,)
    shapes[f"{side}.fuse.weight"] = ((2 if has_vision else 1) * d2, d3)
    shapes[f"{side}.fuse.bias"] = (d3,)
    return shapes


def encoder_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    return {**_side_shapes(config, "mention"), **_side_shapes(config, "entity")}


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> dict[str, Parameter]:
    params = {}
    for name, shape in encoder_shapes(config).items():
        if name.endswith(".bias"):
            value = np.zeros(shape)
        elif ".conv" in name:
            k, F, d = shape
            value = _glorot(rng, k * F, d, shape)
        else:
            value = _glorot(rng, shape[0], shape[1], shape)
        params[name] = Parameter(name, value)
    return params


class Dropout:
    """Seeded dropout-mask source. Pass ``None`` instead of one for eval mode."""

    def __init__(self, rng: np.random.Generator, rate: float):
        self.rng = rng
        self.rate = rate

    def __call__(self, x: Var) -> Var:
        if self.rate == 0.0:
            return x
        mask = self.rng.random(x.shape) >= self.rate
        return nm.dropout(x, mask, self.rate)


def _maybe_drop(x: Var, drop: Dropout | None) -> Var:
    return x if drop is None else drop(x)


def _linear(x: Var, w: Mapping[str, Var], name: str) -> Var:
    return x @ w[f"{name}.weight"] + w[f"{name}.bias"]


def pad_tokens(seqs: Iterable[np.ndarray], min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token matrices with zeros to a common length of at least ``min_len``."""
    seqs = list(seqs)
    if not seqs:
        raise ContractViolation("pad_tokens: empty batch")
    lengths = np.array([s.shape[0] for s in seqs], dtype=np.int64)
    if np.any(lengths < 1):
        raise ContractViolation("mention token sequence must be nonempty")
    L = max(int(lengths.max()), min_len)
    F = seqs[0].shape[1]
    out = np.zeros((len(seqs), L, F))
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
    return out, lengths


def mention_text_features(
    tokens: Var, lengths: np.ndarray, w: Mapping[str, Var], config: EncoderConfig
) -> Var:
    """Max-pooled leaky-relu n-gram convolutions, concatenated over filter widths.

    ``tokens`` is (B, L, F), zero padded on the right with L >= max filter width.
    Output is (B, |filter_widths| * d1).
    """
    if tokens.shape[-1] != config.feature_dim_in:
        raise ContractViolation(f"token width {tokens.shape[-1]} != feature_dim_in {config.feature_dim_in}")
    L = tokens.shape[1]
    parts = []
    for k in config.filter_widths:
        conv = nm.conv1d(tokens, w[f"mention.conv{k}.weight"]) + w[f"mention.conv{k}.bias"]
        valid = np.minimum(np.maximum(lengths, k) - k + 1, L - k + 1)
        parts.append(nm.maxpool(nm.leaky_relu(conv), valid))
    return parts[0] if len(parts) == 1 else nm.concat(parts, axis=-1)


def project(x: Var, w: Mapping[str, Var], name: str, config: EncoderConfig) -> Var:
    """Affine map from raw feature width to 3*d1 (no nonlinearity)."""
    if x.shape[-1] != config.feature_dim_in:
        raise ContractViolation(f"{name}: width {x.shape[-1]} != feature_dim_in {config.feature_dim_in}")
    return _linear(x, w, name)


def fuse(
    text_feat: Var, vision_feat: Var | None, w: Mapping[str, Var], config: EncoderConfig, side: str
) -> Var:
    """Gated multimodal fusion into a d3 embedding.

    Both modalities are projected to d2; a sigmoid gate computed from the two
    projections scales the configured modality; the concatenation goes through
    an affine map and tanh. With a single modality the gate is skipped.
    """
    has_vision = config.mention_vision if side == "mention" else config.entity_vision
    if has_vision and vision_feat is None:
        raise ContractViolation(f"{side}: vision feature missing but the model expects one")
    p_t = text_feat @ w[f"{side}.text_joint.weight"]
    if not has_vision:
        return nm.tanh(_linear(p_t, w, f"{side}.fuse"))
    p_v = vision_feat @ w[f"{side}.vision_joint.weight"]
    if config.use_gated_fusion:
        gate = nm.sigmoid(_linear(nm.concat([p_t, p_v], axis=-1), w, f"{side}.gate"))
        if config.gated_modality == "text":
            p_t = gate * p_t
        else:
            p_v = gate * p_v
    return nm.tanh(_linear(nm.concat([p_t, p_v], axis=-1), w, f"{side}.fuse"))


def embed_mentions(
    tape: Tape,
    w: Mapping[str, Var],
    token_seqs: list[np.ndarray],
    visions: list[np.ndarray | None],
    config: EncoderConfig,
    drop: Dropout | None = None,
) -> Var:
    tokens, lengths = pad_tokens(token_seqs, max(config.filter_widths))
    text = _maybe_drop(mention_text_features(tape.constant(tokens), lengths, w, config), drop)
    vis = None
    if config.mention_vision:
        if any(v is None for v in visions):
            raise ContractViolation("mention: vision feature missing but the model expects one")
        vis = _maybe_drop(project(tape.constant(np.stack(visions)), w, "mention.vision_in", config), drop)
    return fuse(text, vis, w, config, "mention")


def embed_entities(
    tape: Tape,
    w: Mapping[str, Var],
    texts: np.ndarray,
    visions: np.ndarray | None,
    config: EncoderConfig,
    drop: Dropout | None = None,
) -> Var:
    text = _maybe_drop(project(tape.constant(texts), w, "entity.text_in", config), drop)
    vis = None
    if config.entity_vision:
        if visions is None:
            raise ContractViolation("entity: vision feature missing but the model expects one")
        vis = _maybe_drop(project(tape.constant(visions), w, "entity.vision_in", config), drop)
    return fuse(text, vis, w, config, "entity")


# ---------------------------------------------------------------------------
# single-record conveniences (forward only)
# ---------------------------------------------------------------------------

def _bind(tape: Tape, params: Mapping[str, Parameter]) -> dict[str, Var]:
    return {name: tape.watch(p, trainable=False) for name, p in params.items()}


def encode_mention_text(tokens: np.ndarray, params: Mapping[str, Parameter], config: EncoderConfig) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ContractViolation("encode_mention_text: need a nonempty (L, F) token matrix")
    tape = Tape()
    padded, lengths = pad_tokens([tokens], max(config.filter_widths))
    out = mention_text_features(tape.constant(padded), lengths, _bind(tape, params), config)
    return out.value[0]


def project_vision(v: np.ndarray, params: Mapping[str, Parameter], config: EncoderConfig,
                   side: str = "mention") -> np.ndarray:
    tape = Tape()
    x = tape.constant(np.asarray(v, dtype=np.float64)[None, :])
    return project(x, _bind(tape, params), f"{side}.vision_in", config).value[0]


def encode_entity_text(t: np.ndarray, params: Mapping[str, Parameter], config: EncoderConfig) -> np.ndarray:
    tape = Tape()
    x = tape.constant(np.asarray(t, dtype=np.float64)[None, :])
    return project(x, _bind(tape, params), "entity.text_in", config).value[0]


def gmu_fuse(text_feat: np.ndarray, vision_feat: np.ndarray | None, params: Mapping[str, Parameter],
             config: EncoderConfig, side: str = "mention") -> np.ndarray:
    tape = Tape()
    t = tape.constant(np.asarray(text_feat, dtype=np.float64)[None, :])
    v = None if vision_feat is None else tape.constant(np.asarray(vision_feat, dtype=np.float64)[None, :])
    return fuse(t, v, _bind(tape, params), config, side).value[0]
