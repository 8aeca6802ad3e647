"""Full bimodal architecture: unimodal encoders, cross-modal block with
residuals and attention pooling, classifier block, and the five contrastive
supervision legs (three in unimodal mode).

The legs never feed the logits path, so inference can skip them entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ContractError, DegenerateInputError, ShapeError
from .layers import (
    AttentionPoolingParams,
    CrossAttentionParams,
    CslParams,
    GruParams,
    LayerNormParams,
    LinearParams,
    attention_pool,
    bi_gru,
    cross_attention,
    csl_forward,
    init_attention_pooling,
    init_cross_attention,
    init_csl,
    init_gru,
    init_identity_linear,
    init_layer_norm,
    init_linear,
    layer_norm,
    linear,
    validate_prefix_mask,
)
from .tensor import Tensor

GROUP_MAIN = "MAIN"
GROUP_ENCODER = "ENCODER"


class ModalityMode(str, Enum):
    BIMODAL = "bimodal"
    SPEECH_ONLY = "speech_only"
    TEXT_ONLY = "text_only"


@dataclass
class ModelConfig:
    speech_feat_dim: int
    text_feat_dim: int
    num_classes: int
    hidden: int = 512
    attention_heads: int = 1
    csl_dim: int = 128
    modality_mode: ModalityMode = ModalityMode.BIMODAL
    encoder_stub: bool = False

    def __post_init__(self):
        self.modality_mode = ModalityMode(self.modality_mode)
        if self.hidden <= 0:
            raise ConfigError("hidden dim must be positive")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.speech_feat_dim <= 0 or self.text_feat_dim <= 0:
            raise ConfigError("feature dims must be positive")
        if self.csl_dim <= 0:
            raise ConfigError("contrastive embedding dim must be positive")
        if (2 * self.hidden) % self.attention_heads != 0:
            raise ConfigError("2*hidden must be divisible by the head count")

    @property
    def seq_dim(self) -> int:
        """Per-modality sequence feature width after the bi-GRU."""
        return 2 * self.hidden

    @property
    def fused_dim(self) -> int:
        return 4 * self.hidden if self.modality_mode is ModalityMode.BIMODAL else 2 * self.hidden

    @property
    def num_csl_legs(self) -> int:
        return 5 if self.modality_mode is ModalityMode.BIMODAL else 3


@dataclass
class Batch:
    """Padded per-utterance features with prefix validity masks."""

    speech: np.ndarray  # (B, F_max, D_s)
    speech_mask: np.ndarray  # (B, F_max) 0/1
    text: np.ndarray  # (B, L_max, D_t)
    text_mask: np.ndarray  # (B, L_max) 0/1
    labels: np.ndarray  # (B,) int
    ids: Optional[list[str]] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.speech.ndim != 3 or self.text.ndim != 3:
            raise ShapeError("speech/text features must be (batch, time, dim)")
        b = self.speech.shape[0]
        if self.text.shape[0] != b or self.labels.shape != (b,):
            raise ShapeError("batch sizes disagree across fields")
        if b == 0:
            raise ContractError("empty batch")
        self.speech_mask = validate_prefix_mask(self.speech_mask)
        self.text_mask = validate_prefix_mask(self.text_mask)
        if self.speech_mask.shape != self.speech.shape[:2]:
            raise ShapeError("speech mask shape mismatch")
        if self.text_mask.shape != self.text.shape[:2]:
            raise ShapeError("text mask shape mismatch")
        if (self.speech_mask.sum(axis=1) == 0).any() or (self.text_mask.sum(axis=1) == 0).any():
            raise DegenerateInputError("every row needs at least one valid position")

    @property
    def size(self) -> int:
        return self.speech.shape[0]


@dataclass
class ModalityParams:
    stub: Optional[LinearParams]  # identity-initialized square map (ENCODER group)
    proj: LinearParams  # D -> h
    norm: LayerNormParams
    gru: GruParams


@dataclass
class CrabParams:
    config: ModelConfig
    speech: Optional[ModalityParams]
    text: Optional[ModalityParams]
    speech_query_attn: Optional[CrossAttentionParams]
    text_query_attn: Optional[CrossAttentionParams]
    speech_pool: Optional[AttentionPoolingParams]
    text_pool: Optional[AttentionPoolingParams]
    classifier_norm: LayerNormParams
    classifier_fc1: LinearParams  # fused_dim -> h
    classifier_fc2: LinearParams  # h -> E
    csls: list[CslParams]


@dataclass
class CrabOutput:
    logits: Tensor  # (B, E)
    csl_embeddings: list[Tensor]  # one (B, csl_dim) per leg; empty when skipped
    leg_inputs: list[Tensor]  # raw representations the legs attach to
    fused: Tensor  # (B, fused_dim)
    pooling_weights: dict[str, np.ndarray]  # modality -> (B, T) softmax weights


def init_params(cfg: ModelConfig, seed: int) -> CrabParams:
    """Seeded parameter initialization; draw order is fixed by construction."""
    rng = np.random.default_rng(seed)
    mode = cfg.modality_mode

    def modality(feat_dim: int) -> ModalityParams:
        return ModalityParams(
            stub=init_identity_linear(feat_dim) if cfg.encoder_stub else None,
            proj=init_linear(rng, feat_dim, cfg.hidden),
            norm=init_layer_norm(cfg.hidden),
            gru=init_gru(rng, cfg.hidden, cfg.hidden),
        )

    speech = modality(cfg.speech_feat_dim) if mode is not ModalityMode.TEXT_ONLY else None
    text = modality(cfg.text_feat_dim) if mode is not ModalityMode.SPEECH_ONLY else None

    bimodal = mode is ModalityMode.BIMODAL
    d = cfg.seq_dim
    speech_query_attn = init_cross_attention(rng, d, cfg.attention_heads) if bimodal else None
    text_query_attn = init_cross_attention(rng, d, cfg.attention_heads) if bimodal else None
    speech_pool = init_attention_pooling(rng, d) if speech is not None else None
    text_pool = init_attention_pooling(rng, d) if text is not None else None

    csls = [
        init_csl(rng, in_dim, cfg.csl_dim) for in_dim in _leg_input_dims(cfg)
    ]
    return CrabParams(
        config=cfg,
        speech=speech,
        text=text,
        speech_query_attn=speech_query_attn,
        text_query_attn=text_query_attn,
        speech_pool=speech_pool,
        text_pool=text_pool,
        classifier_norm=init_layer_norm(cfg.fused_dim),
        classifier_fc1=init_linear(rng, cfg.fused_dim, cfg.hidden),
        classifier_fc2=init_linear(rng, cfg.hidden, cfg.num_classes),
        csls=csls,
    )


def _leg_input_dims(cfg: ModelConfig) -> list[int]:
    d = cfg.seq_dim
    if cfg.modality_mode is ModalityMode.BIMODAL:
        # speech-unimodal, text-unimodal, speech-pooled, text-pooled, classifier-hidden
        return [d, d, d, d, cfg.hidden]
    # unimodal leg, pooled leg, classifier-hidden
    return [d, d, cfg.hidden]


def forward(
    params: CrabParams, batch: Batch, cfg: Optional[ModelConfig] = None, compute_csl: bool = True
) -> CrabOutput:
    """Run the architecture on one batch.

    ``compute_csl=False`` (the inference path) skips the supervision legs
    entirely; logits are unaffected because no leg feeds the classifier.
    """
    cfg = cfg or params.config
    mode = cfg.modality_mode
    leg_inputs: list[Tensor] = []
    pooling_weights: dict[str, np.ndarray] = {}

    def encode(mp: ModalityParams, feats: np.ndarray, mask: np.ndarray, expect_dim: int):
        if feats.shape[-1] != expect_dim:
            raise ShapeError(
                f"batch feature dim {feats.shape[-1]} does not match config {expect_dim}"
            )
        x = tt.constant(feats, dtype=tt.get_default_dtype())
        if mp.stub is not None:
            x = linear(mp.stub, x)
        x = layer_norm(mp.norm, linear(mp.proj, x))
        return bi_gru(mp.gru, x, mask)

    if mode is ModalityMode.BIMODAL:
        speech_seq = encode(params.speech, batch.speech, batch.speech_mask, cfg.speech_feat_dim)
        text_seq = encode(params.text, batch.text, batch.text_mask, cfg.text_feat_dim)
        leg_inputs.append(tt.reduce_mean(speech_seq, axis=1, mask=batch.speech_mask))
        leg_inputs.append(tt.reduce_mean(text_seq, axis=1, mask=batch.text_mask))

        speech_attended = cross_attention(
            params.speech_query_attn, speech_seq, text_seq, batch.text_mask
        )
        text_attended = cross_attention(
            params.text_query_attn, text_seq, speech_seq, batch.speech_mask
        )
        speech_res = tt.add(speech_seq, speech_attended)
        text_res = tt.add(text_seq, text_attended)

        speech_pooled, w_s = attention_pool(
            params.speech_pool, speech_res, batch.speech_mask, return_weights=True
        )
        text_pooled, w_t = attention_pool(
            params.text_pool, text_res, batch.text_mask, return_weights=True
        )
        pooling_weights["speech"] = w_s
        pooling_weights["text"] = w_t
        leg_inputs.append(speech_pooled)
        leg_inputs.append(text_pooled)
        fused = tt.concat([speech_pooled, text_pooled], axis=-1)
    else:
        if mode is ModalityMode.SPEECH_ONLY:
            mp, pool_p, feats, mask, dim, name = (
                params.speech,
                params.speech_pool,
                batch.speech,
                batch.speech_mask,
                cfg.speech_feat_dim,
                "speech",
            )
        else:
            mp, pool_p, feats, mask, dim, name = (
                params.text,
                params.text_pool,
                batch.text,
                batch.text_mask,
                cfg.text_feat_dim,
                "text",
            )
        seq = encode(mp, feats, mask, dim)
        leg_inputs.append(tt.reduce_mean(seq, axis=1, mask=mask))
        pooled, w = attention_pool(pool_p, seq, mask, return_weights=True)
        pooling_weights[name] = w
        leg_inputs.append(pooled)
        fused = pooled

    hidden = linear(params.classifier_fc1, layer_norm(params.classifier_norm, fused))
    leg_inputs.append(hidden)  # classifier leg taps pre-activation
    logits = linear(params.classifier_fc2, tt.relu(hidden))

    csl_embeddings: list[Tensor] = []
    if compute_csl:
        if len(params.csls) != len(leg_inputs):
            raise ConfigError(
                f"{len(params.csls)} CSL heads for {len(leg_inputs)} attachment points"
            )
        csl_embeddings = [csl_forward(p, x) for p, x in zip(params.csls, leg_inputs)]

    return CrabOutput(
        logits=logits,
        csl_embeddings=csl_embeddings,
        leg_inputs=leg_inputs,
        fused=fused,
        pooling_weights=pooling_weights,
    )


# ---------------------------------------------------------------------------
# parameter traversal


def _linear_items(prefix: str, p: LinearParams):
    yield f"{prefix}.weight", p.weight
    yield f"{prefix}.bias", p.bias


def _norm_items(prefix: str, p: LayerNormParams):
    yield f"{prefix}.gain", p.gain
    yield f"{prefix}.shift", p.shift


def _gru_items(prefix: str, p: GruParams):
    for tag, direction in (("fwd", p.fwd), ("bwd", p.bwd)):
        for name in (
            "w_update",
            "w_reset",
            "w_candidate",
            "u_update",
            "u_reset",
            "u_candidate",
            "b_update",
            "b_reset",
            "b_candidate",
        ):
            yield f"{prefix}.{tag}.{name}", getattr(direction, name)


def _attn_items(prefix: str, p: CrossAttentionParams):
    for name in ("query_proj", "key_proj", "value_proj", "out_proj"):
        yield f"{prefix}.{name}", getattr(p, name)


def named_parameters(params: CrabParams) -> list[tuple[str, Tensor, str]]:
    """Deterministic (name, tensor, group) listing of every trainable tensor."""
    items: list[tuple[str, Tensor, str]] = []

    def emit(it, group=GROUP_MAIN):
        for name, t in it:
            items.append((name, t, group))

    for mod_name, mp in (("speech", params.speech), ("text", params.text)):
        if mp is None:
            continue
        if mp.stub is not None:
            emit(_linear_items(f"{mod_name}.stub", mp.stub), GROUP_ENCODER)
        emit(_linear_items(f"{mod_name}.proj", mp.proj))
        emit(_norm_items(f"{mod_name}.norm", mp.norm))
        emit(_gru_items(f"{mod_name}.gru", mp.gru))
    if params.speech_query_attn is not None:
        emit(_attn_items("cross.speech_query", params.speech_query_attn))
    if params.text_query_attn is not None:
        emit(_attn_items("cross.text_query", params.text_query_attn))
    if params.speech_pool is not None:
        items.append(("pool.speech.query", params.speech_pool.query, GROUP_MAIN))
    if params.text_pool is not None:
        items.append(("pool.text.query", params.text_pool.query, GROUP_MAIN))
    emit(_norm_items("classifier.norm", params.classifier_norm))
    emit(_linear_items("classifier.fc1", params.classifier_fc1))
    emit(_linear_items("classifier.fc2", params.classifier_fc2))
    for i, csl in enumerate(params.csls):
        emit(_linear_items(f"csl.{i}.fc1", csl.fc1))
        emit(_linear_items(f"csl.{i}.fc2", csl.fc2))
    return items


def parameter_groups(params: CrabParams) -> dict[str, list[tuple[str, Tensor]]]:
    """Total, disjoint partition into MAIN and ENCODER groups."""
    groups: dict[str, list[tuple[str, Tensor]]] = {GROUP_MAIN: [], GROUP_ENCODER: []}
    for name, tensor, group in named_parameters(params):
        groups[group].append((name, tensor))
    return groups


def count_parameters(params: CrabParams) -> int:
    return sum(t.size for _, t, _ in named_parameters(params))


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form scalar parameter count for a given configuration.

    Per modality: stub (D^2+D, if enabled) + projection (hD+h) + norm (2h)
    + bi-GRU (2 directions x (6h^2+3h)). Bimodal adds two cross-attention
    blocks (4 (2h)^2 each). Each pooled modality adds a 2h scoring vector.
    Classifier: norm (2 Df) + fc1 (h Df + h) + fc2 (E h + E). Each CSL head
    attached at width d adds (d^2+d) + (c d + c).
    """
    h, e, c = cfg.hidden, cfg.num_classes, cfg.csl_dim
    d = cfg.seq_dim
    df = cfg.fused_dim

    def modality_count(feat_dim: int) -> int:
        n = feat_dim * h + h  # projection
        n += 2 * h  # layer norm
        n += 2 * (6 * h * h + 3 * h)  # bi-GRU
        if cfg.encoder_stub:
            n += feat_dim * feat_dim + feat_dim
        return n

    total = 0
    if cfg.modality_mode is not ModalityMode.TEXT_ONLY:
        total += modality_count(cfg.speech_feat_dim) + d  # + pooling vector
    if cfg.modality_mode is not ModalityMode.SPEECH_ONLY:
        total += modality_count(cfg.text_feat_dim) + d
    if cfg.modality_mode is ModalityMode.BIMODAL:
        total += 2 * 4 * d * d  # two cross-attention blocks
    total += 2 * df + (h * df + h) + (e * h + e)  # classifier
    for leg_dim in _leg_input_dims(cfg):
        total += leg_dim * leg_dim + leg_dim + c * leg_dim + c
    return total
