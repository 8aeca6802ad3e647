"""Training objectives: weighted cross-entropy, the multi-positive contrastive
loss, its supervised-contrastive ablation, and the combined objective that
mixes the classification loss with the averaged per-leg contrastive terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import tensor as tt
from .errors import ConfigError, ContractError, ShapeError
from .layers import LinearParams, linear
from .tensor import Tensor


@dataclass
class ClassWeights:
    """Inverse-frequency class weights: w_j = N / N_j."""

    weights: np.ndarray  # (E,) float64
    class_counts: np.ndarray  # (E,) int64
    total: int


def class_weights_from_counts(counts: Sequence[int]) -> ClassWeights:
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0:
        raise ConfigError("class counts must be a non-empty 1-D sequence")
    if (counts <= 0).any():
        raise ConfigError(f"every class needs at least one sample, got {counts.tolist()}")
    total = int(counts.sum())
    return ClassWeights(
        weights=total / counts.astype(np.float64),
        class_counts=counts,
        total=total,
    )


class Objective(str, Enum):
    CE = "ce"
    CE_PLUS_MPCL = "ce_plus_mpcl"
    MLS_CE = "mls_ce"
    MLCS = "mlcs"
    MLCS_SCL = "mlcs_scl"


class ContrastiveVariant(str, Enum):
    MPCL = "mpcl"
    SCL = "scl"


@dataclass
class ContrastiveConfig:
    tau: float = 0.1
    variant: ContrastiveVariant = ContrastiveVariant.MPCL
    exclude_self: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("temperature must be positive")
        if not self.exclude_self:
            raise ConfigError("self-comparisons are always excluded from the candidate set")


@dataclass
class LossConfig:
    objective: Objective = Objective.MLCS
    alpha: float = 2.0
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    class_weights: Optional[ClassWeights] = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")


class ContrastiveStats(NamedTuple):
    anchors_used: int
    anchors_skipped: int
    all_skipped: bool


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError("labels must be 1-D")
    if labels.size and ((labels < 0).any() or (labels >= num_classes).any()):
        raise ContractError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels.astype(np.int64)


def weighted_cross_entropy(
    logits: Tensor, labels, weights: Optional[ClassWeights] = None
) -> Tensor:
    """Per-sample weighted NLL, normalized by the sum of applied weights.

    With ``weights=None`` this is the plain batch-mean cross-entropy.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    batch, num_classes = logits.shape
    labels = _check_labels(labels, num_classes)
    if labels.shape[0] != batch:
        raise ShapeError("one label per logits row required")
    log_probs = tt.log_softmax(logits, axis=-1)
    nll = tt.scale(tt.take_per_row(log_probs, labels), -1.0)  # (B,)
    if weights is None:
        return tt.reduce_mean(nll)
    if weights.weights.shape[0] != num_classes:
        raise ConfigError(
            f"class weights cover {weights.weights.shape[0]} classes, logits have {num_classes}"
        )
    applied = weights.weights[labels].astype(logits.dtype)
    return tt.scale(tt.reduce_sum(tt.mul(nll, applied)), 1.0 / float(applied.sum()))


def _pairwise_log_ratios(embeddings: Tensor, tau: float):
    """Self-masked pairwise similarity logits and their row log-softmax."""
    normed = tt.l2_normalize(embeddings, axis=-1)
    sims = tt.scale(tt.matmul(normed, tt.transpose_last(normed)), 1.0 / tau)
    batch = embeddings.shape[0]
    self_penalty = (-tt.MASK_FILL * np.eye(batch)).astype(embeddings.dtype)
    return tt.add(sims, self_penalty)


def _match_matrix(labels: np.ndarray) -> np.ndarray:
    match = (labels[:, None] == labels[None, :]).astype(np.float64)
    np.fill_diagonal(match, 0.0)
    return match


def mpcl_loss(
    embeddings: Tensor, labels, cfg: ContrastiveConfig
) -> tuple[Tensor, ContrastiveStats]:
    """Cross-entropy between the same-label target distribution and the
    softmax similarity distribution over the other in-batch samples.

    Embeddings are l2-normalized internally. Anchors without any positive are
    skipped; if every anchor is skipped the loss is exactly 0 and the stats
    say so.
    """
    if embeddings.ndim != 2:
        raise ShapeError(f"embeddings must be (batch, dim), got {embeddings.shape}")
    batch = embeddings.shape[0]
    if batch < 2:
        raise ContractError("contrastive losses need at least two samples")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch,):
        raise ShapeError("one label per embedding required")

    match = _match_matrix(labels)
    pos_counts = match.sum(axis=1)
    valid = pos_counts > 0
    used = int(valid.sum())
    stats = ContrastiveStats(used, batch - used, used == 0)
    if used == 0:
        return tt.constant(np.zeros(()), dtype=embeddings.dtype), stats

    target = np.zeros_like(match)
    target[valid] = match[valid] / pos_counts[valid, None]
    log_q = tt.log_softmax(_pairwise_log_ratios(embeddings, cfg.tau), axis=-1)
    per_anchor_sum = tt.reduce_sum(tt.mul(log_q, target.astype(embeddings.dtype)))
    loss = tt.scale(per_anchor_sum, -1.0 / used)
    return loss, stats


def scl_loss(
    embeddings: Tensor, labels, cfg: ContrastiveConfig
) -> tuple[Tensor, ContrastiveStats]:
    """Supervised contrastive form: per anchor, the mean over its positives of
    -log(exp(sim/tau) / sum over non-self candidates), averaged over anchors
    that have at least one positive.
    """
    if embeddings.ndim != 2:
        raise ShapeError(f"embeddings must be (batch, dim), got {embeddings.shape}")
    batch = embeddings.shape[0]
    if batch < 2:
        raise ContractError("contrastive losses need at least two samples")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch,):
        raise ShapeError("one label per embedding required")

    match = _match_matrix(labels)
    pos_counts = match.sum(axis=1)
    valid = pos_counts > 0
    used = int(valid.sum())
    stats = ContrastiveStats(used, batch - used, used == 0)
    if used == 0:
        return tt.constant(np.zeros(()), dtype=embeddings.dtype), stats

    logits = _pairwise_log_ratios(embeddings, cfg.tau)
    # row-wise log-sum-exp with a detached shift (gradient is softmax either way)
    shift = logits.data.max(axis=-1, keepdims=True)
    lse = tt.add(
        tt.log(tt.reduce_sum(tt.exp(tt.sub(logits, shift)), axis=-1, keepdims=True)),
        shift,
    )
    log_ratio = tt.sub(logits, lse)  # (B, B)
    inv_pos = np.zeros(batch)
    inv_pos[valid] = 1.0 / pos_counts[valid]
    pair_weights = (match * inv_pos[:, None]).astype(embeddings.dtype)
    loss = tt.scale(tt.reduce_sum(tt.mul(log_ratio, pair_weights)), -1.0 / used)
    return loss, stats


@dataclass
class LossBreakdown:
    """Per-term values for logging; all floats, detached from the graph."""

    total: float
    wce: float
    leg_terms: list[float]
    leg_skipped: list[bool]
    alpha: float


def combined_objective(
    logits: Tensor,
    csl_embeddings: Sequence[Tensor],
    labels,
    cfg: LossConfig,
    leg_inputs: Optional[Sequence[Tensor]] = None,
    probes: Optional[Sequence[LinearParams]] = None,
) -> tuple[Tensor, LossBreakdown]:
    """Classification loss plus alpha times the averaged per-leg auxiliary terms.

    Objective variants:
      CE            -- weighted cross-entropy only
      CE_PLUS_MPCL  -- WCE + alpha * MPCL on the classifier-leg embedding
      MLCS          -- WCE + alpha * mean over legs of MPCL
      MLCS_SCL      -- as MLCS with the SCL form
      MLS_CE        -- WCE + alpha * mean over legs of WCE through linear probes
                       attached to the raw leg inputs (probes are training-only)
    """
    csl_embeddings = list(csl_embeddings)
    wce = weighted_cross_entropy(logits, labels, cfg.class_weights)
    if cfg.objective is Objective.CE:
        return wce, LossBreakdown(wce.item(), wce.item(), [], [], cfg.alpha)

    contrastive_fn = scl_loss if cfg.objective is Objective.MLCS_SCL else mpcl_loss

    if cfg.objective is Objective.CE_PLUS_MPCL:
        if not csl_embeddings:
            raise ConfigError("CE_PLUS_MPCL needs the classifier-leg embedding")
        term, stats = mpcl_loss(csl_embeddings[-1], labels, cfg.contrastive)
        total = tt.add(wce, tt.scale(term, cfg.alpha))
        return total, LossBreakdown(
            total.item(), wce.item(), [term.item()], [stats.all_skipped], cfg.alpha
        )

    if cfg.objective in (Objective.MLCS, Objective.MLCS_SCL):
        if not csl_embeddings:
            raise ConfigError(f"{cfg.objective.value} needs at least one CSL embedding")
        terms = []
        skipped = []
        for emb in csl_embeddings:
            term, stats = contrastive_fn(emb, labels, cfg.contrastive)
            terms.append(term)
            skipped.append(stats.all_skipped)
        mean_term = tt.scale(_sum_terms(terms), 1.0 / len(terms))
        total = tt.add(wce, tt.scale(mean_term, cfg.alpha))
        return total, LossBreakdown(
            total.item(), wce.item(), [t.item() for t in terms], skipped, cfg.alpha
        )

    if cfg.objective is Objective.MLS_CE:
        if leg_inputs is None or probes is None:
            raise ConfigError("MLS_CE needs per-leg inputs and linear probe heads")
        leg_inputs = list(leg_inputs)
        probes = list(probes)
        if len(leg_inputs) != len(probes) or not probes:
            raise ConfigError(
                f"{len(probes)} probes for {len(leg_inputs)} leg inputs"
            )
        terms = [
            weighted_cross_entropy(linear(p, x), labels, cfg.class_weights)
            for p, x in zip(probes, leg_inputs)
        ]
        mean_term = tt.scale(_sum_terms(terms), 1.0 / len(terms))
        total = tt.add(wce, tt.scale(mean_term, cfg.alpha))
        return total, LossBreakdown(
            total.item(), wce.item(), [t.item() for t in terms], [False] * len(terms), cfg.alpha
        )

    raise ConfigError(f"unknown objective {cfg.objective!r}")


def _sum_terms(terms: Sequence[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = tt.add(acc, t)
    return acc
