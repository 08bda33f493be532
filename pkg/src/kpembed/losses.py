"""Training losses: hard-mined triplet terms with visibility masking, heatmap
reconstruction, visibility cross-entropy, and classification.

The triplet term is computed twice: once per keypoint on the subvectors of
samples whose keypoint is visible, and once on the whole embedding over the
full batch. Mining follows the hardest-positive / hardest-negative rule
within the batch; the mining decision itself is made on detached distances
and only the selected pair distances carry gradient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError, TrainingDivergenceError
from .model import AlignedEmbedding
from .tensor import Tensor

__all__ = [
    "LossWeights",
    "MiningResult",
    "soft_margin_triplet",
    "batch_hard_mine",
    "batch_triplet_loss",
    "per_keypoint_triplet_terms",
    "kp_triplet_loss",
    "heatmap_mse",
    "visibility_bce",
    "classification_ce",
    "total_loss",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative weights of the four loss components."""

    triplet: float = 10.0
    heatmap: float = 1000.0
    visibility: float = 1.0
    classification: float = 1.0

    def __post_init__(self):
        for name, v in self.as_dict().items():
            if not np.isfinite(v) or v < 0:
                raise ContractError(f"loss weight {name} must be finite and >= 0, got {v}")

    def as_dict(self) -> dict[str, float]:
        return {
            "triplet": self.triplet,
            "heatmap": self.heatmap,
            "visibility": self.visibility,
            "classification": self.classification,
        }


def soft_margin_triplet(d_ap, d_an):
    """softplus(d_ap - d_an): a margin-free triplet penalty, overflow-safe."""
    if isinstance(d_ap, Tensor) or isinstance(d_an, Tensor):
        d_ap = d_ap if isinstance(d_ap, Tensor) else Tensor(np.asarray(d_ap, dtype=np.float64))
        d_an = d_an if isinstance(d_an, Tensor) else Tensor(np.asarray(d_an, dtype=np.float64))
        return (d_ap - d_an).softplus()
    z = float(d_ap) - float(d_an)
    return float(max(z, 0.0) + np.log1p(np.exp(-abs(z))))


@dataclass
class MiningResult:
    """Hardest positive/negative picks per anchor.

    ``valid[a]`` is True iff anchor ``a`` has at least one positive and one
    negative in the batch. ``d_ap``/``d_an`` hold the differentiable
    distances for the valid anchors, in ascending anchor order.
    """

    valid: np.ndarray
    pos_index: np.ndarray
    neg_index: np.ndarray
    d_ap: Tensor | None
    d_an: Tensor | None

    @property
    def num_valid(self) -> int:
        return int(self.valid.sum())


def _pairwise_dist_matrix(emb: np.ndarray) -> np.ndarray:
    sq = np.sum(emb * emb, axis=1)
    d2 = sq[:, None] - 2.0 * emb @ emb.T + sq[None, :]
    return np.sqrt(np.maximum(d2, 0.0))


def _euclidean_rows(a: Tensor, b: Tensor) -> Tensor:
    diff = a - b
    return ((diff * diff).sum(axis=1)).sqrt()


def batch_hard_mine(embeddings: Tensor, labels: np.ndarray) -> MiningResult:
    """For each anchor pick the farthest same-label and nearest different-label
    sample (Euclidean distance); anchors lacking either are marked invalid."""
    m = embeddings.shape[0]
    if m < 2:
        raise ContractError(f"mining needs at least 2 samples, got {m}")
    labels = np.asarray(labels)
    if labels.shape != (m,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {m}")

    dist = _pairwise_dist_matrix(embeddings.data)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]

    pos_index = np.full(m, -1, dtype=np.int64)
    neg_index = np.full(m, -1, dtype=np.int64)
    valid = np.zeros(m, dtype=bool)
    for a in range(m):
        pos = np.where(same[a])[0]
        neg = np.where(diff[a])[0]
        if pos.size == 0 or neg.size == 0:
            continue
        valid[a] = True
        pos_index[a] = pos[np.argmax(dist[a, pos])]
        neg_index[a] = neg[np.argmin(dist[a, neg])]

    if not valid.any():
        return MiningResult(valid, pos_index, neg_index, None, None)

    anchors = np.where(valid)[0]
    e_a = embeddings[anchors]
    d_ap = _euclidean_rows(e_a, embeddings[pos_index[anchors]])
    d_an = _euclidean_rows(e_a, embeddings[neg_index[anchors]])
    return MiningResult(valid, pos_index, neg_index, d_ap, d_an)


def _mined_mean_triplet(embeddings: Tensor, labels: np.ndarray) -> Tensor | None:
    """Mean soft-margin triplet over valid anchors; None when no anchor is valid."""
    mined = batch_hard_mine(embeddings, labels)
    if mined.num_valid == 0:
        return None
    return soft_margin_triplet(mined.d_ap, mined.d_an).mean()


def batch_triplet_loss(embeddings: Tensor, labels: np.ndarray) -> Tensor:
    """Mean hard-mined soft-margin triplet over one plain embedding batch."""
    term = _mined_mean_triplet(embeddings, np.asarray(labels))
    if term is None:
        logger.warning("triplet loss: no valid anchors in batch, contributing zero")
        return Tensor(np.zeros((), dtype=embeddings.dtype))
    return term


def per_keypoint_triplet_terms(
    embedding: AlignedEmbedding,
    labels: np.ndarray,
    visibility: np.ndarray,
) -> list[Tensor | None]:
    """Mean triplet term per keypoint, mined within the visible subset only.

    A keypoint with fewer than two visible samples, or without any valid
    anchor among them, yields None (it contributes zero to the loss).
    """
    n = embedding.vector.shape[0]
    k = embedding.num_keypoints
    labels = np.asarray(labels)
    visibility = np.asarray(visibility, dtype=bool)
    if visibility.shape != (n, k):
        raise ShapeError(
            f"visibility shape {visibility.shape} does not match (batch, keypoints) = {(n, k)}"
        )
    terms: list[Tensor | None] = []
    for i in range(k):
        subset = np.where(visibility[:, i])[0]
        if subset.size < 2:
            terms.append(None)
            continue
        terms.append(_mined_mean_triplet(embedding.subvector(i)[subset], labels[subset]))
    return terms


def kp_triplet_loss(
    embedding: AlignedEmbedding,
    labels: np.ndarray,
    visibility: np.ndarray,
) -> Tensor:
    """Per-keypoint triplet terms on visible subsets plus a whole-embedding term.

    The per-keypoint sum is averaged over K; each keypoint term is the mean
    soft-margin triplet over its valid anchors within the visible subset.
    """
    n = embedding.vector.shape[0]
    if n < 2:
        raise ContractError(f"triplet loss needs at least 2 samples, got {n}")
    k = embedding.num_keypoints

    per_kp_sum = None
    for term in per_keypoint_triplet_terms(embedding, labels, visibility):
        if term is None:
            continue
        per_kp_sum = term if per_kp_sum is None else per_kp_sum + term

    whole = _mined_mean_triplet(embedding.vector, np.asarray(labels))
    if whole is None:
        logger.warning("triplet loss: no valid anchors in batch, contributing zero")
        whole = Tensor(np.zeros((), dtype=embedding.vector.dtype))

    if per_kp_sum is None:
        return whole
    return per_kp_sum * (1.0 / k) + whole


def heatmap_mse(pred_logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error between sigmoid(logits) and ground-truth maps."""
    target = np.asarray(target)
    if pred_logits.shape != target.shape:
        raise ShapeError(
            f"heatmap shapes disagree: predicted {pred_logits.shape}, target {target.shape}"
        )
    diff = pred_logits.sigmoid() - Tensor(target.astype(pred_logits.dtype.type))
    return (diff * diff).mean()


def visibility_bce(pred_logits: Tensor, targets: np.ndarray) -> Tensor:
    """Binary cross-entropy on spatially max-pooled heatmap logits.

    Computed in the logit form softplus(z) - y*z, which is exact and safe
    for any logit magnitude.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if not np.all((targets == 0.0) | (targets == 1.0)):
        raise ContractError("visibility targets must be exactly 0 or 1")
    if pred_logits.ndim != 4:
        raise ShapeError(f"expected (N, K, H, W) logits, got {pred_logits.shape}")
    n, k, h, w = pred_logits.shape
    if targets.shape != (n, k):
        raise ShapeError(
            f"visibility targets shape {targets.shape} does not match (N, K) = {(n, k)}"
        )
    z = pred_logits.reshape(n, k, h * w).max(axis=2)
    per_entry = z.softplus() - z * Tensor(targets.astype(pred_logits.dtype.type))
    return per_entry.mean()


def classification_ce(scores: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the true class (stable)."""
    labels = np.asarray(labels)
    n, num_classes = scores.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    shift = Tensor(scores.data.max(axis=1, keepdims=True))
    z = scores - shift
    log_norm = z.exp().sum(axis=1).log()
    picked = z[np.arange(n), labels]
    return (log_norm - picked).mean()


def total_loss(components: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum of the loss components present in ``components``."""
    wmap = weights.as_dict()
    unknown = set(components) - set(wmap)
    if unknown:
        raise ContractError(f"unknown loss components: {sorted(unknown)}")
    total = None
    for name, value in components.items():
        if not np.all(np.isfinite(value.data)):
            raise TrainingDivergenceError(f"loss component {name!r} is not finite")
        term = value * wmap[name]
        total = term if total is None else total + term
    if total is None:
        raise ContractError("total_loss needs at least one component")
    return total
