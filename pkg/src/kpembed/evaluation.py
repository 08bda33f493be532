"""Retrieval and re-identification metrics.

All metrics work on plain numpy embeddings with L2 distance. Rankings are
deterministic: distance ties break by ascending gallery index. Retrieval
recall excludes each query's own entry; the re-id protocol excludes gallery
entries sharing both the identity and the camera of the query.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

__all__ = [
    "EmbeddingIndex",
    "pairwise_l2",
    "recall_at_r",
    "ranked_gallery_lists",
    "cmc_map",
    "CmcResult",
    "per_keypoint_recall",
    "visibility_accuracy",
]


@dataclass
class EmbeddingIndex:
    """Embeddings plus the id arrays the metrics need."""

    embeddings: np.ndarray
    class_ids: np.ndarray
    camera_ids: np.ndarray | None = None
    identity_ids: np.ndarray | None = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.class_ids = np.asarray(self.class_ids)
        m = len(self.embeddings)
        for name in ("class_ids", "camera_ids", "identity_ids"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr)
                setattr(self, name, arr)
                if len(arr) != m:
                    raise ShapeError(f"{name} has length {len(arr)}, expected {m}")

    def __len__(self) -> int:
        return len(self.embeddings)


def pairwise_l2(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """All-pairs Euclidean distances; squared values are clamped at zero
    before the square root, and the self-mode diagonal is exactly zero."""
    a = np.asarray(a, dtype=np.float64)
    self_mode = b is None
    b = a if self_mode else np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"pairwise_l2 needs matching embedding dims, got {a.shape} and {b.shape}"
        )
    sq_a = np.sum(a * a, axis=1)
    sq_b = np.sum(b * b, axis=1)
    d2 = sq_a[:, None] - 2.0 * (a @ b.T) + sq_b[None, :]
    d = np.sqrt(np.maximum(d2, 0.0))
    if self_mode:
        np.fill_diagonal(d, 0.0)
    return d


def recall_at_r(index: EmbeddingIndex, r_values: list[int]) -> dict[int, float]:
    """Fraction of samples whose R nearest neighbors (self excluded) contain
    at least one same-class sample."""
    m = len(index)
    for r in r_values:
        if r < 1 or r >= m:
            raise ContractError(f"R must satisfy 1 <= R < {m}, got {r}")
    dist = pairwise_l2(index.embeddings)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")
    same = index.class_ids[order] == index.class_ids[:, None]
    out = {}
    for r in sorted(r_values):
        out[int(r)] = float(np.mean(same[:, :r].any(axis=1)))
    return out


def ranked_gallery_lists(query: EmbeddingIndex, gallery: EmbeddingIndex) -> list[np.ndarray]:
    """Per query: admissible gallery indices in ascending-distance order.

    Gallery entries sharing both the identity and the camera of the query
    are excluded. Ties break by ascending gallery index (stable sort).
    """
    for idx, name in ((query, "query"), (gallery, "gallery")):
        if idx.identity_ids is None or idx.camera_ids is None:
            raise ConfigError(f"{name} index needs identity and camera ids")
    dist = pairwise_l2(query.embeddings, gallery.embeddings)
    lists = []
    for qi in range(len(query)):
        excluded = (gallery.identity_ids == query.identity_ids[qi]) & (
            gallery.camera_ids == query.camera_ids[qi]
        )
        keep = np.where(~excluded)[0]
        order = keep[np.argsort(dist[qi, keep], kind="stable")]
        lists.append(order)
    return lists


@dataclass
class CmcResult:
    cmc: dict[int, float]
    mean_ap: float
    skipped_queries: int


def cmc_map(
    query: EmbeddingIndex, gallery: EmbeddingIndex, k_values: list[int]
) -> CmcResult:
    """Cumulative match at each k plus mean average precision.

    AP per query averages (j / rank_j) over its true-match ranks within the
    admissible gallery; queries without any admissible true match are
    skipped and counted separately.
    """
    lists = ranked_gallery_lists(query, gallery)
    k_values = sorted(int(k) for k in k_values)
    hits = {k: 0 for k in k_values}
    aps = []
    skipped = 0
    for qi, order in enumerate(lists):
        truth = gallery.identity_ids[order] == query.identity_ids[qi]
        if not truth.any():
            skipped += 1
            continue
        for k in k_values:
            if truth[:k].any():
                hits[k] += 1
        ranks = np.where(truth)[0] + 1
        precisions = np.arange(1, len(ranks) + 1) / ranks
        aps.append(float(np.mean(precisions)))
    scored = len(lists) - skipped
    cmc = {k: (hits[k] / scored if scored else 0.0) for k in k_values}
    mean_ap = float(np.mean(aps)) if aps else 0.0
    return CmcResult(cmc=cmc, mean_ap=mean_ap, skipped_queries=skipped)


def per_keypoint_recall(
    index: EmbeddingIndex, num_keypoints: int, subvector_length: int, r: int
) -> np.ndarray:
    """Recall@R computed independently on each length-d embedding slice."""
    k, d = num_keypoints, subvector_length
    if index.embeddings.shape[1] != k * d:
        raise ConfigError(
            f"embedding dim {index.embeddings.shape[1]} != K*d = {k * d}"
        )
    out = np.zeros(k)
    for i in range(k):
        sub = EmbeddingIndex(index.embeddings[:, i * d : (i + 1) * d], index.class_ids)
        out[i] = recall_at_r(sub, [r])[r]
    return out


def visibility_accuracy(max_logits: np.ndarray, targets: np.ndarray) -> float:
    """Accuracy of sigmoid(max logit) > 0.5 against {0,1} visibility targets."""
    max_logits = np.asarray(max_logits)
    targets = np.asarray(targets)
    if max_logits.shape != targets.shape:
        raise ShapeError(
            f"shapes disagree: logits {max_logits.shape}, targets {targets.shape}"
        )
    pred = max_logits > 0.0
    return float(np.mean(pred == (targets > 0.5)))
