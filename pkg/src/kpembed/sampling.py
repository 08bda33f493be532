"""Identity-balanced batch construction for triplet training.

Each batch holds exactly P distinct classes with Q samples per class, so
every anchor is guaranteed a positive (when Q >= 2) and a negative (when
P >= 2). One epoch is ceil(num_classes / P) batches, enough for every class
to appear at least once; classes with fewer than Q samples are filled by
sampling with replacement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = ["BatchPlan", "pk_sample_epoch"]


@dataclass
class BatchPlan:
    """Sample indices of one batch: P classes with Q samples each."""

    indices: np.ndarray
    classes_per_batch: int
    samples_per_class: int

    def __len__(self) -> int:
        return len(self.indices)


def pk_sample_epoch(
    labels: np.ndarray, classes_per_batch: int, samples_per_class: int, seed: int
) -> list[BatchPlan]:
    """Plan one epoch of identity-balanced batches, deterministic per seed."""
    p, q = classes_per_batch, samples_per_class
    if p < 1 or q < 1:
        raise ConfigError(f"need positive P and Q, got P={p}, Q={q}")
    labels = np.asarray(labels)
    by_class: dict[int, np.ndarray] = {
        int(c): np.where(labels == c)[0] for c in np.unique(labels)
    }
    classes = sorted(by_class)
    if len(classes) < p:
        raise ConfigError(
            f"dataset has {len(classes)} classes, fewer than P={p} per batch"
        )

    rng = np.random.default_rng(seed)
    order = rng.permutation(classes)
    num_batches = -(-len(classes) // p)

    plans = []
    for b in range(num_batches):
        chunk = list(order[b * p : (b + 1) * p])
        if len(chunk) < p:
            leftovers = [c for c in order if c not in chunk]
            fill = rng.choice(len(leftovers), size=p - len(chunk), replace=False)
            chunk.extend(leftovers[i] for i in fill)
        batch = []
        for c in chunk:
            pool = by_class[int(c)]
            if len(pool) >= q:
                picks = rng.choice(pool, size=q, replace=False)
            else:
                picks = rng.choice(pool, size=q, replace=True)
            batch.extend(int(i) for i in picks)
        plans.append(
            BatchPlan(np.array(batch, dtype=np.int64), classes_per_batch=p, samples_per_class=q)
        )
    return plans
