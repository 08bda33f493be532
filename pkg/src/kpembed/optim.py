"""Adam optimization and the three-stage training schedule.

Stage 1 fine-tunes the backbone through a temporary pooled head (triplet +
classification), stage 2 freezes the backbone and trains the keypoint
blocks and classifier with the full loss at a higher learning rate, and
stage 3 fine-tunes everything with the full loss again. Frozen parameters
have requires_grad switched off for the stage, so they receive no gradient
and stay bit-identical.

Weight decay is applied as an L2 term added to the gradient before the
moment updates (classic Adam).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, heatmap_targets
from .errors import ConfigError, TrainingDivergenceError
from .losses import (
    LossWeights,
    batch_triplet_loss,
    classification_ce,
    heatmap_mse,
    kp_triplet_loss,
    total_loss,
    visibility_bce,
)
from .model import BackboneHead, KeypointEmbeddingNet
from .sampling import pk_sample_epoch
from .tensor import Tensor, no_grad

__all__ = [
    "Adam",
    "StageConfig",
    "default_schedule",
    "Trainer",
    "compute_embeddings",
    "compute_heatmap_outputs",
]

logger = logging.getLogger(__name__)

LOSS_NAMES = ("triplet", "heatmap", "visibility", "classification")


class Adam:
    """Adam with bias correction over a fixed named parameter set."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if not params:
            raise ConfigError("optimizer needs a non-empty parameter set")
        self.params = dict(sorted(params.items()))
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                raise ConfigError(f"parameter {name} has no gradient; was backward() run?")
            if not np.all(np.isfinite(p.grad)):
                raise TrainingDivergenceError(f"non-finite gradient in parameter {name}")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / (1.0 - self.beta1**self.t)
            v_hat = self.v[name] / (1.0 - self.beta2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)

    def state(self) -> dict:
        return {"step": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        if set(state["m"]) != set(self.params):
            raise ConfigError(
                "optimizer state names do not match: "
                f"extra {sorted(set(state['m']) - set(self.params))}, "
                f"missing {sorted(set(self.params) - set(state['m']))}"
            )
        self.t = int(state["step"])
        self.m = {k: np.array(a, copy=True) for k, a in state["m"].items()}
        self.v = {k: np.array(a, copy=True) for k, a in state["v"].items()}


@dataclass(frozen=True)
class StageConfig:
    """One training stage: which parameters train, with which losses."""

    name: str
    trainable: tuple[str, ...]
    losses: tuple[str, ...]
    lr: float
    epochs: int
    use_backbone_head: bool = False

    def __post_init__(self):
        unknown = set(self.losses) - set(LOSS_NAMES)
        if unknown:
            raise ConfigError(f"unknown loss names in stage {self.name!r}: {sorted(unknown)}")
        if self.use_backbone_head and (
            "heatmap" in self.losses or "visibility" in self.losses
        ):
            raise ConfigError(
                f"stage {self.name!r} uses the pooled backbone head, which has no decoder"
            )
        if self.epochs < 0 or self.lr <= 0:
            raise ConfigError(f"stage {self.name!r} needs epochs >= 0 and lr > 0")


def default_schedule(
    variant: str = "full", epochs: tuple[int, int, int] = (10, 20, 10)
) -> list[StageConfig]:
    """Backbone fine-tune, frozen-backbone block training, full fine-tune."""
    block_prefixes = ("shared.", "classifier") if variant == "no_blocks" else (
        "blocks.", "classifier",
    )
    full_loss = ("triplet", "heatmap", "visibility", "classification")
    return [
        StageConfig(
            name="backbone",
            trainable=("backbone.",),
            losses=("triplet", "classification"),
            lr=1e-4,
            epochs=epochs[0],
            use_backbone_head=True,
        ),
        StageConfig(
            name="blocks", trainable=block_prefixes, losses=full_loss, lr=1e-3,
            epochs=epochs[1],
        ),
        StageConfig(
            name="full", trainable=("backbone.",) + block_prefixes, losses=full_loss,
            lr=1e-4, epochs=epochs[2],
        ),
    ]


class Trainer:
    """Runs the staged schedule on the train split of a dataset."""

    def __init__(
        self,
        model: KeypointEmbeddingNet,
        dataset: Dataset,
        weights: LossWeights | None = None,
        classes_per_batch: int = 8,
        samples_per_class: int = 8,
        seed: int = 0,
        weight_decay: float = 1e-4,
        heatmap_variance: float = 1.0,
    ):
        if dataset.num_keypoints != model.cfg.num_keypoints:
            raise ConfigError(
                f"dataset has {dataset.num_keypoints} keypoints, "
                f"model expects {model.cfg.num_keypoints}"
            )
        self.model = model
        self.dataset = dataset
        self.weights = weights or LossWeights()
        self.p = classes_per_batch
        self.q = samples_per_class
        self.seed = seed
        self.weight_decay = weight_decay

        self.train_idx = dataset.indices("train")
        if len(self.train_idx) == 0:
            raise ConfigError("dataset has no training split")
        self.train_labels = dataset.class_ids(self.train_idx)
        self._remap = self._class_remap(self.train_labels)
        self.gt_maps, self.gt_vis = heatmap_targets(
            dataset, self.train_idx, model.cfg.heatmap_size, heatmap_variance
        )
        self.backbone_head = BackboneHead(model.cfg, seed=seed + 1)
        self.log_rows: list[dict] = []

    @staticmethod
    def _class_remap(labels: np.ndarray) -> dict[int, int]:
        return {int(c): i for i, c in enumerate(sorted(np.unique(labels)))}

    def _set_trainable(self, stage: StageConfig) -> dict[str, Tensor]:
        trainable = {}
        for name, p in self.model.store.items():
            active = any(name.startswith(prefix) for prefix in stage.trainable)
            p.requires_grad = active
            if active:
                trainable[name] = p
        if stage.use_backbone_head:
            for name, p in self.backbone_head.store.items():
                p.requires_grad = True
                trainable[f"aux.{name}"] = p
        if not trainable:
            raise ConfigError(
                f"stage {stage.name!r} selects no parameters (prefixes {stage.trainable})"
            )
        return trainable

    def _restore_trainable(self) -> None:
        for _, p in self.model.store.items():
            p.requires_grad = True

    def _batch_losses(self, stage: StageConfig, rows: np.ndarray) -> dict[str, Tensor]:
        idx = self.train_idx[rows]
        images = Tensor(self.dataset.images_float(idx, self.model.cfg.np_dtype))
        labels = np.array([self._remap[int(c)] for c in self.dataset.class_ids(idx)])
        components: dict[str, Tensor] = {}
        if stage.use_backbone_head:
            features = self.model.backbone_forward(images, "train")
            embedding, scores = self.backbone_head.forward(features)
            if "triplet" in stage.losses:
                components["triplet"] = batch_triplet_loss(embedding, labels)
            if "classification" in stage.losses:
                components["classification"] = classification_ce(scores, labels)
            return components

        result = self.model.forward(images, mode="train")
        visibility = self.gt_vis[rows] > 0.5
        if "triplet" in stage.losses:
            components["triplet"] = kp_triplet_loss(result.embedding, labels, visibility)
        if "heatmap" in stage.losses:
            components["heatmap"] = heatmap_mse(result.heatmap_logits, self.gt_maps[rows])
        if "visibility" in stage.losses:
            components["visibility"] = visibility_bce(
                result.heatmap_logits, self.gt_vis[rows]
            )
        if "classification" in stage.losses:
            components["classification"] = classification_ce(result.class_scores, labels)
        return components

    def run_stage(
        self,
        stage: StageConfig,
        stage_index: int,
        start_epoch: int = 0,
        optimizer_state: dict | None = None,
        on_epoch_end=None,
    ) -> list[dict]:
        """Run one stage; returns its per-epoch log rows (one row per epoch)."""
        trainable = self._set_trainable(stage)
        optimizer = Adam(trainable, lr=stage.lr, weight_decay=self.weight_decay)
        if optimizer_state is not None:
            optimizer.load_state(optimizer_state)
        self._optimizer = optimizer

        frozen_before = {
            name: p.data.copy()
            for name, p in self.model.store.items()
            if name not in trainable
        }
        rows_out = []
        try:
            for epoch in range(start_epoch, stage.epochs):
                plans = pk_sample_epoch(
                    self.train_labels, self.p, self.q,
                    seed=[self.seed, 1 + stage_index, epoch],
                )
                sums = {name: 0.0 for name in LOSS_NAMES}
                sums["total"] = 0.0
                for plan in plans:
                    components = self._batch_losses(stage, plan.indices)
                    loss = total_loss(components, self.weights)
                    self.model.store.zero_grad()
                    optimizer.zero_grad()
                    loss.backward()
                    optimizer.step()
                    for name, value in components.items():
                        sums[name] += value.item()
                    sums["total"] += loss.item()
                row = {
                    "stage": stage.name,
                    "epoch": epoch,
                    **{name: sums[name] / len(plans) for name in LOSS_NAMES},
                    "total": sums["total"] / len(plans),
                }
                self.log_rows.append(row)
                rows_out.append(row)
                logger.info(
                    "stage %s epoch %d: total %.4f", stage.name, epoch, row["total"]
                )
                if on_epoch_end is not None:
                    on_epoch_end(stage_index, epoch, optimizer)
        finally:
            self._restore_trainable()

        for name, before in frozen_before.items():
            if not np.array_equal(before, self.model.store[name].data):
                raise TrainingDivergenceError(
                    f"frozen parameter {name} changed during stage {stage.name!r}"
                )
        return rows_out

    def run(
        self,
        schedule: list[StageConfig],
        start: tuple[int, int] = (0, 0),
        optimizer_state: dict | None = None,
        on_epoch_end=None,
    ) -> list[dict]:
        """Run the whole schedule; ``start`` resumes at (stage, epoch)."""
        start_stage, start_epoch = start
        for i, stage in enumerate(schedule):
            if i < start_stage:
                continue
            epoch0 = start_epoch if i == start_stage else 0
            state = optimizer_state if i == start_stage else None
            self.run_stage(stage, i, start_epoch=epoch0, optimizer_state=state,
                           on_epoch_end=on_epoch_end)
        return self.log_rows

    def backbone_head_arrays(self) -> dict[str, np.ndarray]:
        return {f"aux.{n}": p.data.copy() for n, p in self.backbone_head.store.items()}

    def load_backbone_head_arrays(self, extras: dict[str, np.ndarray]) -> None:
        for name, p in self.backbone_head.store.items():
            key = f"aux.{name}"
            if key in extras:
                p.data = extras[key].astype(p.data.dtype, copy=True)


def write_training_log(rows: list[dict], path) -> None:
    """CSV log: one row per epoch with every loss component and the total."""
    import csv

    columns = ["stage", "epoch", *LOSS_NAMES, "total"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, 0.0) for c in columns})


def compute_embeddings(
    model: KeypointEmbeddingNet, dataset: Dataset, idx: np.ndarray, batch_size: int = 64
) -> np.ndarray:
    """Eval-mode embeddings for the given sample indices."""
    out = []
    with no_grad():
        for lo in range(0, len(idx), batch_size):
            chunk = idx[lo : lo + batch_size]
            images = Tensor(dataset.images_float(chunk, model.cfg.np_dtype))
            out.append(model.forward(images, mode="eval").embedding.vector.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.cfg.embedding_length))


def compute_heatmap_outputs(
    model: KeypointEmbeddingNet, dataset: Dataset, idx: np.ndarray, batch_size: int = 64
) -> np.ndarray:
    """Eval-mode spatial max of each heatmap logit map, shape (N, K)."""
    out = []
    with no_grad():
        for lo in range(0, len(idx), batch_size):
            chunk = idx[lo : lo + batch_size]
            images = Tensor(dataset.images_float(chunk, model.cfg.np_dtype))
            logits = model.forward(images, mode="eval", heads=True).heatmap_logits.data
            out.append(logits.reshape(logits.shape[0], logits.shape[1], -1).max(axis=2))
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.cfg.num_keypoints))
