"""Synthetic keypointed datasets.

Each class is a distinct "creature": a body disk plus K colored parts laid
out on a class-specific template. A sample renders the template under a
random similarity transform (rotation, scale 0.7-1.3, translation), applies
a per-camera color shift and pixel noise, and records the transformed part
centers as keypoints. Parts whose center lands outside the frame are not
drawn and are marked invisible, so part-localized appearance is genuinely
discriminative and visibility is a learnable signal.

Splits: retrieval mode tags train classes "train" and the disjoint test
classes "query" (recall is computed within that pool, self excluded);
re-id mode splits each test identity's samples into "query" and "gallery".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .heatmaps import KeypointAnnotation, render_heatmap_set, visibility_target

__all__ = [
    "PART_NAMES",
    "GeneratorConfig",
    "Sample",
    "Dataset",
    "generate_synthetic",
    "heatmap_targets",
]

PART_NAMES = [
    "crown", "eye", "snout", "wing_left", "wing_right", "belly",
    "tail", "foot", "fin", "horn", "spot", "tuft",
]


@dataclass(frozen=True)
class GeneratorConfig:
    train_classes: int = 20
    test_classes: int = 10
    samples_per_class: int = 30
    num_keypoints: int = 8
    image_size: tuple[int, int] = (64, 64)
    cameras: int = 4
    noise: float = 0.02
    seed: int = 0
    mode: str = "retrieval"

    def __post_init__(self):
        if not 1 <= self.num_keypoints <= 12:
            raise ConfigError(f"num_keypoints must be in [1, 12], got {self.num_keypoints}")
        if self.num_classes < 4:
            raise ConfigError(f"need at least 4 classes total, got {self.num_classes}")
        if self.train_classes < 1 or self.test_classes < 1:
            raise ConfigError("both train and test classes must be nonempty")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be positive")
        if self.cameras < 1:
            raise ConfigError("need at least one camera")
        if self.noise < 0:
            raise ConfigError("noise must be nonnegative")
        if self.mode not in ("retrieval", "reid"):
            raise ConfigError(f"mode must be 'retrieval' or 'reid', got {self.mode!r}")
        if min(self.image_size) < 16:
            raise ConfigError("image sides must be at least 16 pixels")

    @property
    def num_classes(self) -> int:
        return self.train_classes + self.test_classes


@dataclass
class Sample:
    image: np.ndarray  # uint8, (3, H, W)
    class_id: int
    identity_id: int
    camera_id: int
    keypoints: list[KeypointAnnotation]
    split: str

    def image_float(self, dtype=np.float64) -> np.ndarray:
        return self.image.astype(dtype) / 255.0


@dataclass
class Dataset:
    keypoint_names: list[str]
    image_size: tuple[int, int]
    num_cameras: int
    mode: str
    samples: list[Sample] = field(default_factory=list)

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoint_names)

    def indices(self, split: str | None = None) -> np.ndarray:
        if split is None:
            return np.arange(len(self.samples))
        return np.array(
            [i for i, s in enumerate(self.samples) if s.split == split], dtype=np.int64
        )

    def subset(self, split: str) -> list[Sample]:
        return [s for s in self.samples if s.split == split]

    def class_ids(self, idx: np.ndarray) -> np.ndarray:
        return np.array([self.samples[i].class_id for i in idx], dtype=np.int64)

    def images_float(self, idx: np.ndarray, dtype=np.float64) -> np.ndarray:
        return np.stack([self.samples[i].image_float(dtype) for i in idx], axis=0)

    def visibility(self, idx: np.ndarray) -> np.ndarray:
        return np.array(
            [[kp.visible for kp in self.samples[i].keypoints] for i in idx], dtype=bool
        )


@dataclass
class _ClassTemplate:
    body_color: np.ndarray
    body_radius: float
    part_offsets: np.ndarray   # (K, 2) in (x, y) pixels relative to center
    part_radii: np.ndarray     # (K,)
    part_colors: np.ndarray    # (K, 3)
    part_square: np.ndarray    # (K,) bool: square instead of disk


def _make_template(class_id: int, cfg: GeneratorConfig) -> _ClassTemplate:
    rng = np.random.default_rng([cfg.seed, 1000 + class_id])
    k = cfg.num_keypoints
    side = min(cfg.image_size)
    angles = (
        2.0 * np.pi * np.arange(k) / k
        + rng.uniform(-0.25, 0.25, size=k)
        + rng.uniform(0, 2 * np.pi)
    )
    radii = rng.uniform(0.15 * side, 0.40 * side, size=k)
    offsets = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    return _ClassTemplate(
        body_color=rng.uniform(0.15, 0.85, size=3),
        body_radius=rng.uniform(0.16, 0.24) * side,
        part_offsets=offsets,
        part_radii=rng.uniform(0.05, 0.09, size=k) * side,
        part_colors=rng.uniform(0.15, 1.0, size=(k, 3)),
        part_square=rng.random(k) < 0.4,
    )


def _camera_shifts(cfg: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([cfg.seed, 77])
    gains = rng.uniform(0.75, 1.15, size=(cfg.cameras, 3))
    offsets = rng.uniform(-0.06, 0.06, size=(cfg.cameras, 3))
    return gains, offsets


def _draw_disk(img, cx, cy, radius, color, yy, xx):
    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
    img[:, mask] = color[:, None]


def _draw_square(img, cx, cy, radius, color, yy, xx):
    mask = (np.abs(xx - cx) <= radius) & (np.abs(yy - cy) <= radius)
    img[:, mask] = color[:, None]


def _render_sample(
    template: _ClassTemplate,
    cfg: GeneratorConfig,
    camera: int,
    gains: np.ndarray,
    offsets: np.ndarray,
    theta: float,
    scale: float,
    shift: np.ndarray,
    noise_rng: np.random.Generator,
) -> tuple[np.ndarray, list[KeypointAnnotation]]:
    h, w = cfg.image_size
    yy, xx = np.mgrid[0:h, 0:w]
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    center = np.array([w / 2.0, h / 2.0]) + shift

    img = np.full((3, h, w), 0.10)
    body = center
    _draw_disk(img, body[0], body[1], template.body_radius * scale, template.body_color, yy, xx)

    annotations = []
    for i in range(cfg.num_keypoints):
        pos = center + scale * (rot @ template.part_offsets[i])
        visible = bool(0.0 <= pos[0] < w and 0.0 <= pos[1] < h)
        if visible:
            draw = _draw_square if template.part_square[i] else _draw_disk
            draw(
                img, pos[0], pos[1], template.part_radii[i] * scale,
                template.part_colors[i], yy, xx,
            )
        annotations.append(KeypointAnnotation(float(pos[0]), float(pos[1]), visible))

    img = img * gains[camera][:, None, None] + offsets[camera][:, None, None]
    if cfg.noise > 0:
        img = img + noise_rng.normal(0.0, cfg.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8), annotations


def generate_synthetic(cfg: GeneratorConfig) -> Dataset:
    """Deterministic per (config, seed); see the module docstring for layout."""
    gains, offsets = _camera_shifts(cfg)
    names = PART_NAMES[: cfg.num_keypoints]
    ds = Dataset(
        keypoint_names=names,
        image_size=cfg.image_size,
        num_cameras=cfg.cameras,
        mode=cfg.mode,
        samples=[],
    )
    for class_id in range(cfg.num_classes):
        template = _make_template(class_id, cfg)
        is_train = class_id < cfg.train_classes
        for j in range(cfg.samples_per_class):
            rng = np.random.default_rng([cfg.seed, class_id, j])
            camera = int(rng.integers(0, cfg.cameras))
            theta = rng.uniform(0.0, 2.0 * np.pi)
            scale = rng.uniform(0.7, 1.3)
            h, w = cfg.image_size
            shift = rng.uniform(-0.18, 0.18, size=2) * np.array([w, h])
            img, annotations = _render_sample(
                template, cfg, camera, gains, offsets, theta, scale, shift, rng
            )
            if is_train:
                split = "train"
            elif cfg.mode == "retrieval":
                split = "query"
            else:
                # roughly a quarter of each test identity's samples query the rest
                split = "query" if j % 4 == 0 else "gallery"
            ds.samples.append(
                Sample(
                    image=img,
                    class_id=class_id,
                    identity_id=class_id,
                    camera_id=camera,
                    keypoints=annotations,
                    split=split,
                )
            )
    return ds


def heatmap_targets(
    dataset: Dataset,
    idx: np.ndarray,
    heatmap_size: tuple[int, int],
    variance: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth maps (N, K, H_hm, W_hm) and visibility targets (N, K)."""
    maps = []
    vis = []
    for i in idx:
        s = dataset.samples[i]
        hs = render_heatmap_set(
            s.keypoints, dataset.image_size, heatmap_size, variance,
            expected_count=dataset.num_keypoints,
        )
        maps.append(hs.stacked())
        vis.append(visibility_target(hs))
    return np.stack(maps, axis=0), np.stack(vis, axis=0)
