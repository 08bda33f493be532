"""Ground-truth keypoint heatmaps and visibility targets.

A visible keypoint renders as an amplitude-1 Gaussian bump centered at the
keypoint's location scaled into heatmap coordinates; an invisible keypoint
renders as an all-zero map. The per-keypoint visibility target is simply
the maximum of the map, which is 1 for visible and 0 for invisible
keypoints. When the scaled center falls between grid points the map is
renormalized by its maximum so the peak stays exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "KeypointAnnotation",
    "HeatmapSet",
    "render_heatmap",
    "render_heatmap_set",
    "visibility_target",
]


@dataclass(frozen=True)
class KeypointAnnotation:
    """One keypoint in input-image pixel coordinates."""

    x: float
    y: float
    visible: bool


@dataclass
class HeatmapSet:
    """K single-channel maps of shape (1, H_hm, W_hm) plus visibility flags."""

    maps: list[np.ndarray]
    visibility: list[bool]

    def stacked(self) -> np.ndarray:
        """(K, H_hm, W_hm) array view of the maps."""
        return np.stack([m[0] for m in self.maps], axis=0)


def _scale(image_size: tuple[int, int], heatmap_size: tuple[int, int]) -> tuple[int, int]:
    ih, iw = image_size
    hh, hw = heatmap_size
    if ih % hh != 0 or iw % hw != 0:
        raise ConfigError(
            f"heatmap size {heatmap_size} must divide image size {image_size} evenly"
        )
    return ih // hh, iw // hw


def render_heatmap(
    kp: KeypointAnnotation,
    image_size: tuple[int, int],
    heatmap_size: tuple[int, int],
    variance: float = 1.0,
) -> np.ndarray:
    """Render one (1, H_hm, W_hm) map; variance is in heatmap-pixel units."""
    if variance <= 0:
        raise ConfigError(f"heatmap variance must be positive, got {variance}")
    sy, sx = _scale(image_size, heatmap_size)
    hh, hw = heatmap_size
    if not kp.visible:
        return np.zeros((1, hh, hw))
    cx = kp.x / sx
    cy = kp.y / sy
    cols = np.arange(hw, dtype=np.float64)
    rows = np.arange(hh, dtype=np.float64)
    g = np.exp(-((cols[None, :] - cx) ** 2 + (rows[:, None] - cy) ** 2) / (2.0 * variance))
    g /= g.max()
    return g[None, :, :]


def render_heatmap_set(
    annotations: list[KeypointAnnotation],
    image_size: tuple[int, int],
    heatmap_size: tuple[int, int],
    variance: float = 1.0,
    expected_count: int | None = None,
) -> HeatmapSet:
    """Render one map per keypoint, preserving the configured keypoint order."""
    if expected_count is not None and len(annotations) != expected_count:
        raise ConfigError(
            f"expected {expected_count} keypoint annotations, got {len(annotations)}"
        )
    return HeatmapSet(
        maps=[render_heatmap(a, image_size, heatmap_size, variance) for a in annotations],
        visibility=[a.visible for a in annotations],
    )


def visibility_target(hm: HeatmapSet) -> np.ndarray:
    """Per-keypoint visibility in {0, 1}: the maximum of each map."""
    return np.array([m.max() for m in hm.maps])
