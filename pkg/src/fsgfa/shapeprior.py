"""Face shape prior: 68-keypoint Gaussian heatmaps reduced to three semantic channels.

Channel layout after :func:`postprocess_z` is R = eyebrows + eyes,
G = nose + mouth, B = jaw/face boundary.
"""

from __future__ import annotations

import zlib
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .imaging import map_to_frame, resize_chw

NUM_KEYPOINTS = 68
DEFAULT_SIGMA = 2.0
RAW_SIZE = 64
Z_SIZE = 56


def _span(first: int, last: int) -> list[int]:
    """1-based inclusive landmark range -> 0-based indices."""
    return list(range(first - 1, last))


JAW = _span(1, 17)
BROWS = _span(18, 27)
NOSE = _span(28, 36)
EYES = _span(37, 48)
MOUTH = _span(49, 68)
CHANNEL_GROUPS = (BROWS + EYES, NOSE + MOUTH, JAW)


@dataclass(frozen=True)
class KeypointSet:
    points: np.ndarray  # (68, 2) x, y in pixels
    frame: tuple[int, int]  # (width, height)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (NUM_KEYPOINTS, 2):
            raise ValueError(f"expected {NUM_KEYPOINTS}x2 keypoints, got {pts.shape}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "frame", (int(self.frame[0]), int(self.frame[1])))

    def transformed(self, matrix: np.ndarray, frame) -> "KeypointSet":
        """Apply a 2x3 affine map (source -> destination pixel coordinates)."""
        m = np.asarray(matrix, dtype=np.float64)
        pts = self.points @ m[:, :2].T + m[:, 2]
        return KeypointSet(pts, frame)

    def to_text(self) -> str:
        return "".join(f"{x:.4f} {y:.4f}\n" for x, y in self.points)

    @classmethod
    def from_text(cls, text: str, frame) -> "KeypointSet":
        rows = [line.split() for line in text.strip().splitlines()]
        return cls(np.array(rows, dtype=np.float64), frame)


def render_heatmaps(kps: KeypointSet, out: int = RAW_SIZE, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """One unit-peak Gaussian per keypoint on an ``out`` x ``out`` grid -> (68, out, out)."""
    if out < 8:
        raise ValueError(f"heatmap size must be >= 8, got {out}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    pts = map_to_frame(kps.points, kps.frame, (out, out))
    grid = np.arange(out, dtype=np.float64)
    gx = np.exp(-((grid[None, :] - pts[:, 0:1]) ** 2) / (2 * sigma**2))
    gy = np.exp(-((grid[None, :] - pts[:, 1:2]) ** 2) / (2 * sigma**2))
    return (gy[:, :, None] * gx[:, None, :]).astype(np.float32)


def postprocess_z(raw: np.ndarray, out: int = Z_SIZE) -> np.ndarray:
    """Resize a (68, H, W) stack to ``out`` and merge into 3 channels by per-pixel max."""
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[0] != NUM_KEYPOINTS:
        raise ValueError(f"expected a 68-channel heatmap stack, got shape {raw.shape}")
    small = resize_chw(raw.astype(np.float64), out, out) if raw.shape[1:] != (out, out) else raw
    merged = np.stack([small[list(group)].max(axis=0) for group in CHANNEL_GROUPS])
    return np.clip(merged, 0.0, 1.0).astype(np.float32)


def perturb_keypoints(kps: KeypointSet, eps: float, rng: np.random.Generator) -> KeypointSet:
    """Add iid N(0, eps^2) noise to every coordinate."""
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    if eps == 0:
        return kps
    return KeypointSet(kps.points + rng.normal(0.0, eps, kps.points.shape), kps.frame)


class KeypointProvider(ABC):
    """Source of keypoints for an image; stands in for a frozen landmark network.

    Providers hold no trainable state.
    """

    name = "abstract"

    def __init__(self, eps: float = 0.0, seed: int = 0):
        if eps < 0:
            raise ValueError("eps must be >= 0")
        self.eps = float(eps)
        self.seed = int(seed)

    @abstractmethod
    def estimate(self, image: np.ndarray, reference: KeypointSet) -> KeypointSet:
        """Keypoints for ``image`` before noise is applied."""

    def __call__(self, image: np.ndarray, image_id: str, reference: KeypointSet) -> KeypointSet:
        kps = self.estimate(image, reference)
        rng = np.random.default_rng([self.seed, zlib.crc32(image_id.encode("utf-8"))])
        return perturb_keypoints(kps, self.eps, rng)


class GroundTruthProvider(KeypointProvider):
    """Returns the dataset's exact keypoints (optionally noise-perturbed)."""

    name = "ground-truth"

    def estimate(self, image, reference):
        return reference


def shape_prior(kps: KeypointSet, raw_size: int = RAW_SIZE, out: int = Z_SIZE,
                sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Keypoints -> 3-channel prior aligned with the feature maps."""
    return postprocess_z(render_heatmaps(kps, raw_size, sigma), out)
