"""Controlled face misalignment: margin-ratio box transforms, fixed presets and random sampling."""

from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np

from .imaging import GRAY, crop_resize, resize

RANDOM_MARGIN_HIGH = 3.0


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel-edge coordinates (x1, y1) top-left, (x2, y2) bottom-right."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for k in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, k, float(getattr(self, k)))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def valid(self) -> bool:
        return self.x1 < self.x2 and self.y1 < self.y2

    def as_tuple(self) -> tuple[float, float, float, float]:
        return astuple(self)

    def expand(self, pixels: float) -> "BBox":
        return BBox(self.x1 - pixels, self.y1 - pixels, self.x2 + pixels, self.y2 + pixels)

    def contains(self, other: "BBox") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and self.x2 >= other.x2 and self.y2 >= other.y2)

    def to_text(self) -> str:
        return " ".join(f"{v:.4f}" for v in self.as_tuple()) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BBox":
        return cls(*(float(v) for v in text.split()))


@dataclass(frozen=True)
class MarginParams:
    m_x1: float
    m_x2: float
    m_y1: float
    m_y2: float

    def __post_init__(self):
        for k in ("m_x1", "m_x2", "m_y1", "m_y2"):
            v = float(getattr(self, k))
            if not v >= 0:
                raise ValueError(f"margin {k} must be >= 0, got {v}")
            object.__setattr__(self, k, v)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return astuple(self)


def margin_matrix(m_a: float, m_b: float) -> np.ndarray:
    """2x2 map taking a coordinate pair (lo, hi) to its margin-expanded pair."""
    return np.array([[1 + 0.5 * m_a, -0.5 * m_a], [-0.5 * m_b, 1 + 0.5 * m_b]])


def apply_margin(b: BBox, m: MarginParams) -> BBox:
    """Move each box edge outward by half its margin ratio times the box extent."""
    if not b.valid:
        raise ValueError(f"box must have x1 < x2 and y1 < y2, got {b}")
    x1 = (1 + 0.5 * m.m_x1) * b.x1 - 0.5 * m.m_x1 * b.x2
    x2 = -0.5 * m.m_x2 * b.x1 + (1 + 0.5 * m.m_x2) * b.x2
    y1 = (1 + 0.5 * m.m_y1) * b.y1 - 0.5 * m.m_y1 * b.y2
    y2 = -0.5 * m.m_y2 * b.y1 + (1 + 0.5 * m.m_y2) * b.y2
    return BBox(x1, y1, x2, y2)


PRESETS = {
    1: MarginParams(0.50, 0.50, 0.50, 0.50),
    2: MarginParams(1.00, 1.00, 1.00, 1.00),
    3: MarginParams(1.50, 1.50, 1.50, 1.50),
    4: MarginParams(2.00, 2.00, 2.00, 2.00),
    5: MarginParams(2.50, 2.50, 2.50, 2.50),
    6: MarginParams(1.25, 0.70, 1.75, 2.15),
    7: MarginParams(0.33, 2.13, 2.17, 2.34),
}


def preset(idx: int) -> MarginParams:
    if idx not in PRESETS:
        raise ValueError(f"margin preset must be one of 1..7, got {idx!r}")
    return PRESETS[idx]


def sample_random_margin(rng: np.random.Generator, high: float = RANDOM_MARGIN_HIGH) -> MarginParams:
    """Four independent uniform draws on [0, high]."""
    return MarginParams(*rng.uniform(0.0, high, 4))


def crop_by_box(image: np.ndarray, b: BBox | None, out: int) -> np.ndarray:
    """Crop ``b`` (may leave the frame; outside is mid-gray) and resize to ``out`` x ``out``.

    ``b=None`` takes the whole image as it is.
    """
    img = np.asarray(image, dtype=np.float64)
    if b is None:
        h, w = img.shape[:2]
        return img.copy() if (h, w) == (out, out) else resize(img, out, out)
    if not b.valid:
        raise ValueError(f"crop box must have positive area, got {b}")
    return crop_resize(img, b.as_tuple(), out, out, fill=GRAY)
