"""Gradient-weighted class activation maps over the embedding layer."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .imaging import resize
from .nncore import Tape, Tensor, backward, no_tape, ops

CAM_LAYER = "phi_tilde"


@dataclass
class ActivationMap:
    values: np.ndarray  # (H, W), non-negative
    layer: str
    target_class: int

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"activation map must be 2-D, got {self.values.shape}")
        if np.any(self.values < 0):
            raise ValueError("activation map has negative entries")


def cam_from_activations(activations: np.ndarray, score_fn: Callable[[Tensor], Tensor]) -> np.ndarray:
    """ReLU(sum_k w_k A_k) with w_k the spatial mean of d score / d A_k.

    ``activations`` is (C, H, W); ``score_fn`` maps a (1, C, H, W) tensor to a
    scalar. The activations are a fresh leaf, so gradients stop there.
    """
    a = Tensor(np.asarray(activations)[None], requires_grad=True)
    with Tape() as tape:
        score = score_fn(a)
    backward(tape, score)
    weights = a.grad[0].mean(axis=(1, 2))
    return np.maximum(np.tensordot(weights, a.data[0], axes=1), 0)


def grad_cam(bundle, image, target_class: int) -> ActivationMap:
    """Map for one normalized (3, H, W) image, scored by the target's pre-softmax logit.

    Batch norm runs in eval mode; the bundle's mode and gradients are restored.
    """
    head = bundle.head
    if head is None:
        raise ValueError("grad_cam needs the classifier head")
    classes = head.Q.shape[1]
    if not 0 <= int(target_class) < classes:
        raise ValueError(f"target class {target_class} outside [0, {classes})")
    was_training = bundle.training
    saved = [(p, p.grad) for p in bundle.parameters()]
    bundle.eval()
    try:
        x = Tensor(np.asarray(image)[None])
        with no_tape():
            emb = bundle.phi_tilde(bundle.F(x)).data[0]
        onehot = np.zeros(classes, emb.dtype)
        onehot[int(target_class)] = 1

        def score(a):
            return ops.sum(ops.mul(head(ops.global_avg_pool(a)), onehot))

        values = cam_from_activations(emb, score)
    finally:
        for p, g in saved:
            p.grad = g
        bundle.train(was_training)
    return ActivationMap(values, CAM_LAYER, int(target_class))


def predicted_class(bundle, image) -> int:
    """Arg-max logit for one normalized image, with BN in eval mode."""
    was_training = bundle.training
    bundle.eval()
    try:
        with no_tape():
            emb = bundle.phi_tilde(bundle.F(Tensor(np.asarray(image)[None])))
            logits = bundle.head(ops.global_avg_pool(emb)).data[0]
    finally:
        bundle.train(was_training)
    return int(np.argmax(logits))


# --------------------------------------------------------------------------
# rendering


def color_ramp(t: np.ndarray) -> np.ndarray:
    """Fixed blue-cyan-yellow-red ramp; t in [0, 1] -> RGB floats in [0, 255]."""
    stops = np.array([0.0, 0.35, 0.65, 1.0])
    rgb = np.array([[0, 0, 160], [0, 200, 255], [255, 230, 0], [220, 0, 0]], dtype=np.float64)
    t = np.clip(t, 0, 1)
    return np.stack([np.interp(t, stops, rgb[:, c]) for c in range(3)], axis=-1)


def upscale(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear upscale to the image size, scaled into [0, 1] by the map maximum."""
    up = resize(values.astype(np.float64), height, width)
    peak = up.max()
    return up / peak if peak > 0 else np.zeros_like(up)


def overlay_image(cam: ActivationMap, image: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend the ramp-coloured map over an (H, W, 3) uint8 image."""
    img = np.asarray(image, dtype=np.float64)
    heat = color_ramp(upscale(cam.values, *img.shape[:2]))
    return np.clip(np.rint((1 - alpha) * img + alpha * heat), 0, 255).astype(np.uint8)


def overlay(cam: ActivationMap, image: np.ndarray, path) -> Path:
    path = Path(path)
    Image.fromarray(overlay_image(cam, image)).save(path, format="PNG")
    return path


def save_raw(cam: ActivationMap, path) -> Path:
    """Grayscale PNG of the map at its own resolution, scaled by its maximum."""
    v = cam.values
    peak = v.max()
    gray = np.rint(255 * v / peak) if peak > 0 else np.zeros_like(v)
    path = Path(path)
    Image.fromarray(gray.astype(np.uint8), mode="L").save(path, format="PNG")
    return path


def write_cam(cam: ActivationMap, image: np.ndarray, out_dir, image_name: str) -> tuple[Path, Path]:
    """Writes ``<image>__cam_<class>.png`` (overlay) and ``..._raw.png`` (grayscale map)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{Path(image_name).stem}__cam_{cam.target_class}"
    return overlay(cam, image, out_dir / f"{stem}.png"), save_raw(cam, out_dir / f"{stem}_raw.png")


def face_region(kps, transform: np.ndarray):
    """Bounding box of the keypoints after a 2x3 image transform (e.g. the alignment crop)."""
    from .misalign import BBox

    pts = kps.points @ transform[:, :2].T + transform[:, 2]
    (x1, y1), (x2, y2) = pts.min(axis=0), pts.max(axis=0)
    return BBox(x1, y1, x2 + 1, y2 + 1)  # pixel centres -> covering edges


def region_contrast(values: np.ndarray, box, frame: int) -> tuple[float, float]:
    """Mean map value inside vs outside a box given in a frame x frame image."""
    h, w = values.shape
    ys = (np.arange(h) + 0.5) * frame / h
    xs = (np.arange(w) + 0.5) * frame / w
    inside = ((ys[:, None] >= box.y1) & (ys[:, None] <= box.y2)
              & (xs[None] >= box.x1) & (xs[None] <= box.x2))
    if inside.all() or not inside.any():
        raise ValueError("box must split the map into two non-empty regions")
    return float(values[inside].mean()), float(values[~inside].mean())
