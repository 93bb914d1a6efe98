"""Bilinear resampling helpers shared by the heatmap and cropping code.

Pixel centres sit at integer coordinates; resizing uses the half-pixel
convention (``u = (x + 0.5) * out / in - 0.5``).
"""

from __future__ import annotations

import numpy as np
from PIL import Image
from scipy import ndimage

GRAY = 127.5


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix doing 1-D half-pixel bilinear interpolation with edge clamping."""
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize(arr: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Bilinear resize of the two leading axes of an (H, W[, C]) image."""
    out_w = out_h if out_w is None else out_w
    h, w = arr.shape[:2]
    rh, rw = bilinear_matrix(h, out_h), bilinear_matrix(w, out_w)
    res = np.tensordot(rh, arr, axes=(1, 0))
    res = np.tensordot(rw, res, axes=(1, 1)).swapaxes(0, 1)
    return res


def resize_chw(stack: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    out_w = out_h if out_w is None else out_w
    rh, rw = bilinear_matrix(stack.shape[1], out_h), bilinear_matrix(stack.shape[2], out_w)
    return np.matmul(np.matmul(rh, stack), rw.T)


def map_to_frame(points: np.ndarray, src_size, dst_size) -> np.ndarray:
    """Scale pixel coordinates between frames of different sizes (half-pixel convention)."""
    sw, sh = src_size
    dw, dh = dst_size
    pts = np.asarray(points, dtype=np.float64)
    return np.stack([(pts[:, 0] + 0.5) * dw / sw - 0.5, (pts[:, 1] + 0.5) * dh / sh - 0.5], axis=1)


def warp_affine(image: np.ndarray, matrix: np.ndarray, out_w: int, out_h: int,
                fill: float = GRAY) -> np.ndarray:
    """Sample ``image`` (H, W, C) at ``matrix @ [u, v, 1]`` for each output pixel (u, v).

    ``matrix`` is the 2x3 map from output coordinates to source coordinates.
    Out-of-frame samples take ``fill``.
    """
    img = np.asarray(image, dtype=np.float64)
    vv, uu = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    sx = matrix[0, 0] * uu + matrix[0, 1] * vv + matrix[0, 2]
    sy = matrix[1, 0] * uu + matrix[1, 1] * vv + matrix[1, 2]
    chans = [ndimage.map_coordinates(img[..., c], [sy, sx], order=1, mode="constant", cval=fill)
             for c in range(img.shape[2])]
    return np.stack(chans, axis=-1)


def crop_resize(image: np.ndarray, box, out_w: int, out_h: int | None = None,
                fill: float = GRAY) -> np.ndarray:
    """Extract box (x1, y1, x2, y2) in pixel-edge coordinates and resample to out size.

    Uses area-aware prefiltering when shrinking by more than 2x so small
    outputs from large boxes do not alias.
    """
    out_h = out_w if out_h is None else out_h
    x1, y1, x2, y2 = (float(v) for v in box)
    sx, sy = (x2 - x1) / out_w, (y2 - y1) / out_h
    img = np.asarray(image, dtype=np.float64)
    if max(sx, sy) > 2.0:
        sigma = [max(sx, sy) / 2.5] * 2 + [0]
        # pad with fill first so blur does not bleed the frame edge inward
        pad = int(np.ceil(3 * sigma[0])) + 1
        img = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), constant_values=fill)
        img = ndimage.gaussian_filter(img, sigma, mode="nearest")
        x1, x2, y1, y2 = x1 + pad, x2 + pad, y1 + pad, y2 + pad
    # output pixel u centre -> source x = x1 + (u + 0.5) * sx - 0.5
    m = np.array([[sx, 0.0, x1 + 0.5 * sx - 0.5], [0.0, sy, y1 + 0.5 * sy - 0.5]])
    return warp_affine(img, m, out_w, out_h, fill)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def save_png(path, image: np.ndarray):
    arr = to_uint8(image)
    Image.fromarray(arr if arr.ndim == 2 or arr.shape[2] != 1 else arr[..., 0]).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)
