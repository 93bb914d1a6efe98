"""Synthetic identity-labelled faces with exact landmarks, and the two training crops.

Coordinates: keypoints put pixel centres at integers; bounding boxes use
pixel edges, so the box (0, 0, W, H) covers a whole W x H image.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image, ImageDraw
from skimage.transform import SimilarityTransform

from .imaging import GRAY, crop_resize, load_png, save_png, warp_affine
from .misalign import BBox
from .shapeprior import KeypointSet

# five-point canonical template (eye centres, nose tip, mouth corners) for a 112 px crop
TEMPLATE_112 = np.array([
    [38.2946, 51.6963],
    [73.5318, 51.5014],
    [56.0252, 71.7366],
    [41.5493, 92.3655],
    [70.7299, 92.2041],
])
RANDOM_CROP_MARGIN = 10.0
NORM_SHIFT, NORM_SCALE = 127.5, 128.0
NORM_LIMIT = 127.5 / 128.0
SUPERSAMPLE = 2


# --------------------------------------------------------------------------
# identities

# (low, high) for every continuous identity parameter, in face-half-width units
_RANGES = {
    "face_ax": (0.92, 1.08),
    "face_ay": (1.18, 1.42),
    "eye_spacing": (0.34, 0.50),
    "eye_y": (-0.30, -0.14),
    "eye_w": (0.13, 0.21),
    "eye_h": (0.06, 0.11),
    "brow_gap": (0.10, 0.20),
    "brow_arch": (0.00, 0.09),
    "brow_thick": (0.04, 0.09),
    "nose_len": (0.28, 0.46),
    "nose_w": (0.09, 0.18),
    "mouth_y": (0.62, 0.80),
    "mouth_w": (0.20, 0.34),
    "mouth_h": (0.05, 0.12),
    "hair_line": (0.38, 0.58),
    "skin_r": (120, 245), "skin_g": (80, 215), "skin_b": (55, 190),
    "hair_r": (10, 200), "hair_g": (10, 150), "hair_b": (10, 120),
    "eye_r": (20, 120), "eye_g": (20, 150), "eye_b": (20, 170),
    "lip_r": (110, 230), "lip_g": (30, 120), "lip_b": (40, 130),
}
MIN_SEPARATION = 0.12  # in [0, 1]-normalised parameter units, max-norm


@dataclass(frozen=True)
class IdentitySpec:
    """Continuous parameters defining one synthetic person."""

    face_ax: float
    face_ay: float
    eye_spacing: float
    eye_y: float
    eye_w: float
    eye_h: float
    brow_gap: float
    brow_arch: float
    brow_thick: float
    nose_len: float
    nose_w: float
    mouth_y: float
    mouth_w: float
    mouth_h: float
    hair_line: float
    skin_r: float
    skin_g: float
    skin_b: float
    hair_r: float
    hair_g: float
    hair_b: float
    eye_r: float
    eye_g: float
    eye_b: float
    lip_r: float
    lip_g: float
    lip_b: float

    @classmethod
    def from_seed(cls, seed) -> "IdentitySpec":
        u = np.random.default_rng(seed).uniform(0, 1, len(_RANGES))
        return cls.from_unit(u)

    @classmethod
    def from_unit(cls, u: np.ndarray) -> "IdentitySpec":
        vals = {k: lo + float(t) * (hi - lo) for (k, (lo, hi)), t in zip(_RANGES.items(), u)}
        return cls(**vals)

    def unit(self) -> np.ndarray:
        return np.array([(getattr(self, k) - lo) / (hi - lo) for k, (lo, hi) in _RANGES.items()])

    def color(self, prefix: str) -> np.ndarray:
        return np.array([getattr(self, f"{prefix}_{c}") for c in "rgb"])


def make_identities(n: int, seed: int, min_separation: float = MIN_SEPARATION) -> list[IdentitySpec]:
    """``n`` identities whose normalised parameters pairwise differ by at least ``min_separation``."""
    rng = np.random.default_rng([seed, 0x1D])
    chosen: list[np.ndarray] = []
    tries = 0
    while len(chosen) < n:
        tries += 1
        if tries > 1000 * max(n, 1):
            raise RuntimeError(f"could not place {n} identities {min_separation} apart")
        u = rng.uniform(0, 1, len(_RANGES))
        if all(np.abs(u - c).max() >= min_separation for c in chosen):
            chosen.append(u)
    return [IdentitySpec.from_unit(u) for u in chosen]


# --------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class Jitter:
    """Per-render nuisance ranges (symmetric around the neutral value)."""

    rotation_deg: float = 12.0
    scale: float = 0.10
    shift: float = 0.06  # fraction of the canvas
    yaw: float = 0.12  # horizontal shift of inner features, face-width units
    brightness: float = 0.25
    gradient: float = 0.20
    tint: float = 18.0  # per-channel colour shift, grey levels
    background: float = 87.5  # spread of the background colour around mid-gray

    @classmethod
    def none(cls) -> "Jitter":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def _ellipse(cx, cy, ax, ay, n, start=0.0, stop=2 * np.pi, endpoint=False):
    t = np.linspace(start, stop, n, endpoint=endpoint)
    return np.stack([cx + ax * np.cos(t), cy + ay * np.sin(t)], axis=1)


def face_geometry(spec: IdentitySpec, yaw: float = 0.0) -> dict[str, np.ndarray]:
    """Keypoints and drawing primitives in face-local units (y points down)."""
    s = spec
    ex = s.eye_spacing
    dx = yaw  # inner features slide sideways under yaw
    jaw_t = np.linspace(-0.12, np.pi + 0.12, 17)
    jaw = np.stack([-s.face_ax * np.cos(jaw_t), s.face_ay * np.sin(jaw_t)], axis=1)

    brows, eyes, eye_polys = [], [], []
    for side in (-1, 1):
        cx = side * ex + dx
        bx = cx + np.linspace(-1.15, 1.15, 5) * s.eye_w
        rel = (bx - cx) / (1.15 * s.eye_w)
        by = s.eye_y - s.eye_h - s.brow_gap - s.brow_arch * (1 - rel**2)
        brows.append(np.stack([bx, by], axis=1))
        # landmark order: left corner, two upper, right corner, two lower
        ang = np.deg2rad([180, 240, 300, 0, 60, 120])
        pts = np.stack([cx + 0.8 * s.eye_w * np.cos(ang), s.eye_y + 0.8 * s.eye_h * np.sin(ang)], axis=1)
        eyes.append(pts)
        eye_polys.append(_ellipse(cx, s.eye_y, s.eye_w, s.eye_h, 32))

    top = s.eye_y + 0.02
    tip = s.eye_y + s.nose_len
    bridge = np.stack([np.full(4, dx), np.linspace(top, tip, 4)], axis=1)
    base = np.stack([dx + np.linspace(-1, 1, 5) * s.nose_w, np.full(5, tip + 0.06)], axis=1)
    nose_poly = np.array([[dx, top], [dx + s.nose_w * 1.1, tip + 0.07], [dx - s.nose_w * 1.1, tip + 0.07]])

    my = s.mouth_y
    outer_t = np.pi + np.linspace(0, 2 * np.pi, 12, endpoint=False)
    outer = np.stack([dx + s.mouth_w * np.cos(outer_t), my + s.mouth_h * np.sin(outer_t)], axis=1)
    inner_t = np.pi + np.linspace(0, 2 * np.pi, 8, endpoint=False)
    inner = np.stack([dx + 0.7 * s.mouth_w * np.cos(inner_t), my + 0.35 * s.mouth_h * np.sin(inner_t)], axis=1)

    kps = np.concatenate([jaw, brows[0], brows[1], bridge, base, eyes[0], eyes[1], outer, inner])
    return {
        "keypoints": kps,
        "face": _ellipse(0.0, 0.0, s.face_ax, s.face_ay, 96),
        "hair": _ellipse(0.0, 0.0, s.face_ax * 1.04, s.face_ay * 1.04, 48,
                         np.pi + np.arcsin(s.hair_line), 2 * np.pi - np.arcsin(s.hair_line), True),
        "eyes": eye_polys,
        "brows": brows,
        "nose": nose_poly,
        "lips": _ellipse(dx, my, s.mouth_w, s.mouth_h, 32),
        "inner_mouth": _ellipse(dx, my, 0.7 * s.mouth_w, 0.35 * s.mouth_h, 24),
    }


@dataclass(frozen=True)
class RenderParams:
    canvas: int
    face_scale: float  # pixels per face-local unit
    angle: float  # radians
    center: tuple[float, float]
    yaw: float
    brightness: float
    gradient: float
    background: tuple[float, float, float]
    tint: tuple[float, float, float] = (0.0, 0.0, 0.0)


def sample_render_params(rng: np.random.Generator, canvas: int, jitter: Jitter) -> RenderParams:
    u = lambda r: float(rng.uniform(-r, r)) if r > 0 else 0.0  # noqa: E731
    scale = canvas * 0.25 * (1 + u(jitter.scale))
    center = (canvas / 2 - 0.5 + u(jitter.shift) * canvas, canvas / 2 - 0.5 + u(jitter.shift) * canvas)
    bg = tuple(127.5 + u(jitter.background) for _ in range(3))
    tint = (u(jitter.tint), u(jitter.tint), u(jitter.tint))
    return RenderParams(canvas, scale, np.deg2rad(u(jitter.rotation_deg)), center, u(jitter.yaw),
                        1 + u(jitter.brightness), u(jitter.gradient), bg, tint)


def _to_canvas(pts: np.ndarray, p: RenderParams) -> np.ndarray:
    c, s = np.cos(p.angle), np.sin(p.angle)
    rot = np.array([[c, -s], [s, c]]) * p.face_scale
    return pts @ rot.T + np.asarray(p.center)


def render_face(spec: IdentitySpec, params: RenderParams) -> tuple[np.ndarray, KeypointSet, BBox]:
    """Draw one face; returns (H, W, 3) uint8 image, its 68 keypoints and tight face box."""
    geo = face_geometry(spec, params.yaw)
    n = params.canvas
    big = n * SUPERSAMPLE
    img = Image.new("RGB", (big, big), tuple(int(v) for v in params.background))
    draw = ImageDraw.Draw(img)

    tint = np.asarray(params.tint)

    def fill(color):
        return tuple(int(np.clip(c, 0, 255)) for c in np.asarray(color) + tint)

    def poly(pts, color):
        q = (_to_canvas(pts, params) + 0.5) * SUPERSAMPLE
        draw.polygon([tuple(v) for v in q], fill=fill(color))

    def line(pts, color, width):
        q = (_to_canvas(pts, params) + 0.5) * SUPERSAMPLE
        w = max(1, int(round(width * params.face_scale * SUPERSAMPLE)))
        draw.line([tuple(v) for v in q], fill=fill(color), width=w)

    skin, hair = spec.color("skin"), spec.color("hair")
    poly(geo["face"], skin)
    poly(geo["hair"], hair)
    for e in geo["eyes"]:
        poly(e, spec.color("eye"))
    for b in geo["brows"]:
        line(b, hair * 0.8, spec.brow_thick)
    poly(geo["nose"], skin * 0.82)
    poly(geo["lips"], spec.color("lip"))
    poly(geo["inner_mouth"], spec.color("lip") * 0.45)

    small = np.asarray(img.reduce(SUPERSAMPLE), dtype=np.float64)
    # illumination: global gain times a left-to-right ramp
    ramp = 1 + params.gradient * np.linspace(-1, 1, n)[None, :, None]
    small = np.clip(small * params.brightness * ramp, 0, 255)

    kps = KeypointSet(_to_canvas(geo["keypoints"], params), (n, n))
    # analytic extent of the rotated face ellipse
    c, s = np.cos(params.angle), np.sin(params.angle)
    ax, ay = spec.face_ax * params.face_scale, spec.face_ay * params.face_scale
    hx, hy = np.hypot(ax * c, ay * s), np.hypot(ax * s, ay * c)
    cx, cy = params.center
    box = BBox(cx - hx + 0.5, cy - hy + 0.5, cx + hx + 0.5, cy + hy + 0.5)
    return np.rint(small).astype(np.uint8), kps, box


def render_identity_sample(spec: IdentitySpec, jitter: Jitter, rng: np.random.Generator,
                           canvas: int = 144) -> tuple[np.ndarray, KeypointSet, BBox]:
    return render_face(spec, sample_render_params(rng, canvas, jitter))


# --------------------------------------------------------------------------
# crops


def reference_points(kps: KeypointSet) -> np.ndarray:
    """Eye centres, nose tip and mouth corners derived from the 68 landmarks."""
    p = kps.points
    return np.stack([p[36:42].mean(axis=0), p[42:48].mean(axis=0), p[30], p[48], p[54]])


def alignment_transform(kps: KeypointSet, out: int) -> SimilarityTransform:
    """Least-squares similarity taking the five reference points onto the template."""
    src = reference_points(kps)
    centred = src - src.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[0] == 0 or sv[1] / sv[0] < 1e-6:
        raise ValueError("reference keypoints are collinear; similarity transform is undefined")
    tform = SimilarityTransform()
    if not tform.estimate(src, TEMPLATE_112 * (out / 112.0)):
        raise ValueError("similarity transform estimation failed")
    return tform


def well_aligned_crop(image: np.ndarray, kps: KeypointSet, bbox: Optional[BBox] = None,
                      out: int = 224, return_transform: bool = False):
    """Warp the face so its eyes, nose and mouth land on the canonical template.

    ``bbox`` is accepted for interface symmetry; the landmarks fully determine
    the crop. Out-of-frame pixels are mid-gray.
    """
    tform = alignment_transform(kps, out)
    inv = np.linalg.inv(tform.params)[:2]
    img = np.asarray(image, dtype=np.float64)
    scale = 1.0 / tform.scale
    if scale > 2.0:
        from scipy import ndimage

        img = ndimage.gaussian_filter(img, [scale / 2.5, scale / 2.5, 0], mode="nearest")
    warped = warp_affine(img, inv, out, out, GRAY)
    return (warped, tform.params[:2]) if return_transform else warped


def random_crop(image: np.ndarray, bbox: BBox, rng: np.random.Generator, out: int = 224,
                margin: float = RANDOM_CROP_MARGIN, return_transform: bool = False):
    """Over-sampled crop: widen the box by ``margin`` px, resize to out*256/224, take a random window.

    Window offsets are uniform integers over [0, resized - out].
    """
    h, w = np.asarray(image).shape[:2]
    b = bbox.expand(margin)
    b = BBox(max(b.x1, 0.0), max(b.y1, 0.0), min(b.x2, float(w)), min(b.y2, float(h)))
    if not b.valid:
        raise ValueError(f"box {bbox} lies outside the {w}x{h} image")
    big = int(round(out * 256 / 224))
    resized = crop_resize(image, b.as_tuple(), big, big)
    ox, oy = (int(v) for v in rng.integers(0, big - out + 1, 2))
    crop = resized[oy:oy + out, ox:ox + out]
    if not return_transform:
        return crop
    sx, sy = b.width / big, b.height / big
    m = np.array([[1 / sx, 0.0, (0.5 - b.x1) / sx - 0.5 - ox],
                  [0.0, 1 / sy, (0.5 - b.y1) / sy - 0.5 - oy]])
    return crop, m


def normalize(image) -> np.ndarray:
    """uint8 (H, W, 3) -> float32 (3, H, W) via (v - 127.5) / 128."""
    arr = np.asarray(image)
    out = (arr.astype(np.float32) - np.float32(NORM_SHIFT)) / np.float32(NORM_SCALE)
    return np.moveaxis(out, -1, 0) if out.ndim == 3 else out


def denormalize(t) -> np.ndarray:
    """Exact inverse of :func:`normalize` with clamping to [0, 255]."""
    arr = np.asarray(t, dtype=np.float64)
    arr = np.moveaxis(arr, 0, -1) if arr.ndim == 3 else arr
    return np.clip(np.rint(arr * NORM_SCALE + NORM_SHIFT), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# on-disk dataset

MANIFEST = "manifest.tsv"
_COLUMNS = ("split", "label", "identity", "image", "keypoints", "x1", "y1", "x2", "y2", "seed")


@dataclass(frozen=True)
class Record:
    split: str
    label: int
    identity: str
    image: str
    keypoints: str
    bbox: BBox
    seed: str


@dataclass
class DatasetManifest:
    root: Path
    records: list[Record]

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def num_classes(self, split: str = "train") -> int:
        labels = {r.label for r in self.split(split)}
        return len(labels)

    def load(self, rec: Record) -> tuple[np.ndarray, KeypointSet, BBox]:
        img = load_png(self.root / rec.image)
        text = (self.root / rec.keypoints).read_text()
        return img, KeypointSet.from_text(text, (img.shape[1], img.shape[0])), rec.bbox

    @classmethod
    def read(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST
        if not path.exists():
            raise FileNotFoundError(f"no {MANIFEST} under {root}")
        records = []
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh, delimiter="\t")
            if tuple(reader.fieldnames or ()) != _COLUMNS:
                raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
            for row in reader:
                records.append(Record(row["split"], int(row["label"]), row["identity"], row["image"],
                                      row["keypoints"], BBox(*(float(row[k]) for k in ("x1", "y1", "x2", "y2"))),
                                      row["seed"]))
        manifest = cls(root, records)
        manifest.validate()
        return manifest

    def validate(self):
        for split in {r.split for r in self.records}:
            labels = sorted({r.label for r in self.split(split)})
            if labels != list(range(len(labels))):
                raise ValueError(f"{split} labels are not contiguous from 0")
        for r in self.records:
            for rel in (r.image, r.keypoints):
                if not (self.root / rel).exists():
                    raise FileNotFoundError(f"manifest lists missing file {rel}")

    def write(self):
        with (self.root / MANIFEST).open("w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(_COLUMNS)
            for r in self.records:
                w.writerow([r.split, r.label, r.identity, r.image, r.keypoints,
                            *(f"{v:.4f}" for v in r.bbox.as_tuple()), r.seed])


def generate_dataset(root, identities: int = 20, renders: int = 30, seed: int = 0,
                     val_identities: int = 10, val_renders: int = 12, canvas: int = 144,
                     jitter: Jitter = Jitter(), force: bool = False) -> DatasetManifest:
    """Render train and held-out val identities to ``root`` and write the manifest.

    Val identities are distinct people from the train identities.
    """
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise FileExistsError(f"{root} exists and is not empty (use force to overwrite)")
    root.mkdir(parents=True, exist_ok=True)
    specs = make_identities(identities + val_identities, seed)
    records = []
    plan = [("train", k, renders) for k in range(identities)]
    plan += [("val", k, val_renders) for k in range(val_identities)]
    for split, label, count in plan:
        spec = specs[label if split == "train" else identities + label]
        ident = f"id_{label}"
        folder = root / split / ident
        folder.mkdir(parents=True, exist_ok=True)
        for j in range(count):
            sample_seed = [seed, 0 if split == "train" else 1, label, j]
            img, kps, box = render_identity_sample(spec, jitter, np.random.default_rng(sample_seed), canvas)
            rel = f"{split}/{ident}/img_{j}"
            save_png(root / f"{rel}.png", img)
            (root / f"{rel}.kps").write_text(kps.to_text())
            (root / f"{rel}.bbox").write_text(box.to_text())
            records.append(Record(split, label, f"{split}/{ident}", f"{rel}.png", f"{rel}.kps",
                                  BBox.from_text(box.to_text()), "-".join(map(str, sample_seed))))
    manifest = DatasetManifest(root, records)
    manifest.write()
    return manifest


def tree_digest(root) -> str:
    """Content hash of every file under ``root`` (paths and bytes)."""
    h = hashlib.sha256()
    root = Path(root)
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# training pairs


@dataclass
class SamplePair:
    x_w: np.ndarray  # (3, out, out) normalised
    x_r: np.ndarray  # (3, out, out) normalised
    keypoints: KeypointSet  # in x_r's frame
    label: int


class PairSource:
    """In-memory view of a split that yields (x^w, x^r) pairs.

    Well-aligned crops are deterministic and cached; random crops are drawn
    from the generator passed to :meth:`pair`.
    """

    def __init__(self, manifest: DatasetManifest, split: str = "train", out: int = 224):
        self.records = manifest.split(split)
        if not self.records:
            raise ValueError(f"split {split!r} is empty")
        self.out = out
        self.images, self.kps, self.boxes = [], [], []
        for r in self.records:
            img, kps, box = manifest.load(r)
            self.images.append(img)
            self.kps.append(kps)
            self.boxes.append(box)
        self._aligned: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.records)

    def label(self, i: int) -> int:
        return self.records[i].label

    def aligned(self, i: int) -> np.ndarray:
        if i not in self._aligned:
            crop = well_aligned_crop(self.images[i], self.kps[i], self.boxes[i], self.out)
            self._aligned[i] = normalize(np.clip(np.rint(crop), 0, 255).astype(np.uint8))
        return self._aligned[i]

    def pair(self, i: int, rng: np.random.Generator) -> SamplePair:
        crop, m = random_crop(self.images[i], self.boxes[i], rng, self.out, return_transform=True)
        x_r = normalize(np.clip(np.rint(crop), 0, 255).astype(np.uint8))
        kps = self.kps[i].transformed(m, (self.out, self.out))
        return SamplePair(self.aligned(i), x_r, kps, self.records[i].label)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)
