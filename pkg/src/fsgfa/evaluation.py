"""Verification and identification protocols over unit-norm face features."""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import networks
from .data import DatasetManifest, Record, normalize, well_aligned_crop
from .imaging import to_uint8
from .misalign import BBox, MarginParams, apply_margin, crop_by_box, preset, sample_random_margin
from .shapeprior import KeypointSet

# --------------------------------------------------------------------------
# crop modes


@dataclass(frozen=True)
class CropMode:
    kind: str  # optimal | margin | random | whole
    margin: Optional[MarginParams] = None
    label: str = ""

    @property
    def name(self) -> str:
        return self.label or self.kind


def parse_crop_mode(text: str) -> CropMode:
    """'optimal', 'random', 'whole', 'm1'..'m7' or 'margin:a,b,c,d'."""
    t = text.strip().lower()
    if t in ("optimal", "random", "whole"):
        return CropMode(t)
    if t.startswith("m") and t[1:].isdigit():
        return CropMode("margin", preset(int(t[1:])), t)
    if t.startswith("margin:"):
        vals = [float(v) for v in t.split(":", 1)[1].split(",")]
        if len(vals) != 4:
            raise ValueError(f"margin needs four values, got {text!r}")
        return CropMode("margin", MarginParams(*vals), t)
    raise ValueError(f"unknown crop mode {text!r}")


def eval_crop(image: np.ndarray, kps: KeypointSet, box: BBox, mode: CropMode, out: int,
              rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Test-time preprocessing for one image; returns uint8 (out, out, 3)."""
    if mode.kind == "optimal":
        crop = well_aligned_crop(image, kps, box, out)
    elif mode.kind == "margin":
        crop = crop_by_box(image, apply_margin(box, mode.margin), out)
    elif mode.kind == "random":
        if rng is None:
            raise ValueError("random crop mode needs a generator")
        crop = crop_by_box(image, apply_margin(box, sample_random_margin(rng)), out)
    elif mode.kind == "whole":
        crop = crop_by_box(image, None, out)
    else:
        raise ValueError(f"unknown crop mode {mode.kind!r}")
    return to_uint8(crop)


def image_rng(seed: int, image_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(image_id.encode("utf-8"))])


def unit_normalize(feats: np.ndarray) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if np.any(norms == 0):
        bad = np.flatnonzero(norms[:, 0] == 0)
        raise ValueError(f"zero feature vector(s) at {bad[:5].tolist()}; cannot normalize")
    return feats / norms


def extract_features(bundle: networks.ModelBundle, samples: Sequence[tuple], mode: CropMode,
                     seed: int = 0, batch_size: int = 32) -> np.ndarray:
    """Unit-norm test-time features for (image, keypoints, box, image_id) samples.

    Runs the bundle in eval mode; the previous mode is restored afterwards.
    """
    out = bundle.config.input_size
    was_training = bundle.F.training
    bundle.eval()
    feats = []
    try:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            crops = [normalize(eval_crop(img, kps, box, mode, out, image_rng(seed, iid)))
                     for img, kps, box, iid in chunk]
            feats.append(networks.forward_infer(bundle, np.stack(crops)))
    finally:
        bundle.train(was_training)
    return unit_normalize(np.concatenate(feats))


def load_samples(manifest: DatasetManifest, records: Iterable[Record]) -> list[tuple]:
    samples = []
    for r in records:
        img, kps, box = manifest.load(r)
        samples.append((img, kps, box, r.image))
    return samples


# --------------------------------------------------------------------------
# metrics


def cosine_distance(a, b) -> float:
    """1 - cos(a, b), in [0, 2]. Pair lists skip the norms since features are already unit length."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm == 0:
        raise ValueError("cosine distance is undefined for a zero vector")
    return float(1.0 - np.dot(a, b) / norm)


@dataclass(frozen=True)
class PairList:
    a: np.ndarray  # indices (or names) of the first image
    b: np.ndarray
    same: np.ndarray  # bool
    fold: np.ndarray  # int, 0..k-1

    def __len__(self):
        return len(self.same)

    def distances(self, feats: np.ndarray, index: Optional[dict] = None) -> np.ndarray:
        ia = self.a if index is None else np.array([index[k] for k in self.a])
        ib = self.b if index is None else np.array([index[k] for k in self.b])
        f = np.asarray(feats, dtype=np.float64)
        return 1.0 - np.einsum("ij,ij->i", f[ia], f[ib])


def make_pairs(labels: Sequence[int], n_pairs: int = 600, folds: int = 10, seed: int = 0) -> PairList:
    """Balanced pairs in contiguous folds: each fold holds equal positives and negatives."""
    labels = np.asarray(labels)
    if n_pairs % (2 * folds):
        raise ValueError("n_pairs must be divisible by 2 * folds")
    rng = np.random.default_rng([seed, 0xFA])
    by_label = {l: np.flatnonzero(labels == l) for l in np.unique(labels)}
    pos_pool = [(i, j) for idx in by_label.values() for k, i in enumerate(idx) for j in idx[k + 1:]]
    half = n_pairs // 2
    if len(pos_pool) < half or len(by_label) < 2:
        raise ValueError("not enough images for the requested number of pairs")
    pos = [pos_pool[k] for k in rng.choice(len(pos_pool), half, replace=False)]
    neg, seen = [], set()
    while len(neg) < half:
        i, j = (int(v) for v in rng.choice(len(labels), 2, replace=False))
        key = (min(i, j), max(i, j))
        if labels[i] != labels[j] and key not in seen:
            seen.add(key)
            neg.append(key)
    per = half // folds
    a, b, same, fold = [], [], [], []
    for f in range(folds):
        block = [(p, True) for p in pos[f * per:(f + 1) * per]] + [(n, False) for n in neg[f * per:(f + 1) * per]]
        for (i, j), s in block:
            a.append(i)
            b.append(j)
            same.append(s)
            fold.append(f)
    return PairList(np.array(a), np.array(b), np.array(same), np.array(fold))


def write_pairs(path, pairs: PairList, names: Sequence[str]):
    with Path(path).open("w") as fh:
        for i, j, s, f in zip(pairs.a, pairs.b, pairs.same, pairs.fold):
            fh.write(f"{names[i]}\t{names[j]}\t{int(s)}\t{f}\n")


def read_pairs(path, names: Sequence[str]) -> PairList:
    index = {n: k for k, n in enumerate(names)}
    a, b, same, fold = [], [], [], []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 4 or parts[2] not in ("0", "1"):
            raise ValueError(f"{path}:{line_no}: expected 'imgA imgB 0|1 fold'")
        a.append(index[parts[0]])
        b.append(index[parts[1]])
        same.append(parts[2] == "1")
        fold.append(int(parts[3]))
    return PairList(np.array(a), np.array(b), np.array(same), np.array(fold))


def threshold_candidates(dist: np.ndarray) -> np.ndarray:
    """Midpoints between consecutive distinct distances, plus one below and one above all."""
    u = np.unique(dist)
    return np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2, [u[-1] + 1.0]])


def accuracy_at(dist: np.ndarray, same: np.ndarray, t: float) -> float:
    """Fraction correct when distance <= t is called a match."""
    return float(np.mean((dist <= t) == same))


def best_threshold(dist: np.ndarray, same: np.ndarray) -> float:
    """Smallest candidate threshold with maximal accuracy."""
    cands = threshold_candidates(dist)
    order = np.argsort(dist, kind="stable")
    d, s = dist[order], same[order].astype(np.int64)
    # matches for threshold c: all pairs with d <= c
    k = np.searchsorted(d, cands, side="right")
    tp = np.concatenate([[0], np.cumsum(s)])[k]
    fp = k - tp
    correct = tp + (len(d) - s.sum()) - fp
    return float(cands[int(np.argmax(correct))])


@dataclass(frozen=True)
class VerificationResult:
    fold_accuracy: np.ndarray
    thresholds: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracy))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_accuracy))


def verify_10fold(dist: np.ndarray, same: np.ndarray, fold: np.ndarray) -> VerificationResult:
    """Per held-out fold, apply the threshold that maximises accuracy on the other folds."""
    dist, same, fold = np.asarray(dist, dtype=np.float64), np.asarray(same, bool), np.asarray(fold)
    ids = np.unique(fold)
    accs, ths = [], []
    for f in ids:
        test = fold == f
        if test.all():
            raise ValueError("need at least two folds")
        t = best_threshold(dist[~test], same[~test])
        ths.append(t)
        accs.append(accuracy_at(dist[test], same[test], t))
    if not len(ids):
        raise ValueError("empty pair list")
    return VerificationResult(np.array(accs), np.array(ths))


def _roc_counts(dist: np.ndarray, same: np.ndarray):
    """Cumulative (fp, tp) integer counts at each distinct distance threshold, from (0, 0)."""
    order = np.argsort(dist, kind="stable")
    d, s = dist[order], same[order].astype(np.int64)
    last = np.r_[d[1:] != d[:-1], True]  # close each run of ties
    tp = np.cumsum(s)[last]
    fp = np.cumsum(1 - s)[last]
    return np.r_[0, fp], np.r_[0, tp]


def roc_curve(dist, same, points: Optional[int] = None) -> list[tuple[float, float]]:
    """(FPR, TPR) pairs sweeping the match threshold from below all distances to above.

    With ``points``, TPR is reported at that many evenly spaced FPR values
    (the best TPR reachable without exceeding each FPR).
    """
    dist, same = np.asarray(dist, dtype=np.float64), np.asarray(same, bool)
    P, N = int(same.sum()), int((~same).sum())
    if P == 0 or N == 0:
        raise ValueError("ROC needs both positive and negative pairs")
    fp, tp = _roc_counts(dist, same)
    fpr, tpr = fp / N, tp / P
    if points is None:
        return list(zip(fpr.tolist(), tpr.tolist()))
    grid = np.linspace(0, 1, points)
    idx = np.searchsorted(fpr, grid, side="right") - 1
    return list(zip(grid.tolist(), tpr[idx].tolist()))


def auc(dist, same) -> float:
    """Trapezoidal area under the exact ROC, evaluated in integer arithmetic."""
    dist, same = np.asarray(dist, dtype=np.float64), np.asarray(same, bool)
    fp, tp = _roc_counts(dist, same)
    twice = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return twice / (2 * int(same.sum()) * int((~same).sum()))


def identify_rank1(gallery, gallery_labels, probes, probe_labels, distractors=None) -> float:
    """Fraction of probes whose nearest gallery entry (distractors included) has their label."""
    g = np.asarray(gallery, dtype=np.float64)
    gl = np.asarray(gallery_labels)
    if len(g) == 0:
        raise ValueError("gallery is empty")
    if distractors is not None and len(distractors):
        g = np.concatenate([g, np.asarray(distractors, dtype=np.float64)])
        gl = np.concatenate([gl, np.full(len(distractors), -1, dtype=gl.dtype)])
    dist = 1.0 - np.asarray(probes, dtype=np.float64) @ g.T
    nearest = np.argmin(dist, axis=1)
    return float(np.mean(gl[nearest] == np.asarray(probe_labels)))


# --------------------------------------------------------------------------
# reports


def write_accuracy_csv(path, results: dict[str, VerificationResult]):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "mean", "std"])
        for mode, r in results.items():
            w.writerow([mode, f"{100 * r.mean:.2f}", f"{100 * r.std:.2f}"])


def write_roc_csv(path, curve: list[tuple[float, float]]):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        w.writerows((f"{a:.6f}", f"{b:.6f}") for a, b in curve)


def write_roc_svg(path, curves: dict[str, list[tuple[float, float]]], title: str = "ROC"):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "roc"}):  # stable element ids
        _draw_roc(plt, path, curves, title)


def _draw_roc(plt, path, curves, title):
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for name, curve in curves.items():
        xs, ys = zip(*curve)
        ax.step(xs, ys, where="post", label=name, linewidth=1.2)
    ax.plot([0, 1], [0, 1], color="0.7", linewidth=0.8, linestyle="--")
    ax.set(xlim=(0, 1), ylim=(0, 1.01), xlabel="false positive rate", ylabel="true positive rate", title=title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
