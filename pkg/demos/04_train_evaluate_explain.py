"""
Train, evaluate under misalignment, explain
===========================================

A short end-to-end pass on a small synthetic dataset: joint training with
the three losses, verification accuracy under several crop settings, and
class activation maps over the embedding layer. The run is kept small so
it finishes in a few minutes on one core; the numbers are not meant to be
good, only to show the moving parts.
"""

import tempfile
from pathlib import Path

import numpy as np

from fsgfa import data as D
from fsgfa import evaluation as E
from fsgfa import explain as X
from fsgfa import networks as N
from fsgfa import train as T
from fsgfa.imaging import to_uint8
from fsgfa.shapeprior import GroundTruthProvider

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)
root = Path(tempfile.mkdtemp()) / "faces"

manifest = D.generate_dataset(root, identities=6, renders=8, val_identities=4, val_renders=6, seed=0)
print(len(manifest.split("train")), "training images,", len(manifest.split("val")), "held-out images")

# %%
# Training. Each sample pairs a randomly cropped input with the keypoint
# aligned target that the decoder has to reconstruct.

net = N.get_config("desk", num_classes=manifest.num_classes("train"))
bundle = N.build(net, 0)
source = D.PairSource(manifest, "train", out=net.input_size)
cfg = T.TrainConfig(epochs=3, batch_size=8, cls_mode="per_sample", pa_reduction="mean")
result = T.train(bundle, source, GroundTruthProvider(), cfg,
                 on_epoch=lambda e: print(f"epoch {e.epoch}: cls {e.L_cls:.3f} pa {e.L_pa:.3f} "
                                          f"fa {e.L_fa:.4f} total {e.L_total:.3f}"))

# %%
# Verification on held-out identities. Only the feature extractor and the
# embedding layer are needed at this point; the shape prior, decoder,
# aggregation branch and classifier stay behind.

records = manifest.split("val")
samples = E.load_samples(manifest, records)
pairs = E.make_pairs([r.label for r in records], 60, 10, seed=0)
for mode in ("optimal", "m1", "m3", "m5", "random", "whole"):
    feats = E.extract_features(bundle, samples, E.parse_crop_mode(mode), seed=0)
    r = E.verify_10fold(pairs.distances(feats), pairs.same, pairs.fold)
    print(f"{mode:>8s}: {100 * r.mean:5.1f} +- {100 * r.std:4.1f}")

# %%
# Class activation maps for a few training images, scored by their own
# class logit.

for rec in manifest.split("train")[:3]:
    img, kps, box = manifest.load(rec)
    crop, m = D.well_aligned_crop(img, kps, box, net.input_size, return_transform=True)
    crop = to_uint8(crop)
    cam = X.grad_cam(bundle, D.normalize(crop), rec.label)
    inside, outside = X.region_contrast(cam.values, X.face_region(kps, m), net.input_size)
    X.write_cam(cam, crop, out, rec.image.replace("/", "_"))
    print(f"{rec.image}: mean activation inside face {inside:.4f}, outside {outside:.4f}")
