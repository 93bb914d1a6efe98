"""
Synthetic faces, alignment and the shape prior
==============================================

Every identity is a small vector of face-shape parameters. Each render
perturbs pose, scale, lighting and colour, and records the 68 keypoints
and a tight face box alongside the image.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from fsgfa import data as D
from fsgfa.shapeprior import postprocess_z, render_heatmaps

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

# three people, four renders each
specs = D.make_identities(3, seed=0)
rng = np.random.default_rng(0)
renders = [[D.render_identity_sample(s, D.Jitter(), rng) for _ in range(4)] for s in specs]

fig, axes = plt.subplots(3, 4, figsize=(8, 6))
for row, person in zip(axes, renders):
    for ax, (img, kps, box) in zip(row, person):
        ax.imshow(img)
        ax.plot(*kps.points.T, ".", ms=1.5, color="lime")
        ax.add_patch(plt.Rectangle((box.x1 - 0.5, box.y1 - 0.5), box.width, box.height, fill=False, color="red"))
        ax.axis("off")
fig.savefig(out / "faces.png", dpi=100)

# %%
# The well-aligned crop maps five reference points (eye centres, nose tip,
# mouth corners) onto a fixed template with a similarity transform. The
# random crop is what the network sees during training.

img, kps, box = renders[0][0]
aligned = D.well_aligned_crop(img, kps, box, 112)
loose = D.random_crop(img, box, np.random.default_rng(1), 112)
print("aligned crop", aligned.shape, "random crop", loose.shape)

# %%
# The shape prior: one Gaussian per keypoint, merged by per-pixel max into
# three channels (brows and eyes, nose and mouth, face boundary).

raw = render_heatmaps(kps, out=64)
prior = postprocess_z(raw, out=28)
print("raw heatmaps", raw.shape, "-> prior", prior.shape, "range", prior.min(), prior.max())

fig, axes = plt.subplots(1, 5, figsize=(12, 2.6))
for ax, im, title in zip(axes, [aligned, loose, *prior], ["aligned", "random crop", "eyes+brows", "nose+mouth", "boundary"]):
    ax.imshow(im.astype(np.uint8) if im.ndim == 3 else im, cmap=None if im.ndim == 3 else "magma")
    ax.set_title(title, fontsize=9)
    ax.axis("off")
fig.savefig(out / "alignment_and_prior.png", dpi=100)
