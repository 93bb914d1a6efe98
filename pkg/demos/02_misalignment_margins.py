"""
Controlled misalignment
=======================

A margin vector (m_x1, m_x2, m_y1, m_y2) moves each edge of a face box
outward by half the margin times the box size. Positive values widen the
crop, so the seven presets sweep from a tight face crop to a loose one
and to lopsided crops that cut into the face.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from fsgfa import data as D
from fsgfa.misalign import BBox, apply_margin, crop_by_box, margin_matrix, preset, sample_random_margin

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

box = BBox(40, 30, 100, 110)
for i in range(1, 8):
    m = preset(i)
    print(f"m{i} {m.as_tuple()} -> {apply_margin(box, m).as_tuple()}")

# the same map written as a 2x2 matrix acting on (x1, x2)
m = preset(2)
print(margin_matrix(m.m_x1, m.m_x2) @ [box.x1, box.x2])

# %%
# Applying the presets to a rendered face. Anything outside the source
# image is filled with mid-gray.

spec = D.make_identities(1, seed=4)[0]
img, kps, face_box = D.render_identity_sample(spec, D.Jitter.none(), np.random.default_rng(0))
fig, axes = plt.subplots(1, 9, figsize=(14, 1.9))
crops = [crop_by_box(img, apply_margin(face_box, preset(i)), 112) for i in range(1, 8)]
crops += [crop_by_box(img, apply_margin(face_box, sample_random_margin(np.random.default_rng(3))), 112),
          crop_by_box(img, None, 112)]
for ax, c, t in zip(axes, crops, [f"m{i}" for i in range(1, 8)] + ["random", "whole"]):
    ax.imshow(np.clip(c, 0, 255).astype(np.uint8))
    ax.set_title(t, fontsize=9)
    ax.axis("off")
fig.savefig(out / "margins.png", dpi=100)
