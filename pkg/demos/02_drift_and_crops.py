"""
Drifted images and classifier crops
===================================

Build a small labelled raster in memory, push it through the three drift
transforms, and cut the 64x64 crops the second stage sees.
"""

import numpy as np

from driftguard.dataset import NormalizedBox, crop, denormalize, resize_64
from driftguard.imaging import DriftSpec, ImageBuffer, apply_drift, transform_bbox, write_ppm

# a 96x72 frame: dark background with one bright square "sign"
px = np.full((72, 96, 3), 30, dtype=np.uint8)
px[20:44, 50:74] = (220, 40, 40)
frame = ImageBuffer(px)
label = NormalizedBox(cx=62 / 96, cy=32 / 72, w=24 / 96, h=24 / 72)

box = denormalize(label, frame.width, frame.height)
print("pixel box", box.as_tuple())

# the crop the classifier would receive
patch = resize_64(crop(frame, box))
print("crop", patch.width, patch.height, patch.pixels[32, 32])

# sensor noise, under-exposure and a tilted mount
for spec in [DriftSpec("gaussian_noise", sigma=10, seed=1),
             DriftSpec("brightness", gain=0.4, seed=1),
             DriftSpec("tilt", angle=15, seed=1)]:
    out = apply_drift(frame, spec)
    diff = out.pixels.astype(int) - frame.pixels.astype(int)
    print(f"{spec.tag():28s} mean shift {diff.mean():+7.2f}  abs {np.abs(diff).mean():6.2f}")

# a tilt moves the object, so its label moves with it
tilted = transform_bbox(box, 15, frame.width, frame.height)
print("tilted box", tuple(round(v, 2) for v in tilted.as_tuple()))

# same seed, same bytes
a = write_ppm(apply_drift(frame, DriftSpec("gaussian_noise", sigma=10, seed=7)))
b = write_ppm(apply_drift(frame, DriftSpec("gaussian_noise", sigma=10, seed=7)))
print("deterministic:", a == b, len(a), "bytes")
