from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from driftguard.dataset import Annotation, ClassLabel, NormalizedBox, format_annotations
from driftguard.imaging import ImageBuffer, save_ppm


def write_synthetic_dataset(root: Path, n: int, seed: int = 0, size=(48, 40), max_objects: int = 1):
    """``n`` random-noise PPM images with 1..max_objects in-bounds boxes each."""
    gen = np.random.default_rng(seed)
    images, labels = root / "images", root / "labels"
    images.mkdir(parents=True, exist_ok=True)
    labels.mkdir(parents=True, exist_ok=True)
    w, h = size
    for k in range(n):
        px = gen.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        save_ppm(ImageBuffer(px), images / f"img{k:04d}.ppm")
        anns = []
        for _ in range(int(gen.integers(1, max_objects + 1))):
            bw, bh = gen.uniform(0.1, 0.4, size=2)
            cx = gen.uniform(bw / 2, 1 - bw / 2)
            cy = gen.uniform(bh / 2, 1 - bh / 2)
            anns.append(Annotation(ClassLabel(int(gen.integers(0, 7))),
                                   NormalizedBox(float(cx), float(cy), float(bw), float(bh))))
        (labels / f"img{k:04d}.txt").write_text(format_annotations(anns))
    return images, labels


@pytest.fixture
def synthetic_dataset(tmp_path):
    return write_synthetic_dataset(tmp_path / "src", 10)
