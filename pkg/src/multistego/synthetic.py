"""Synthetic image collections for demos and tests.

Images are a colour gradient background with a few filled rectangles and
discs, which is enough low-frequency structure to train on at desk scale.
"""
from pathlib import Path

import numpy as np
from PIL import Image


def smooth_images(n, size=64, seed=0):
    """(n, size, size, 3) float32 images in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    out = np.empty((n, size, size, 3), np.float32)
    for i in range(n):
        c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
        angle = rng.uniform(0, 2 * np.pi)
        t = (np.cos(angle) * xx + np.sin(angle) * yy + 1) / 2
        img = c0 + (c1 - c0) * t[..., None]
        for _ in range(rng.integers(2, 5)):
            color = rng.uniform(0, 1, 3)
            cx, cy = rng.uniform(0, 1, 2)
            r = rng.uniform(0.1, 0.3)
            if rng.random() < 0.5:
                mask = (np.abs(xx - cx) < r) & (np.abs(yy - cy) < r * rng.uniform(0.5, 1.5))
            else:
                mask = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
            img[mask] = color
        out[i] = img
    return out


def write_dataset(root, n_classes=4, per_class=10, size=64, seed=0):
    """Write ``<root>/class_XX/img_YYY.png`` files; returns the root path."""
    root = Path(root)
    imgs = smooth_images(n_classes * per_class, size, seed)
    for c in range(n_classes):
        d = root / f"class_{c:02d}"
        d.mkdir(parents=True, exist_ok=True)
        for j in range(per_class):
            arr = imgs[c * per_class + j]
            Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(d / f"img_{j:03d}.png")
    return root
