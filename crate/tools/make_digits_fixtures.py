#!/usr/bin/env python3
"""Regenerate the bundled IDX files under data/digits/.

Converts scikit-learn's bundled UCI handwritten-digits set (1797 samples,
8x8 grayscale, 10 classes) into the classic IDX image/label file format,
using a stratified deterministic 80/20 train/test split. Pixel values are
rescaled from 0..16 to the full 0..255 byte range.

The output files are committed; this script only exists so the fixtures
can be reproduced from scratch.
"""

import struct
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

OUT = Path(__file__).resolve().parent.parent / "data" / "digits"
SEED = 20240511


def write_images(path: Path, images: np.ndarray) -> None:
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main() -> None:
    digits = load_digits()
    images = np.round(digits.images * 255.0 / 16.0).astype(np.uint8)  # N x 8 x 8
    labels = digits.target.astype(np.uint8)

    rng = np.random.default_rng(SEED)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        cut = int(round(len(idx) * 0.8))
        train_idx.extend(idx[:cut])
        test_idx.extend(idx[cut:])
    train_idx = np.sort(np.array(train_idx))
    test_idx = np.sort(np.array(test_idx))

    OUT.mkdir(parents=True, exist_ok=True)
    write_images(OUT / "train-images-idx3-ubyte", images[train_idx])
    write_labels(OUT / "train-labels-idx1-ubyte", labels[train_idx])
    write_images(OUT / "t10k-images-idx3-ubyte", images[test_idx])
    write_labels(OUT / "t10k-labels-idx1-ubyte", labels[test_idx])

    print(f"train: {len(train_idx)}  test: {len(test_idx)}")
    print("train per-class:", np.bincount(labels[train_idx]))
    print("test per-class: ", np.bincount(labels[test_idx]))


if __name__ == "__main__":
    main()
