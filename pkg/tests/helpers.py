"""Shared test oracles and fixtures."""

import itertools
import os
import struct

import numpy as np


def exhaustive_nearest(lat, x, radius=5):
    """Brute-force nearest lattice point over a cube of integer coordinates
    centered on the Babai rounding, ties broken lexicographically."""
    x = np.asarray(x, dtype=float)
    y = x @ np.linalg.inv(lat.matrix).T
    base = np.round(y).astype(np.int64)
    offs = np.array(list(itertools.product(range(-radius, radius + 1),
                                           repeat=lat.dimension)))
    cands = base + offs
    d2 = np.square(x - cands @ lat.matrix.T).sum(axis=1)
    ties = cands[d2 == d2.min()]
    order = np.lexsort(tuple(ties[:, j] for j in range(lat.dimension - 1, -1, -1)))
    return ties[order][0]


def write_idx_pair(dirpath, prefix, images, labels):
    """Write a (n, 28*28) uint8 image array and labels as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n = len(images)
    img_path = os.path.join(dirpath, prefix + "-images-idx3-ubyte")
    lab_path = os.path.join(dirpath, prefix + "-labels-idx1-ubyte")
    with open(img_path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        f.write(images.tobytes())
    with open(lab_path, "wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(labels.tobytes())
    return img_path, lab_path


def make_synthetic_digits(n, seed):
    """Linearly separable 28x28 'digit' images: one bright block per class."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    images = rng.integers(0, 60, size=(n, 784))
    for i, lab in enumerate(labels):
        block = slice(64 * lab, 64 * lab + 48)
        images[i, block] = rng.integers(160, 255, size=48)
    return images.astype(np.uint8), labels.astype(np.uint8)
