#!/usr/bin/env python3
"""Build a small MNIST subset in IDX format from the 5k sample bundled with mlxtend.

Usage: python3 scripts/make_mnist_subset.py [OUT_DIR]

Downloads the mlxtend wheel (no install), shuffles the 5000 samples with a
fixed seed, and writes 1000 training and 500 test images/labels as
big-endian IDX files (magic 0x00000803 / 0x00000801).
"""
import glob
import gzip
import io
import os
import struct
import subprocess
import sys
import tempfile
import zipfile

import numpy as np

N_TRAIN = 1000
N_TEST = 500
SEED = 20200514


def write_images(path, images):
    n = images.shape[0]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        fh.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, labels.shape[0]))
        fh.write(labels.astype(np.uint8).tobytes())


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/data"
    os.makedirs(out, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.check_call(
            [sys.executable, "-m", "pip", "download", "mlxtend", "--no-deps", "-q", "-d", tmp]
        )
        wheel = zipfile.ZipFile(glob.glob(os.path.join(tmp, "mlxtend-*.whl"))[0])
        raw = gzip.decompress(wheel.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images, labels = table[:, :-1], table[:, -1].astype(int)
    order = np.random.default_rng(SEED).permutation(len(labels))
    images, labels = images[order], labels[order]
    splits = {
        "train": slice(0, N_TRAIN),
        "t10k": slice(N_TRAIN, N_TRAIN + N_TEST),
    }
    for name, sl in splits.items():
        write_images(os.path.join(out, f"mnist-{name}-images-idx3-ubyte"), images[sl])
        write_labels(os.path.join(out, f"mnist-{name}-labels-idx1-ubyte"), labels[sl])
        print(name, np.bincount(labels[sl], minlength=10))


if __name__ == "__main__":
    main()
