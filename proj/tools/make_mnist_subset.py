#!/usr/bin/env python3
"""Write the 5,000-image MNIST subset bundled with mlxtend as gzipped IDX files.

Usage: pip download mlxtend --no-deps -d /tmp/mlx && unpack the wheel, then
    python3 tools/make_mnist_subset.py /tmp/mlx/mlxtend/data/data/mnist_5k.csv.gz data/mnist5k
"""
import gzip
import struct
import sys

import numpy as np


def main(src, out_dir):
    rows = np.loadtxt(src, delimiter=",", dtype=np.int64)
    labels = rows[:, -1].astype(np.uint8)
    images = rows[:, :-1].astype(np.uint8)
    # The source file is sorted by class; interleave deterministically.
    order = np.random.RandomState(20240101).permutation(len(labels))
    labels, images = labels[order], images[order]
    n = len(labels)
    with gzip.GzipFile(f"{out_dir}/images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(images.tobytes())
    with gzip.GzipFile(f"{out_dir}/labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.tobytes())


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
