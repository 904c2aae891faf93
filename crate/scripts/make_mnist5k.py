#!/usr/bin/env python3
"""Build the desk-scale MNIST split used by the acceptance suite.

train: the 5000-sample MNIST subset shipped in the `mlxtend` wheel
       (mlxtend/data/data/mnist_5k.csv.gz).
test:  the 10000 MNIST digits shipped in the `mnist` npm package
       (src/digits/<d>.json), minus any image that also occurs in train.

Both are written as standard IDX files.

usage: make_mnist5k.py <mnist_5k.csv.gz> <npm-mnist-digits-dir> <out-dir>
"""
import gzip
import json
import os
import struct
import sys

import numpy as np


def write_idx(path, images, labels):
    n = images.shape[0]
    with open(os.path.join(path[0]), "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        f.write(images.astype(np.uint8).tobytes())
    with open(os.path.join(path[1]), "wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    csv, digits, out = sys.argv[1:4]
    rows = np.loadtxt(gzip.open(csv, "rt"), delimiter=",")
    train_x = np.clip(np.rint(rows[:, :-1]), 0, 255).astype(np.uint8)
    train_y = rows[:, -1].astype(np.uint8)

    xs, ys = [], []
    for d in range(10):
        raw = np.asarray(json.load(open(os.path.join(digits, f"{d}.json")))["data"])
        raw = raw.reshape(-1, 784)
        xs.append(np.clip(np.rint(raw * 255.0), 0, 255).astype(np.uint8))
        ys.append(np.full(raw.shape[0], d, dtype=np.uint8))
    test_x = np.concatenate(xs)
    test_y = np.concatenate(ys)

    # drop near-duplicates of training images (rounding may differ by a level)
    a = train_x.astype(np.float32)
    b = test_x.astype(np.float32)
    d2 = (b * b).sum(1)[:, None] + (a * a).sum(1)[None, :] - 2.0 * b @ a.T
    keep = d2.min(1) > 784.0 * 4.0
    print(f"train {len(train_y)}, test {len(test_y)}, dropped {int((~keep).sum())} duplicates")
    test_x, test_y = test_x[keep], test_y[keep]

    # both sources are grouped by class; interleave deterministically so
    # prefixes (data.train_limit / data.test_limit) stay class-balanced
    rng = np.random.default_rng(0)
    order = rng.permutation(len(train_y))
    train_x, train_y = train_x[order], train_y[order]
    order = rng.permutation(len(test_y))
    test_x, test_y = test_x[order], test_y[order]

    os.makedirs(out, exist_ok=True)
    write_idx((f"{out}/train-images-idx3-ubyte", f"{out}/train-labels-idx1-ubyte"), train_x, train_y)
    write_idx((f"{out}/t10k-images-idx3-ubyte", f"{out}/t10k-labels-idx1-ubyte"), test_x, test_y)


if __name__ == "__main__":
    main()
