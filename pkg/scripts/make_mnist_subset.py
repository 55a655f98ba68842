"""Rebuild the packaged MNIST subset as IDX files.

Source: the 5000-digit MNIST sample shipped with mlxtend
(``mlxtend/data/data/mnist_5k.csv.gz``, BSD-3-Clause), rows of 784 pixel
values followed by the label, sorted by class.  A seeded draw takes an
equal number of digits per class for the training source (1000) and,
disjointly, for the test source (200).

    python scripts/make_mnist_subset.py path/to/mnist_5k.csv.gz
"""

import argparse
import gzip
from pathlib import Path

import numpy as np

from avae.data import bundled_mnist_path, write_idx


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("csv", type=Path)
    ap.add_argument("--train", type=int, default=1000)
    ap.add_argument("--test", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=bundled_mnist_path())
    args = ap.parse_args()

    with gzip.open(args.csv, "rt") as fh:
        rows = np.loadtxt(fh, delimiter=",")
    images = rows[:, :784].reshape(-1, 28, 28).astype(np.uint8)
    labels = rows[:, 784].astype(np.uint8)
    classes = np.unique(labels)
    per_train, per_test = args.train // len(classes), args.test // len(classes)
    rng = np.random.default_rng(args.seed)
    train_idx, test_idx = [], []
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        train_idx.append(idx[:per_train])
        test_idx.append(idx[per_train:per_train + per_test])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))

    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / "train-images-idx3-ubyte.gz", images[train_idx], compress=True)
    write_idx(args.out / "train-labels-idx1-ubyte.gz", labels[train_idx], compress=True)
    write_idx(args.out / "t10k-images-idx3-ubyte.gz", images[test_idx], compress=True)
    write_idx(args.out / "t10k-labels-idx1-ubyte.gz", labels[test_idx], compress=True)
    print(f"wrote {len(train_idx)} training and {len(test_idx)} test digits to {args.out}")


if __name__ == "__main__":
    main()
