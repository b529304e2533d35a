"""Write the 5,000-digit MNIST sample bundled with mlxtend as IDX files.

Only needed where the canonical MNIST files cannot be downloaded. The
sample is split per class into train/test (default 400/100 per digit).

    python scripts/mnist5k_to_idx.py OUT_DIR [--test-per-class 100] [--seed 0]
"""

import argparse
import gzip
import os
from pathlib import Path

import numpy as np

from fedskip.datasets import MNIST_FILES, write_idx_images, write_idx_labels


def mnist5k_csv_path():
    import mlxtend

    return Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz"


def write_mnist5k_idx(out_dir, test_per_class=100, seed=0):
    with gzip.open(mnist5k_csv_path(), "rt") as f:
        raw = np.loadtxt(f, delimiter=",")
    images = raw[:, :784].astype(np.uint8).reshape(-1, 28, 28)
    labels = raw[:, 784].astype(np.uint8)
    rng = np.random.default_rng(seed)
    test_idx = np.sort(np.concatenate([
        rng.choice(np.flatnonzero(labels == c), size=test_per_class, replace=False)
        for c in range(10)
    ]))
    train_idx = np.setdiff1d(np.arange(labels.size), test_idx)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(out / MNIST_FILES["train_images"], images[train_idx])
    write_idx_labels(out / MNIST_FILES["train_labels"], labels[train_idx])
    write_idx_images(out / MNIST_FILES["test_images"], images[test_idx])
    write_idx_labels(out / MNIST_FILES["test_labels"], labels[test_idx])
    return out


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out_dir")
    parser.add_argument("--test-per-class", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    out = write_mnist5k_idx(args.out_dir, args.test_per_class, args.seed)
    print(f"wrote IDX files to {os.fspath(out)}")


if __name__ == "__main__":
    main()
