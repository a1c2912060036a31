#!/usr/bin/env python3
"""Export scikit-learn's bundled 8x8 handwritten digits as MNIST-layout IDX files.

The output directory receives train-images-idx3-ubyte, train-labels-idx1-ubyte,
t10k-images-idx3-ubyte and t10k-labels-idx1-ubyte, so any tool that reads
MNIST can read it. Pixel intensities 0..16 are rescaled to 0..255.
"""
import argparse
import pathlib
import struct

import numpy as np
from sklearn.datasets import load_digits


def write_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("out_dir", type=pathlib.Path)
    parser.add_argument("--test-size", type=int, default=450)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    digits = load_digits()
    images = np.rint(digits.images * 255.0 / 16.0).clip(0, 255)
    labels = digits.target
    order = np.random.RandomState(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]
    test = args.test_size

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_images(args.out_dir / "train-images-idx3-ubyte", images[test:])
    write_labels(args.out_dir / "train-labels-idx1-ubyte", labels[test:])
    write_images(args.out_dir / "t10k-images-idx3-ubyte", images[:test])
    write_labels(args.out_dir / "t10k-labels-idx1-ubyte", labels[:test])


if __name__ == "__main__":
    main()
