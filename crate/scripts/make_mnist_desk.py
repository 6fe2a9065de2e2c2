#!/usr/bin/env python3
"""Build a desk-scale MNIST subset in IDX format.

Source: the 10,000 MNIST digits bundled with the `mnist` npm package
(`npm pack mnist`, src/digits/<label>.json, pixels stored as value/255).
Samples are taken in file order per label; every fifth sample of each label
goes to the test split, giving 8,000 train / 2,000 test images.

usage: make_mnist_desk.py <path/to/package/src/digits> <out_dir>
"""
import json
import struct
import sys
from pathlib import Path


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for label in range(10):
        data = json.loads((src / f"{label}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for i in range(len(data) // 784):
            px = [min(255, max(0, round(v * 255))) for v in data[i * 784:(i + 1) * 784]]
            (test if i % 5 == 4 else train).append((px, label))
    # interleave labels with a fixed stride permutation so files are not sorted by class
    def mix(rows):
        n = len(rows)
        step = 7919
        while n % step == 0:
            step += 2
        return [rows[(i * step) % n] for i in range(n)]
    for name, rows in (("train", mix(train)), ("t10k", mix(test))):
        write_idx_images(out / f"{name}-images-idx3-ubyte", [r[0] for r in rows])
        write_idx_labels(out / f"{name}-labels-idx1-ubyte", [r[1] for r in rows])
        print(name, len(rows))


if __name__ == "__main__":
    main()
