#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package into IDX files.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist

The package ships 10,000 28x28 MNIST digits as JSON arrays of floats rounded
to three decimals. Pixels are mapped back to bytes with round(v * 255), the
pool is shuffled with a fixed seed and split 8,000 train / 2,000 test.
"""
import json
import random
import struct
import sys
from pathlib import Path

SIDE = 28
TRAIN = 8000


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    pool = []
    for digit in range(10):
        raw = json.loads((src / f"{digit}.json").read_text())["data"]
        n = len(raw) // (SIDE * SIDE)
        for i in range(n):
            px = raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            pool.append(([min(255, max(0, round(v * 255))) for v in px], digit))
    random.Random(20211).shuffle(pool)
    splits = {"train": pool[:TRAIN], "t10k": pool[TRAIN:]}
    for name, items in splits.items():
        write_images(dst / f"{name}-images-idx3-ubyte", [p for p, _ in items])
        write_labels(dst / f"{name}-labels-idx1-ubyte", [l for _, l in items])
        print(f"{name}: {len(items)} images")


if __name__ == "__main__":
    main()
