#!/usr/bin/env python3
"""Convert the digit JSON files bundled in the `mnist` npm package into IDX files.

The package ships 10,000 handwritten digits as per-class JSON arrays of
784 floats in [0, 1] rounded to three decimals. We quantize back to bytes,
shuffle with a fixed seed and write an 8000/2000 train/val split using the
standard IDX file names (gzip-compressed).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_npm_to_idx.py package/src/digits data/mnist-desk
"""
import gzip
import json
import os
import random
import struct
import sys


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main(src, dst, n_train=8000, seed=0):
    items = []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        for k in range(len(flat) // 784):
            px = bytes(min(255, max(0, round(v * 255))) for v in flat[k * 784:(k + 1) * 784])
            items.append((px, digit))
    random.Random(seed).shuffle(items)
    os.makedirs(dst, exist_ok=True)
    for prefix, part in (("train", items[:n_train]), ("t10k", items[n_train:])):
        write_idx(os.path.join(dst, f"{prefix}-images-idx3-ubyte.gz"), 2051,
                  (len(part), 28, 28), b"".join(p for p, _ in part))
        write_idx(os.path.join(dst, f"{prefix}-labels-idx1-ubyte.gz"), 2049,
                  (len(part),), bytes(l for _, l in part))
        print(prefix, len(part))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
