#!/usr/bin/env python3
"""Build the bundled 10k MNIST subset as gzipped IDX files.

Source: the `mnist` npm package (10000 digits stored as JSON floats v/255
rounded to three decimals). Bytes are recovered with round(v * 255).

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 scripts/make_mnist_subset.py package/src/digits crates/core/testdata/mnist-10k

Split: stratified, 80% train / 20% test per class, shuffled with seed 20180528.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    rng = random.Random(20180528)
    train, test = [], []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        images = [
            bytes(min(255, max(0, round(v * 255))) for v in flat[i : i + 784])
            for i in range(0, len(flat), 784)
        ]
        rng.shuffle(images)
        cut = (len(images) * 4) // 5
        train += [(img, digit) for img in images[:cut]]
        test += [(img, digit) for img in images[cut:]]
    for split, rows in (("train", train), ("t10k", test)):
        rng.shuffle(rows)
        n = len(rows)
        write_idx(dst / f"{split}-images-idx3-ubyte.gz", 0x803, (n, 28, 28), b"".join(r[0] for r in rows))
        write_idx(dst / f"{split}-labels-idx1-ubyte.gz", 0x801, (n,), bytes(r[1] for r in rows))
        print(split, n)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
