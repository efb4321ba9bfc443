#!/usr/bin/env python3
"""Rebuild data/mnist/*.gz from the `mnist` npm package (10k digits, MIT).

    npm pack mnist && tar xzf mnist-*.tgz && python3 scripts/mnist_from_npm.py package
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

src = Path(sys.argv[1] if len(sys.argv) > 1 else "package") / "src" / "digits"
out = Path(__file__).resolve().parent.parent / "data" / "mnist"
out.mkdir(parents=True, exist_ok=True)

images, labels = [], []
for digit in range(10):
    flat = json.loads((src / f"{digit}.json").read_text())["data"]
    for i in range(len(flat) // 784):
        px = flat[i * 784:(i + 1) * 784]
        images.append(bytes(min(255, max(0, round(v * 255))) for v in px))
        labels.append(digit)

order = list(range(len(labels)))
random.Random(0).shuffle(order)

with gzip.GzipFile(out / "digits-images-idx3-ubyte.gz", "wb", mtime=0) as f:
    f.write(struct.pack(">IIII", 0x803, len(order), 28, 28))
    for i in order:
        f.write(images[i])
with gzip.GzipFile(out / "digits-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
    f.write(struct.pack(">II", 0x801, len(order)))
    f.write(bytes(labels[i] for i in order))
