"""Writes the golden IDX fixture used by the core tests.

Image i, row r, column c has pixel (31*i + 7*r + 13*c) % 256; label i is
(3*i + 1) % 10. Four 28x28 images, big-endian IDX headers, uncompressed plus
a gzip copy of the images.
"""
import gzip
import struct
import sys
from pathlib import Path

N, H, W = 4, 28, 28


def main(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    pixels = bytes((31 * i + 7 * r + 13 * c) % 256 for i in range(N) for r in range(H) for c in range(W))
    images = struct.pack(">IIII", 0x803, N, H, W) + pixels
    labels = struct.pack(">II", 0x801, N) + bytes((3 * i + 1) % 10 for i in range(N))
    (out / "golden-images-idx3-ubyte").write_bytes(images)
    (out / "golden-labels-idx1-ubyte").write_bytes(labels)
    with gzip.GzipFile(out / "golden-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(images)


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures"))
