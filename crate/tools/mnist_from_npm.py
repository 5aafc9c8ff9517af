"""Rebuild data/mnist/*.gz from the digit JSON files of the npm `mnist` package (v1.1.0).

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 tools/mnist_from_npm.py package/src/digits data/mnist
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
        f.write(header + bytes(payload))


def main(src, dst):
    samples = []
    for digit in range(10):
        data = json.loads(Path(src, f"{digit}.json").read_text())["data"]
        for k in range(len(data) // 784):
            pixels = [min(255, max(0, round(v * 255))) for v in data[k * 784:(k + 1) * 784]]
            samples.append((pixels, digit))
    random.Random(20181114).shuffle(samples)
    split = {"train": samples[:8000], "test": samples[8000:]}
    for name, part in split.items():
        images = [p for pixels, _ in part for p in pixels]
        labels = [label for _, label in part]
        write_idx(Path(dst, f"{name}-images-idx3-ubyte.gz"), 0x803, [len(part), 28, 28], images)
        write_idx(Path(dst, f"{name}-labels-idx1-ubyte.gz"), 0x801, [len(part)], labels)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
