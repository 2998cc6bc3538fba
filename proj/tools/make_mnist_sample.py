#!/usr/bin/env python3
"""Build a small offline MNIST sample in IDX format.

The mlxtend wheel ships 5,000 real MNIST training digits (500 per class) as
a CSV.  This script splits them per class into 400 "train" and 100 "t10k"
samples and writes the four standard IDX files, packed as
data/mnist-sample.tar.gz.  CMake extracts that archive into the build tree.

Usage:
    pip download --no-deps mlxtend==0.24.0 -d /tmp/wheels
    python3 tools/make_mnist_sample.py /tmp/wheels/mlxtend-0.24.0-py3-none-any.whl
"""

import argparse
import gzip
import io
import pathlib
import struct
import tarfile
import zipfile

import numpy as np

CSV_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
TRAIN_PER_CLASS = 400


def idx_bytes(array: np.ndarray) -> bytes:
    magic = 0x00000800 | array.ndim
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    return header + array.astype(np.uint8).tobytes(order="C")


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("wheel", type=pathlib.Path)
    parser.add_argument("--out", type=pathlib.Path,
                        default=pathlib.Path(__file__).resolve().parents[1] / "data" / "mnist-sample.tar.gz")
    args = parser.parse_args()

    raw = gzip.decompress(zipfile.ZipFile(args.wheel).read(CSV_MEMBER)).decode()
    table = np.loadtxt(io.StringIO(raw), delimiter=",", dtype=np.int64)
    images, labels = table[:, :-1], table[:, -1]

    train_idx, test_idx = [], []
    for digit in range(10):
        members = np.flatnonzero(labels == digit)
        train_idx.extend(members[:TRAIN_PER_CLASS])
        test_idx.extend(members[TRAIN_PER_CLASS:])
    train_idx, test_idx = np.array(train_idx), np.array(test_idx)

    files = {
        "train-images-idx3-ubyte": idx_bytes(images[train_idx].reshape(-1, 28, 28)),
        "train-labels-idx1-ubyte": idx_bytes(labels[train_idx]),
        "t10k-images-idx3-ubyte": idx_bytes(images[test_idx].reshape(-1, 28, 28)),
        "t10k-labels-idx1-ubyte": idx_bytes(labels[test_idx]),
    }
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with tarfile.open(args.out, "w:gz") as tar:
        for name, payload in files.items():
            info = tarfile.TarInfo(f"mnist-sample/{name}")
            info.size = len(payload)
            info.mtime = 0
            tar.addfile(info, io.BytesIO(payload))
    print(f"wrote {args.out} ({len(train_idx)} train, {len(test_idx)} test)")


if __name__ == "__main__":
    main()
