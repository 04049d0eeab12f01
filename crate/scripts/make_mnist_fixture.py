"""Build the MNIST-5k IDX fixture under data/mnist-5k/.

Source: the 5000-image MNIST sample bundled in the mlxtend wheel
(mlxtend/data/data/mnist_5k.csv.gz, 500 images per digit). The split is
stratified: 400 images per class for training, 100 for test, each split
shuffled with a fixed NumPy seed.

    pip download --no-deps mlxtend -d /tmp/mlx
    python3 scripts/make_mnist_fixture.py /tmp/mlx/mlxtend-*.whl
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def write_idx(path, array, magic):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + array.astype(np.uint8).tobytes())


def main(wheel):
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",", dtype=np.int64)
    images, labels = table[:, :-1], table[:, -1]
    rng = np.random.default_rng(0)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        train_idx.extend(idx[:400])
        test_idx.extend(idx[400:])
    train_idx = rng.permutation(train_idx)
    test_idx = rng.permutation(test_idx)
    out = Path(__file__).resolve().parent.parent / "data" / "mnist-5k"
    out.mkdir(parents=True, exist_ok=True)
    for prefix, idx in (("train", train_idx), ("t10k", test_idx)):
        write_idx(out / f"{prefix}-images-idx3-ubyte.gz", images[idx].reshape(-1, 28, 28), 0x00000803)
        write_idx(out / f"{prefix}-labels-idx1-ubyte.gz", labels[idx], 0x00000801)


if __name__ == "__main__":
    main(sys.argv[1])
