"""Build the small IDX-format MNIST fixture used by the tests.

The source is the 5000-digit MNIST subset shipped inside the mlxtend wheel
(``mlxtend/data/data/mnist_5k.csv.gz``: 784 pixel columns then the label).
The subset is sorted by label, so the split is stratified: within each class
the first 80% go to the "train" pool and the rest to the "test" pool (4000
and 1000 digits), written with the standard MNIST file names.

    python scripts/make_mnist_fixture.py mlxtend-0.24.0-py3-none-any.whl tests/data
"""

import argparse
import gzip
import io
import struct
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
TRAIN_FRACTION = 0.8


def write_idx(path: Path, arr: np.ndarray) -> None:
    code = 0x08  # unsigned byte
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    # mtime=0 keeps the output byte-identical across runs
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + arr.astype(np.uint8).tobytes())


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("source", help="mlxtend wheel or the extracted mnist_5k.csv.gz")
    ap.add_argument("out", type=Path)
    args = ap.parse_args()
    if args.source.endswith(".whl"):
        raw = zipfile.ZipFile(args.source).read(MEMBER)
    else:
        raw = Path(args.source).read_bytes()
    table = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",", dtype=np.int64)
    images = table[:, :-1].reshape(-1, 28, 28)
    labels = table[:, -1]
    train = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        train[idx[:int(round(TRAIN_FRACTION * idx.size))]] = True
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / "train-images-idx3-ubyte.gz", images[train])
    write_idx(args.out / "train-labels-idx1-ubyte.gz", labels[train])
    write_idx(args.out / "t10k-images-idx3-ubyte.gz", images[~train])
    write_idx(args.out / "t10k-labels-idx1-ubyte.gz", labels[~train])
    print(f"wrote {train.sum()} train and {(~train).sum()} test digits to {args.out}")


if __name__ == "__main__":
    main()
