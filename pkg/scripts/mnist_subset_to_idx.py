"""Convert a CSV MNIST subset (784 pixel columns + label column) to IDX files.

The only MNIST copy reachable from an offline package mirror is the 5000
sample CSV bundled with mlxtend (``mlxtend/data/data/mnist_5k.csv.gz``).
Pass that file (or the mlxtend wheel itself) and an output directory; the
subset is split into a train file and a t10k file with a class-balanced,
seeded test selection.
"""
import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from gtn.data import write_idx

WHEEL_MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_rows(source):
    source = Path(source)
    if source.suffix == ".whl":
        raw = zipfile.ZipFile(source).read(WHEEL_MEMBER)
    else:
        raw = source.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    table = np.loadtxt(io.StringIO(raw.decode()), delimiter=",", dtype=np.int64)
    return table[:, :-1].astype(np.uint8).reshape(-1, 28, 28), table[:, -1]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("source", help="mnist_5k.csv(.gz) or an mlxtend wheel")
    parser.add_argument("out", help="output directory")
    parser.add_argument("--test-per-class", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    images, labels = read_rows(args.source)
    rng = np.random.default_rng(args.seed)
    test = np.concatenate([rng.permutation(np.flatnonzero(labels == c))[:args.test_per_class]
                           for c in range(10)])
    test = np.sort(test)
    train = np.setdiff1d(np.arange(len(labels)), test)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte.gz", images=images[train])
    write_idx(out / "train-labels-idx1-ubyte.gz", labels=labels[train])
    write_idx(out / "t10k-images-idx3-ubyte.gz", images=images[test])
    write_idx(out / "t10k-labels-idx1-ubyte.gz", labels=labels[test])
    print(f"wrote {len(train)} train and {len(test)} test images to {out}")


if __name__ == "__main__":
    main()
