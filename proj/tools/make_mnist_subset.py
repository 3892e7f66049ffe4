#!/usr/bin/env python3
"""Write a small MNIST train/test subset in IDX format.

The source is the 5000-digit sample shipped inside the mlxtend wheel
(mlxtend/data/data/mnist_5k.csv.gz: 784 pixel columns, label last, rows
grouped by class). Fetch it with

    pip download --no-deps mlxtend -d /tmp/mlxtend

and pass either the wheel or the extracted csv.gz as --source.
"""

import argparse
import gzip
import pathlib
import struct
import zipfile

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def read_source(path: pathlib.Path) -> np.ndarray:
    if path.suffix == ".whl":
        with zipfile.ZipFile(path) as whl:
            raw = whl.read(MEMBER)
    else:
        raw = path.read_bytes()
    text = gzip.decompress(raw).decode("ascii")
    return np.loadtxt(text.splitlines(), delimiter=",", dtype=np.int64)


def write_images(path: pathlib.Path, images: np.ndarray) -> None:
    with path.open("wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path: pathlib.Path, labels: np.ndarray) -> None:
    with path.open("wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--source", type=pathlib.Path, required=True)
    parser.add_argument("--out", type=pathlib.Path, default=pathlib.Path("data/mnist-subset"))
    parser.add_argument("--train", type=int, default=1000)
    parser.add_argument("--test", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rows = read_source(args.source)
    if rows.shape[1] != 785:
        raise SystemExit(f"expected 785 columns, got {rows.shape[1]}")
    if args.train + args.test > len(rows):
        raise SystemExit(f"only {len(rows)} rows available")

    # The source is sorted by class; shuffle before splitting.
    order = np.random.default_rng(args.seed).permutation(len(rows))
    rows = rows[order]
    images, labels = rows[:, :784], rows[:, 784]

    args.out.mkdir(parents=True, exist_ok=True)
    train = slice(0, args.train)
    test = slice(args.train, args.train + args.test)
    write_images(args.out / "train-images-idx3-ubyte", images[train])
    write_labels(args.out / "train-labels-idx1-ubyte", labels[train])
    write_images(args.out / "t10k-images-idx3-ubyte", images[test])
    write_labels(args.out / "t10k-labels-idx1-ubyte", labels[test])

    for name, part in (("train", labels[train]), ("test", labels[test])):
        counts = np.bincount(part, minlength=10)
        print(f"{name}: {len(part)} digits, per class {counts.tolist()}")


if __name__ == "__main__":
    main()
