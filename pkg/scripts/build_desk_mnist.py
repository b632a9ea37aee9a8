"""Assemble a desk-scale MNIST in IDX format from package-registry mirrors.

The full MNIST archives are not reachable from every build sandbox, but two
registries ship disjoint MNIST samples:

* npm ``mnist`` (cazala/mnist): 10,000 digits as JSON, intensities / 255
  rounded to three decimals.  Used as the train/validation pool.
* PyPI ``mlxtend``: ``mnist_5k.csv.gz``, 5,000 raw uint8 digits.  Used as the
  test split.

Usage::

    python scripts/build_desk_mnist.py --out data/mnist
    python scripts/build_desk_mnist.py --npm-tarball mnist-1.1.0.tgz \
        --mlxtend-wheel mlxtend-0.24.0-py3-none-any.whl
"""

import argparse
import gzip
import io
import json
import struct
import subprocess
import sys
import tarfile
import tempfile
import zipfile
from pathlib import Path

import numpy as np


def write_idx_images(path, images):
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">iiii", 2051, n, h, w))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">ii", 2049, len(labels)))
        f.write(labels.tobytes())


def read_npm_digits(tarball):
    images, labels = [], []
    with tarfile.open(tarball) as tar:
        for digit in range(10):
            member = tar.extractfile(f"package/src/digits/{digit}.json")
            flat = np.asarray(json.load(member)["data"], dtype=np.float64)
            imgs = np.rint(flat * 255.0).clip(0, 255).astype(np.uint8)
            imgs = imgs.reshape(-1, 28, 28)
            images.append(imgs)
            labels.append(np.full(len(imgs), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    # the package stores digits grouped by class; interleave deterministically
    order = np.random.default_rng(0).permutation(len(labels))
    return images[order], labels[order]


def read_mlxtend_digits(wheel):
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    return table[:, :-1].reshape(-1, 28, 28).astype(np.uint8), table[:, -1].astype(np.uint8)


def fetch(workdir):
    workdir = Path(workdir)
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True,
                   stdout=subprocess.DEVNULL)
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps",
                    "mlxtend==0.24.0", "-d", str(workdir)], check=True,
                   stdout=subprocess.DEVNULL)
    return workdir / "mnist-1.1.0.tgz", next(workdir.glob("mlxtend-*.whl"))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="data/mnist")
    parser.add_argument("--npm-tarball")
    parser.add_argument("--mlxtend-wheel")
    args = parser.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        tarball, wheel = args.npm_tarball, args.mlxtend_wheel
        if tarball is None or wheel is None:
            fetched = fetch(tmp)
            tarball = tarball or fetched[0]
            wheel = wheel or fetched[1]
        train_x, train_y = read_npm_digits(tarball)
        test_x, test_y = read_mlxtend_digits(wheel)

    write_idx_images(out / "train-images-idx3-ubyte.gz", train_x)
    write_idx_labels(out / "train-labels-idx1-ubyte.gz", train_y)
    write_idx_images(out / "t10k-images-idx3-ubyte.gz", test_x)
    write_idx_labels(out / "t10k-labels-idx1-ubyte.gz", test_y)
    print(f"train: {len(train_y)} images, test: {len(test_y)} images -> {out}")


if __name__ == "__main__":
    main()
