"""Builds MNIST-format IDX files from the 10,000 digits in the npm ``mnist`` package.

The digits are split by a seeded permutation into a training split and a
test split (2,000 images by default).

    python python/make_mnist_subset.py --out data/mnist

The package is fetched with ``npm pack`` unless ``--npm-tgz`` points at a
local copy.
"""

import argparse
import json
import pathlib
import struct
import subprocess
import tarfile
import tempfile

import numpy as np


def fetch(cmd, workdir, pattern):
    subprocess.run(cmd, cwd=workdir, check=True, capture_output=True)
    found = sorted(pathlib.Path(workdir).glob(pattern))
    if not found:
        raise SystemExit(f"{' '.join(cmd)} produced no {pattern}")
    return found[0]


def npm_digits(tgz):
    images, labels = [], []
    with tarfile.open(tgz) as tar:
        for d in range(10):
            raw = json.load(tar.extractfile(f"package/src/digits/{d}.json"))["data"]
            # Pixels are stored as round(v / 255, 3); rounding back recovers v.
            px = np.rint(np.asarray(raw, dtype=np.float64) * 255.0).astype(np.uint8)
            px = px.reshape(-1, 784)
            images.append(px)
            labels.append(np.full(len(px), d, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def write_idx(path, array):
    magic = 0x803 if array.ndim == 3 else 0x801
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        for n in array.shape:
            f.write(struct.pack(">I", n))
        f.write(array.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--npm-tgz")
    ap.add_argument("--n-test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tgz = args.npm_tgz or fetch(["npm", "pack", "mnist@1.1.0"], tmp, "mnist-*.tgz")
        x, y = npm_digits(tgz)

    order = np.random.default_rng(args.seed).permutation(len(x))
    test, train = order[: args.n_test], order[args.n_test :]

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte", x[train].reshape(-1, 28, 28))
    write_idx(out / "train-labels-idx1-ubyte", y[train])
    write_idx(out / "t10k-images-idx3-ubyte", x[test].reshape(-1, 28, 28))
    write_idx(out / "t10k-labels-idx1-ubyte", y[test])
    print(f"train {len(train)} images, test {len(test)} images -> {out}")


if __name__ == "__main__":
    main()
