#!/usr/bin/env python3
"""Build an MNIST subset in IDX format from the `mnist` npm package.

The package (v1.1.0) bundles 10,000 MNIST digits as gray values in [0, 1],
roughly 1,000 per class. Each class is split 80/20 into train/test and each
split is shuffled with a fixed seed, giving 8,000 train and 2,000 test images.

    python3 tools/fetch_mnist.py                   # fetch with npm, write data/mnist
    python3 tools/fetch_mnist.py --tarball mnist-1.1.0.tgz --out /tmp/mnist
"""

import argparse
import json
import pathlib
import random
import struct
import subprocess
import tarfile
import tempfile

PACKAGE = "mnist@1.1.0"
PIXELS = 28 * 28


def fetch_tarball(workdir: pathlib.Path) -> pathlib.Path:
    name = subprocess.run(
        ["npm", "pack", PACKAGE, "--silent"], cwd=workdir, check=True, capture_output=True, text=True
    ).stdout.strip().splitlines()[-1]
    return workdir / name


def read_digits(tarball: pathlib.Path):
    digits = {}
    with tarfile.open(tarball) as tar:
        for d in range(10):
            member = tar.extractfile(f"package/src/digits/{d}.json")
            flat = json.load(member)["data"]
            if len(flat) % PIXELS:
                raise ValueError(f"digit {d}: {len(flat)} values is not a multiple of {PIXELS}")
            digits[d] = [
                bytes(round(v * 255) for v in flat[i : i + PIXELS]) for i in range(0, len(flat), PIXELS)
            ]
    return digits


def write_images(path: pathlib.Path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(img)


def write_labels(path: pathlib.Path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="data/mnist", help="output directory (default: data/mnist)")
    ap.add_argument("--tarball", help="use an already downloaded mnist-1.1.0.tgz")
    ap.add_argument("--train-fraction", type=float, default=0.8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tarball = pathlib.Path(args.tarball) if args.tarball else fetch_tarball(pathlib.Path(tmp))
        digits = read_digits(tarball)

    train, test = [], []
    for d, images in digits.items():
        cut = round(len(images) * args.train_fraction)
        train += [(img, d) for img in images[:cut]]
        test += [(img, d) for img in images[cut:]]
    rng = random.Random(args.seed)
    rng.shuffle(train)
    rng.shuffle(test)

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for prefix, rows in (("train", train), ("t10k", test)):
        write_images(out / f"{prefix}-images-idx3-ubyte", [img for img, _ in rows])
        write_labels(out / f"{prefix}-labels-idx1-ubyte", [lab for _, lab in rows])
    print(f"wrote {len(train)} train and {len(test)} test images to {out}")


if __name__ == "__main__":
    main()
