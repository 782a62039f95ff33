#!/usr/bin/env python3
"""Build a 10k-sample MNIST subset in IDX format from the npm `mnist` package.

The package ships per-digit JSON files whose pixels are byte/255 rounded to
three decimals; bytes are recovered with round(v * 255). Every fifth sample of
each digit goes to the test split.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist-10k
"""

import argparse
import json
import struct
from pathlib import Path

PIXELS = 28 * 28


def load_digit(path):
    flat = json.loads(path.read_text())["data"]
    if len(flat) % PIXELS:
        raise SystemExit(f"{path}: {len(flat)} values is not a multiple of {PIXELS}")
    raw = bytes(min(255, max(0, round(v * 255))) for v in flat)
    return [raw[i : i + PIXELS] for i in range(0, len(raw), PIXELS)]


def interleave(per_digit):
    out = []
    longest = max(len(v) for v in per_digit.values())
    for i in range(longest):
        for d in sorted(per_digit):
            if i < len(per_digit[d]):
                out.append((per_digit[d][i], d))
    return out


def write_idx(out, stem, samples):
    images = out / f"{stem}-images-idx3-ubyte"
    labels = out / f"{stem}-labels-idx1-ubyte"
    with images.open("wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), 28, 28))
        for img, _ in samples:
            f.write(img)
    with labels.open("wb") as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(d for _, d in samples))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("src", type=Path, help="directory holding 0.json .. 9.json")
    ap.add_argument("out", type=Path)
    ap.add_argument("--test-every", type=int, default=5)
    args = ap.parse_args()

    train, test = {}, {}
    for d in range(10):
        imgs = load_digit(args.src / f"{d}.json")
        test[d] = [x for i, x in enumerate(imgs) if i % args.test_every == args.test_every - 1]
        train[d] = [x for i, x in enumerate(imgs) if i % args.test_every != args.test_every - 1]

    args.out.mkdir(parents=True, exist_ok=True)
    tr, te = interleave(train), interleave(test)
    write_idx(args.out, "train", tr)
    write_idx(args.out, "t10k", te)
    print(f"wrote {len(tr)} train and {len(te)} test samples to {args.out}")


if __name__ == "__main__":
    main()
