"""Rebuild Fashion-MNIST IDX files from the per-class JSON dumps of the npm
``fashion-mnist`` package (``src/clothes/<label>.json``).

Each class file holds 1000 test images followed by 6000 training images;
class 0 additionally carries empty separator rows, which are dropped. The
rows are interleaved with a fixed permutation so the IDX files are not
sorted by class.

    npm pack fashion-mnist && tar xzf fashion-mnist-*.tgz
    python scripts/fmnist_from_json.py package/src/clothes data/fmnist
"""

import argparse
import json
from pathlib import Path

import numpy as np

from rbla.data import DEFAULT_FILES, write_idx

TEST_PER_CLASS = 1000
TRAIN_PER_CLASS = 6000


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("json_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    args = ap.parse_args()

    split = {"train": ([], []), "test": ([], [])}
    for label in range(10):
        rows = json.loads((args.json_dir / f"{label}.json").read_text())["data"]
        rows = [r for r in rows if len(r) == 784]
        if len(rows) != TEST_PER_CLASS + TRAIN_PER_CLASS:
            raise SystemExit(f"class {label}: expected 7000 images, found {len(rows)}")
        arr = np.asarray(rows, dtype=np.uint8).reshape(-1, 28, 28)
        for name, chunk in (("test", arr[:TEST_PER_CLASS]), ("train", arr[TEST_PER_CLASS:])):
            split[name][0].append(chunk)
            split[name][1].append(np.full(len(chunk), label, dtype=np.uint8))

    args.out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    for name in ("train", "test"):
        x = np.concatenate(split[name][0])
        y = np.concatenate(split[name][1])
        order = rng.permutation(len(y))
        write_idx(args.out_dir / DEFAULT_FILES[f"{name}_images"], x[order])
        write_idx(args.out_dir / DEFAULT_FILES[f"{name}_labels"], y[order])
        print(f"{name}: {len(y)} images")


if __name__ == "__main__":
    main()
