"""Materialise the datasets used by the desk-scale runs into ./data.

Sources are PyPI wheels that bundle the raw files, so only a package index is
needed:

* UCI Adult ``adult.data`` / ``adult.test`` (unmodified) from ``responsibly``.
* A 5000-image MNIST subset (500 per digit) from ``mlxtend``; written out as
  IDX files, 400 per digit for training and 100 per digit for testing.

Fashion-MNIST and the ACS 2017 census table are not available this way; put
them under data/ by hand (see README).

    python scripts/fetch_data.py [--wheel-dir DIR] [--out data]
"""
import argparse
import gzip
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from pupet.ingest import write_idx

WHEELS = {"responsibly": "0.1.2", "mlxtend": "0.24.0"}


def find_wheel(wheel_dir: Path, name: str) -> Path:
    hits = sorted(wheel_dir.glob(f"{name}-{WHEELS[name]}-*.whl"))
    if hits:
        return hits[0]
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q",
                    f"{name}=={WHEELS[name]}", "-d", str(wheel_dir)], check=True)
    return sorted(wheel_dir.glob(f"{name}-{WHEELS[name]}-*.whl"))[0]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--wheel-dir", type=Path, default=None)
    ap.add_argument("--out", type=Path, default=Path("data"))
    args = ap.parse_args(argv)

    wheel_dir = args.wheel_dir or Path(tempfile.mkdtemp(prefix="pupet-wheels-"))
    wheel_dir.mkdir(parents=True, exist_ok=True)

    adult = args.out / "adult"
    adult.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(find_wheel(wheel_dir, "responsibly")) as z:
        for name in ("adult.data", "adult.test", "adult.names"):
            (adult / name).write_bytes(z.read(f"responsibly/dataset/adult/{name}"))
    print(f"wrote {adult}/adult.data, adult.test")

    with zipfile.ZipFile(find_wheel(wheel_dir, "mlxtend")) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    digits = table[:, -1].astype(np.uint8)
    rng = np.random.default_rng(0)
    train_idx, test_idx = [], []
    for d in range(10):
        idx = rng.permutation(np.flatnonzero(digits == d))
        train_idx.extend(idx[:400])
        test_idx.extend(idx[400:])
    train_idx, test_idx = rng.permutation(train_idx), rng.permutation(test_idx)

    mnist = args.out / "mnist5k"
    mnist.mkdir(parents=True, exist_ok=True)
    write_idx(mnist / "train-images-idx3-ubyte", images[train_idx])
    write_idx(mnist / "train-labels-idx1-ubyte", digits[train_idx])
    write_idx(mnist / "t10k-images-idx3-ubyte", images[test_idx])
    write_idx(mnist / "t10k-labels-idx1-ubyte", digits[test_idx])
    print(f"wrote {mnist}: {len(train_idx)} train / {len(test_idx)} test images")


if __name__ == "__main__":
    main()
