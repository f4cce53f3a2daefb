"""Regenerate data/two_blobs*.csv from the synthetic generator."""

import csv
import sys
from pathlib import Path

from quantssl.datasets import two_blobs


def write(path: Path, n: int, seed: int) -> None:
    points, train, truth = two_blobs(n, seed=seed)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x0", "x1", "label", "eval_label"])
        for i, (p, y, t) in enumerate(zip(points, train, truth)):
            w.writerow([f"p{i}", repr(float(p[0])), repr(float(p[1])), y or "", t])


if __name__ == "__main__":
    root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parents[1] / "data"
    write(root / "two_blobs.csv", 2000, seed=0)
    write(root / "two_blobs_small.csv", 300, seed=1)
