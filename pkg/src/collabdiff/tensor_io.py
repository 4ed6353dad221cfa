"""Flat CSV serialization of named float tensors (golden files)."""

import csv
from pathlib import Path

import numpy as np


def save_tensors_csv(path, tensors: dict) -> None:
    """Flat CSV: a ``# name:shape`` header line per tensor, then ``tensor,index,value`` rows."""
    with open(path, "w", newline="") as fh:
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            fh.write(f"# {name}:{'x'.join(map(str, arr.shape))}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["tensor", "index", "value"])
        for name, arr in tensors.items():
            for i, val in enumerate(np.asarray(arr, dtype=float).ravel()):
                wr.writerow([name, i, repr(float(val))])


def load_tensors_csv(path) -> dict:
    shapes, values = {}, {}
    lines = Path(path).read_text().splitlines()
    body = []
    for line in lines:
        if line.startswith("# "):
            name, shape = line[2:].rsplit(":", 1)
            shapes[name] = tuple(int(s) for s in shape.split("x")) if shape else ()
            values[name] = []
        else:
            body.append(line)
    for row in list(csv.reader(body))[1:]:
        values[row[0]].append(float(row[2]))
    return {n: np.array(values[n]).reshape(shapes[n]) for n in shapes}
