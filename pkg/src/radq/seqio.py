"""CSV / JSONL tables of per-candidate sequences."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


class SequenceTableError(ValueError):
    pass


def write_sequences(directory, stem: str, ids, labels, values: np.ndarray, names=None, meta=None) -> None:
    """``<stem>.csv`` (candidate_id, label, one column per feature) and ``<stem>.jsonl``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    values = np.asarray(values, dtype=np.float64)
    names = list(names) if names is not None else [f"f{i:03d}" for i in range(values.shape[1])]
    with open(d / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["candidate_id", "label"] + names)
        for cid, lab, row in zip(ids, labels, values):
            w.writerow([cid, lab] + [repr(float(v)) for v in row])
    with open(d / f"{stem}.jsonl", "w") as fh:
        for cid, lab, row in zip(ids, labels, values):
            rec = {"candidate_id": cid, "label": lab, "values": [float(v) for v in row]}
            if meta:
                rec.update(meta)
            fh.write(json.dumps(rec) + "\n")


def read_sequences(path) -> tuple[list[str], list[str], np.ndarray, list[str]]:
    """Read a ``.csv`` sequence table back as (ids, labels, values, feature names)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["candidate_id", "label"]:
        raise SequenceTableError(f"{path}: not a sequence table")
    names = rows[0][2:]
    ids = [r[0] for r in rows[1:]]
    labels = [r[1] for r in rows[1:]]
    vals = np.array([[float(v) for v in r[2:]] for r in rows[1:]]).reshape(len(ids), len(names))
    return ids, labels, vals, names
