"""Thin helpers around scipy CSR matrices used as the library's sparse type.

Every sparse matrix handed out by this package is canonical CSR: sorted
column indices, no duplicate entries, explicit zeros removed.  Iterating
``triplets`` therefore walks entries row-major with ascending columns.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterator

import numpy as np
import scipy.sparse as sp


def canonical(m, shape: tuple[int, int] | None = None) -> sp.csr_matrix:
    """Return ``m`` as canonical float64 CSR."""
    out = sp.csr_matrix(m, shape=shape, dtype=np.float64, copy=True)
    out.sum_duplicates()
    out.eliminate_zeros()
    out.sort_indices()
    return out


def from_triplets(rows, cols, values, shape: tuple[int, int]) -> sp.csr_matrix:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    if rows.size and (rows.min() < 0 or rows.max() >= shape[0]):
        raise IndexError("row index out of range")
    if cols.size and (cols.min() < 0 or cols.max() >= shape[1]):
        raise IndexError("column index out of range")
    return canonical(sp.coo_matrix((values, (rows, cols)), shape=shape))


def triplets(m: sp.csr_matrix) -> Iterator[tuple[int, int, float]]:
    m = canonical(m)
    for r in range(m.shape[0]):
        for p in range(m.indptr[r], m.indptr[r + 1]):
            yield r, int(m.indices[p]), float(m.data[p])


def row_nnz(m: sp.csr_matrix) -> np.ndarray:
    return np.diff(sp.csr_matrix(m).indptr)


def row_sums(m: sp.csr_matrix) -> np.ndarray:
    return np.asarray(sp.csr_matrix(m).sum(axis=1)).ravel()


def write_csv(m: sp.csr_matrix, path: str | Path) -> None:
    """Write ``m`` as ``row,col,value`` lines (header included)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "value"])
        for r, c, v in triplets(m):
            w.writerow([r, c, repr(v)])


def read_csv(path: str | Path, shape: tuple[int, int]) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["row", "col", "value"]:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for rec in reader:
            if not rec:
                continue
            rows.append(int(rec[0]))
            cols.append(int(rec[1]))
            vals.append(float(rec[2]))
    return from_triplets(rows, cols, vals, shape)
