"""Feature aggregation between hierarchy levels.

An aggregator maps vertex features of a preceding level ``(n_prev, ...)``
to a succeeding level ``(n_next, ...)`` through a row-stochastic mapping
matrix.  The learned variant builds that matrix from trainable keys and
queries: cosine compatibility, optional top-k masking, row normalisation,
then a trainable blend with the precomputed (QEM) matrix.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autograd as ad
from . import sparse as sparse_util
from .autograd import ShapeError, Tensor

EPS_NORM = 1e-12
EPS_DENOM = 1e-8

PROVENANCES = ("qem", "attention", "fused", "exported", "average", "full", "variant")


@dataclass(eq=False)
class MappingMatrix:
    matrix: sp.csr_matrix
    provenance: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        self.matrix = sparse_util.canonical(self.matrix)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def save(self, stem: str | Path) -> None:
        """Write ``<stem>.csv`` triplets and a ``<stem>.json`` sidecar."""
        stem = Path(stem)
        sparse_util.write_csv(self.matrix, stem.with_suffix(".csv"))
        side = {"provenance": self.provenance, "shape": list(self.shape), **self.meta}
        stem.with_suffix(".json").write_text(json.dumps(side, indent=1, sort_keys=True))

    @classmethod
    def load(cls, stem: str | Path) -> "MappingMatrix":
        stem = Path(stem)
        side = json.loads(stem.with_suffix(".json").read_text())
        shape = tuple(side.pop("shape"))
        provenance = side.pop("provenance")
        return cls(sparse_util.read_csv(stem.with_suffix(".csv"), shape), provenance, side)


# ---------------------------------------------------------------- attention pieces


def compatibility_scores(queries: Tensor, keys: Tensor) -> Tensor:
    """Cosine similarity of every query row with every key row."""
    queries, keys = ad.as_tensor(queries), ad.as_tensor(keys)
    if queries.shape[1] != keys.shape[1]:
        raise ShapeError(f"compatibility_scores: query dim {queries.shape[1]} != key dim {keys.shape[1]}")
    qn = ad.div_rows(queries, ad.clamp_min(ad.row_norm(queries), EPS_NORM))
    kn = ad.div_rows(keys, ad.clamp_min(ad.row_norm(keys), EPS_NORM))
    return ad.matmul(qn, ad.transpose(kn))


def topk_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Binary mask of the ``k`` largest entries per row; ties go to the
    smaller column index."""
    scores = np.asarray(scores)
    n_rows, n_cols = scores.shape
    if not 1 <= k <= n_cols:
        raise ValueError(f"k must be in [1, {n_cols}], got {k}")
    mask = np.zeros_like(scores, dtype=np.float64)
    if k == n_cols:
        mask[:] = 1.0
        return mask
    # k-th largest per row, then take everything above it plus the
    # leftmost ties at it
    kth = -np.partition(-scores, k - 1, axis=1)[:, k - 1:k]
    above = scores > kth
    ties = scores == kth
    need = k - above.sum(axis=1, keepdims=True)
    mask[above | (ties & (np.cumsum(ties, axis=1) <= need))] = 1.0
    return mask


def normalize_masked(scores: Tensor, mask: np.ndarray) -> tuple[Tensor, int]:
    """Row-normalise masked scores.

    Returns the mapping and the number of rows whose masked scores sum to
    a non-positive value (those rows are emitted unchanged).
    """
    scores = ad.as_tensor(scores)
    if scores.shape != mask.shape:
        raise ShapeError(f"normalize_masked: scores {scores.shape} vs mask {mask.shape}")
    masked = ad.mul(scores, Tensor(mask))
    row_total = ad.sum(masked, axis=1)
    bad = int(np.count_nonzero(row_total.data <= 0))
    return ad.div_rows(masked, ad.add_scalar(row_total, EPS_DENOM)), bad


def fuse(m_a, m_p: sp.spmatrix, w_a: float, meta: dict | None = None) -> MappingMatrix:
    """``w_a * m_a + (1 - w_a) * m_p`` as a sparse matrix."""
    m_a = sp.csr_matrix(m_a)
    if m_a.shape != m_p.shape:
        raise ShapeError(f"fuse: {m_a.shape} vs {m_p.shape}")
    w = float(w_a)
    return MappingMatrix(m_a * w + sp.csr_matrix(m_p) * (1.0 - w), "fused", dict(meta or {}))


def aggregate(x: Tensor, m) -> Tensor:
    """Apply a mapping (MappingMatrix, sparse, or dense Tensor) to features."""
    x = ad.as_tensor(x)
    if isinstance(m, MappingMatrix):
        m = m.matrix
    if sp.issparse(m):
        return ad.spmm(m, x)
    return ad.matmul(m, x)


def init_params(pos_prev: np.ndarray, pos_next: np.ndarray, c: int = 21, seed: int = 0,
                scheme: str = "precomputed", w_a: float = 0.2,
                rng: np.random.Generator | None = None):
    """Initial keys ``(n_prev, c)``, queries ``(n_next, c)`` and fusion weight.

    ``precomputed`` puts vertex positions in the first three channels and
    draws the rest from U(-0.1, 0.1); ``uniform`` / ``normal`` draw every
    channel from U(-1, 1) / N(0, 1).
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    n_prev, n_next = len(pos_prev), len(pos_next)
    if scheme == "precomputed":
        if c < 3:
            raise ValueError("position-seeded keys/queries need c >= 3")
        keys = np.empty((n_prev, c))
        queries = np.empty((n_next, c))
        keys[:, :3] = pos_prev
        queries[:, :3] = pos_next
        keys[:, 3:] = rng.uniform(-0.1, 0.1, size=(n_prev, c - 3))
        queries[:, 3:] = rng.uniform(-0.1, 0.1, size=(n_next, c - 3))
    elif scheme == "uniform":
        keys = rng.uniform(-1.0, 1.0, size=(n_prev, c))
        queries = rng.uniform(-1.0, 1.0, size=(n_next, c))
    elif scheme == "normal":
        keys = rng.standard_normal((n_prev, c))
        queries = rng.standard_normal((n_next, c))
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return keys, queries, float(w_a)


# ---------------------------------------------------------------- aggregators


class Aggregator:
    """Base: subclasses provide ``__call__``, ``params`` and ``mapping``."""

    kind = "base"
    n_next: int
    n_prev: int

    def params(self) -> dict[str, Tensor]:
        return {}

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params().items() if v.requires_grad}

    def post_step(self) -> None:
        pass

    def mapping(self) -> MappingMatrix:
        raise NotImplementedError

    def _check_input(self, x: Tensor):
        if x.shape[0] != self.n_prev:
            raise ShapeError(f"{self.kind} aggregation expects {self.n_prev} rows, got {x.shape[0]}")


class FixedAggregator(Aggregator):
    """Constant sparse mapping (QEM, averaged, or exported)."""

    def __init__(self, mapping: MappingMatrix):
        self._mapping = mapping
        self.kind = mapping.provenance
        self.n_next, self.n_prev = mapping.shape

    def __call__(self, x: Tensor) -> Tensor:
        self._check_input(x)
        return ad.spmm(self._mapping.matrix, x)

    def mapping(self) -> MappingMatrix:
        return self._mapping


class AttentionAggregator(Aggregator):
    kind = "attention"

    def __init__(self, m_p: sp.spmatrix, keys: np.ndarray, queries: np.ndarray, w_a: float = 0.2,
                 k: int = 2, masking: bool = True, fusion: bool = True, pin_w_a: bool = False):
        self.m_p = sparse_util.canonical(m_p)
        self.n_next, self.n_prev = self.m_p.shape
        if keys.shape[0] != self.n_prev or queries.shape[0] != self.n_next:
            raise ShapeError(f"keys {keys.shape} / queries {queries.shape} do not match "
                             f"mapping {self.m_p.shape}")
        if keys.shape[1] != queries.shape[1] or keys.shape[1] < 2:
            raise ValueError("keys and queries need a shared dimension c >= 2")
        if k < 1:
            raise ValueError("k must be >= 1")
        self.keys = Tensor(keys, requires_grad=True)
        self.queries = Tensor(queries, requires_grad=True)
        self.w_a = Tensor(np.array([w_a]), requires_grad=fusion and not pin_w_a)
        self.k = min(k, self.n_prev)
        self.masking = masking
        self.fusion = fusion
        self.nonpositive_rows = 0

    @property
    def c(self) -> int:
        return self.keys.shape[1]

    def params(self) -> dict[str, Tensor]:
        out = {"keys": self.keys, "queries": self.queries}
        if self.fusion:
            out["w_a"] = self.w_a
        return out

    def attention_head(self) -> Tensor:
        scores = compatibility_scores(self.queries, self.keys)
        if self.masking:
            mask = topk_mask(scores.data, self.k)
        else:
            mask = np.ones(scores.shape)
        m_a, bad = normalize_masked(scores, mask)
        self.nonpositive_rows += bad
        return m_a

    def __call__(self, x: Tensor) -> Tensor:
        self._check_input(x)
        y_a = ad.matmul(self.attention_head(), x)
        if not self.fusion:
            return y_a
        y_p = ad.spmm(self.m_p, x)
        one_minus = ad.add_scalar(ad.scale(self.w_a, -1.0), 1.0)
        return ad.add(ad.scale(y_a, self.w_a), ad.scale(y_p, one_minus))

    def mapping(self) -> MappingMatrix:
        m_a = self.attention_head().data
        meta = {"k": self.k if self.masking else None, "c": self.c}
        if not self.fusion:
            return MappingMatrix(m_a, "attention", meta)
        w = float(self.w_a.data[0])
        return fuse(m_a, self.m_p, w, {**meta, "w_a": w})


class FullAggregator(Aggregator):
    """Dense trainable mapping, no normalisation."""

    kind = "full"

    def __init__(self, n_next: int, n_prev: int, rng: np.random.Generator):
        self.n_next, self.n_prev = n_next, n_prev
        self.weight = Tensor(rng.uniform(-0.01, 0.01, size=(n_next, n_prev)), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight}

    def __call__(self, x: Tensor) -> Tensor:
        self._check_input(x)
        return ad.matmul(self.weight, x)

    def mapping(self) -> MappingMatrix:
        return MappingMatrix(self.weight.data, "full")


class VariantAggregator(Aggregator):
    """Trainable weights on the fixed support of a precomputed mapping,
    renormalised per row after every optimiser step."""

    kind = "variant"

    def __init__(self, m_p: sp.spmatrix):
        m_p = sparse_util.canonical(m_p).tocoo()
        self.n_next, self.n_prev = m_p.shape
        self.rows, self.cols = m_p.row.astype(np.int64), m_p.col.astype(np.int64)
        self.values = Tensor(m_p.data.copy(), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"values": self.values}

    def __call__(self, x: Tensor) -> Tensor:
        self._check_input(x)
        m = ad.scatter_dense(self.values, self.rows, self.cols, (self.n_next, self.n_prev))
        return ad.matmul(m, x)

    def post_step(self) -> None:
        totals = np.zeros(self.n_next)
        np.add.at(totals, self.rows, self.values.data)
        self.values.data /= totals[self.rows]

    def support(self) -> set[tuple[int, int]]:
        return set(zip(self.rows.tolist(), self.cols.tolist()))

    def mapping(self) -> MappingMatrix:
        m = sparse_util.from_triplets(self.rows, self.cols, self.values.data, (self.n_next, self.n_prev))
        return MappingMatrix(m, "variant")


# ---------------------------------------------------------------- baselines / export


def baseline_full_mapping(n_next: int, n_prev: int, seed: int = 0) -> FullAggregator:
    return FullAggregator(n_next, n_prev, np.random.default_rng(seed))


def baseline_average(m_p: sp.spmatrix) -> MappingMatrix:
    """Same support as ``m_p``; each row's entries set to 1 / (row nnz)."""
    m = sparse_util.canonical(m_p)
    counts = sparse_util.row_nnz(m)
    out = m.copy()
    out.data = np.repeat(1.0 / np.maximum(counts, 1), counts)
    return MappingMatrix(out, "average")


def baseline_variant_weight(m_p: sp.spmatrix, seed: int = 0) -> VariantAggregator:
    # initialised from m_p itself; the seed is accepted for interface symmetry
    return VariantAggregator(m_p)


def export_fixed(agg: Aggregator) -> MappingMatrix:
    """Freeze the aggregator's current mapping as a constant sparse matrix."""
    m = agg.mapping()
    return MappingMatrix(m.matrix, "exported", {**m.meta, "source": m.provenance})


def receptive_field(m, vertex: int) -> np.ndarray:
    """Dense row ``vertex`` of a mapping (weights over preceding-level vertices)."""
    mat = m.matrix if isinstance(m, MappingMatrix) else sp.csr_matrix(m)
    if not 0 <= vertex < mat.shape[0]:
        raise IndexError(f"vertex {vertex} out of range for {mat.shape[0]} rows")
    return mat.getrow(vertex).toarray().ravel()
