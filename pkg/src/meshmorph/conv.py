"""Chebyshev spectral and spiral mesh convolutions."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autograd as ad
from .autograd import ShapeError, Tensor
from .mesh import StructureError, TriMesh


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ChebConv:
    """``Y = sum_k T_k(L) X theta_k (+ b)`` with the Chebyshev recurrence
    ``T_0 = X``, ``T_1 = L X``, ``T_k = 2 L T_{k-1} - T_{k-2}``."""

    def __init__(self, d_in: int, d_out: int, order: int = 6, bias: bool = True,
                 rng: np.random.Generator | None = None):
        if order < 1:
            raise ValueError("Chebyshev order K must be >= 1")
        rng = rng or np.random.default_rng(0)
        self.d_in, self.d_out, self.order = d_in, d_out, order
        self.weight = Tensor(glorot(rng, (order, d_in, d_out), order * d_in, d_out), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def params(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def __call__(self, x: Tensor, lap: sp.spmatrix) -> Tensor:
        if x.shape[-1] != self.d_in or lap.shape != (x.shape[0], x.shape[0]):
            raise ShapeError(f"cheb_conv: input {x.shape} / Laplacian {lap.shape} "
                             f"incompatible with d_in={self.d_in}")
        terms = [x]
        if self.order > 1:
            terms.append(ad.spmm(lap, x))
        lap2 = lap * 2.0 if self.order > 2 else None
        for _ in range(2, self.order):
            terms.append(ad.sub(ad.spmm(lap2, terms[-1]), terms[-2]))
        stacked = terms[0] if self.order == 1 else ad.concat(terms, axis=-1)
        w = ad.reshape(self.weight, (self.order * self.d_in, self.d_out))
        y = ad.linear(stacked, w)
        if self.bias is not None:
            y = ad.add_bias(y, self.bias)
        return y


def cheb_conv(x: Tensor, lap: sp.spmatrix, layer: ChebConv) -> Tensor:
    return layer(x, lap)


def spiral_sequences(mesh: TriMesh, length: int) -> np.ndarray:
    """Per-vertex index table ``[i, ring...]`` truncated / padded to ``length``.

    The 1-ring is walked counterclockwise following face winding, starting
    at the smallest-index neighbour (interior vertices) or at the boundary
    neighbour without a predecessor.  Missing slots hold ``-1``.
    """
    if length < 1:
        raise ValueError("spiral length must be >= 1")
    n = mesh.n_vertices
    succ: list[dict[int, int]] = [dict() for _ in range(n)]
    for face in mesh.faces.tolist():
        for r in range(3):
            i, a, b = face[r], face[(r + 1) % 3], face[(r + 2) % 3]
            if a in succ[i]:
                raise StructureError(f"vertex {i}: non-orientable or non-manifold neighbourhood")
            succ[i][a] = b
    table = np.full((n, length), -1, dtype=np.int64)
    for i in range(n):
        table[i, 0] = i
        nxt = succ[i]
        if not nxt:
            continue
        targets = set(nxt.values())
        if len(targets) != len(nxt):
            raise StructureError(f"vertex {i}: non-orientable or non-manifold neighbourhood")
        ring_vertices = set(nxt) | targets
        starts = sorted(set(nxt) - targets)
        if len(starts) > 1:
            raise StructureError(f"vertex {i}: neighbourhood has several boundary fans")
        start = starts[0] if starts else min(ring_vertices)
        ring = [start]
        cur = nxt.get(start)
        while cur is not None and cur != start:
            ring.append(cur)
            cur = nxt.get(cur)
        if len(ring) != len(ring_vertices):
            raise StructureError(f"vertex {i}: 1-ring is not a single fan")
        ring = ring[: length - 1]
        table[i, 1:1 + len(ring)] = ring
    return table


def default_spiral_length(mesh: TriMesh) -> int:
    """One plus the largest 1-ring size (a 1-hop spiral)."""
    deg = np.zeros(mesh.n_vertices, dtype=np.int64)
    for endpoint in mesh.edges().T:
        np.add.at(deg, endpoint, 1)
    return 1 + int(deg.max(initial=0))


def save_spirals_csv(table: np.ndarray, path: str | Path) -> None:
    np.savetxt(path, table, fmt="%d", delimiter=",")


class SpiralConv:
    """Gather each vertex's spiral, concatenate features, apply one linear map."""

    def __init__(self, d_in: int, d_out: int, length: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        if length < 1:
            raise ValueError("spiral length must be >= 1")
        rng = rng or np.random.default_rng(0)
        self.d_in, self.d_out, self.length = d_in, d_out, length
        self.weight = Tensor(glorot(rng, (length * d_in, d_out), length * d_in, d_out), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def params(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def __call__(self, x: Tensor, spirals: np.ndarray) -> Tensor:
        if spirals.shape != (x.shape[0], self.length) or x.shape[-1] != self.d_in:
            raise ShapeError(f"spiral_conv: table {spirals.shape} / input {x.shape} do not match "
                             f"layer (length={self.length}, d_in={self.d_in})")
        g = ad.gather_rows(x, spirals)  # (n, l, *batch, d)
        if x.data.ndim == 2:
            flat = ad.reshape(g, (x.shape[0], self.length * self.d_in))
        else:
            axes = (0,) + tuple(range(2, g.data.ndim - 1)) + (1, g.data.ndim - 1)
            t = ad.transpose(g, axes)  # (n, *batch, l, d)
            flat = ad.reshape(t, t.shape[:-2] + (self.length * self.d_in,))
        y = ad.linear(flat, self.weight)
        if self.bias is not None:
            y = ad.add_bias(y, self.bias)
        return y


def spiral_conv(x: Tensor, spirals: np.ndarray, layer: SpiralConv) -> Tensor:
    return layer(x, spirals)
