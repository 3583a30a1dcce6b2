"""Quadric-error-metric edge collapse restricted to vertex subsets, and the
mesh hierarchy with its selection / barycentric mapping matrices."""
from __future__ import annotations

import heapq
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import sparse as sparse_util
from .mesh import StructureError, TriMesh, face_normals, load_mesh, save_mesh


class DecimationStuck(RuntimeError):
    def __init__(self, achieved: int, target: int):
        super().__init__(f"no legal collapse left at {achieved} vertices (target {target})")
        self.achieved = achieved
        self.target = target


def face_planes(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Unit plane coefficients ``[a, b, c, d]`` per face and a validity mask."""
    nrm = face_normals(mesh.positions, mesh.faces)
    length = np.linalg.norm(nrm, axis=1)
    valid = length > 0
    unit = np.zeros_like(nrm)
    unit[valid] = nrm[valid] / length[valid, None]
    d = -np.einsum("ij,ij->i", unit, mesh.positions[mesh.faces[:, 0]])
    return np.column_stack([unit, d]), valid


def vertex_quadrics(mesh: TriMesh) -> np.ndarray:
    """Sum of plane outer products over the faces incident to each vertex.

    Zero-area faces are skipped; a warning reports how many.
    """
    planes, valid = face_planes(mesh)
    skipped = int((~valid).sum())
    if skipped:
        warnings.warn(f"skipped {skipped} zero-area face(s) while accumulating quadrics")
    kp = np.einsum("fi,fj->fij", planes, planes)
    kp[~valid] = 0.0
    q = np.zeros((mesh.n_vertices, 4, 4))
    for corner in range(3):
        np.add.at(q, mesh.faces[:, corner], kp)
    return q


def quadric_error(q: np.ndarray, point) -> float:
    h = np.append(np.asarray(point, dtype=np.float64), 1.0)
    return float(h @ q @ h)


def _tie_key(cost: float) -> float:
    # Collapse costs equal to 11 significant digits count as ties, so
    # symmetric configurations resolve by index rather than rounding noise.
    return float(f"{cost:.10e}") if cost != 0.0 else 0.0


@dataclass
class CollapseTrace:
    """``(removed, absorbed_into)`` pairs in collapse order."""

    steps: list[tuple[int, int]] = field(default_factory=list)

    def absorber(self) -> dict[int, int]:
        return dict(self.steps)


class _EdgeCollapser:
    def __init__(self, mesh: TriMesh):
        self.pos = mesh.positions
        self.hom = np.column_stack([mesh.positions, np.ones(mesh.n_vertices)])
        self.q = vertex_quadrics(mesh)
        self.faces = [list(f) for f in mesh.faces.tolist()]
        self.face_alive = [True] * len(self.faces)
        n = mesh.n_vertices
        self.vfaces: list[set[int]] = [set() for _ in range(n)]
        self.nbrs: list[set[int]] = [set() for _ in range(n)]
        for fi, (a, b, c) in enumerate(self.faces):
            for v in (a, b, c):
                self.vfaces[v].add(fi)
            self.nbrs[a].update((b, c))
            self.nbrs[b].update((a, c))
            self.nbrs[c].update((a, b))
        self.alive = np.ones(n, dtype=bool)
        self.version = [0] * n
        self.n_alive = n
        self.heap: list = []

    def edge_entry(self, a: int, b: int):
        if a > b:
            a, b = b, a
        qs = self.q[a] + self.q[b]
        ha, hb = self.hom[a], self.hom[b]
        # survivor keeps its own position; cost evaluated at that position
        cost_a = _tie_key(float(ha @ qs @ ha))
        cost_b = _tie_key(float(hb @ qs @ hb))
        if cost_b < cost_a:
            cost, survivor = cost_b, b
        else:
            cost, survivor = cost_a, a
        return (cost, a, b, survivor, self.version[a], self.version[b])

    def push_all(self):
        self.heap = []
        for a in range(len(self.nbrs)):
            if not self.alive[a]:
                continue
            for b in self.nbrs[a]:
                if a < b:
                    self.heap.append(self.edge_entry(a, b))
        heapq.heapify(self.heap)

    def _is_boundary(self, v: int) -> bool:
        count: dict[int, int] = {}
        for fi in self.vfaces[v]:
            for w in self.faces[fi]:
                if w != v:
                    count[w] = count.get(w, 0) + 1
        return any(c == 1 for c in count.values())

    def legal(self, keep: int, drop: int) -> bool:
        shared = self.vfaces[keep] & self.vfaces[drop]
        if not shared:
            return False
        opposite = set()
        for fi in shared:
            opposite.update(self.faces[fi])
        opposite -= {keep, drop}
        if (self.nbrs[keep] & self.nbrs[drop]) != opposite:
            return False
        if len(shared) == 2 and self._is_boundary(keep) and self._is_boundary(drop):
            return False
        p_keep = self.pos[keep]
        for fi in self.vfaces[drop] - shared:
            tri = self.pos[self.faces[fi]]
            old = np.cross(tri[1] - tri[0], tri[2] - tri[0])
            corner = self.faces[fi].index(drop)
            tri = tri.copy()
            tri[corner] = p_keep
            new = np.cross(tri[1] - tri[0], tri[2] - tri[0])
            if float(new @ new) <= 1e-30 or float(old @ new) <= 0.0:
                return False
        return True

    def collapse(self, keep: int, drop: int):
        shared = self.vfaces[keep] & self.vfaces[drop]
        for fi in shared:
            self.face_alive[fi] = False
            for w in self.faces[fi]:
                self.vfaces[w].discard(fi)
        for fi in list(self.vfaces[drop]):
            f = self.faces[fi]
            f[f.index(drop)] = keep
            self.vfaces[keep].add(fi)
        self.vfaces[drop] = set()
        for w in self.nbrs[drop]:
            self.nbrs[w].discard(drop)
            if w != keep:
                self.nbrs[w].add(keep)
                self.nbrs[keep].add(w)
        self.nbrs[drop] = set()
        self.q[keep] = self.q[keep] + self.q[drop]
        self.alive[drop] = False
        self.version[keep] += 1
        self.n_alive -= 1
        for w in self.nbrs[keep]:
            heapq.heappush(self.heap, self.edge_entry(keep, w))

    def run(self, target: int, trace: CollapseTrace):
        self.push_all()
        progress = False
        while self.n_alive > target:
            if not self.heap:
                if not progress:
                    raise DecimationStuck(self.n_alive, target)
                # legality depends on the neighbourhood: retry rejected edges
                self.push_all()
                progress = False
                continue
            cost, a, b, survivor, va, vb = heapq.heappop(self.heap)
            if not (self.alive[a] and self.alive[b]):
                continue
            if va != self.version[a] or vb != self.version[b]:
                continue
            if b not in self.nbrs[a]:
                continue
            drop = b if survivor == a else a
            if not self.legal(survivor, drop):
                continue
            self.collapse(survivor, drop)
            progress = True
            trace.steps.append((drop, survivor))


def qem_decimate(mesh: TriMesh, target_n: int) -> tuple[TriMesh, np.ndarray, CollapseTrace]:
    """Greedy QEM edge collapse down to ``target_n`` vertices.

    Each collapse of edge ``(u, v)`` keeps one endpoint at its original
    position.  Heap order is (cost, min index, max index); on equal cost the
    lower-index endpoint survives.  Returns the coarse mesh, the strictly
    increasing indices of kept vertices, and the collapse trace.
    """
    n = mesh.n_vertices
    if not 3 <= target_n <= n:
        raise ValueError(f"target_n must be in [3, {n}], got {target_n}")
    trace = CollapseTrace()
    if target_n == n:
        return mesh, np.arange(n), trace
    collapser = _EdgeCollapser(mesh)
    collapser.run(target_n, trace)
    kept = np.flatnonzero(collapser.alive)
    remap = np.full(n, -1, dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    faces = [f for f, ok in zip(collapser.faces, collapser.face_alive) if ok]
    coarse = TriMesh(mesh.positions[kept], remap[np.array(faces, dtype=np.int64).reshape(-1, 3)])
    return coarse, kept, trace


# ---------------------------------------------------------------- mapping matrices


def downsample_matrix(n_fine: int, kept) -> sp.csr_matrix:
    kept = np.asarray(kept, dtype=np.int64)
    if kept.size and (kept.min() < 0 or kept.max() >= n_fine):
        raise IndexError("kept index out of range")
    if np.any(np.diff(kept) <= 0):
        raise IndexError("kept indices must be strictly increasing (no duplicates)")
    r = len(kept)
    return sparse_util.from_triplets(np.arange(r), kept, np.ones(r), (r, n_fine))


def closest_point_barycentric(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Barycentric weights of the closest point on each triangle.

    ``p`` is ``(P, 3)``; ``a, b, c`` are ``(F, 3)``.  Returns squared
    distances ``(P, F)`` and weights ``(P, F, 3)``.
    """
    p = p[:, None, :]
    ab, ac = (b - a)[None], (c - a)[None]
    ap, bp, cp = p - a[None], p - b[None], p - c[None]
    dot = lambda u, v: np.einsum("...i,...i->...", u, v)
    d1, d2 = dot(ab, ap), dot(ac, ap)
    d3, d4 = dot(ab, bp), dot(ac, bp)
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_in, w_in = vb * denom, vc * denom
    zero = np.zeros_like(d1)
    one = np.ones_like(d1)
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
    ]
    wa = np.select(conds, [one, zero, 1 - t_ab, zero, 1 - t_ac, zero], 1 - v_in - w_in)
    wb = np.select(conds, [zero, one, t_ab, zero, zero, 1 - t_bc], v_in)
    wc = np.select(conds, [zero, zero, zero, one, t_ac, t_bc], w_in)
    w = np.stack([wa, wb, wc], axis=-1)
    w = np.nan_to_num(w, nan=1.0 / 3.0)
    closest = w[..., 0:1] * a[None] + w[..., 1:2] * b[None] + w[..., 2:3] * c[None]
    d2sq = dot(p - closest, p - closest)
    return d2sq, w


def upsample_matrix(fine: TriMesh, coarse: TriMesh, kept, chunk: int = 256) -> sp.csr_matrix:
    """Kept vertices copy their coarse counterpart; the rest take barycentric
    weights of their projection onto the closest coarse triangle."""
    kept = np.asarray(kept, dtype=np.int64)
    if coarse.n_faces == 0:
        raise StructureError("coarse mesh has no faces")
    n_fine, n_coarse = fine.n_vertices, coarse.n_vertices
    rows, cols, vals = [kept], [np.arange(len(kept))], [np.ones(len(kept))]
    mask = np.ones(n_fine, dtype=bool)
    mask[kept] = False
    dropped = np.flatnonzero(mask)
    tri = coarse.positions[coarse.faces]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    for start in range(0, len(dropped), chunk):
        idx = dropped[start:start + chunk]
        dist, w = closest_point_barycentric(fine.positions[idx], a, b, c)
        best = np.argmin(dist, axis=1)
        wb = np.clip(w[np.arange(len(idx)), best], 0.0, 1.0)
        wb /= wb.sum(axis=1, keepdims=True)
        verts = coarse.faces[best]
        nz = wb > 0
        rows.append(np.repeat(idx, 3).reshape(-1, 3)[nz])
        cols.append(verts[nz])
        vals.append(wb[nz])
    return sparse_util.from_triplets(
        np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (n_fine, n_coarse)
    )


# ---------------------------------------------------------------- hierarchy


@dataclass(eq=False)
class MeshHierarchy:
    """Meshes ordered coarsest (index 0) to finest (index L).

    ``kept[l]`` indexes level ``l`` vertices inside level ``l + 1``;
    ``down[l]`` is ``n_l x n_{l+1}`` and ``up[l]`` is ``n_{l+1} x n_l``.
    """

    meshes: list[TriMesh]
    kept: list[np.ndarray]
    down: list[sp.csr_matrix]
    up: list[sp.csr_matrix]
    factor: int | None = None

    @property
    def depth(self) -> int:
        return len(self.meshes) - 1

    @property
    def counts(self) -> list[int]:
        return [m.n_vertices for m in self.meshes]

    def save(self, root: str | Path) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        levels = []
        for l, mesh in enumerate(self.meshes):
            save_mesh(mesh, root / f"level_{l}.obj")
            entry = {"n_vertices": mesh.n_vertices, "mesh": f"level_{l}.obj"}
            if l < self.depth:
                sparse_util.write_csv(self.down[l], root / f"down_{l}.csv")
                sparse_util.write_csv(self.up[l], root / f"up_{l}.csv")
                entry.update(kept=self.kept[l].tolist(), down=f"down_{l}.csv", up=f"up_{l}.csv")
            levels.append(entry)
        manifest = {"factor": self.factor, "levels": levels}
        (root / "hierarchy.json").write_text(json.dumps(manifest, indent=1))
        return root

    @classmethod
    def load(cls, root: str | Path) -> "MeshHierarchy":
        root = Path(root)
        manifest = json.loads((root / "hierarchy.json").read_text())
        meshes = [load_mesh(root / e["mesh"]) for e in manifest["levels"]]
        kept, down, up = [], [], []
        for l, e in enumerate(manifest["levels"][:-1]):
            n_c, n_f = meshes[l].n_vertices, meshes[l + 1].n_vertices
            kept.append(np.array(e["kept"], dtype=np.int64))
            down.append(sparse_util.read_csv(root / e["down"], (n_c, n_f)))
            up.append(sparse_util.read_csv(root / e["up"], (n_f, n_c)))
        return cls(meshes, kept, down, up, manifest.get("factor"))


def level_counts(n: int, levels: int, factor: int) -> list[int]:
    """Vertex counts finest-first: ``n, ceil(n/f), ceil(ceil(n/f)/f), ...``."""
    counts = [n]
    for _ in range(levels):
        counts.append(math.ceil(counts[-1] / factor))
    return counts


def build_hierarchy(template: TriMesh, levels: int = 4, factor: int = 4,
                    targets: list[int] | None = None) -> MeshHierarchy:
    """Repeatedly decimate ``template``.

    By default level sizes follow ``ceil(n / factor)``, which requires at
    least ``4 * factor**levels`` template vertices.  ``targets`` (finest
    first, excluding the template) overrides the factor law for tiny meshes.
    """
    n = template.n_vertices
    if targets is None:
        if n < 4 * factor ** levels:
            raise ValueError(
                f"template has {n} vertices; {levels} levels at factor {factor} "
                f"need at least {4 * factor ** levels}"
            )
        targets = level_counts(n, levels, factor)[1:]
    else:
        targets = list(targets)
        factor = None
    fine_first = [template]
    kept_ff, down_ff, up_ff = [], [], []
    for t in targets:
        fine = fine_first[-1]
        coarse, kept, _ = qem_decimate(fine, t)
        fine_first.append(coarse)
        kept_ff.append(kept)
        down_ff.append(downsample_matrix(fine.n_vertices, kept))
        up_ff.append(upsample_matrix(fine, coarse, kept))
    return MeshHierarchy(fine_first[::-1], kept_ff[::-1], down_ff[::-1], up_ff[::-1], factor)
