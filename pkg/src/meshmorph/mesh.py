"""Triangle meshes: container, OBJ/PLY I/O, graph operators and icospheres."""
from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .sparse import canonical


class MeshFormatError(ValueError):
    """Malformed mesh file."""


class UnsupportedFormatError(MeshFormatError):
    """Valid file using a feature this package does not handle (e.g. quads)."""


class DimensionError(ValueError):
    pass


class StructureError(ValueError):
    """Mesh connectivity violates an operation's structural requirement."""


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Fixed-topology triangle mesh.

    ``positions`` is ``(n, 3)`` float64, ``faces`` is ``(m, 3)`` int64 with
    counterclockwise winding seen from outside.
    """

    positions: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64)
        faces = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise DimensionError(f"positions must be (n, 3), got {pos.shape}")
        if faces.size:
            if faces.min() < 0 or faces.max() >= len(pos):
                raise IndexError("face index out of range")
            degenerate = (
                (faces[:, 0] == faces[:, 1])
                | (faces[:, 1] == faces[:, 2])
                | (faces[:, 0] == faces[:, 2])
            )
            if degenerate.any():
                raise ValueError(f"degenerate face at row {int(np.argmax(degenerate))}")
        pos.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "faces", faces)

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_positions(self, positions) -> "TriMesh":
        return TriMesh(positions, self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted ``(i, j)`` pairs, i < j."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)


# ---------------------------------------------------------------- OBJ


def parse_obj(text: str) -> TriMesh:
    verts: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise MeshFormatError(f"line {lineno}: vertex needs 3 coordinates")
            try:
                verts.append((float(parts[1]), float(parts[2]), float(parts[3])))
            except ValueError as exc:
                raise MeshFormatError(f"line {lineno}: bad vertex coordinate") from exc
        elif tag == "f":
            if len(parts) != 4:
                raise UnsupportedFormatError(
                    f"line {lineno}: only triangular faces supported, got {len(parts) - 1} vertices"
                )
            try:
                idx = tuple(int(p.split("/")[0]) - 1 for p in parts[1:])
            except ValueError as exc:
                raise MeshFormatError(f"line {lineno}: bad face index") from exc
            faces.append(idx)
    pos = np.array(verts, dtype=np.float64).reshape(-1, 3)
    return TriMesh(pos, np.array(faces, dtype=np.int64).reshape(-1, 3))


def serialize_obj(mesh: TriMesh) -> str:
    # repr() of a float64 round-trips exactly
    out = io.StringIO()
    for x, y, z in mesh.positions.tolist():
        out.write(f"v {x!r} {y!r} {z!r}\n")
    for a, b, c in (mesh.faces + 1).tolist():
        out.write(f"f {a} {b} {c}\n")
    return out.getvalue()


# ---------------------------------------------------------------- PLY

# Diverging ramp: min -> blue, mid -> white, max -> red.
RAMP_STOPS = np.array([[0, 0, 255], [255, 255, 255], [255, 0, 0]], dtype=np.float64)


def color_ramp(scalars) -> np.ndarray:
    """Map scalars to uint8 RGB over their own [min, max] range.

    A constant field maps to the ramp midpoint (white).
    """
    s = np.asarray(scalars, dtype=np.float64)
    lo, hi = s.min(), s.max()
    if hi > lo:
        t = (s - lo) / (hi - lo)
    else:
        t = np.full_like(s, 0.5)
    lower = t <= 0.5
    u = np.where(lower, t * 2.0, (t - 0.5) * 2.0)[:, None]
    rgb = np.where(
        lower[:, None],
        RAMP_STOPS[0] + u * (RAMP_STOPS[1] - RAMP_STOPS[0]),
        RAMP_STOPS[1] + u * (RAMP_STOPS[2] - RAMP_STOPS[1]),
    )
    return np.round(rgb).astype(np.uint8)


def serialize_ply(mesh: TriMesh, scalars=None) -> bytes:
    """Binary little-endian PLY; positions stored as float32.

    When ``scalars`` is given, each vertex gets an RGB color from
    :func:`color_ramp`.
    """
    n = mesh.n_vertices
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if scalars is not None:
        scalars = np.asarray(scalars, dtype=np.float64).ravel()
        if len(scalars) != n:
            raise DimensionError(f"scalars have length {len(scalars)}, mesh has {n} vertices")
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [
        f"element face {mesh.n_faces}",
        "property list uchar uint vertex_indices",
        "end_header",
    ]
    vrec = np.empty(n, dtype=fields)
    vrec["x"], vrec["y"], vrec["z"] = mesh.positions.T.astype(np.float32)
    if scalars is not None:
        rgb = color_ramp(scalars)
        vrec["red"], vrec["green"], vrec["blue"] = rgb.T
    frec = np.empty(mesh.n_faces, dtype=[("k", "u1"), ("idx", "<u4", (3,))])
    frec["k"] = 3
    frec["idx"] = mesh.faces
    return ("\n".join(header) + "\n").encode("ascii") + vrec.tobytes() + frec.tobytes()


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


def parse_ply(data: bytes) -> tuple[TriMesh, np.ndarray | None]:
    """Parse the binary little-endian subset written by :func:`serialize_ply`.

    Returns the mesh and the ``(n, 3)`` uint8 colors (or ``None``).
    """
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise MeshFormatError("not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    body = memoryview(data)[end + len(b"end_header\n"):]
    if "format binary_little_endian 1.0" not in lines:
        raise UnsupportedFormatError("only binary_little_endian PLY is supported")
    elements: list[list] = []
    for ln in lines:
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            elements[-1][2].append(parts[1:])
    offset = 0
    vertices = faces = None
    for name, count, props in elements:
        if name == "vertex":
            dtype = np.dtype([(p[1], _PLY_TYPES[p[0]]) for p in props])
            vertices = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
            offset += dtype.itemsize * count
        elif name == "face":
            if len(props) != 1 or props[0][0] != "list":
                raise UnsupportedFormatError("face element must be a single list property")
            ctype, itype = _PLY_TYPES[props[0][1]], _PLY_TYPES[props[0][2]]
            dtype = np.dtype([("k", ctype), ("idx", itype, (3,))])
            faces = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
            if count and np.any(faces["k"] != 3):
                raise UnsupportedFormatError("only triangular faces supported")
            offset += dtype.itemsize * count
        else:
            raise UnsupportedFormatError(f"unexpected element {name!r}")
    if vertices is None:
        raise MeshFormatError("PLY has no vertex element")
    pos = np.stack([vertices["x"], vertices["y"], vertices["z"]], axis=1).astype(np.float64)
    f = faces["idx"].astype(np.int64) if faces is not None else np.zeros((0, 3), np.int64)
    colors = None
    if "red" in vertices.dtype.names:
        colors = np.stack([vertices["red"], vertices["green"], vertices["blue"]], axis=1)
    return TriMesh(pos, f), colors


def load_mesh(path: str | Path) -> TriMesh:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return parse_ply(path.read_bytes())[0]
    return parse_obj(path.read_text())


def save_mesh(mesh: TriMesh, path: str | Path, scalars=None) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        path.write_bytes(serialize_ply(mesh, scalars))
    else:
        path.write_text(serialize_obj(mesh))


# ---------------------------------------------------------------- graph


def build_adjacency(mesh: TriMesh) -> sp.csr_matrix:
    n = mesh.n_vertices
    e = mesh.edges()
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return canonical(sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)))


def normalized_laplacian(adj: sp.csr_matrix) -> sp.csr_matrix:
    """Scaled Laplacian ``L - I`` where ``L = I - D^-1/2 A D^-1/2``.

    The largest eigenvalue is taken to be 2, so the Chebyshev argument
    ``2 L / lmax - I`` reduces to ``L - I = -D^-1/2 A D^-1/2``.  Rows of
    isolated vertices are zero.
    """
    adj = sp.csr_matrix(adj, dtype=np.float64)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    d = sp.diags(inv_sqrt)
    return canonical(-(d @ adj @ d))


def vertex_rings(mesh: TriMesh) -> list[set[int]]:
    ring: list[set[int]] = [set() for _ in range(mesh.n_vertices)]
    for a, b, c in mesh.faces.tolist():
        ring[a].update((b, c))
        ring[b].update((a, c))
        ring[c].update((a, b))
    return ring


# ---------------------------------------------------------------- primitives

_PHI = (1.0 + 5.0 ** 0.5) / 2.0

_ICO_VERTS = [
    (-1, _PHI, 0), (1, _PHI, 0), (-1, -_PHI, 0), (1, -_PHI, 0),
    (0, -1, _PHI), (0, 1, _PHI), (0, -1, -_PHI), (0, 1, -_PHI),
    (_PHI, 0, -1), (_PHI, 0, 1), (-_PHI, 0, -1), (-_PHI, 0, 1),
]
_ICO_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]


def icosahedron() -> TriMesh:
    """Regular icosahedron inscribed in the unit sphere."""
    v = np.array(_ICO_VERTS, dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return TriMesh(v, np.array(_ICO_FACES))


def icosphere(subdivisions: int = 0) -> TriMesh:
    """Loop-style midpoint subdivision of the icosahedron, projected to the
    unit sphere.  Has ``10 * 4**s + 2`` vertices and ``20 * 4**s`` faces."""
    if subdivisions < 0:
        raise ValueError("subdivisions must be >= 0")
    base = icosahedron()
    verts = [tuple(p) for p in base.positions.tolist()]
    faces = [tuple(f) for f in base.faces.tolist()]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            idx = cache.get(key)
            if idx is None:
                p = (np.array(verts[a]) + np.array(verts[b])) / 2.0
                p /= np.linalg.norm(p)
                idx = len(verts)
                verts.append(tuple(p))
                cache[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriMesh(np.array(verts), np.array(faces))


def face_normals(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalized face normals (twice the area vector)."""
    p = positions[faces]
    return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
