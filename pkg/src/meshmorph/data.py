"""Mesh-sequence datasets: synthetic generation, standardization, disk I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.special import sph_harm_y

from .mesh import TriMesh, icosphere, load_mesh, save_mesh

STD_FLOOR = 1e-8


@dataclass(eq=False)
class MeshSequenceDataset:
    template: TriMesh
    samples: np.ndarray  # (S, n, 3)
    splits: dict[str, list[int]]
    mean: np.ndarray = field(default=None)  # (n, 3)
    std: np.ndarray = field(default=None)  # (n, 3)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        n = self.template.n_vertices
        if self.samples.ndim != 3 or self.samples.shape[1:] != (n, 3):
            raise ValueError(f"samples must be (S, {n}, 3), got {self.samples.shape}")
        seen: set[int] = set()
        for name, idx in self.splits.items():
            s = set(idx)
            if seen & s:
                raise ValueError(f"split {name!r} overlaps another split")
            seen |= s
        if self.mean is None or self.std is None:
            self.mean, self.std = fit_normalization(self.samples[self.splits["train"]])

    def split(self, name: str) -> np.ndarray:
        return self.samples[self.splits[name]]

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


def fit_normalization(train: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-vertex, per-coordinate mean and floored std over the training set."""
    if len(train) == 0:
        raise ValueError("empty training split")
    mean = train.mean(axis=0)
    std = np.maximum(train.std(axis=0), STD_FLOOR)
    return mean, std


def normalize(dataset: MeshSequenceDataset) -> np.ndarray:
    return dataset.normalize(dataset.samples)


def denormalize(dataset: MeshSequenceDataset, x: np.ndarray) -> np.ndarray:
    return dataset.denormalize(x)


def split_indices(n_samples: int, fractions=(0.8, 0.1, 0.1)) -> dict[str, list[int]]:
    """Contiguous train/val/test split by sample index."""
    n_train = int(round(n_samples * fractions[0]))
    n_val = int(round(n_samples * fractions[1]))
    idx = list(range(n_samples))
    return {
        "train": idx[:n_train],
        "val": idx[n_train:n_train + n_val],
        "test": idx[n_train + n_val:],
    }


def real_sph_harm_basis(points: np.ndarray, order: int) -> np.ndarray:
    """Real spherical harmonics up to ``order`` at unit-sphere ``points``.

    Returns ``(n, (order + 1)**2)``, columns ordered by degree then order
    ``m = -l..l``.
    """
    x, y, z = points.T
    theta = np.arccos(np.clip(z / np.linalg.norm(points, axis=1), -1.0, 1.0))
    phi = np.arctan2(y, x)
    cols = []
    for deg in range(order + 1):
        for m in range(-deg, deg + 1):
            y_c = sph_harm_y(deg, abs(m), theta, phi)
            if m > 0:
                cols.append(np.sqrt(2.0) * (-1) ** m * y_c.real)
            elif m < 0:
                cols.append(np.sqrt(2.0) * (-1) ** m * y_c.imag)
            else:
                cols.append(y_c.real)
    return np.stack(cols, axis=1)


def generate_synthetic_dataset(
    n_samples: int,
    subdivisions: int = 2,
    harmonic_order: int = 3,
    amplitude: float = 0.1,
    seed: int = 0,
    fractions=(0.8, 0.1, 0.1),
    rotate: bool = False,
) -> MeshSequenceDataset:
    """Icosphere shapes with random radial spherical-harmonic displacement.

    All samples share the template faces and are in dense correspondence.
    ``rotate`` turns the template by a seeded random rotation so that no
    coordinate stays exactly zero across the set (a zero-variance coordinate
    normalizes to a constant 0 target).
    """
    if subdivisions < 0:
        raise ValueError("subdivisions must be >= 0")
    if not amplitude > 0:
        raise ValueError("amplitude must be > 0")
    template = icosphere(subdivisions)
    if rotate:
        turn = Rotation.random(random_state=np.random.default_rng([seed, 1])).as_matrix()
        template = template.with_positions(template.positions @ turn.T)
    basis = real_sph_harm_basis(template.positions, harmonic_order)
    rng = np.random.default_rng(seed)
    coeffs = rng.uniform(-amplitude, amplitude, size=(n_samples, basis.shape[1]))
    radius = 1.0 + coeffs @ basis.T  # (S, n)
    samples = template.positions[None, :, :] * radius[:, :, None]
    return MeshSequenceDataset(template, samples, split_indices(n_samples, fractions))


def dataset_from_meshes(meshes: list[TriMesh], template: TriMesh | None = None,
                        fractions=(0.8, 0.1, 0.1)) -> MeshSequenceDataset:
    """Build a dataset from registered meshes sharing one topology."""
    if not meshes:
        raise ValueError("no meshes")
    template = template or meshes[0]
    for i, m in enumerate(meshes):
        if not np.array_equal(m.faces, template.faces):
            raise ValueError(f"mesh {i} does not share the template topology")
    samples = np.stack([m.positions for m in meshes])
    return MeshSequenceDataset(template, samples, split_indices(len(meshes), fractions))


# ---------------------------------------------------------------- disk


def save_dataset(dataset: MeshSequenceDataset, root: str | Path) -> Path:
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    save_mesh(dataset.template, root / "template.obj")
    names = []
    for i, pos in enumerate(dataset.samples):
        name = f"samples/sample_{i:05d}.obj"
        save_mesh(dataset.template.with_positions(pos), root / name)
        names.append(name)
    manifest = {
        "template": "template.obj",
        "samples": names,
        "splits": dataset.splits,
        "normalization": {"mean": dataset.mean.tolist(), "std": dataset.std.tolist()},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def load_dataset(root: str | Path) -> MeshSequenceDataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    template = load_mesh(root / manifest["template"])
    meshes = [load_mesh(root / name) for name in manifest["samples"]]
    for name, m in zip(manifest["samples"], meshes):
        if not np.array_equal(m.faces, template.faces):
            raise ValueError(f"{name}: topology differs from template")
    samples = np.stack([m.positions for m in meshes])
    norm = manifest.get("normalization")
    mean = std = None
    if norm is not None:
        mean, std = np.array(norm["mean"]), np.array(norm["std"])
    return MeshSequenceDataset(template, samples, manifest["splits"], mean, std)
