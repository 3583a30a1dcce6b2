"""Training loop, reconstruction metrics and experiment drivers."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ad
from .checkpoint import _atomic_write, save_checkpoint
from .data import MeshSequenceDataset
from .decimation import MeshHierarchy
from .model import Autoencoder, ConfigError, ModelConfig, build
from .optim import AdamState, adam_step, lr_at_epoch

log = logging.getLogger(__name__)

DEFAULT_LR = {"spectral": 8e-3, "spiral": 1e-3}


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


@dataclass
class TrainConfig:
    epochs: int = 150
    lr: float | None = None  # None picks the conv-kind default
    lr_decay: float = 0.99
    batch_size: int = 16
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 writes only the final checkpoint

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr is not None and not self.lr > 0:
            raise ConfigError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def learning_rate(self, conv_kind: str) -> float:
        return self.lr if self.lr is not None else DEFAULT_LR[conv_kind]


@dataclass
class TrainResult:
    history: list[float]
    initial_loss: float
    final_loss: float


def dataset_loss(model: Autoencoder, x: np.ndarray, batch_size: int = 64) -> float:
    """Mean L1 reconstruction loss over normalized samples ``(S, n, 3)``."""
    total = 0.0
    for start in range(0, len(x), batch_size):
        chunk = x[start:start + batch_size]
        total += np.abs(model.reconstruct(chunk) - chunk).sum()
    return float(total / x.size)


def train(model: Autoencoder, dataset: MeshSequenceDataset, cfg: TrainConfig,
          checkpoint_dir: str | Path | None = None,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    x_train = dataset.normalize(dataset.split("train"))
    if len(x_train) == 0:
        raise ValueError("empty training split")
    if x_train.shape[1] != model.hierarchy.counts[-1]:
        raise ValueError("dataset topology does not match the model hierarchy")
    params = model.trainable_params()
    names = list(params)
    tensors = [params[k] for k in names]
    state = AdamState()
    rng = np.random.default_rng([cfg.seed, 2])
    lr0 = cfg.learning_rate(model.config.conv_kind)

    initial = dataset_loss(model, x_train)
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(lr0, cfg.lr_decay, epoch)
        order = rng.permutation(len(x_train))
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = x_train[order[start:start + cfg.batch_size]].transpose(1, 0, 2)
            target = ad.Tensor(batch)
            with ad.Tape() as tape:
                loss = ad.l1_loss(model.forward_tensor(target), target)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, b, value)
            grads = ad.backward(tape, loss, tensors)
            adam_step({k: t.data for k, t in zip(names, tensors)}, dict(zip(names, grads)), state, lr)
            model.post_step()
            losses.append(value)
        history.append(float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
        if checkpoint_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, Path(checkpoint_dir) / f"epoch_{epoch + 1:04d}")
    final = dataset_loss(model, x_train)
    if checkpoint_dir is not None:
        save_checkpoint(model, checkpoint_dir, {"history": history, "initial_loss": initial,
                                                "final_loss": final, "train": asdict(cfg)})
    return TrainResult(history, initial, final)


# ---------------------------------------------------------------- metrics


@dataclass
class Metrics:
    mean: float
    std: float
    median: float
    thresholds: np.ndarray
    cumulative: np.ndarray
    history: list[float] = field(default_factory=list)

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mean", "std", "median"])
        w.writerow([repr(self.mean), repr(self.std), repr(self.median)])
        return buf.getvalue()

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fraction"])
        for t, f in zip(self.thresholds, self.cumulative):
            w.writerow([repr(float(t)), repr(float(f))])
        return buf.getvalue()

    def write(self, report: str | Path) -> None:
        """``report`` is the summary CSV; the curve goes next to it."""
        report = Path(report)
        report.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(report, self.summary_csv().encode())
        _atomic_write(report.with_name(report.stem + "_curve.csv"), self.curve_csv().encode())


def vertex_errors(model, dataset: MeshSequenceDataset, split: str = "test", batch_size: int = 64,
                  scale: float = 1.0) -> np.ndarray:
    """Per-sample, per-vertex Euclidean error ``(S, n)`` in model units times ``scale``."""
    truth = dataset.split(split)
    if len(truth) == 0:
        raise ValueError(f"split {split!r} is empty")
    out = []
    for start in range(0, len(truth), batch_size):
        chunk = truth[start:start + batch_size]
        recon = dataset.denormalize(model.reconstruct(dataset.normalize(chunk)))
        out.append(np.linalg.norm(recon - chunk, axis=-1))
    return np.concatenate(out) * scale


def evaluate(model, dataset: MeshSequenceDataset, split: str = "test", scale: float = 1.0,
             n_thresholds: int = 256, max_threshold: float | None = None) -> Metrics:
    """``model`` only needs a ``reconstruct`` method on normalized ``(B, n, 3)`` arrays."""
    err = vertex_errors(model, dataset, split, scale=scale).ravel()
    top = float(err.max()) if max_threshold is None else max_threshold
    thresholds = np.linspace(0.0, top, n_thresholds)
    sorted_err = np.sort(err)
    cumulative = np.searchsorted(sorted_err, thresholds, side="right") / err.size
    return Metrics(float(err.mean()), float(err.std()), float(np.median(err)), thresholds, cumulative)


# ---------------------------------------------------------------- experiments

COMPARE_KINDS = ("full", "average", "qem", "variant", "attention", "attention-nofuse")

SWEEP_DEFAULTS = {
    "c": [3, 9, 21, 33],
    "k_down": [1, 2, 4, 8],
    "k_up": [4, 8, 16, 32],
    "w_a_init": [0.0, 0.2, 0.5, 1.0],
    "init_scheme": ["normal", "uniform", "precomputed"],
}


def _kind_config(base: ModelConfig, kind: str) -> ModelConfig:
    if kind == "attention-nofuse":
        return replace(base, down_kind="attention", up_kind="attention", fusion=False)
    if kind not in COMPARE_KINDS:
        raise ConfigError(f"unknown aggregation kind {kind!r}")
    return replace(base, down_kind=kind, up_kind=kind)


def _write_rows(rows: list[dict], path: str | Path | None) -> None:
    if path is None or not rows:
        return
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(Path(path), buf.getvalue().encode())


def run_one(dataset: MeshSequenceDataset, hierarchy: MeshHierarchy, model_cfg: ModelConfig,
            train_cfg: TrainConfig) -> dict:
    model = build(model_cfg, hierarchy)
    result = train(model, dataset, train_cfg)
    metrics = evaluate(model, dataset, "test")
    return {
        "final_train_loss": repr(result.final_loss),
        "test_mean": repr(metrics.mean),
        "test_median": repr(metrics.median),
        "inference_params": model.count_parameters(inference_only=True),
        "training_params": model.count_parameters(),
    }


def compare_aggregators(dataset: MeshSequenceDataset, hierarchy: MeshHierarchy,
                        model_cfg: ModelConfig, train_cfg: TrainConfig,
                        kinds=COMPARE_KINDS, seeds=(0,), out_csv: str | Path | None = None) -> list[dict]:
    """Train each aggregation kind under the same budget and seeds."""
    rows = []
    for seed in seeds:
        for kind in kinds:
            cfg = replace(_kind_config(model_cfg, kind), seed=seed)
            row = {"kind": kind, "seed": seed}
            row.update(run_one(dataset, hierarchy, cfg, replace(train_cfg, seed=seed)))
            log.info("compare %s seed=%d test_mean=%s", kind, seed, row["test_mean"])
            rows.append(row)
    _write_rows(rows, out_csv)
    return rows


def ablation_sweeps(dataset: MeshSequenceDataset, hierarchy: MeshHierarchy, parameter: str,
                    model_cfg: ModelConfig, train_cfg: TrainConfig, values=None,
                    out_csv: str | Path | None = None) -> list[dict]:
    """Attention-model sweep over one parameter, all else fixed."""
    if parameter not in SWEEP_DEFAULTS:
        raise ConfigError(f"unknown sweep parameter {parameter!r}; choose from {sorted(SWEEP_DEFAULTS)}")
    values = SWEEP_DEFAULTS[parameter] if values is None else list(values)
    base = replace(model_cfg, down_kind="attention", up_kind="attention")
    rows = []
    for v in values:
        row = {"parameter": parameter, "value": v}
        row.update(run_one(dataset, hierarchy, replace(base, **{parameter: v}), train_cfg))
        rows.append(row)
    _write_rows(rows, out_csv)
    return rows


def load_experiment(path: str | Path) -> tuple[ModelConfig, TrainConfig]:
    """JSON with optional ``model`` and ``train`` objects."""
    raw = json.loads(Path(path).read_text())
    model_cfg = ModelConfig.from_json(json.dumps(raw.get("model", {})))
    return model_cfg, TrainConfig(**raw.get("train", {}))
