"""Mesh autoencoder assembly, parameter accounting and latent arithmetic."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autograd as ad
from .aggregation import (Aggregator, AttentionAggregator, FixedAggregator, FullAggregator,
                          MappingMatrix, VariantAggregator, baseline_average, export_fixed,
                          init_params)
from .autograd import ShapeError, Tensor
from .conv import ChebConv, SpiralConv, default_spiral_length, glorot, spiral_sequences
from .decimation import MeshHierarchy
from .mesh import build_adjacency, normalized_laplacian

AGGREGATION_KINDS = ("qem", "attention", "average", "full", "variant")
CONV_KINDS = ("spectral", "spiral")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    conv_kind: str = "spectral"
    cheb_order: int = 6
    latent_dim: int = 8
    enc_filters: tuple[int, ...] = (3, 16, 16, 16, 32)
    dec_filters: tuple[int, ...] = (32, 32, 16, 16, 16, 3)
    down_kind: str = "qem"
    up_kind: str = "qem"
    k_down: int = 2
    k_up: int = 32
    c: int = 21
    w_a_init: float = 0.2
    init_scheme: str = "precomputed"
    fusion: bool = True
    masking: bool = True
    pin_w_a: bool = False
    seed: int = 0
    spiral_lengths: tuple[int, ...] | None = None  # coarsest first; derived from meshes if None

    @classmethod
    def simple(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def wider(cls, **kw) -> "ModelConfig":
        return cls(enc_filters=(3, 16, 32, 64, 128), dec_filters=(128, 64, 32, 32, 16, 3), **kw)

    @property
    def depth(self) -> int:
        return len(self.enc_filters) - 1

    def validate(self, depth: int | None = None) -> None:
        if self.conv_kind not in CONV_KINDS:
            raise ConfigError(f"conv_kind must be one of {CONV_KINDS}, got {self.conv_kind!r}")
        for side in (self.down_kind, self.up_kind):
            if side not in AGGREGATION_KINDS:
                raise ConfigError(f"aggregation kind must be one of {AGGREGATION_KINDS}, got {side!r}")
        if len(self.dec_filters) != len(self.enc_filters) + 1:
            raise ConfigError("decoder filter list must be one longer than the encoder's")
        if self.enc_filters[0] != 3 or self.dec_filters[-1] != 3:
            raise ConfigError("first encoder and last decoder widths must be 3")
        if self.init_scheme not in ("precomputed", "uniform", "normal"):
            raise ConfigError(f"unknown init_scheme {self.init_scheme!r}")
        if "attention" in (self.down_kind, self.up_kind):
            if self.c < (3 if self.init_scheme == "precomputed" else 1):
                raise ConfigError("position-seeded keys/queries need c >= 3")
            if self.k_down < 1 or self.k_up < 1:
                raise ConfigError("k_down and k_up must be >= 1")
        if self.latent_dim < 1 or self.cheb_order < 1:
            raise ConfigError("latent_dim and cheb_order must be positive")
        if depth is not None and depth != self.depth:
            raise ConfigError(f"config has {self.depth} levels, hierarchy has {depth}")
        if self.spiral_lengths is not None and len(self.spiral_lengths) != self.depth + 1:
            raise ConfigError("spiral_lengths needs one entry per hierarchy level")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        for key in ("enc_filters", "dec_filters", "spiral_lengths"):
            if raw.get(key) is not None:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_json(Path(path).read_text())


class Autoencoder:
    """Encoder ``[conv -> ReLU -> down] x L -> FC``; decoder
    ``FC -> [up -> conv -> ReLU] x L -> conv (no bias)``.

    Level indices follow the hierarchy: 0 is coarsest, ``L`` is the template.
    Features are carried as ``(n_vertices, batch, dim)``.
    """

    def __init__(self, config: ModelConfig, hierarchy: MeshHierarchy):
        config.validate(hierarchy.depth)
        self.config = config
        self.hierarchy = hierarchy
        L = hierarchy.depth
        counts = hierarchy.counts
        rng = np.random.default_rng([config.seed, 0])

        if config.conv_kind == "spectral":
            self.laplacians = [normalized_laplacian(build_adjacency(m)) for m in hierarchy.meshes]
            self.spirals = None
            make = lambda d_in, d_out, level, bias=True: ChebConv(  # noqa: E731
                d_in, d_out, config.cheb_order, bias, rng)
        else:
            lengths = config.spiral_lengths or tuple(default_spiral_length(m) for m in hierarchy.meshes)
            self.spirals = [spiral_sequences(m, n) for m, n in zip(hierarchy.meshes, lengths)]
            self.laplacians = None
            make = lambda d_in, d_out, level, bias=True: SpiralConv(  # noqa: E731
                d_in, d_out, lengths[level], bias, rng)

        enc, dec = config.enc_filters, config.dec_filters
        # encoder conv i acts on level L - i; decoder conv i on level i + 1
        self.enc_convs = [make(enc[i], enc[i + 1], L - i) for i in range(L)]
        fc_in = counts[0] * enc[-1]
        self.enc_fc_w = Tensor(glorot(rng, (fc_in, config.latent_dim), fc_in, config.latent_dim),
                               requires_grad=True)
        self.enc_fc_b = Tensor(np.zeros(config.latent_dim), requires_grad=True)
        fc_out = counts[0] * dec[0]
        self.dec_fc_w = Tensor(glorot(rng, (config.latent_dim, fc_out), config.latent_dim, fc_out),
                               requires_grad=True)
        self.dec_fc_b = Tensor(np.zeros(fc_out), requires_grad=True)
        self.dec_convs = [make(dec[i], dec[i + 1], i + 1) for i in range(L)]
        self.out_conv = make(dec[L], dec[L + 1], L, bias=False)

        # down[i] maps level L - i -> L - i - 1; up[i] maps level i -> i + 1
        self.down = [self._aggregator(config.down_kind, hierarchy.down[L - 1 - i], L - i, L - i - 1,
                                      config.k_down, idx=i) for i in range(L)]
        self.up = [self._aggregator(config.up_kind, hierarchy.up[i], i, i + 1,
                                    config.k_up, idx=L + i) for i in range(L)]

    def _aggregator(self, kind: str, m_p, prev: int, nxt: int, k: int, idx: int) -> Aggregator:
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, 1, idx])
        if kind == "qem":
            return FixedAggregator(MappingMatrix(m_p, "qem"))
        if kind == "average":
            return FixedAggregator(baseline_average(m_p))
        if kind == "full":
            return FullAggregator(m_p.shape[0], m_p.shape[1], rng)
        if kind == "variant":
            return VariantAggregator(m_p)
        pos = self.hierarchy.meshes
        keys, queries, w_a = init_params(pos[prev].positions, pos[nxt].positions, cfg.c,
                                         scheme=cfg.init_scheme, w_a=cfg.w_a_init, rng=rng)
        return AttentionAggregator(m_p, keys, queries, w_a, k, masking=cfg.masking,
                                   fusion=cfg.fusion, pin_w_a=cfg.pin_w_a)

    # ------------------------------------------------------------ parameters

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, conv in enumerate(self.enc_convs):
            out.update({f"enc.conv{i}.{k}": v for k, v in conv.params().items()})
        out["enc.fc.weight"] = self.enc_fc_w
        out["enc.fc.bias"] = self.enc_fc_b
        out["dec.fc.weight"] = self.dec_fc_w
        out["dec.fc.bias"] = self.dec_fc_b
        for i, conv in enumerate(self.dec_convs):
            out.update({f"dec.conv{i}.{k}": v for k, v in conv.params().items()})
        out.update({f"dec.out.{k}": v for k, v in self.out_conv.params().items()})
        for side, aggs in (("down", self.down), ("up", self.up)):
            for i, agg in enumerate(aggs):
                out.update({f"{side}{i}.{k}": v for k, v in agg.params().items()})
        return out

    def trainable_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_params().items() if v.requires_grad}

    def aggregators(self) -> list[Aggregator]:
        return self.down + self.up

    def count_parameters(self, inference_only: bool = False) -> int:
        """Stored parameter entries; ``inference_only`` drops attention keys,
        queries and fusion weights, which detach into fixed matrices."""
        total = 0
        for name, t in self.named_params().items():
            if inference_only and name.rsplit(".", 1)[-1] in ("keys", "queries", "w_a"):
                continue
            total += t.size
        return total

    def post_step(self) -> None:
        for agg in self.aggregators():
            agg.post_step()

    def exported(self) -> "Autoencoder":
        """Copy with every attention aggregator frozen into a constant matrix."""
        out = copy.deepcopy(self)
        for aggs in (out.down, out.up):
            for i, agg in enumerate(aggs):
                if isinstance(agg, AttentionAggregator):
                    aggs[i] = FixedAggregator(export_fixed(agg))
        return out

    # ------------------------------------------------------------ forward

    def _conv(self, layer, x: Tensor, level: int) -> Tensor:
        if self.laplacians is not None:
            return layer(x, self.laplacians[level])
        return layer(x, self.spirals[level])

    def encode_tensor(self, x: Tensor) -> Tensor:
        """``(n_L, B, 3)`` features to ``(B, n_z)`` latents."""
        L = self.hierarchy.depth
        n = self.hierarchy.counts[L]
        if x.data.ndim != 3 or x.shape[0] != n or x.shape[2] != 3:
            raise ShapeError(f"encoder expects ({n}, batch, 3) features, got {x.shape}")
        for i in range(L):
            x = ad.relu(self._conv(self.enc_convs[i], x, L - i))
            x = self.down[i](x)
        n0, batch, d = x.shape
        flat = ad.reshape(ad.transpose(x, (1, 0, 2)), (batch, n0 * d))
        return ad.add_bias(ad.linear(flat, self.enc_fc_w), self.enc_fc_b)

    def decode_tensor(self, z: Tensor) -> Tensor:
        """``(B, n_z)`` latents to ``(n_L, B, 3)`` features."""
        L = self.hierarchy.depth
        if z.data.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ShapeError(f"decoder expects (batch, {self.config.latent_dim}) latents, got {z.shape}")
        batch = z.shape[0]
        h = ad.add_bias(ad.linear(z, self.dec_fc_w), self.dec_fc_b)
        x = ad.transpose(ad.reshape(h, (batch, self.hierarchy.counts[0], self.config.dec_filters[0])),
                         (1, 0, 2))
        for i in range(L):
            x = self.up[i](x)
            x = ad.relu(self._conv(self.dec_convs[i], x, i + 1))
        return self._conv(self.out_conv, x, L)

    def forward_tensor(self, x: Tensor) -> Tensor:
        return self.decode_tensor(self.encode_tensor(x))

    # numpy conveniences on (B, n, 3) arrays

    def encode(self, samples: np.ndarray) -> np.ndarray:
        x = _to_vertex_major(samples)
        return self.encode_tensor(Tensor(x)).data.copy()

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        out = self.decode_tensor(Tensor(np.atleast_2d(z))).data.transpose(1, 0, 2).copy()
        return out[0] if single else out

    def reconstruct(self, samples: np.ndarray) -> np.ndarray:
        samples = np.asarray(samples, dtype=np.float64)
        out = self.forward_tensor(Tensor(_to_vertex_major(samples))).data.transpose(1, 0, 2).copy()
        return out[0] if samples.ndim == 2 else out


def _to_vertex_major(samples) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 2:
        samples = samples[None]
    if samples.ndim != 3:
        raise ShapeError(f"expected (batch, n, 3) samples, got shape {samples.shape}")
    return np.ascontiguousarray(samples.transpose(1, 0, 2))


def build(config: ModelConfig, hierarchy: MeshHierarchy) -> Autoencoder:
    return Autoencoder(config, hierarchy)


def attention_parameter_count(n_prev: int, n_next: int, c: int) -> int:
    return c * (n_prev + n_next) + 1


def closed_form_parameter_count(config: ModelConfig, counts: list[int],
                                spiral_lengths: list[int] | None = None,
                                inference_only: bool = False) -> int:
    """Parameter total from layer widths and level sizes alone (coarsest first)."""
    if "variant" in (config.down_kind, config.up_kind):
        raise ConfigError("variant weights follow the mapping support, not level sizes")
    L = len(counts) - 1
    enc, dec = config.enc_filters, config.dec_filters

    def conv(d_in, d_out, level, bias=True):
        taps = config.cheb_order if config.conv_kind == "spectral" else spiral_lengths[level]
        return taps * d_in * d_out + (d_out if bias else 0)

    total = sum(conv(enc[i], enc[i + 1], L - i) for i in range(L))
    total += counts[0] * enc[-1] * config.latent_dim + config.latent_dim
    total += config.latent_dim * counts[0] * dec[0] + counts[0] * dec[0]
    total += sum(conv(dec[i], dec[i + 1], i + 1) for i in range(L))
    total += conv(dec[L], dec[L + 1], L, bias=False)
    pairs = [(counts[lv], counts[lv - 1]) for lv in range(L, 0, -1)]
    sides = [(config.down_kind, pairs), (config.up_kind, [(b, a) for a, b in pairs])]
    for kind, side_pairs in sides:
        for n_prev, n_next in side_pairs:
            if kind == "full":
                total += n_prev * n_next
            elif kind == "attention" and not inference_only:
                total += attention_parameter_count(n_prev, n_next, config.c) - (0 if config.fusion else 1)
    return total


# ---------------------------------------------------------------- latent arithmetic


def latent_interpolate(z1, z2, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"interpolation needs alpha in [0, 1], got {alpha}")
    return _blend(z1, z2, alpha)


def latent_extrapolate(z1, z2, alpha: float) -> np.ndarray:
    if 0.0 < alpha < 1.0:
        raise ValueError(f"extrapolation needs alpha outside (0, 1), got {alpha}")
    return _blend(z1, z2, alpha)


def _blend(z1, z2, alpha: float) -> np.ndarray:
    z1, z2 = np.asarray(z1, dtype=np.float64), np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise ShapeError(f"latent shapes differ: {z1.shape} vs {z2.shape}")
    return alpha * z1 + (1.0 - alpha) * z2


def deformation_transfer(model: Autoencoder, s0, s1, t0, mode: str = "vertex") -> np.ndarray:
    """Carry the deformation ``s0 -> s1`` over to ``t0``.

    ``vertex`` mode adds ``s1 - s0`` to ``t0`` and reconstructs the result;
    ``latent`` mode decodes ``z(t0) + z(s1) - z(s0)``.
    """
    s0, s1, t0 = (np.asarray(a, dtype=np.float64) for a in (s0, s1, t0))
    if not s0.shape == s1.shape == t0.shape:
        raise ShapeError(f"shapes differ: {s0.shape}, {s1.shape}, {t0.shape}")
    if mode == "vertex":
        return model.reconstruct(t0 + (s1 - s0))
    if mode == "latent":
        z = model.encode(np.stack([s0, s1, t0]))
        return model.decode(z[2] + (z[1] - z[0]))
    raise ValueError(f"mode must be 'vertex' or 'latent', got {mode!r}")
