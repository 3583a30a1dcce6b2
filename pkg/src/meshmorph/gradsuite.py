"""Finite-difference gradient checks over every differentiable op and a
small end-to-end autoencoder."""
from __future__ import annotations

from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import aggregation as agg
from . import autograd as ad
from .conv import ChebConv, SpiralConv, default_spiral_length, spiral_sequences
from .decimation import MeshHierarchy, build_hierarchy
from .gradcheck import GradCheckReport, check_gradients
from .mesh import build_adjacency, icosahedron, normalized_laplacian
from .model import Autoencoder, ModelConfig

# a value is "near a kink" if it sits within this distance of a switching point
KINK_MARGIN = 1e-4


def _away_from_zero(x: np.ndarray, margin: float = 0.1) -> np.ndarray:
    return np.where(np.abs(x) < margin, np.sign(x) * margin + (x == 0) * margin, x)


def _weighted_sum(rng: np.random.Generator, shape) -> Callable[[ad.Tensor], ad.Tensor]:
    """Scalarize an output with fixed random weights so every entry matters."""
    w = ad.Tensor(rng.standard_normal(shape))
    return lambda y: ad.sum(ad.mul(y, w))


def op_cases(seed: int = 0) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    n, b, d, e = 5, 2, 3, 4
    s_mat = sp.random(4, n, density=0.5, random_state=seed, format="csr") + sp.eye(4, n, format="csr")
    idx = np.array([[0, 2, -1], [4, 4, 1], [3, -1, -1], [1, 0, 2], [2, 3, 4]])
    rows, cols = np.array([0, 1, 2, 3, 0]), np.array([1, 0, 3, 2, 4])

    def case(out_shape, body):
        scalarize = _weighted_sum(rng, out_shape)
        return lambda ps: scalarize(body(*ps))

    return {
        "matmul": (case((4, b, d), lambda a, x: ad.matmul(a, x)), [r(4, n), r(n, b, d)]),
        "spmm": (case((4, b, d), lambda x: ad.spmm(s_mat, x)), [r(n, b, d)]),
        "linear": (case((n, b, e), lambda x, w: ad.linear(x, w)), [r(n, b, d), r(d, e)]),
        "add_bias": (case((n, b, d), lambda x, c: ad.add_bias(x, c)), [r(n, b, d), r(d)]),
        "add": (case((n, d), ad.add), [r(n, d), r(n, d)]),
        "sub": (case((n, d), ad.sub), [r(n, d), r(n, d)]),
        "mul": (case((n, d), ad.mul), [r(n, d), r(n, d)]),
        "scale": (case((n, d), lambda x: ad.scale(x, -1.7)), [r(n, d)]),
        "scale_tensor": (case((n, d), lambda x, a: ad.scale(x, a)), [r(n, d), r(1)]),
        "add_scalar": (case((n, d), lambda x: ad.add_scalar(x, 0.3)), [r(n, d)]),
        "relu": (case((n, d), ad.relu), [_away_from_zero(r(n, d))]),
        "clamp_min": (case((n, d), lambda x: ad.clamp_min(x, 0.05)), [0.05 + _away_from_zero(r(n, d))]),
        "div_rows": (case((n, b, d), ad.div_rows), [r(n, b, d), 1.0 + rng.uniform(0.5, 2.0, n)]),
        "gather_rows": (case((n, 3, d), lambda x: ad.gather_rows(x, idx)), [r(n, d)]),
        "reshape": (case((b, n * d), lambda x: ad.reshape(x, (b, n * d))), [r(b, n, d)]),
        "transpose": (case((b, d, n), lambda x: ad.transpose(x, (1, 2, 0))), [r(n, b, d)]),
        "concat": (case((n, b, 2 * d), lambda x, y: ad.concat([x, y], -1)), [r(n, b, d), r(n, b, d)]),
        "scatter_dense": (case((4, n), lambda v: ad.scatter_dense(v, rows, cols, (4, n))), [r(5)]),
        "row_norm": (case((n, b), ad.row_norm), [r(n, b, d)]),
        "sum_all": (lambda ps: ad.sum(ps[0]), [r(n, d)]),
        "sum_axis": (case((n,), lambda x: ad.sum(x, axis=1)), [r(n, d)]),
        "mean": (lambda ps: ad.mean(ps[0]), [r(n, d)]),
        "l1_loss": (lambda ps: ad.l1_loss(ps[0], ps[1]), [r(n, d), r(n, d) + 3.0]),
    }


def _topk_gap(scores: np.ndarray, k: int) -> float:
    if k >= scores.shape[1]:
        return np.inf
    srt = -np.sort(-scores, axis=1)
    return float(np.min(srt[:, k - 1] - srt[:, k]))


def aggregation_cases(seed: int = 0) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    rng = np.random.default_rng(seed)
    n_next, n_prev, c, k = 4, 7, 5, 2
    while True:
        q, kk = rng.standard_normal((n_next, c)), rng.standard_normal((n_prev, c))
        scores = agg.compatibility_scores(ad.Tensor(q), ad.Tensor(kk)).data
        mask = agg.topk_mask(scores, k)
        masked_sums = (scores * mask).sum(axis=1)
        if _topk_gap(scores, k) > KINK_MARGIN and masked_sums.min() > 0.1:
            break
    m_p = sp.csr_matrix(np.eye(n_next, n_prev))
    x = rng.standard_normal((n_prev, 2, 3))
    w_out = ad.Tensor(rng.standard_normal((n_next, 2, 3)))
    w_s = ad.Tensor(rng.standard_normal((n_next, n_prev)))

    def attention(ps):
        a = agg.AttentionAggregator(m_p, kk, q, 0.2, k)
        a.keys, a.queries, a.w_a = ps[0], ps[1], ps[2]
        return ad.sum(ad.mul(a(ad.Tensor(x)), w_out))

    return {
        "compatibility_scores": (lambda ps: ad.sum(ad.mul(agg.compatibility_scores(ps[0], ps[1]), w_s)),
                                 [q, kk]),
        "normalize_masked": (lambda ps: ad.sum(ad.mul(agg.normalize_masked(ps[0], mask)[0], w_s)),
                             [np.abs(scores) + 0.1]),
        "attention_aggregator": (attention, [kk, q, np.array([0.2])]),
    }


def tiny_hierarchy() -> MeshHierarchy:
    """Icosahedron (12) -> 6 -> 4 vertices."""
    return build_hierarchy(icosahedron(), targets=[6, 4])


def conv_cases(seed: int = 0) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    rng = np.random.default_rng(seed)
    mesh = icosahedron()
    lap = normalized_laplacian(build_adjacency(mesh))
    spirals = spiral_sequences(mesh, default_spiral_length(mesh))
    cheb = ChebConv(3, 4, order=4, rng=rng)
    spiral = SpiralConv(3, 4, spirals.shape[1], rng=rng)
    x = rng.standard_normal((12, 2, 3))
    w = _weighted_sum(rng, (12, 2, 4))

    def run(layer, ctx):
        def fn(ps):
            layer.weight, layer.bias = ps[1], ps[2]
            return w(layer(ps[0], ctx))
        return fn

    return {
        "cheb_conv": (run(cheb, lap), [x, cheb.weight.data.copy(), rng.standard_normal(4)]),
        "spiral_conv": (run(spiral, spirals), [x, spiral.weight.data.copy(), rng.standard_normal(4)]),
    }


def tiny_model(conv_kind: str, seed: int = 0, hierarchy: MeshHierarchy | None = None) -> Autoencoder:
    cfg = ModelConfig(conv_kind=conv_kind, cheb_order=3, latent_dim=4, enc_filters=(3, 4, 4),
                      dec_filters=(4, 4, 4, 3), down_kind="attention", up_kind="attention",
                      k_down=2, k_up=2, c=4, seed=seed)
    return Autoencoder(cfg, hierarchy or tiny_hierarchy())


def _model_is_smooth(model: Autoencoder, x: ad.Tensor) -> bool:
    """True when no top-k choice and no ReLU input sits near its switching point."""
    for a in model.aggregators():
        s = agg.compatibility_scores(a.queries, a.keys).data
        if _topk_gap(s, a.k) <= KINK_MARGIN:
            return False
    pre = []
    orig = ad.relu

    def spy(t):
        pre.append(np.abs(t.data).min())
        return orig(t)

    ad.relu = spy
    try:
        model.forward_tensor(x)
    finally:
        ad.relu = orig
    return min(pre) > KINK_MARGIN


def model_case(conv_kind: str, seed: int = 0):
    """Full autoencoder L1 loss; reseeds until inputs are clear of kinks."""
    h = tiny_hierarchy()
    for attempt in range(100):
        model = tiny_model(conv_kind, seed * 1000 + attempt, h)
        rng = np.random.default_rng([seed, attempt])
        x = ad.Tensor(rng.standard_normal((12, 2, 3)))
        if _model_is_smooth(model, x):
            break
    else:
        raise RuntimeError("could not find a kink-free model instance")
    target = ad.Tensor(x.data + 5.0)  # keeps the L1 residual sign fixed
    params = list(model.trainable_params().values())
    return (lambda ps: ad.l1_loss(model.forward_tensor(x), target)), params


def run_suite(seed: int = 0, tol: float = 1e-4, eps: float = 1e-6) -> list[tuple[str, GradCheckReport]]:
    cases = {**op_cases(seed), **aggregation_cases(seed), **conv_cases(seed)}
    for kind in ("spectral", "spiral"):
        cases[f"autoencoder_{kind}"] = model_case(kind, seed)
    return [(name, check_gradients(fn, point, eps=eps, tol=tol)) for name, (fn, point) in cases.items()]
