"""Edge matrices over the crop-plus-proposal node graph.

Three pieces: a learned semantic similarity matrix between node features, a
spatial bias matrix derived from node center geometry (two variants: a
distance-thresholded perceptron or a squared embedded distance), and the
row-normalized correlation adjacency that combines them.

All functions operate on batched inputs (leading candidate axis); thin
wrappers accept the single-graph 2-D forms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

EXP_CLAMP = 30.0
DENOM_GUARD = 1e-8

# module-level diagnostic: how many adjacency rows hit the denominator guard
guard_trips = 0


def reset_guard_trips() -> None:
    global guard_trips
    guard_trips = 0


@dataclass
class EdgeTensors:
    semantic: Tensor
    spatial: Tensor
    adjacency: Tensor
    variant: str


@dataclass
class SemanticParams:
    phi_w: Parameter
    phi_b: Parameter
    varphi_w: Parameter
    varphi_b: Parameter

    @classmethod
    def create(cls, d: int, proj_dim: int, seed: int, prefix: str, dtype=None):
        return cls(
            phi_w=ad.make_param(f"{prefix}.phi_w", (d, proj_dim), seed, dtype=dtype),
            phi_b=ad.make_param(f"{prefix}.phi_b", (proj_dim,), seed, fan_in=d,
                                dtype=dtype),
            varphi_w=ad.make_param(f"{prefix}.varphi_w", (d, proj_dim), seed,
                                   dtype=dtype),
            varphi_b=ad.make_param(f"{prefix}.varphi_b", (proj_dim,), seed,
                                   fan_in=d, dtype=dtype),
        )

    def parameters(self):
        return [self.phi_w, self.phi_b, self.varphi_w, self.varphi_b]


@dataclass
class DisDropParams:
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @classmethod
    def create(cls, hidden: int, seed: int, prefix: str = "disdrop", dtype=None):
        return cls(
            w1=ad.make_param(f"{prefix}.w1", (1, hidden), seed, dtype=dtype),
            b1=ad.make_param(f"{prefix}.b1", (hidden,), seed, fan_in=1, dtype=dtype),
            w2=ad.make_param(f"{prefix}.w2", (hidden, 1), seed, dtype=dtype),
            b2=ad.make_param(f"{prefix}.b2", (1,), seed, fan_in=hidden, dtype=dtype),
        )

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class DisEmbParams:
    m_w: Parameter
    m_b: Parameter
    n_w: Parameter
    n_b: Parameter

    @classmethod
    def create(cls, embed_dim: int, seed: int, prefix: str = "disemb", dtype=None):
        return cls(
            m_w=ad.make_param(f"{prefix}.m_w", (2, embed_dim), seed, dtype=dtype),
            m_b=ad.make_param(f"{prefix}.m_b", (embed_dim,), seed, fan_in=2,
                              dtype=dtype),
            n_w=ad.make_param(f"{prefix}.n_w", (2, embed_dim), seed, dtype=dtype),
            n_b=ad.make_param(f"{prefix}.n_b", (embed_dim,), seed, fan_in=2,
                              dtype=dtype),
        )

    def parameters(self):
        return [self.m_w, self.m_b, self.n_w, self.n_b]


def semantic_edges_batch(x: Tensor, params: SemanticParams) -> Tensor:
    """Pairwise projected similarity: phi(x_i) . varphi(x_j) / sqrt(proj_dim).

    ``x`` is (..., n, d); the result is (..., n, n) and not symmetric in
    general since the two projections are independent.
    """
    proj_dim = params.phi_w.shape[1]
    f = ad.linear(x, params.phi_w, params.phi_b)
    g = ad.linear(x, params.varphi_w, params.varphi_b)
    return ad.mul(ad.matmul(f, ad.transpose(g)), 1.0 / np.sqrt(proj_dim))


def semantic_edges(nodes, params: SemanticParams) -> Tensor:
    """Single-graph form: accepts a NodeSet or an (n, d) tensor."""
    x = nodes.features if hasattr(nodes, "features") else nodes
    return semantic_edges_batch(x, params)


def pairwise_distances(centers: np.ndarray) -> np.ndarray:
    """Euclidean distances between normalized centers, (..., n, n)."""
    diff = centers[..., :, None, :] - centers[..., None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def spatial_edges_disdrop_batch(centers: np.ndarray, eps: float,
                                params: DisDropParams) -> Tensor:
    """Perceptron of pairwise distance, zeroed beyond the eps threshold."""
    if eps <= 0:
        raise ad.UsageError(f"eps must be positive, got {eps}")
    dist = pairwise_distances(centers)
    keep = (dist <= eps).astype(np.float64)
    t = Tensor(dist[..., None])
    h = ad.relu(ad.linear(t, params.w1, params.b1))
    s = ad.linear(h, params.w2, params.b2)
    s = ad.reshape(s, dist.shape)
    return ad.mul(s, Tensor(keep))


def spatial_edges_disdrop(nodes, eps: float, params: DisDropParams) -> Tensor:
    centers = nodes.centers if hasattr(nodes, "centers") else np.asarray(nodes)
    return spatial_edges_disdrop_batch(centers, eps, params)


def spatial_edges_disemb_batch(centers: np.ndarray,
                               params: DisEmbParams) -> Tensor:
    """Squared distance between two learned embeddings of the node centers.

    M_p(i, j) = || (W_m p_i + b_m) - (W_n p_j + b_n) ||^2, computed via the
    expansion |a|^2 + |b|^2 - 2 a.b so only matmuls and broadcast adds appear.
    """
    c = Tensor(centers)
    a = ad.linear(c, params.m_w, params.m_b)      # (..., n, h)
    b = ad.linear(c, params.n_w, params.n_b)
    sa = ad.tsum(ad.mul(a, a), axis=-1, keepdims=True)            # (..., n, 1)
    sb = ad.tsum(ad.mul(b, b), axis=-1, keepdims=True)
    cross = ad.matmul(a, ad.transpose(b))                          # (..., n, n)
    sb_row = ad.transpose(sb)                                      # (..., 1, n)
    return ad.sub(ad.add(sa, sb_row), ad.mul(cross, 2.0))


def spatial_edges_disemb(nodes, params: DisEmbParams) -> Tensor:
    centers = nodes.centers if hasattr(nodes, "centers") else np.asarray(nodes)
    return spatial_edges_disemb_batch(centers, params)


def correlation_adjacency(m_a, m_p, mode: str = "literal") -> Tensor:
    """Row-normalized spatial-semantic mixing matrix.

    literal: A(i,j) = M_a(i,j) e^{M_p(i,j)} / sum_j M_a(i,j) e^{M_p(i,j)}, with
    the exponent clamped to +-30. Rows whose denominator magnitude falls below
    1e-8 fall back to the uniform row and bump the module guard counter.

    softmax: row-softmax of M_a + M_p, for ablation.
    """
    global guard_trips
    m_a = ad._coerce(m_a)
    m_p = ad._coerce(m_p)
    if m_a.shape != m_p.shape:
        raise ad.ShapeError(
            f"edge matrices disagree: {m_a.shape} vs {m_p.shape}")
    if m_a.shape[-1] != m_a.shape[-2]:
        raise ad.ShapeError(f"edge matrices must be square, got {m_a.shape}")
    if mode == "softmax":
        return ad.softmax(ad.add(m_a, m_p), axis=-1)
    if mode != "literal":
        raise ad.ConfigurationError(f"unknown adjacency mode {mode!r}")

    n = m_a.shape[-1]
    w = ad.mul(m_a, ad.exp(ad.clamp(m_p, -EXP_CLAMP, EXP_CLAMP)))
    s = ad.tsum(w, axis=-1, keepdims=True)
    bad = (np.abs(s.data) < DENOM_GUARD).astype(np.float64)
    trips = int(bad.sum())
    if trips:
        guard_trips += trips
    safe = ad.add(s, Tensor(bad))                 # shift bad denominators to ~1
    rows = ad.div(w, safe)
    if trips:
        good = Tensor(1.0 - bad)
        uniform = Tensor(bad / n)
        rows = ad.add(ad.mul(rows, good), ad.broadcast_to(uniform, rows.shape))
    return rows


def build_edges(nodes, semantic_params: SemanticParams, spatial: Tensor,
                variant: str, adjacency_mode: str = "literal") -> EdgeTensors:
    """Bundle the three edge tensors for one node set."""
    m_a = semantic_edges(nodes, semantic_params)
    adj = correlation_adjacency(m_a, spatial, mode=adjacency_mode)
    return EdgeTensors(semantic=m_a, spatial=spatial, adjacency=adj,
                       variant=variant)
