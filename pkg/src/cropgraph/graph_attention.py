"""The adaptive attention graph block and its scoring head.

Per layer: a feature aggregation gate mixes node features through the
correlation adjacency, the gated features become attention queries while the
layer's input nodes supply keys and values, the semantic and spatial edge
matrices are added to every head's attention logits, and a pre-norm FFN
residual closes the layer. Semantic edges are recomputed from the current
node features at each layer; spatial edges come from fixed box centers and
are computed once outside the block.

Core functions take batched (B, n, d) inputs; the exported single-graph forms
wrap them for (n, d).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import edges as edges_mod
from .autodiff import Parameter, Tensor
from .edges import EdgeTensors, SemanticParams


@dataclass
class AagConfig:
    d: int
    layers: int = 2
    heads: int = 4
    ffn_hidden: int | None = None
    proj_dim: int | None = None
    use_fag: bool = True
    use_semantic: bool = True
    use_spatial: bool = True
    adjacency: str = "literal"

    def __post_init__(self):
        if self.ffn_hidden is None:
            self.ffn_hidden = 4 * self.d
        if self.proj_dim is None:
            self.proj_dim = self.d
        if self.layers < 1:
            raise ad.ConfigurationError(f"layers must be >= 1, got {self.layers}")
        if self.d % self.heads != 0:
            raise ad.ConfigurationError(
                f"heads ({self.heads}) must divide d ({self.d})")
        if self.proj_dim % self.heads != 0:
            raise ad.ConfigurationError(
                f"heads ({self.heads}) must divide proj_dim ({self.proj_dim})")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


@dataclass
class AagLayerParams:
    semantic: SemanticParams
    gate_w: Parameter
    q_w: Parameter
    q_b: Parameter
    k_w: Parameter
    k_b: Parameter
    v_w: Parameter
    v_b: Parameter
    o_w: Parameter
    o_b: Parameter
    ln1_g: Parameter
    ln1_b: Parameter
    ln2_g: Parameter
    ln2_b: Parameter
    ffn1_w: Parameter
    ffn1_b: Parameter
    ffn2_w: Parameter
    ffn2_b: Parameter

    @classmethod
    def create(cls, cfg: AagConfig, seed: int, prefix: str, dtype=None):
        d, h = cfg.d, cfg.ffn_hidden
        def mk(name, shape, fan_in=None):
            return ad.make_param(f"{prefix}.{name}", shape, seed,
                                 fan_in=fan_in, dtype=dtype)
        return cls(
            semantic=SemanticParams.create(d, cfg.proj_dim, seed,
                                           prefix=f"{prefix}.sem", dtype=dtype),
            gate_w=mk("gate_w", (d, d)),
            q_w=mk("q_w", (d, d)), q_b=mk("q_b", (d,), d),
            k_w=mk("k_w", (d, d)), k_b=mk("k_b", (d,), d),
            v_w=mk("v_w", (d, d)), v_b=mk("v_b", (d,), d),
            o_w=mk("o_w", (d, d)), o_b=mk("o_b", (d,), d),
            ln1_g=ad.ones_param(f"{prefix}.ln1_g", (d,), dtype=dtype),
            ln1_b=ad.zeros_param(f"{prefix}.ln1_b", (d,), dtype=dtype),
            ln2_g=ad.ones_param(f"{prefix}.ln2_g", (d,), dtype=dtype),
            ln2_b=ad.zeros_param(f"{prefix}.ln2_b", (d,), dtype=dtype),
            ffn1_w=mk("ffn1_w", (d, h)), ffn1_b=mk("ffn1_b", (h,), d),
            ffn2_w=mk("ffn2_w", (h, d)), ffn2_b=mk("ffn2_b", (d,), h),
        )

    def parameters(self):
        out = self.semantic.parameters()
        out += [self.gate_w, self.q_w, self.q_b, self.k_w, self.k_b, self.v_w,
                self.v_b, self.o_w, self.o_b, self.ln1_g, self.ln1_b,
                self.ln2_g, self.ln2_b, self.ffn1_w, self.ffn1_b, self.ffn2_w,
                self.ffn2_b]
        return out


@dataclass
class AagParams:
    layers: list
    head_w1: Parameter
    head_b1: Parameter
    head_w2: Parameter
    head_b2: Parameter

    @classmethod
    def create(cls, cfg: AagConfig, seed: int, head_hidden: int | None = None,
               prefix: str = "aag", dtype=None):
        hh = head_hidden or cfg.d
        layers = [AagLayerParams.create(cfg, seed, prefix=f"{prefix}.layer{i}",
                                        dtype=dtype)
                  for i in range(cfg.layers)]
        return cls(
            layers=layers,
            head_w1=ad.make_param(f"{prefix}.head_w1", (cfg.d, hh), seed, dtype=dtype),
            head_b1=ad.make_param(f"{prefix}.head_b1", (hh,), seed, fan_in=cfg.d,
                                  dtype=dtype),
            head_w2=ad.make_param(f"{prefix}.head_w2", (hh, 1), seed, dtype=dtype),
            head_b2=ad.make_param(f"{prefix}.head_b2", (1,), seed, fan_in=hh,
                                  dtype=dtype),
        )

    def parameters(self):
        out = []
        for layer in self.layers:
            out += layer.parameters()
        out += [self.head_w1, self.head_b1, self.head_w2, self.head_b2]
        return out


def feature_aggregation_gate_batch(x: Tensor, adjacency: Tensor,
                                   gate_w: Parameter) -> Tensor:
    """ReLU(A (X W)): adjacency-weighted node mixing producing the queries."""
    return ad.relu(ad.matmul(adjacency, ad.matmul(x, gate_w)))


def feature_aggregation_gate(x, adjacency, gate_w) -> Tensor:
    return feature_aggregation_gate_batch(ad._coerce(x), ad._coerce(adjacency),
                                          gate_w)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    B, n, d = t.shape
    t = ad.reshape(t, (B, n, heads, d // heads))
    return ad.transpose(t, (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    B, H, n, hd = t.shape
    return ad.reshape(ad.transpose(t, (0, 2, 1, 3)), (B, n, H * hd))


def s2o_self_attention_batch(q_src: Tensor, kv_src: Tensor, m_a: Tensor,
                             m_p: Tensor, lp: AagLayerParams,
                             cfg: AagConfig) -> Tensor:
    """Multi-head attention whose logits carry the shared edge biases.

    Queries come from the gate output, keys and values from the layer's input
    nodes. The same scalar bias matrices are added to every head before the
    softmax; logits scale by sqrt(head_dim).
    """
    B, n, _ = q_src.shape
    q = _split_heads(ad.linear(q_src, lp.q_w, lp.q_b), cfg.heads)
    k = _split_heads(ad.linear(kv_src, lp.k_w, lp.k_b), cfg.heads)
    v = _split_heads(ad.linear(kv_src, lp.v_w, lp.v_b), cfg.heads)
    logits = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(cfg.head_dim))
    bias = ad.reshape(ad.add(m_a, m_p), (B, 1, n, n))
    attn = ad.softmax(ad.add(logits, bias), axis=-1)
    mixed = _merge_heads(ad.matmul(attn, v))
    return ad.linear(mixed, lp.o_w, lp.o_b)


def s2o_self_attention(q_src, kv_src, m_a, m_p, lp: AagLayerParams,
                       cfg: AagConfig) -> Tensor:
    """Single-graph form over (n, d) sources and (n, n) biases."""
    q3 = ad.reshape(ad._coerce(q_src), (1,) + tuple(q_src.shape))
    kv3 = ad.reshape(ad._coerce(kv_src), (1,) + tuple(kv_src.shape))
    ma3 = ad.reshape(ad._coerce(m_a), (1,) + tuple(m_a.shape))
    mp3 = ad.reshape(ad._coerce(m_p), (1,) + tuple(m_p.shape))
    out = s2o_self_attention_batch(q3, kv3, ma3, mp3, lp, cfg)
    return ad.reshape(out, tuple(q_src.shape))


def _zeros_like_edges(x: Tensor) -> Tensor:
    B, n, _ = x.shape
    return Tensor(np.zeros((B, n, n), dtype=x.dtype))


def aag_block_batch(x: Tensor, m_p: Tensor | None, params: AagParams,
                    cfg: AagConfig) -> Tensor:
    """Run the stacked block over batched node features (B, n, d)."""
    if m_p is None or not cfg.use_spatial:
        m_p = _zeros_like_edges(x)
    for lp in params.layers:
        x_in = x
        if cfg.use_semantic:
            m_a = edges_mod.semantic_edges_batch(x_in, lp.semantic)
            m_a_adj = m_a
        else:
            m_a = _zeros_like_edges(x_in)
            # uniform similarity keeps the adjacency informative for the gate
            m_a_adj = Tensor(np.ones(m_a.shape, dtype=x.dtype))
        if cfg.use_fag:
            adj = edges_mod.correlation_adjacency(m_a_adj, m_p, mode=cfg.adjacency)
            x_g = feature_aggregation_gate_batch(x_in, adj, lp.gate_w)
        else:
            x_g = x_in
        nq = ad.layer_norm(x_g, lp.ln1_g, lp.ln1_b)
        nkv = ad.layer_norm(x_in, lp.ln1_g, lp.ln1_b)
        attended = s2o_self_attention_batch(nq, nkv, m_a, m_p, lp, cfg)
        x_mid = ad.add(attended, x_g)
        h = ad.relu(ad.linear(ad.layer_norm(x_mid, lp.ln2_g, lp.ln2_b),
                              lp.ffn1_w, lp.ffn1_b))
        x = ad.add(ad.linear(h, lp.ffn2_w, lp.ffn2_b), x_mid)
    return x


def aag_block(x, edge_tensors: EdgeTensors, params: AagParams,
              cfg: AagConfig) -> Tensor:
    """Single-graph form: spatial edges are taken from ``edge_tensors``;
    semantic edges are recomputed per layer from the evolving features."""
    x = ad._coerce(x)
    x3 = ad.reshape(x, (1,) + tuple(x.shape))
    mp = edge_tensors.spatial
    mp3 = ad.reshape(ad._coerce(mp), (1,) + tuple(mp.shape))
    out = aag_block_batch(x3, mp3, params, cfg)
    return ad.reshape(out, tuple(x.shape))


def score_head_batch(x: Tensor, params: AagParams) -> Tensor:
    """Two-layer MLP on the crop node's final features; returns (B,) scores."""
    crop = x[:, 0, :]
    h = ad.relu(ad.linear(crop, params.head_w1, params.head_b1))
    out = ad.linear(h, params.head_w2, params.head_b2)
    return ad.reshape(out, (x.shape[0],))


def score_head(x, params: AagParams) -> Tensor:
    """Single-graph form over (n, d); returns a scalar tensor."""
    x3 = ad.reshape(ad._coerce(x), (1,) + tuple(x.shape))
    return ad.reshape(score_head_batch(x3, params), ())
