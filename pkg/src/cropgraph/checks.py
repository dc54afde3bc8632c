"""Finite-difference verification suite covering every differentiable piece.

Each entry builds a scalar-valued computation plus the tensors to probe;
``run_gradient_suite`` feeds them through the central-difference checker. The
``corrupt`` hook flips the sign of one check's backward pass as a negative
control, proving the suite can actually fail.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import edges as edges_mod
from . import rois
from .autodiff import Tensor, grad_check
from .graph_attention import (AagConfig, AagParams, aag_block_batch,
                              feature_aggregation_gate_batch,
                              s2o_self_attention_batch, score_head_batch)
from .training import loss_pred, loss_rank


def _rng(seed):
    return np.random.default_rng(seed)


def _sign_flipped(t: Tensor) -> Tensor:
    """Identity forward with a sign-flipped backward; the negative control."""
    return ad.from_op(t.data.copy(), (t,), lambda g: (-g,))


def _build_matmul(seed):
    r = _rng(seed)
    a = Tensor(r.uniform(-1, 1, (4, 5)))
    b = Tensor(r.uniform(-1, 1, (5, 3)))
    return (lambda x, y: ad.tsum(ad.matmul(x, y))), [a, b], {}


def _build_softmax(seed):
    r = _rng(seed)
    m = Tensor(r.uniform(-1, 1, (4, 6)))
    w = Tensor(r.uniform(-1, 1, (4, 6)))
    return (lambda x: ad.tsum(ad.mul(ad.softmax_rows(x), w))), [m], {}


def _build_layer_norm(seed):
    r = _rng(seed)
    x = Tensor(r.uniform(-1, 1, (5, 8)))
    gamma = Tensor(r.uniform(0.5, 1.5, (8,)))
    beta = Tensor(r.uniform(-0.5, 0.5, (8,)))
    w = Tensor(r.uniform(-1, 1, (5, 8)))
    fn = lambda a, g, b: ad.tsum(ad.mul(ad.layer_norm(a, g, b), w))
    return fn, [x, gamma, beta], {}


def _build_mlp(seed):
    r = _rng(seed)
    x = Tensor(r.uniform(-1, 1, (3, 8)))
    w1 = Tensor(r.uniform(-0.5, 0.5, (8, 16)))
    b1 = Tensor(r.uniform(-0.1, 0.1, (16,)))
    w2 = Tensor(r.uniform(-0.5, 0.5, (16, 1)))
    b2 = Tensor(r.uniform(-0.1, 0.1, (1,)))
    fn = lambda a, c, d, e, f: ad.tsum(ad.mlp_forward(a, [(c, d), (e, f)]))
    return fn, [x, w1, b1, w2, b2], {}


def _build_roi_align(seed):
    r = _rng(seed)
    fm_data = Tensor(r.uniform(-1, 1, (2, 6, 6)))
    box = rois.RegionBox(5.0, 7.0, 40.0, 38.0)
    w = Tensor(r.uniform(-1, 1, (3, 3, 2)))
    def fn(x):
        fm = rois.FeatureMap(data=x, stride=8.0)
        return ad.tsum(ad.mul(rois.roi_align(fm, box, 3), w))
    return fn, [fm_data], {}


def _build_rod_align(seed):
    r = _rng(seed)
    fm_data = Tensor(r.uniform(-1, 1, (2, 6, 6)))
    box = rois.RegionBox(8.0, 8.0, 30.0, 30.0)
    w = Tensor(r.uniform(-1, 1, (3, 3, 2)))
    def fn(x):
        fm = rois.FeatureMap(data=x, stride=8.0)
        return ad.tsum(ad.mul(rois.rod_align(fm, box, 3), w))
    return fn, [fm_data], {}


def _build_backbone(seed):
    r = _rng(seed)
    image = r.uniform(0, 1, (32, 32, 3))
    bb = rois.ToyBackbone(out_channels=4, seed=seed)
    w = Tensor(r.uniform(-1, 1, (4, 2, 2)))
    def fn(*ps):
        return ad.tsum(ad.mul(bb(image).data, w))
    return fn, bb.parameters(), {"max_entries": 24, "seed": seed}


def _build_disdrop(seed):
    params = edges_mod.DisDropParams.create(6, seed)
    centers = _rng(seed).uniform(0, 1, (1, 4, 2))
    w = Tensor(_rng(seed + 1).uniform(-1, 1, (1, 4, 4)))
    def fn(*ps):
        mp = edges_mod.spatial_edges_disdrop_batch(centers, 0.6, params)
        return ad.tsum(ad.mul(mp, w))
    return fn, params.parameters(), {}


def _build_disemb(seed):
    params = edges_mod.DisEmbParams.create(5, seed)
    centers = _rng(seed).uniform(0, 1, (1, 4, 2))
    w = Tensor(_rng(seed + 1).uniform(-1, 1, (1, 4, 4)))
    def fn(*ps):
        mp = edges_mod.spatial_edges_disemb_batch(centers, params)
        return ad.tsum(ad.mul(mp, w))
    return fn, params.parameters(), {}


def _build_adjacency(seed):
    r = _rng(seed)
    m_a = Tensor(r.uniform(0.2, 1.0, (1, 4, 4)))
    m_p = Tensor(r.uniform(-1, 1, (1, 4, 4)))
    w = Tensor(r.uniform(-1, 1, (1, 4, 4)))
    fn = lambda a, p: ad.tsum(ad.mul(edges_mod.correlation_adjacency(a, p), w))
    return fn, [m_a, m_p], {}


def _build_fag(seed):
    r = _rng(seed)
    x = Tensor(r.uniform(-1, 1, (1, 4, 8)))
    adj = Tensor(r.uniform(0, 1, (1, 4, 4)))
    gate = Tensor(r.uniform(-0.5, 0.5, (8, 8)))
    w = Tensor(r.uniform(-1, 1, (1, 4, 8)))
    fn = lambda a, g: ad.tsum(ad.mul(feature_aggregation_gate_batch(a, adj, g), w))
    return fn, [x, gate], {}


def _build_s2o(seed):
    cfg = AagConfig(d=8, layers=1, heads=2)
    params = AagParams.create(cfg, seed)
    lp = params.layers[0]
    r = _rng(seed)
    q = Tensor(r.uniform(-1, 1, (1, 4, 8)))
    kv = Tensor(r.uniform(-1, 1, (1, 4, 8)))
    m_a = Tensor(r.uniform(-0.5, 0.5, (1, 4, 4)))
    m_p = Tensor(r.uniform(-0.5, 0.5, (1, 4, 4)))
    w = Tensor(r.uniform(-1, 1, (1, 4, 8)))
    inputs = [q, kv, m_a, m_p, lp.q_w, lp.k_w, lp.v_w, lp.o_w]
    def fn(qq, kk, ma, mp, *ps):
        return ad.tsum(ad.mul(s2o_self_attention_batch(qq, kk, ma, mp, lp, cfg), w))
    return fn, inputs, {"max_entries": 40, "seed": seed}


def _build_aag_block(seed):
    cfg = AagConfig(d=8, layers=2, heads=2)
    params = AagParams.create(cfg, seed)
    spatial = edges_mod.DisEmbParams.create(4, seed)
    centers = _rng(seed).uniform(0, 1, (1, 4, 2))
    x = Tensor(_rng(seed + 1).uniform(-1, 1, (1, 4, 8)))
    probe = [x, params.layers[0].gate_w, params.layers[0].q_w,
             params.layers[1].ffn1_w, params.layers[0].semantic.phi_w,
             spatial.m_w, params.head_w1]
    def fn(xx, *ps):
        m_p = edges_mod.spatial_edges_disemb_batch(centers, spatial)
        out = aag_block_batch(xx, m_p, params, cfg)
        return ad.tsum(score_head_batch(out, params))
    return fn, probe, {"max_entries": 30, "seed": seed}


def _build_loss_pred(seed):
    r = _rng(seed)
    pred = Tensor(r.uniform(1.2, 4.8, (12,)))
    truth = r.uniform(1, 5, (12,))
    # straddle the smooth-l1 breakpoint with differences near +-1
    truth[:4] = pred.data[:4] + np.array([0.9, 1.1, -0.95, -1.2])
    truth = np.clip(truth, 1, 5)
    return (lambda p: loss_pred(p, truth)), [pred], {}


def _build_loss_rank(seed):
    r = _rng(seed)
    pred = Tensor(r.uniform(1, 5, (10,)))
    truth = r.uniform(1, 5, (10,))
    return (lambda p: loss_rank(p, truth, margin=0.2)), [pred], {}


SUITE = [
    ("matmul", _build_matmul),
    ("softmax_rows", _build_softmax),
    ("layer_norm", _build_layer_norm),
    ("mlp_forward", _build_mlp),
    ("toy_backbone", _build_backbone),
    ("roi_align", _build_roi_align),
    ("rod_align", _build_rod_align),
    ("spatial_edges_disdrop", _build_disdrop),
    ("spatial_edges_disemb", _build_disemb),
    ("correlation_adjacency", _build_adjacency),
    ("feature_aggregation_gate", _build_fag),
    ("s2o_self_attention", _build_s2o),
    ("aag_block_2layer", _build_aag_block),
    ("loss_pred", _build_loss_pred),
    ("loss_rank", _build_loss_rank),
]

SUITE_NAMES = [name for name, _ in SUITE]


def run_gradient_suite(tol: float = 1e-4, seed: int = 0,
                       corrupt: str | None = None):
    """Run every check; returns [(name, GradCheckReport)]."""
    if corrupt is not None and corrupt not in SUITE_NAMES:
        raise ad.UsageError(f"unknown check {corrupt!r}")
    results = []
    for name, builder in SUITE:
        fn, inputs, kwargs = builder(seed)
        if name == corrupt:
            inner = fn
            fn = lambda *args, _inner=inner: _sign_flipped(_inner(*args))
        kwargs.setdefault("seed", seed)
        results.append((name, grad_check(fn, inputs, tol=tol, **kwargs)))
    return results
