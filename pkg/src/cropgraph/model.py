"""End-to-end crop scorer: backbone, node features, edges, attention, head.

One ``prepare`` call per image runs the backbone (or ingests a precomputed
feature map) and pools the proposal nodes; any number of candidate crops can
then be scored in a single batched pass against that context. An instrumented
counter tracks feature passes so the one-pass-per-image contract is testable.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import edges as edges_mod
from . import rois
from .autodiff import Parameter, Tensor
from .graph_attention import AagConfig, AagParams, aag_block_batch, score_head_batch
from .rois import FeatureMap, NodeProjection, RegionBox, ToyBackbone


@dataclass
class ModelConfig:
    d: int = 32
    layers: int = 2
    heads: int = 4
    proj_dim: int | None = None
    ffn_hidden: int | None = None
    n_proposals: int = 10
    align_size: int = 5
    backbone_channels: int = 16
    spatial_variant: str = "disemb"        # "disemb" | "disdrop"
    eps: float = 0.2
    spatial_sign: float = 1.0
    adjacency: str = "literal"             # "literal" | "softmax"
    use_fag: bool = True
    use_semantic: bool = True
    use_spatial: bool = True
    disemb_dim: int = 16
    disdrop_hidden: int = 16
    head_hidden: int | None = None
    dtype: str = "float64"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)

    def aag_config(self) -> AagConfig:
        return AagConfig(d=self.d, layers=self.layers, heads=self.heads,
                         ffn_hidden=self.ffn_hidden, proj_dim=self.proj_dim,
                         use_fag=self.use_fag, use_semantic=self.use_semantic,
                         use_spatial=self.use_spatial, adjacency=self.adjacency)

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class ImageContext:
    """Per-image state shared by every candidate scored on that image."""

    fm: FeatureMap
    image_w: float
    image_h: float
    prop_features: Tensor
    prop_centers: np.ndarray
    proposals: list


class CropScorer:
    """The full trainable pipeline from pixels (or feature maps) to a score."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        dtype = config.np_dtype()
        self.aag_cfg = config.aag_config()
        self.backbone = ToyBackbone(out_channels=config.backbone_channels,
                                    seed=seed, dtype=dtype)
        self.nodes = NodeProjection.create(config.backbone_channels,
                                           config.align_size, config.d, seed,
                                           dtype=dtype)
        if config.spatial_variant == "disemb":
            self.spatial_params = edges_mod.DisEmbParams.create(
                config.disemb_dim, seed, dtype=dtype)
        elif config.spatial_variant == "disdrop":
            self.spatial_params = edges_mod.DisDropParams.create(
                config.disdrop_hidden, seed, dtype=dtype)
        else:
            raise ad.ConfigurationError(
                f"unknown spatial variant {config.spatial_variant!r}")
        self.aag = AagParams.create(self.aag_cfg, seed,
                                    head_hidden=config.head_hidden, dtype=dtype)
        self.feature_passes = 0

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return (self.backbone.parameters() + self.nodes.parameters()
                + self.spatial_params.parameters() + self.aag.parameters())

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    # -- per-image preparation ---------------------------------------------

    def prepare(self, source, proposals, image_size=None) -> ImageContext:
        """Run one feature pass for an image and pool its proposal nodes.

        ``source`` is an HxWx3 array (backbone runs, counted as the feature
        pass) or a FeatureMap (precomputed, still one pass). Proposals may be
        empty only when ``source`` is an image; the contrast heuristic then
        fills them in.
        """
        self.feature_passes += 1
        if isinstance(source, FeatureMap):
            fm = source
            image_w, image_h = image_size if image_size else fm.extent
            if not proposals:
                raise rois.RegionError(
                    "no proposals given and no image available for the "
                    "heuristic fallback")
        else:
            image = np.asarray(source, dtype=self.config.np_dtype())
            fm = self.backbone(image)
            image_h, image_w = image.shape[0], image.shape[1]
            if not proposals:
                proposals = rois.heuristic_proposals(image, self.config.n_proposals)
        boxes, active = rois.pad_or_truncate_proposals(
            proposals, self.config.n_proposals, image_w, image_h)
        feats = rois.proposal_features(fm, boxes, active, self.nodes,
                                       self.config.align_size,
                                       image_size=(image_w, image_h))
        centers = rois.normalized_centers(boxes, image_w, image_h)
        return ImageContext(fm=fm, image_w=image_w, image_h=image_h,
                            prop_features=feats, prop_centers=centers,
                            proposals=boxes)

    # -- scoring -------------------------------------------------------------

    def spatial_edges(self, centers: np.ndarray) -> Tensor:
        cfg = self.config
        if not cfg.use_spatial:
            return Tensor(np.zeros(centers.shape[:-1] + (centers.shape[-2],),
                                   dtype=cfg.np_dtype()))
        if cfg.spatial_variant == "disemb":
            mp = edges_mod.spatial_edges_disemb_batch(centers, self.spatial_params)
        else:
            mp = edges_mod.spatial_edges_disdrop_batch(centers, cfg.eps,
                                                       self.spatial_params)
        if cfg.spatial_sign != 1.0:
            mp = ad.mul(mp, cfg.spatial_sign)
        return mp

    def score_boxes(self, ctx: ImageContext, crop_boxes) -> Tensor:
        """Score a batch of candidate crops against a prepared image context."""
        B = len(crop_boxes)
        if B == 0:
            raise ad.UsageError("need at least one candidate box")
        size = (ctx.image_w, ctx.image_h)
        crop_rows = rois.crop_features(ctx.fm, crop_boxes, self.nodes,
                                       self.config.align_size, image_size=size)
        crop_rows = ad.reshape(crop_rows, (B, 1, self.config.d))
        props = ad.reshape(ctx.prop_features,
                           (1,) + tuple(ctx.prop_features.shape))
        props = ad.broadcast_to(props, (B,) + tuple(ctx.prop_features.shape))
        x = ad.concat([crop_rows, props], axis=1)          # (B, N+1, d)

        crop_centers = rois.normalized_centers(crop_boxes, ctx.image_w,
                                               ctx.image_h)
        centers = np.concatenate(
            [crop_centers[:, None, :],
             np.broadcast_to(ctx.prop_centers,
                             (B,) + ctx.prop_centers.shape)], axis=1)
        m_p = self.spatial_edges(centers)
        out = aag_block_batch(x, m_p, self.aag, self.aag_cfg)
        return score_head_batch(out, self.aag)

    def score_record(self, record, root=None) -> np.ndarray:
        """Score every candidate of one annotation record (one feature pass)."""
        from .training import load_source  # local import, avoids a cycle
        source = load_source(record.source, root=root)
        ctx = self.prepare(source, list(record.proposals),
                           image_size=(record.width, record.height))
        scores = self.score_boxes(ctx, list(record.candidates))
        return scores.numpy().copy()

    # -- checkpointing -------------------------------------------------------

    def state_arrays(self) -> dict:
        return {p.name: p.data for p in self.parameters()}

    def save(self, path) -> None:
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path) -> "CropScorer":
        return load_checkpoint(path)


_CK_MAGIC = b"S2CK"
_CK_VERSION = 1


def save_checkpoint(path, model: CropScorer) -> None:
    """Binary checkpoint: magic, version, config JSON, named float32 tensors."""
    cfg_bytes = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf8")
    with open(path, "wb") as fh:
        fh.write(_CK_MAGIC)
        fh.write(struct.pack("<I", _CK_VERSION))
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        params = model.parameters()
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode("utf8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> CropScorer:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CK_MAGIC:
            raise rois.InputError(f"not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CK_VERSION:
            raise rois.InputError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        config = ModelConfig.from_dict(json.loads(fh.read(cfg_len).decode("utf8")))
        model = CropScorer(config, seed=0)
        table = model.named_parameters()
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
            if name not in table:
                raise rois.InputError(f"checkpoint has unknown parameter {name!r}")
            p = table[name]
            if tuple(p.shape) != tuple(shape):
                raise rois.InputError(
                    f"parameter {name!r} shape {shape} does not match model "
                    f"shape {tuple(p.shape)}")
            p.data = data.astype(config.np_dtype())
    return model
