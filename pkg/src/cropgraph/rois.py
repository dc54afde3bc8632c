"""Region feature extraction: boxes, bilinear pooling, backbone, node building.

Turns an image (or a precomputed feature map) plus region boxes into the
per-node feature matrix the attention graph consumes. Node 0 is always the
crop candidate; the remaining N nodes are object proposals.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

CROP_ROLE = "crop-candidate"
PROPOSAL_ROLE = "object-proposal"


class RegionError(ValueError):
    """A box is degenerate or incompatible with the image it refers to."""


class InputError(ValueError):
    """An input array does not meet the operation's preconditions."""


@dataclass(frozen=True)
class RegionBox:
    """Axis-aligned rectangle in image-pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float
    role: str = PROPOSAL_ROLE
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise RegionError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def coords(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def clipped(self, image_w: float, image_h: float) -> "RegionBox":
        x1 = min(max(self.x1, 0.0), image_w)
        y1 = min(max(self.y1, 0.0), image_h)
        x2 = min(max(self.x2, 0.0), image_w)
        y2 = min(max(self.y2, 0.0), image_h)
        if not (x1 < x2 and y1 < y2):
            raise RegionError(
                f"box {self.coords()} has zero area after clipping to "
                f"{image_w}x{image_h}")
        return RegionBox(x1, y1, x2, y2, role=self.role, confidence=self.confidence)

    def flipped_h(self, image_w: float) -> "RegionBox":
        return RegionBox(image_w - self.x2, self.y1, image_w - self.x1, self.y2,
                         role=self.role, confidence=self.confidence)


@dataclass
class FeatureMap:
    """Dense activations (channels x height x width) plus the pixel stride."""

    data: Tensor
    stride: float

    def __post_init__(self):
        if self.data.ndim != 3:
            raise InputError(f"feature map must be 3-D, got shape {self.data.shape}")
        if self.stride <= 0:
            raise InputError(f"stride must be positive, got {self.stride}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def extent(self) -> tuple[float, float]:
        """Covered image extent (width, height) in pixels."""
        return (self.width * self.stride, self.height * self.stride)


@dataclass
class NodeSet:
    """(N+1) x d node features with per-node centers; row 0 is the crop."""

    features: Tensor
    centers: np.ndarray
    boxes: list
    crop_index: int = 0


# ---------------------------------------------------------------------------
# bilinear average pooling
# ---------------------------------------------------------------------------

def _pool_plan(boxes_feat: np.ndarray, out_size: int, fh: int, fw: int):
    """Precompute gather indices and weights for box-average pooling.

    Each output cell averages 4 bilinear samples on the cell's regular 2x2
    sub-grid. Feature cell (i, j) is treated as living at (i+0.5, j+0.5), so
    sample coordinates are shifted by 0.5 before interpolating, and samples
    beyond the border clamp to the border cell.

    Returns (idx, w): linear cell indices and weights, each (B, out*out*16);
    the 16 covers 4 sub-samples times 4 interpolation corners, with the 1/4
    sub-sample averaging folded into the weights.
    """
    boxes_feat = np.asarray(boxes_feat, dtype=np.float64)
    x1, y1, x2, y2 = (boxes_feat[:, k] for k in range(4))
    bw = (x2 - x1) / out_size
    bh = (y2 - y1) / out_size

    cell = np.arange(out_size, dtype=np.float64)
    sub = (np.arange(2, dtype=np.float64) + 0.5) / 2.0
    # sample offsets within the box, shape (out, 2)
    off = cell[:, None] + sub[None, :]

    ys = y1[:, None, None] + off[None] * bh[:, None, None]   # (B, out, 2)
    xs = x1[:, None, None] + off[None] * bw[:, None, None]

    def split(coords, limit):
        c = np.clip(coords - 0.5, 0.0, limit - 1.0)
        i0 = np.minimum(np.floor(c).astype(np.int64), limit - 1)
        frac = c - i0
        i1 = np.minimum(i0 + 1, limit - 1)
        return i0, i1, frac

    yi0, yi1, fy = split(ys, fh)
    xi0, xi1, fx = split(xs, fw)

    B = boxes_feat.shape[0]
    # broadcast to (B, out, 2, out, 2): y sample axes then x sample axes
    yi0 = yi0[:, :, :, None, None]
    yi1 = yi1[:, :, :, None, None]
    fy = fy[:, :, :, None, None]
    xi0 = xi0[:, None, None, :, :]
    xi1 = xi1[:, None, None, :, :]
    fx = fx[:, None, None, :, :]

    shape = (B, out_size, 2, out_size, 2)
    corners_idx = np.stack([
        np.broadcast_to(yi0 * fw + xi0, shape),
        np.broadcast_to(yi0 * fw + xi1, shape),
        np.broadcast_to(yi1 * fw + xi0, shape),
        np.broadcast_to(yi1 * fw + xi1, shape),
    ], axis=-1)
    corners_w = np.stack([
        np.broadcast_to((1 - fy) * (1 - fx), shape),
        np.broadcast_to((1 - fy) * fx, shape),
        np.broadcast_to(fy * (1 - fx), shape),
        np.broadcast_to(fy * fx, shape),
    ], axis=-1) * 0.25

    # regroup to (B, out, out, 16): sub-sample grid and corners flattened
    corners_idx = corners_idx.transpose(0, 1, 3, 2, 4, 5).reshape(B, out_size, out_size, 16)
    corners_w = corners_w.transpose(0, 1, 3, 2, 4, 5).reshape(B, out_size, out_size, 16)
    P = out_size * out_size * 16
    return corners_idx.reshape(B, P), corners_w.reshape(B, P)


def pool_matrices(boxes_feat: np.ndarray, out_size: int, fh: int, fw: int,
                  dtype=np.float64) -> np.ndarray:
    """Dense pooling operators: (B, out*out, fh*fw), one row per output cell."""
    idx, w = _pool_plan(boxes_feat, out_size, fh, fw)
    B, P = idx.shape
    cells = out_size * out_size
    dense = np.zeros((B, cells, fh * fw), dtype=dtype)
    taps = P // cells
    bidx = np.arange(B)[:, None, None]
    cidx = np.arange(cells)[None, :, None]
    np.add.at(dense, (bidx, cidx, idx.reshape(B, cells, taps)),
              w.reshape(B, cells, taps))
    return dense


def pool_boxes(x: Tensor, boxes_feat: np.ndarray, out_size: int) -> Tensor:
    """Average-pool boxes from a feature map with bilinear sampling.

    ``x`` is (C, H, W) shared across boxes, or (B, C, H, W) with one map per
    box. Boxes are (B, 4) [x1, y1, x2, y2] in feature-cell units. Returns a
    (B, out, out, C) tensor. Pooling is a fixed linear operator given the
    boxes, so it runs as a matmul against a dense (out*out, H*W) weight
    matrix and gradients flow back into the map entries through it.
    """
    if out_size < 1:
        raise InputError(f"out_size must be >= 1, got {out_size}")
    B = boxes_feat.shape[0]
    if x.ndim == 3:
        C, H, W = x.shape
        per_box = False
    elif x.ndim == 4:
        if x.shape[0] != B:
            raise ad.ShapeError(
                f"per-box maps {x.shape} do not match {B} boxes")
        _, C, H, W = x.shape
        per_box = True
    else:
        raise ad.ShapeError(f"pool_boxes needs a 3-D or 4-D map, got {x.shape}")

    cells = out_size * out_size
    if not per_box:
        dense = pool_matrices(boxes_feat, out_size, H, W, dtype=x.dtype)
        flat = ad.reshape(x, (C, H * W))
        pooled = ad.matmul(Tensor(dense.reshape(B * cells, H * W)),
                           ad.transpose(flat))           # (B*cells, C)
        return ad.reshape(pooled, (B, out_size, out_size, C))

    same_box = bool((boxes_feat == boxes_feat[0]).all())
    flat = ad.reshape(x, (B, C, H * W))
    if same_box:
        dense = pool_matrices(boxes_feat[:1], out_size, H, W, dtype=x.dtype)[0]
        pooled = ad.matmul(flat, Tensor(dense.T))        # (B, C, cells)
    else:
        dense = pool_matrices(boxes_feat, out_size, H, W, dtype=x.dtype)
        pooled = ad.matmul(flat, Tensor(dense.transpose(0, 2, 1)))
    return ad.transpose(ad.reshape(pooled, (B, C, out_size, out_size)),
                        (0, 2, 3, 1))


def _to_feature_boxes(fm: FeatureMap, boxes, image_size=None) -> np.ndarray:
    image_w, image_h = image_size if image_size is not None else fm.extent
    rows = []
    for box in boxes:
        c = box.clipped(image_w, image_h)
        rows.append([c.x1 / fm.stride, c.y1 / fm.stride,
                     c.x2 / fm.stride, c.y2 / fm.stride])
    return np.array(rows, dtype=np.float64)


def roi_align(fm: FeatureMap, box: RegionBox, out_size: int,
              image_size=None) -> Tensor:
    """Pool one region of interest to (out_size, out_size, channels)."""
    feat = _to_feature_boxes(fm, [box], image_size=image_size)
    return ad.reshape(pool_boxes(fm.data, feat, out_size),
                      (out_size, out_size, fm.channels))


def roi_align_batch(fm: FeatureMap, boxes, out_size: int,
                    image_size=None) -> Tensor:
    feat = _to_feature_boxes(fm, boxes, image_size=image_size)
    return pool_boxes(fm.data, feat, out_size)


def discard_mask(fm: FeatureMap, box: RegionBox) -> np.ndarray:
    """1 where a feature cell's center lies outside the crop box, else 0."""
    ys = (np.arange(fm.height) + 0.5) * fm.stride
    xs = (np.arange(fm.width) + 0.5) * fm.stride
    inside_y = (ys >= box.y1) & (ys <= box.y2)
    inside_x = (xs >= box.x1) & (xs <= box.x2)
    inside = inside_y[:, None] & inside_x[None, :]
    return (~inside).astype(np.float64)


def rod_align(fm: FeatureMap, box: RegionBox, out_size: int,
              image_size=None) -> Tensor:
    """Pool the region of discard: full-image pooling with the crop zeroed out."""
    return ad.reshape(rod_align_batch(fm, [box], out_size, image_size=image_size),
                      (out_size, out_size, fm.channels))


def rod_align_batch(fm: FeatureMap, boxes, out_size: int,
                    image_size=None) -> Tensor:
    image_w, image_h = image_size if image_size is not None else fm.extent
    masks = np.stack([discard_mask(fm, b.clipped(image_w, image_h)) for b in boxes])
    masks = masks[:, None, :, :].astype(fm.data.dtype)      # (B, 1, H, W)
    masked = ad.mul(ad.reshape(fm.data, (1,) + fm.data.shape), Tensor(masks))
    feat = np.tile(np.array([[0.0, 0.0, image_w / fm.stride, image_h / fm.stride]]),
                   (len(boxes), 1))
    return pool_boxes(masked, feat, out_size)


# ---------------------------------------------------------------------------
# convolutional stem
# ---------------------------------------------------------------------------

def im2col(x: Tensor, kernel: int = 3, stride: int = 2, pad: int = 1) -> Tensor:
    """Unfold (C, H, W) into (H'*W', C*k*k) patch rows for matmul convolution."""
    C, H, W = x.shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho = (Hp - kernel) // stride + 1
    Wo = (Wp - kernel) // stride + 1

    oy = np.arange(Ho) * stride
    ox = np.arange(Wo) * stride
    dy = np.arange(kernel)
    dx = np.arange(kernel)
    rows = oy[:, None, None, None] + dy[None, None, :, None]   # (Ho,1,k,1)
    cols = ox[None, :, None, None] + dx[None, None, None, :]   # (1,Wo,1,k)
    lin = (rows * Wp + cols).reshape(Ho * Wo, kernel * kernel)

    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    flat = padded.reshape(C, Hp * Wp)
    patches = flat[:, lin]                       # (C, P, k*k)
    out = patches.transpose(1, 0, 2).reshape(Ho * Wo, C * kernel * kernel)

    def vjp(g):
        gp = g.reshape(Ho * Wo, C, kernel * kernel).transpose(1, 0, 2)
        gflat = np.zeros((C, Hp * Wp), dtype=x.dtype)
        cidx = np.arange(C)[:, None, None]
        np.add.at(gflat, (cidx, lin[None]), gp)
        gpad = gflat.reshape(C, Hp, Wp)
        return (gpad[:, pad:Hp - pad, pad:Wp - pad],)

    return ad.from_op(out, (x,), vjp)


def conv2d(x: Tensor, w: Parameter, b: Parameter, kernel: int = 3,
           stride: int = 2, pad: int = 1) -> Tensor:
    """Strided convolution as im2col + matmul. Weight is (C*k*k, C_out)."""
    C, H, W = x.shape
    Ho = (H + 2 * pad - kernel) // stride + 1
    Wo = (W + 2 * pad - kernel) // stride + 1
    cols = im2col(x, kernel=kernel, stride=stride, pad=pad)
    y = ad.linear(cols, w, b)                       # (Ho*Wo, C_out)
    return ad.transpose(ad.reshape(y, (Ho, Wo, w.shape[1])), (2, 0, 1))


class ToyBackbone:
    """Small trainable stem: four strided 3x3 convolutions, stride 16 overall."""

    WIDTHS = (8, 16, 32)

    def __init__(self, out_channels: int = 16, seed: int = 0, dtype=None,
                 prefix: str = "backbone"):
        self.out_channels = out_channels
        widths = list(self.WIDTHS) + [out_channels]
        self.layers = []
        c_in = 3
        for i, c_out in enumerate(widths):
            fan = c_in * 9
            w = ad.make_param(f"{prefix}.conv{i}.w", (fan, c_out), seed,
                              fan_in=fan, dtype=dtype)
            b = ad.make_param(f"{prefix}.conv{i}.b", (c_out,), seed,
                              fan_in=fan, dtype=dtype)
            self.layers.append((w, b))
            c_in = c_out

    def parameters(self) -> list[Parameter]:
        return [p for pair in self.layers for p in pair]

    def __call__(self, image) -> FeatureMap:
        """image: H x W x 3 array (or Tensor) with H, W >= 32."""
        img = image if isinstance(image, Tensor) else Tensor(image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise InputError(f"expected an HxWx3 image, got shape {img.shape}")
        H, W = img.shape[0], img.shape[1]
        if H < 32 or W < 32:
            raise InputError(f"image too small for the stride-16 stem: {H}x{W}")
        x = ad.transpose(img, (2, 0, 1))
        for i, (w, b) in enumerate(self.layers):
            x = conv2d(x, w, b)
            if i + 1 < len(self.layers):
                x = ad.relu(x)
        return FeatureMap(data=x, stride=16.0)


# ---------------------------------------------------------------------------
# proposals and node assembly
# ---------------------------------------------------------------------------

def heuristic_proposals(image: np.ndarray, n: int = 10) -> list[RegionBox]:
    """Deterministic fallback proposer: top-n windows by local contrast energy.

    Scans a multi-scale sliding grid and scores each window by the variance of
    the grayscale intensity inside it; ties resolve in scan order.
    """
    if n < 1:
        raise InputError(f"n must be >= 1, got {n}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        gray = img.mean(axis=2)
    else:
        gray = img
    H, W = gray.shape

    ii = np.zeros((H + 1, W + 1))
    ii[1:, 1:] = gray.cumsum(axis=0).cumsum(axis=1)
    ii2 = np.zeros((H + 1, W + 1))
    ii2[1:, 1:] = (gray * gray).cumsum(axis=0).cumsum(axis=1)

    def window_var(y1, x1, y2, x2):
        area = (y2 - y1) * (x2 - x1)
        s = ii[y2, x2] - ii[y1, x2] - ii[y2, x1] + ii[y1, x1]
        s2 = ii2[y2, x2] - ii2[y1, x2] - ii2[y2, x1] + ii2[y1, x1]
        return s2 / area - (s / area) ** 2

    side0 = min(H, W)
    scored = []
    order = 0
    for divisor in (2, 3, 4):
        side = max(side0 // divisor, 8)
        step = max(side // 2, 1)
        for y in range(0, H - side + 1, step):
            for x in range(0, W - side + 1, step):
                scored.append((window_var(y, x, y + side, x + side), order,
                               (x, y, x + side, y + side)))
                order += 1
    scored.sort(key=lambda rec: (-rec[0], rec[1]))
    boxes = []
    for var, _, (x1, y1, x2, y2) in scored[:n]:
        boxes.append(RegionBox(float(x1), float(y1), float(x2), float(y2),
                               role=PROPOSAL_ROLE, confidence=float(var)))
    return boxes


def pad_or_truncate_proposals(proposals, n: int, image_w: float,
                              image_h: float):
    """Fix the proposal list to exactly n boxes.

    Extra boxes are dropped lowest-confidence first (index breaks ties);
    missing slots are filled with inactive full-image boxes. Returns the boxes
    plus a 0/1 activity vector.
    """
    order = sorted(range(len(proposals)),
                   key=lambda i: (-proposals[i].confidence, i))
    kept = [proposals[i] for i in order[:n]]
    active = [1.0] * len(kept)
    while len(kept) < n:
        kept.append(RegionBox(0.0, 0.0, image_w, image_h, role=PROPOSAL_ROLE,
                              confidence=0.0))
        active.append(0.0)
    return kept, np.array(active)


@dataclass
class NodeProjection:
    """FC projections from pooled features to d-dim nodes, plus the pad token."""

    crop_w: Parameter
    crop_b: Parameter
    prop_w: Parameter
    prop_b: Parameter
    null_embedding: Parameter

    @classmethod
    def create(cls, channels: int, align_size: int, d: int, seed: int,
               dtype=None, prefix: str = "nodes"):
        flat = align_size * align_size * channels
        return cls(
            crop_w=ad.make_param(f"{prefix}.crop_w", (2 * flat, d), seed, dtype=dtype),
            crop_b=ad.make_param(f"{prefix}.crop_b", (d,), seed, fan_in=2 * flat,
                                 dtype=dtype),
            prop_w=ad.make_param(f"{prefix}.prop_w", (flat, d), seed, dtype=dtype),
            prop_b=ad.make_param(f"{prefix}.prop_b", (d,), seed, fan_in=flat,
                                 dtype=dtype),
            null_embedding=ad.make_param(f"{prefix}.null", (d,), seed, fan_in=d,
                                         dtype=dtype),
        )

    def parameters(self) -> list[Parameter]:
        return [self.crop_w, self.crop_b, self.prop_w, self.prop_b,
                self.null_embedding]


def proposal_features(fm: FeatureMap, proposals, active: np.ndarray,
                      proj: NodeProjection, align_size: int,
                      image_size=None) -> Tensor:
    """Project N proposal boxes to (N, d) rows; inactive rows add the pad token."""
    pooled = roi_align_batch(fm, proposals, align_size, image_size=image_size)
    flat = ad.reshape(pooled, (len(proposals), -1))
    feats = ad.linear(flat, proj.prop_w, proj.prop_b)
    inactive = (1.0 - active)[:, None]
    if inactive.any():
        pad = ad.mul(ad.reshape(proj.null_embedding, (1, -1)), Tensor(inactive))
        feats = ad.add(feats, pad)
    return feats


def crop_features(fm: FeatureMap, crop_boxes, proj: NodeProjection,
                  align_size: int, image_size=None) -> Tensor:
    """Project B crop candidates to (B, d): FC over concat(RoI, RoD) features."""
    roi = roi_align_batch(fm, crop_boxes, align_size, image_size=image_size)
    rod = rod_align_batch(fm, crop_boxes, align_size, image_size=image_size)
    both = ad.concat([ad.reshape(roi, (len(crop_boxes), -1)),
                      ad.reshape(rod, (len(crop_boxes), -1))], axis=1)
    return ad.linear(both, proj.crop_w, proj.crop_b)


def normalized_centers(boxes, image_w: float, image_h: float) -> np.ndarray:
    """Box centers scaled into [0, 1] by the image extent."""
    out = np.empty((len(boxes), 2))
    for i, b in enumerate(boxes):
        cx, cy = b.center
        out[i] = (cx / image_w, cy / image_h)
    return out


def build_nodes(fm: FeatureMap, crop: RegionBox, proposals, proj: NodeProjection,
                n_proposals: int = 10, align_size: int = 5, image_size=None,
                fallback_image: np.ndarray | None = None) -> NodeSet:
    """Assemble the (N+1) x d node matrix for one crop candidate.

    Row 0 concatenates RoI and RoD pooling of the crop; rows 1..N are RoI
    pooling of the proposals. An empty proposal list falls back to the
    contrast-energy proposer when the source image is available.
    """
    image_w, image_h = image_size if image_size is not None else fm.extent
    if not proposals:
        if fallback_image is None:
            raise RegionError(
                "no proposals given and no image available for the heuristic fallback")
        proposals = heuristic_proposals(fallback_image, n_proposals)
    if len(proposals) < 1:
        raise RegionError("proposal list is empty")
    boxes, active = pad_or_truncate_proposals(proposals, n_proposals,
                                              image_w, image_h)
    crop_row = crop_features(fm, [crop], proj, align_size,
                             image_size=(image_w, image_h))
    prop_rows = proposal_features(fm, boxes, active, proj, align_size,
                                  image_size=(image_w, image_h))
    features = ad.concat([crop_row, prop_rows], axis=0)
    all_boxes = [crop] + list(boxes)
    centers = normalized_centers(all_boxes, image_w, image_h)
    return NodeSet(features=features, centers=centers, boxes=all_boxes)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

_FM_MAGIC = b"S2FM"
_FM_VERSION = 1


def write_feature_map(path, fm: FeatureMap) -> None:
    """Binary feature-map file: magic, version, dims, stride, float32 data."""
    with open(path, "wb") as fh:
        fh.write(_FM_MAGIC)
        fh.write(struct.pack("<IIIIf", _FM_VERSION, fm.channels, fm.height,
                             fm.width, fm.stride))
        fh.write(np.ascontiguousarray(fm.data.numpy(), dtype="<f4").tobytes())


def read_feature_map(path) -> FeatureMap:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _FM_MAGIC:
            raise InputError(f"not a feature-map file (magic {magic!r})")
        version, c, h, w, stride = struct.unpack("<IIIIf", fh.read(20))
        if version != _FM_VERSION:
            raise InputError(f"unsupported feature-map version {version}")
        data = np.frombuffer(fh.read(4 * c * h * w), dtype="<f4").reshape(c, h, w)
    return FeatureMap(data=Tensor(data.astype(np.float64)), stride=float(stride))


def write_box_file(path, records) -> None:
    """JSON lines of {image_id, boxes: [[x1, y1, x2, y2, confidence], ...]}."""
    with open(path, "w", encoding="utf8") as fh:
        for image_id, boxes in records:
            row = {"image_id": image_id,
                   "boxes": [[b.x1, b.y1, b.x2, b.y2, b.confidence] for b in boxes]}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_box_file(path) -> dict:
    out = {}
    with open(path, encoding="utf8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            out[row["image_id"]] = [
                RegionBox(x1, y1, x2, y2, role=PROPOSAL_ROLE, confidence=conf)
                for x1, y1, x2, y2, conf in row["boxes"]]
    return out
