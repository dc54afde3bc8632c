"""Procedural dataset with a planted scoring rule for end-to-end verification.

Images hold vivid foreground shapes (one of them a text-like strip), drab
background clutter, and a textured backdrop. The hidden quality rule rewards
covering the foreground bounding region and penalizes cutting any object with
the crop boundary. Because the rule is known exactly, recovery experiments
can check that training actually learns it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .candidates import AnchorGrid, grid_anchors
from .rois import CROP_ROLE, PROPOSAL_ROLE, RegionBox
from .training import AnnotationRecord


@dataclass
class SynthSpec:
    image_w: int = 96
    image_h: int = 96
    min_objects: int = 3
    max_objects: int = 5
    max_clutter: int = 3
    base: float = 1.3
    coverage_gain: float = 3.4
    cut_penalty: float = 0.3
    noise_sigma: float = 0.03
    grid: AnchorGrid = field(default_factory=AnchorGrid)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["grid"] = AnchorGrid(**d["grid"])
        return cls(**d)


@dataclass
class PlantedObject:
    box: RegionBox
    kind: str              # "rect" | "ellipse" | "strip"
    foreground: bool


def _interest_box(objects, image_w, image_h) -> RegionBox:
    fg = [o.box for o in objects if o.foreground]
    x1 = min(b.x1 for b in fg)
    y1 = min(b.y1 for b in fg)
    x2 = max(b.x2 for b in fg)
    y2 = max(b.y2 for b in fg)
    return RegionBox(max(x1 - 2.0, 0.0), max(y1 - 2.0, 0.0),
                     min(x2 + 2.0, image_w), min(y2 + 2.0, image_h))


def _intersection(a: RegionBox, b: RegionBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def planted_score(candidate: RegionBox, objects, interest: RegionBox,
                  spec: SynthSpec, noise: float = 0.0) -> float:
    """The hidden quality rule: base + coverage gain - cut penalty + noise."""
    coverage = _intersection(candidate, interest) / interest.area
    cuts = 0
    for obj in objects:
        inter = _intersection(candidate, obj.box)
        if 1e-9 < inter < obj.box.area - 1e-9:
            cuts += 1
    raw = (spec.base + spec.coverage_gain * coverage
           - spec.cut_penalty * cuts + noise)
    return float(np.clip(raw, 1.0, 5.0))


class PlantedOracle:
    """Noise-free access to the hidden scoring rule of a generated dataset."""

    def __init__(self, spec: SynthSpec, geometry: dict):
        self.spec = spec
        self.geometry = geometry          # image_id -> (objects, interest)

    def score(self, image_id: str, box: RegionBox) -> float:
        objects, interest = self.geometry[image_id]
        return planted_score(box, objects, interest, self.spec, noise=0.0)

    def to_dict(self) -> dict:
        images = {}
        for image_id, (objects, interest) in self.geometry.items():
            images[image_id] = {
                "objects": [[o.box.x1, o.box.y1, o.box.x2, o.box.y2, o.kind,
                             int(o.foreground)] for o in objects],
                "interest": list(interest.coords()),
            }
        return {"spec": self.spec.to_dict(), "images": images}

    @classmethod
    def from_dict(cls, d: dict) -> "PlantedOracle":
        spec = SynthSpec.from_dict(d["spec"])
        geometry = {}
        for image_id, entry in d["images"].items():
            objects = [PlantedObject(RegionBox(x1, y1, x2, y2), kind,
                                     bool(fg))
                       for x1, y1, x2, y2, kind, fg in entry["objects"]]
            interest = RegionBox(*entry["interest"])
            geometry[image_id] = (objects, interest)
        return cls(spec, geometry)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PlantedOracle":
        with open(path, encoding="utf8") as fh:
            return cls.from_dict(json.load(fh))

    def model(self):
        return PlantedOracleModel(self)


class PlantedOracleModel:
    """Scores candidates with the noise-free planted rule; for evaluation."""

    def __init__(self, oracle: PlantedOracle):
        self.oracle = oracle
        self.feature_passes = 0

    def score_record(self, record, root=None):
        self.feature_passes += 1
        return np.array([self.oracle.score(record.image_id, box)
                         for box in record.candidates])


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _texture(rng, h, w, amp=0.04):
    yy = np.linspace(0, 2 * np.pi, h)[:, None]
    xx = np.linspace(0, 2 * np.pi, w)[None, :]
    tex = np.zeros((h, w))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.5, size=2)
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        tex += np.sin(fy * yy + py) * np.sin(fx * xx + px)
    return amp * tex / 3.0


def _vivid_color(rng):
    c = rng.uniform(0.0, 1.0, size=3)
    c[rng.integers(3)] = rng.uniform(0.75, 1.0)
    c[(np.argmax(c) + 1) % 3] *= 0.3
    return c


def _drab_color(rng, bg):
    # achromatic but far from the backdrop, so clutter stays visible
    level = rng.choice([rng.uniform(0.0, 0.12), rng.uniform(0.88, 1.0)])
    return np.full(3, level) + rng.uniform(-0.03, 0.03, size=3)


def _paint_rect(img, box: RegionBox, color):
    x1, y1, x2, y2 = (int(round(v)) for v in box.coords())
    img[y1:y2, x1:x2] = color


def _paint_ellipse(img, box: RegionBox, color):
    h, w = img.shape[:2]
    cy, cx = (box.y1 + box.y2) / 2, (box.x1 + box.x2) / 2
    ry, rx = max(box.height / 2, 1.0), max(box.width / 2, 1.0)
    yy, xx = np.mgrid[0:h, 0:w]
    mask = ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0
    img[mask] = color


def _paint_strip(img, box: RegionBox, rng):
    x1, y1, x2, y2 = (int(round(v)) for v in box.coords())
    dark = rng.uniform(0.0, 0.15, size=3)
    light = rng.uniform(0.85, 1.0, size=3)
    img[y1:y2, x1:x2] = light
    x = x1
    while x < x2:
        block = int(rng.integers(3, 7))
        gap = int(rng.integers(2, 4))
        img[y1 + 1:y2 - 1, x:min(x + block, x2)] = dark
        x += block + gap


def _random_box_in(rng, region: RegionBox, min_frac, max_frac,
                   short_ref: float) -> RegionBox:
    w = min(rng.uniform(min_frac, max_frac) * short_ref, region.width - 2.0)
    h = min(rng.uniform(min_frac, max_frac) * short_ref, region.height - 2.0)
    w, h = max(w, 4.0), max(h, 4.0)
    x1 = rng.uniform(region.x1 + 1.0, region.x2 - w - 1.0)
    y1 = rng.uniform(region.y1 + 1.0, region.y2 - h - 1.0)
    return RegionBox(x1, y1, x1 + w, y1 + h)


def render_image(rng, spec: SynthSpec):
    """One image plus its object annotations.

    Foreground shapes (vivid colors plus a text-like strip) sit inside one
    randomly placed cluster region, so where the content of interest lies
    varies image to image; a little drab clutter lands anywhere.
    """
    w, h = spec.image_w, spec.image_h
    short = min(w, h)
    bg = rng.uniform(0.3, 0.6, size=3)
    img = np.clip(bg[None, None, :] + _texture(rng, h, w)[:, :, None], 0, 1)

    cw = rng.uniform(0.78, 0.95) * w
    ch = rng.uniform(0.78, 0.95) * h
    cx1 = rng.uniform(1.0, w - cw - 1.0)
    cy1 = rng.uniform(1.0, h - ch - 1.0)
    cluster = RegionBox(cx1, cy1, cx1 + cw, cy1 + ch)
    whole = RegionBox(0.0, 0.0, float(w), float(h))

    objects = []
    n_clutter = int(rng.integers(1, spec.max_clutter + 1))
    for _ in range(n_clutter):
        # keep clutter centers in the ring outside the cluster, so oversized
        # crops tend to slice clutter and tight ones exclude it
        box = _random_box_in(rng, whole, 0.14, 0.28, short)
        for _try in range(12):
            cx, cy = box.center
            if not (cluster.x1 <= cx <= cluster.x2
                    and cluster.y1 <= cy <= cluster.y2):
                break
            box = _random_box_in(rng, whole, 0.14, 0.28, short)
        kind = "rect" if rng.random() < 0.5 else "ellipse"
        color = _drab_color(rng, bg)
        if kind == "rect":
            _paint_rect(img, box, color)
        else:
            _paint_ellipse(img, box, color)
        objects.append(PlantedObject(box=box, kind=kind, foreground=False))

    n_shapes = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(n_shapes):
        box = _random_box_in(rng, cluster, 0.12, 0.30, short)
        kind = "rect" if rng.random() < 0.5 else "ellipse"
        color = _vivid_color(rng)
        if kind == "rect":
            _paint_rect(img, box, color)
        else:
            _paint_ellipse(img, box, color)
        objects.append(PlantedObject(box=box, kind=kind, foreground=True))

    # text-like strip, always part of the content to keep intact
    strip_h = max(rng.uniform(0.06, 0.10) * h, 5.0)
    strip_w = max(rng.uniform(0.5, 0.9) * cluster.width, 12.0)
    sx = rng.uniform(cluster.x1, max(cluster.x2 - strip_w, cluster.x1) + 1.0)
    sy = rng.uniform(cluster.y1, max(cluster.y2 - strip_h, cluster.y1) + 1.0)
    strip = RegionBox(sx, sy, min(sx + strip_w, w - 1.0),
                      min(sy + strip_h, h - 1.0))
    _paint_strip(img, strip, rng)
    objects.append(PlantedObject(box=strip, kind="strip", foreground=True))
    return img, objects


def synth_dataset(n_images: int, seed: int, spec: SynthSpec | None = None,
                  out_dir=None):
    """Generate records plus the planted oracle; optionally write everything.

    With ``out_dir``: PNG images under images/, manifest.jsonl, oracle.json.
    Returns (records, oracle). Sources are paths relative to ``out_dir`` when
    given, otherwise in-memory arrays are written to nothing and sources stay
    unset relative paths (callers must pass out_dir for trainable datasets).
    """
    if n_images < 2:
        raise ValueError(f"need at least 2 images, got {n_images}")
    spec = spec or SynthSpec()
    rng = np.random.default_rng(seed)
    records = []
    geometry = {}
    images = {}

    anchors = grid_anchors(spec.image_w, spec.image_h, spec.grid)
    for i in range(n_images):
        image_id = f"synth{i:05d}"
        img, objects = render_image(rng, spec)
        interest = _interest_box(objects, spec.image_w, spec.image_h)
        geometry[image_id] = (objects, interest)
        images[image_id] = img

        proposals = [RegionBox(o.box.x1, o.box.y1, o.box.x2, o.box.y2,
                               role=PROPOSAL_ROLE,
                               confidence=round(1.0 - 0.01 * j, 4))
                     for j, o in enumerate(objects)]
        cands = [RegionBox(b.x1, b.y1, b.x2, b.y2, role=CROP_ROLE)
                 for b in anchors]
        mos = [planted_score(b, objects, interest, spec,
                             noise=float(rng.normal(0.0, spec.noise_sigma)))
               for b in cands]
        records.append(AnnotationRecord(
            image_id=image_id,
            source=f"images/{image_id}.png",
            width=spec.image_w,
            height=spec.image_h,
            proposals=proposals,
            candidates=cands,
            mos=mos,
        ))

    oracle = PlantedOracle(spec, geometry)
    if out_dir is not None:
        from PIL import Image

        from .training import write_manifest
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        for image_id, img in images.items():
            arr = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
            Image.fromarray(arr).save(out / "images" / f"{image_id}.png")
        write_manifest(out / "manifest.jsonl", records)
        oracle.save(out / "oracle.json")
    return records, oracle
