"""Losses, optimizer, and the training loop over annotated candidate sets."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError, Parameter, Tensor
from .model import CropScorer
from .rois import CROP_ROLE, PROPOSAL_ROLE, FeatureMap, RegionBox, read_feature_map


class DataError(ValueError):
    """A dataset record or file violates the expected schema."""


@dataclass
class AnnotationRecord:
    """One image's candidate boxes with mean-opinion scores in [1, 5]."""

    image_id: str
    source: str
    width: int
    height: int
    proposals: list
    candidates: list
    mos: list

    def validate(self) -> None:
        if len(self.mos) != len(self.candidates):
            raise DataError(
                f"{self.image_id}: {len(self.mos)} scores for "
                f"{len(self.candidates)} candidates")
        if len(self.candidates) < 2:
            raise DataError(f"{self.image_id}: needs at least 2 candidates")
        for m in self.mos:
            if not (1.0 <= m <= 5.0):
                raise DataError(f"{self.image_id}: MOS {m} outside [1, 5]")
        if self.width <= 0 or self.height <= 0:
            raise DataError(f"{self.image_id}: bad image size "
                            f"{self.width}x{self.height}")

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "source": self.source,
            "width": self.width,
            "height": self.height,
            "proposals": [[b.x1, b.y1, b.x2, b.y2, b.confidence]
                          for b in self.proposals],
            "candidates": [[b.x1, b.y1, b.x2, b.y2] for b in self.candidates],
            "mos": self.mos,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "AnnotationRecord":
        return cls(
            image_id=row["image_id"],
            source=row["source"],
            width=row["width"],
            height=row["height"],
            proposals=[RegionBox(x1, y1, x2, y2, role=PROPOSAL_ROLE,
                                 confidence=conf)
                       for x1, y1, x2, y2, conf in row["proposals"]],
            candidates=[RegionBox(x1, y1, x2, y2, role=CROP_ROLE)
                        for x1, y1, x2, y2 in row["candidates"]],
            mos=[float(m) for m in row["mos"]],
        )


def write_manifest(path, records) -> None:
    with open(path, "w", encoding="utf8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def read_manifest(path) -> list[AnnotationRecord]:
    records = []
    with open(path, encoding="utf8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = AnnotationRecord.from_dict(json.loads(line))
            rec.validate()
            records.append(rec)
    if not records:
        raise DataError(f"manifest {path} holds no records")
    return records


def load_source(source: str, root=None):
    """Load a record source: PNG/NPY images or an S2FM feature-map file."""
    path = Path(source)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    if not path.exists():
        raise DataError(f"source file {path} does not exist")
    suffix = path.suffix.lower()
    if suffix == ".s2fm":
        return read_feature_map(path)
    if suffix == ".npy":
        return np.load(path)
    from PIL import Image
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 80
    weight_decay: float = 1e-4
    lambda_rank: float = 1.0
    batch_images: int = 1
    candidate_sample_k: int = 16
    seed: int = 0
    margin: float = 0.0
    flip_prob: float = 0.5
    pred_weighting: str = "uniform"        # "uniform" | "mos"
    grad_clip: float = 0.0                 # global-norm cap; 0 disables

    def __post_init__(self):
        if min(self.learning_rate, self.epochs, self.batch_images,
               self.candidate_sample_k) <= 0:
            raise DataError("training hyperparameters must be positive")

    def to_dict(self) -> dict:
        import dataclasses
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_pred(pred, truth, weighting: str = "uniform") -> Tensor:
    """Mean smooth-L1 regression loss between predicted and target scores.

    ``weighting="mos"`` scales each term by truth_i / mean(truth).
    """
    p = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=float))
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape:
        raise DataError(f"prediction/target length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise DataError("loss_pred needs at least one pair")
    terms = ad.smooth_l1(ad.sub(p, Tensor(t)))
    if weighting == "mos":
        w = t / t.mean()
        terms = ad.mul(terms, Tensor(w))
    elif weighting != "uniform":
        raise ad.ConfigurationError(f"unknown weighting {weighting!r}")
    return ad.tmean(terms)


def loss_rank(pred, truth, margin: float = 0.0, mode: str = "hinge") -> Tensor:
    """Pairwise ranking loss over candidates of one image.

    hinge (default): mean over unordered pairs of
    max(0, margin - sign(truth_i - truth_j) * (pred_i - pred_j)); pairs with
    tied ground truth contribute nothing.

    literal: mean over ordered pairs of
    max(0, sign(truth_i - truth_j) * (pred_i - pred_j) * (truth_i - truth_j)),
    kept for auditing only.
    """
    p = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=float))
    t = np.asarray(truth, dtype=float)
    K = p.shape[0]
    if K < 2:
        raise DataError("loss_rank needs at least two candidates")
    diff = ad.sub(ad.reshape(p, (K, 1)), ad.reshape(p, (1, K)))
    t_diff = t[:, None] - t[None, :]
    sign = np.sign(t_diff)
    pairs = K * (K - 1) / 2.0
    if mode == "hinge":
        upper = np.triu(np.ones((K, K)), k=1) * (sign != 0)
        hinge = ad.relu(ad.sub(margin, ad.mul(diff, Tensor(sign))))
        total = ad.tsum(ad.mul(hinge, Tensor(upper)))
        return ad.mul(total, 1.0 / pairs)
    if mode == "literal":
        off_diag = 1.0 - np.eye(K)
        prod = ad.mul(ad.mul(diff, Tensor(sign * t_diff)), Tensor(off_diag))
        return ad.mul(ad.tsum(ad.relu(prod)), 1.0 / pairs)
    raise ad.ConfigurationError(f"unknown rank-loss mode {mode!r}")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Adaptive moments with decoupled weight decay and optional grad clipping."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 grad_clip: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _clip(self) -> None:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        norm = np.sqrt(total)
        if norm > self.grad_clip:
            scale = self.grad_clip / norm
            for p in self.params:
                if p.grad is not None:
                    p.grad = p.grad * scale

    def step(self) -> None:
        self.t += 1
        if self.grad_clip > 0:
            self._clip()
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                name = getattr(p, "name", f"param{i}")
                raise NumericalError(f"non-finite gradient in {name}")
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.zero_grad()


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _flip_record_arrays(image: np.ndarray, proposals, candidates, width):
    flipped = image[:, ::-1, :].copy()
    props = [b.flipped_h(width) for b in proposals]
    cands = [b.flipped_h(width) for b in candidates]
    return flipped, props, cands


@dataclass
class TrainResult:
    metrics: list
    best_srcc: float
    best_epoch: int
    aborted: bool = False


METRIC_FIELDS = ("epoch", "train_loss", "val_srcc", "val_acc5", "val_acc10")


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for row in rows:
            writer.writerow([row["epoch"], repr(row["train_loss"]),
                             repr(row["val_srcc"]), repr(row["val_acc5"]),
                             repr(row["val_acc10"])])


def train(dataset, model: CropScorer, config: TrainConfig, val=None,
          out_dir=None, root=None, log=None) -> TrainResult:
    """Fit the model on annotated records; track the best held-out SRCC.

    Per step one image gets a single feature pass, ``candidate_sample_k`` of
    its candidates are scored in a batch, and the combined regression plus
    ranking loss is minimized with AdamW. The best-SRCC parameter snapshot is
    restored into the model at the end (and written as a checkpoint when
    ``out_dir`` is given). A NaN loss aborts the run, keeping the last good
    snapshot.
    """
    from . import evaluation

    if not dataset:
        raise DataError("training dataset is empty")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = AdamW(params, lr=config.learning_rate,
                weight_decay=config.weight_decay, grad_clip=config.grad_clip)

    sources = {}
    for rec in dataset:
        rec.validate()
        sources[rec.image_id] = load_source(rec.source, root=root)

    best_srcc = -np.inf
    best_epoch = -1
    best_state = {p.name: p.data.copy() for p in params}
    metrics = []
    aborted = False

    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        pending = 0
        for idx in order:
            rec = dataset[idx]
            source = sources[rec.image_id]
            proposals = list(rec.proposals)
            cands = list(rec.candidates)
            if (config.flip_prob > 0 and not isinstance(source, FeatureMap)
                    and rng.random() < config.flip_prob):
                source, proposals, cands = _flip_record_arrays(
                    source, proposals, cands, rec.width)
            k = min(config.candidate_sample_k, len(cands))
            pick = rng.choice(len(cands), size=k, replace=False)
            pick.sort()
            sampled = [cands[i] for i in pick]
            mos = np.asarray(rec.mos, dtype=float)[pick]

            ctx = model.prepare(source, proposals,
                                image_size=(rec.width, rec.height))
            scores = model.score_boxes(ctx, sampled)
            loss = ad.add(loss_pred(scores, mos, weighting=config.pred_weighting),
                          ad.mul(loss_rank(scores, mos, margin=config.margin),
                                 config.lambda_rank))
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                aborted = True
                break
            losses.append(loss_val)
            loss.backward()
            pending += 1
            if pending >= config.batch_images:
                opt.step()
                pending = 0
        if pending:
            opt.step()
        if aborted:
            break

        row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "val_srcc": 0.0, "val_acc5": 0.0, "val_acc10": 0.0}
        if val:
            report = evaluation.evaluate(model, val, root=root)
            row["val_srcc"] = report.srcc_mean
            row["val_acc5"] = report.acc5
            row["val_acc10"] = report.acc10
            if report.srcc_mean > best_srcc:
                best_srcc = report.srcc_mean
                best_epoch = epoch
                best_state = {p.name: p.data.copy() for p in params}
        else:
            best_srcc = row["train_loss"]
            best_epoch = epoch
            best_state = {p.name: p.data.copy() for p in params}
        metrics.append(row)
        if log:
            log(f"epoch {epoch}: loss {row['train_loss']:.4f} "
                f"srcc {row['val_srcc']:.4f}")

    for p in params:
        p.data = best_state[p.name]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "checkpoint.s2ck")
        write_metrics_csv(out / "metrics.csv", metrics)
    return TrainResult(metrics=metrics, best_srcc=float(best_srcc),
                       best_epoch=best_epoch, aborted=aborted)
