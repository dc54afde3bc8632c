"""Rank-correlation and top-k accuracy metrics, evaluation, ablation harness.

The reported top-k accuracy follows the mean-over-returns convention: for
returns j = 1..4, the fraction of images whose j-th best predicted candidate
lies in the ground-truth top-k set, averaged over j and expressed as a
percent. Every emitted report states this convention in its header.
"""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericalError

ACC_RETURNS = 4
ACC_CONVENTION = (f"acc_k averages the top-k hit rate of the first "
                  f"{ACC_RETURNS} returned candidates")


class InputError(ValueError):
    pass


def average_ranks(values) -> np.ndarray:
    """Fractional ranks (1-based); tied values share their average rank."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=float)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srcc(pred, truth) -> float:
    """Spearman rank correlation: Pearson correlation of fractional ranks.

    Returns 0.0 when either vector is constant (degenerate case).
    """
    p = np.asarray(pred, dtype=float)
    t = np.asarray(truth, dtype=float)
    if len(p) != len(t):
        raise InputError(f"length mismatch: {len(p)} vs {len(t)}")
    if len(p) < 2:
        raise InputError("srcc needs at least two values")
    rp = average_ranks(p)
    rt = average_ranks(t)
    rp = rp - rp.mean()
    rt = rt - rt.mean()
    denom = np.sqrt((rp * rp).sum() * (rt * rt).sum())
    if denom == 0.0:
        return 0.0
    return float((rp * rt).sum() / denom)


def _pred_order(scores) -> list[int]:
    s = np.asarray(scores, dtype=float)
    return sorted(range(len(s)), key=lambda i: (-s[i], i))


def topk_truth_set(truth, k: int) -> set:
    order = sorted(range(len(truth)), key=lambda i: (-truth[i], i))
    return set(order[:k])


def acc_topk(pred_scores, truth_scores, k: int, returns: int = ACC_RETURNS) -> float:
    """Averaged top-k accuracy (percent) over the first ``returns`` returns.

    Images with fewer than k candidates are skipped with a warning.
    """
    hits = np.zeros(returns)
    used = 0
    skipped = 0
    for pred, truth in zip(pred_scores, truth_scores):
        if len(truth) < k or len(pred) < returns:
            skipped += 1
            continue
        order = _pred_order(pred)
        top = topk_truth_set(truth, k)
        for j in range(returns):
            if order[j] in top:
                hits[j] += 1
        used += 1
    if skipped:
        warnings.warn(f"acc_topk skipped {skipped} images with fewer than "
                      f"{k} candidates")
    if used == 0:
        return 0.0
    return float(hits.mean() / used * 100.0)


@dataclass
class EvalReport:
    srcc_mean: float
    acc5: float
    acc10: float
    per_image: list
    runtime: float            # images per second; kept out of primary files
    convention: str = ACC_CONVENTION

    def summary_dict(self) -> dict:
        return {"convention": self.convention,
                "srcc_mean": self.srcc_mean,
                "acc5": self.acc5,
                "acc10": self.acc10,
                "images": len(self.per_image)}


def evaluate(model, dataset, root=None) -> EvalReport:
    """Score every candidate of every record with one feature pass per image.

    Raises on NaN scores (naming the image) and enforces the instrumented
    single-pass contract when the model exposes ``feature_passes``.
    """
    per_image = []
    preds, truths = [], []
    passes_before = getattr(model, "feature_passes", None)
    start = time.perf_counter()
    for rec in dataset:
        before = getattr(model, "feature_passes", None)
        scores = np.asarray(model.score_record(rec, root=root), dtype=float)
        after = getattr(model, "feature_passes", None)
        if before is not None and after != before + 1:
            raise AssertionError(
                f"{rec.image_id}: {after - before} feature passes for one image")
        if not np.isfinite(scores).all():
            raise NumericalError(f"non-finite score for image {rec.image_id}")
        mos = np.asarray(rec.mos, dtype=float)
        rho = srcc(scores, mos)
        order = _pred_order(scores)
        truth_rank = average_ranks(-mos)
        per_image.append((rec.image_id, rho, float(truth_rank[order[0]])))
        preds.append(scores)
        truths.append(mos)
    elapsed = time.perf_counter() - start
    if passes_before is not None:
        assert getattr(model, "feature_passes") - passes_before == len(dataset)
    rate = len(dataset) / elapsed if elapsed > 0 else float("inf")
    return EvalReport(
        srcc_mean=float(np.mean([r for _, r, _ in per_image])) if per_image else 0.0,
        acc5=acc_topk(preds, truths, 5),
        acc10=acc_topk(preds, truths, 10),
        per_image=per_image,
        runtime=rate)


def write_report(out_dir, report: EvalReport) -> None:
    """CSV + JSON summary; timing lives in a separate file for diffability."""
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="", encoding="utf8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["# " + report.convention])
        writer.writerow(["image_id", "srcc", "best_pred_rank_in_truth"])
        for image_id, rho, rank in report.per_image:
            writer.writerow([image_id, repr(rho), repr(rank)])
    with open(out / "report.json", "w", encoding="utf8") as fh:
        json.dump(report.summary_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "timings.json", "w", encoding="utf8") as fh:
        json.dump({"images_per_second": report.runtime}, fh, indent=2)
        fh.write("\n")


def write_scatter(path, model, dataset, root=None) -> None:
    """Predicted-score vs MOS pairs for external plotting."""
    with open(path, "w", newline="", encoding="utf8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "candidate", "pred", "mos"])
        for rec in dataset:
            scores = model.score_record(rec, root=root)
            for i, (s, m) in enumerate(zip(scores, rec.mos)):
                writer.writerow([rec.image_id, i, repr(float(s)), repr(float(m))])


class MosOracleModel:
    """Echoes each record's stored ground truth; the metric upper bound."""

    def __init__(self):
        self.feature_passes = 0

    def score_record(self, record, root=None):
        self.feature_passes += 1
        return np.asarray(record.mos, dtype=float)


class ConstantModel:
    """Scores every candidate identically; exercises degenerate-metric rules."""

    def __init__(self, value: float = 0.0):
        self.value = value
        self.feature_passes = 0

    def score_record(self, record, root=None):
        self.feature_passes += 1
        return np.full(len(record.candidates), self.value)


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

SPATIAL_AXIS = [("disdrop", 0.1), ("disdrop", 0.2), ("disdrop", 0.3),
                ("disemb", None)]
PROPOSAL_AXIS = [8, 10, 12, 15]
COMPONENT_AXIS = [(g, a, p) for g in (False, True) for a in (False, True)
                  for p in (False, True)]


def ablation_run(train_records, val_records, axis: str, base_model_config,
                 train_config, seed: int = 0, root=None, log=None) -> list[dict]:
    """Train one model per configuration on a shared seed and tabulate metrics.

    ``axis`` is one of "spatial", "proposals", "components"; rows mirror the
    corresponding analysis tables.
    """
    import dataclasses

    from .model import CropScorer
    from .training import train

    rows = []

    def run(setting: str, **overrides) -> dict:
        cfg = dataclasses.replace(base_model_config, **overrides)
        model = CropScorer(cfg, seed=seed)
        result = train(train_records, model, train_config, val=val_records,
                       root=root)
        report = evaluate(model, val_records, root=root)
        row = {"axis": axis, "setting": setting,
               "srcc": report.srcc_mean, "acc5": report.acc5,
               "acc10": report.acc10, "best_epoch": result.best_epoch}
        if log:
            log(f"{axis}/{setting}: srcc {row['srcc']:.4f} acc5 {row['acc5']:.1f}")
        return row

    if axis == "spatial":
        for variant, eps in SPATIAL_AXIS:
            name = variant if eps is None else f"{variant}(eps={eps})"
            over = {"spatial_variant": variant}
            if eps is not None:
                over["eps"] = eps
            rows.append(run(name, **over))
    elif axis == "proposals":
        for n in PROPOSAL_AXIS:
            rows.append(run(f"N={n}", n_proposals=n))
    elif axis == "components":
        for g, a, p in COMPONENT_AXIS:
            name = "+".join(filter(None, ["fag" if g else "", "m_a" if a else "",
                                          "m_p" if p else ""])) or "baseline"
            rows.append(run(name, use_fag=g, use_semantic=a, use_spatial=p))
    else:
        raise InputError(f"unknown ablation axis {axis!r}")
    return rows


def write_ablation_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["axis", "setting", "srcc", "acc5", "acc10",
                         "best_epoch"])
        for row in rows:
            writer.writerow([row["axis"], row["setting"], repr(row["srcc"]),
                             repr(row["acc5"]), repr(row["acc10"]),
                             row["best_epoch"]])
