"""Image / pixel AUROC and per-region overlap (PRO)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

EXACT_PRO_LIMIT = 2 ** 20
PRO_QUANTILES = 200


class UndefinedMetricError(ValueError):
    pass


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties get half credit)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores vs {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def connected_components(mask) -> tuple[np.ndarray, int]:
    """8-connected labelling, labels 1..n assigned in raster order of first pixel."""
    structure = np.ones((3, 3), dtype=bool)
    labels, n = ndimage.label(np.asarray(mask) > 0, structure=structure)
    return labels, int(n)


def pro_curve(score_maps, gt_masks, thresholds: str | np.ndarray = "auto"):
    """FPR and mean per-region overlap at descending thresholds.

    Starts at the empty prediction (FPR 0, overlap 0). With ``"auto"``, every
    distinct score is a threshold when the pixel count is at most 2**20,
    otherwise 200 quantiles are used.
    """
    scores = np.asarray(score_maps, dtype=np.float64)
    gts = np.asarray(gt_masks) > 0
    if scores.shape != gts.shape:
        raise ValueError(f"score maps {scores.shape} vs masks {gts.shape}")
    if scores.ndim == 2:
        scores, gts = scores[None], gts[None]
    weights = np.zeros(scores.shape, dtype=np.float64)
    regions = []
    for n in range(gts.shape[0]):
        labels, count = connected_components(gts[n])
        for lab in range(1, count + 1):
            regions.append((n, labels == lab))
    if not regions:
        raise UndefinedMetricError("PRO needs at least one anomalous region")
    for n, region in regions:
        weights[n][region] = 1.0 / (len(regions) * region.sum())
    neg = ~gts
    n_neg = int(neg.sum())
    if n_neg == 0:
        raise UndefinedMetricError("PRO needs negative pixels for the false-positive rate")

    flat = scores.ravel()
    order = np.argsort(-flat, kind="stable")
    s_sorted = flat[order]
    cum_overlap = np.cumsum(weights.ravel()[order])
    cum_fp = np.cumsum(neg.ravel()[order])
    # last position of each run of equal scores = prediction "score >= threshold"
    run_end = np.nonzero(np.diff(s_sorted) != 0)[0]
    ends = np.concatenate([run_end, [s_sorted.size - 1]])
    if isinstance(thresholds, str):
        if flat.size > EXACT_PRO_LIMIT:
            qs = np.quantile(flat, np.linspace(1.0, 0.0, PRO_QUANTILES))
            ends = np.searchsorted(-s_sorted, -qs, side="right") - 1
    else:
        ths = np.sort(np.asarray(thresholds, dtype=np.float64))[::-1]
        ends = np.searchsorted(-s_sorted, -ths, side="right") - 1
    ends = ends[ends >= 0]
    fpr = np.concatenate([[0.0], cum_fp[ends] / n_neg])
    overlap = np.concatenate([[0.0], cum_overlap[ends]])
    return fpr, np.minimum(overlap, 1.0)


def integrate_pro(fpr: np.ndarray, overlap: np.ndarray, fpr_limit: float = 0.3) -> float:
    order = np.lexsort((overlap, fpr))
    x, y = fpr[order], overlap[order]
    keep = x <= fpr_limit
    xs, ys = list(x[keep]), list(y[keep])
    after = np.nonzero(~keep)[0]
    if after.size and xs:
        j = after[0]
        x0, y0, x1, y1 = xs[-1], ys[-1], x[j], y[j]
        ys.append(y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0))
        xs.append(fpr_limit)
    xs, ys = np.asarray(xs), np.asarray(ys)
    area = float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))
    return area / fpr_limit


def pro(score_maps, gt_masks, fpr_limit: float = 0.3, thresholds="auto") -> float:
    fpr, overlap = pro_curve(score_maps, gt_masks, thresholds)
    return integrate_pro(fpr, overlap, fpr_limit)


@dataclass
class EvalReport:
    image_auroc: float
    pixel_auroc: float
    pro: float
    n_images: int
    n_anomalous: int
    n_pixels_positive: int
    n_pixels_negative: int
    per_category: dict = field(default_factory=dict)
    config_digest: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [("category", "Image AUROC", "Pixel AUROC", "PRO")]
        for name, r in sorted(self.per_category.items()):
            if r is None:
                rows.append((name, "-", "-", "-"))
                continue
            rows.append((name, f"{100 * r['image_auroc']:.2f}", f"{100 * r['pixel_auroc']:.2f}", f"{100 * r['pro']:.2f}"))
        rows.append(("AVG" if len(self.per_category) > 1 else "all", f"{100 * self.image_auroc:.2f}",
                     f"{100 * self.pixel_auroc:.2f}", f"{100 * self.pro:.2f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)


def _metrics(image_scores, image_labels, pixel_maps, gt_masks, fpr_limit):
    return {
        "image_auroc": auroc(image_scores, image_labels),
        "pixel_auroc": auroc(np.asarray(pixel_maps).ravel(), np.asarray(gt_masks).ravel() > 0),
        "pro": pro(pixel_maps, gt_masks, fpr_limit),
    }


def evaluate_scores(image_scores: Sequence[float], pixel_maps: np.ndarray, gt_masks: np.ndarray,
                    categories: Sequence[str] | None = None, fpr_limit: float = 0.3,
                    config_digest: str = "") -> EvalReport:
    """Aggregate metrics; image labels are derived from whether a mask is non-empty."""
    pixel_maps = np.asarray(pixel_maps, dtype=np.float64)
    gt_masks = np.asarray(gt_masks) > 0
    if pixel_maps.shape[0] == 0:
        raise UndefinedMetricError("empty test split")
    labels = gt_masks.reshape(gt_masks.shape[0], -1).any(1)
    overall = _metrics(image_scores, labels, pixel_maps, gt_masks, fpr_limit)
    per_cat = {}
    if categories is not None:
        cats = np.asarray(categories)
        for c in sorted(set(categories)):
            sel = cats == c
            try:
                per_cat[c] = _metrics(np.asarray(image_scores)[sel], labels[sel], pixel_maps[sel],
                                      gt_masks[sel], fpr_limit)
            except UndefinedMetricError:
                per_cat[c] = None
    return EvalReport(image_auroc=overall["image_auroc"], pixel_auroc=overall["pixel_auroc"], pro=overall["pro"],
                      n_images=int(labels.size), n_anomalous=int(labels.sum()),
                      n_pixels_positive=int(gt_masks.sum()), n_pixels_negative=int((~gt_masks).sum()),
                      per_category=per_cat, config_digest=config_digest)
