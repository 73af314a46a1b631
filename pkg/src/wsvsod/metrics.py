"""Saliency (MAE, adaptive F-measure, S-measure) and segmentation (J, contour F) scores."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy import ndimage
from skimage.morphology import disk

BETA2 = 0.3
_EPS = np.finfo(np.float64).eps


def _pair(S, G):
    S = np.asarray(S, dtype=np.float64)
    G = np.asarray(G)
    if S.shape != G.shape:
        raise ValueError(f"prediction {S.shape} and ground truth {G.shape} differ in shape")
    return S, G.astype(bool)


def mae(S, G) -> float:
    S, G = _pair(S, G)
    return float(np.abs(S - G).mean())


def f_measure(S, G, beta2=BETA2) -> float:
    """F-beta at the adaptive threshold min(2 * mean(S), 1).

    Pixels at or above the threshold count as positive, except exact zeros, so
    an all-zero map predicts nothing.
    """
    S, G = _pair(S, G)
    if not G.any():
        raise ValueError("F-measure is undefined for an empty ground truth")
    tau = min(2 * S.mean(), 1.0)
    B = (S >= tau) & (S > 0)
    tp = np.count_nonzero(B & G)
    if tp == 0:
        return 0.0
    precision = tp / np.count_nonzero(B)
    recall = tp / np.count_nonzero(G)
    return float((1 + beta2) * precision * recall / (beta2 * precision + recall))


def f_beta_from_pr(precision, recall, beta2=BETA2) -> float:
    if precision == 0 and recall == 0:
        return 0.0
    return (1 + beta2) * precision * recall / (beta2 * precision + recall)


# ---------------------------------------------------------------- S-measure


def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mu = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    return 2 * mu / (mu * mu + 1 + sigma + _EPS)


def _s_object(S, G):
    fg = _object_score(S[G])
    bg = _object_score(1 - S[~G])
    u = G.mean()
    return u * fg + (1 - u) * bg


def _ssim(S, G):
    N = S.size
    if N == 0:
        return 0.0
    x, y = S.mean(), G.mean()
    if N > 1:
        sx = ((S - x) ** 2).sum() / (N - 1)
        sy = ((G - y) ** 2).sum() / (N - 1)
        sxy = ((S - x) * (G - y)).sum() / (N - 1)
    else:
        sx = sy = sxy = 0.0
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + _EPS)
    return 1.0 if b == 0 else 0.0


def _centroid(G):
    h, w = G.shape
    if not G.any():
        return int(round(w / 2)), int(round(h / 2))
    ys, xs = np.nonzero(G)
    return int(np.round(xs.mean())) + 1, int(np.round(ys.mean())) + 1


def _s_region(S, G):
    h, w = G.shape
    x, y = _centroid(G)
    area = h * w
    Gf = G.astype(np.float64)
    quads = [
        (slice(0, y), slice(0, x)),
        (slice(0, y), slice(x, w)),
        (slice(y, h), slice(0, x)),
        (slice(y, h), slice(x, w)),
    ]
    weights = [x * y / area, (w - x) * y / area, x * (h - y) / area, (w - x) * (h - y) / area]
    return sum(wt * _ssim(S[q], Gf[q]) for wt, q in zip(weights, quads))


def s_measure(S, G, alpha=0.5) -> float:
    """Structure measure: alpha * object-aware + (1 - alpha) * region-aware similarity."""
    S, G = _pair(S, G)
    y = G.mean()
    if y == 0:
        q = 1.0 - S.mean()
    elif y == 1:
        q = S.mean()
    else:
        q = alpha * _s_object(S, G) + (1 - alpha) * _s_region(S, G)
        q = max(q, 0.0)
    return float(q)


# ---------------------------------------------------------------- segmentation scores


def jaccard(S_bin, G) -> float:
    S, G = np.asarray(S_bin).astype(bool), np.asarray(G).astype(bool)
    union = np.count_nonzero(S | G)
    if union == 0:
        return 1.0
    return np.count_nonzero(S & G) / union


def boundary(mask) -> np.ndarray:
    m = np.asarray(mask).astype(bool)
    return m ^ ndimage.binary_erosion(m, structure=np.ones((3, 3), bool), border_value=0)


def contour_f(S_bin, G, tol=1) -> float:
    bs, bg = boundary(S_bin), boundary(G)
    ns, ng = np.count_nonzero(bs), np.count_nonzero(bg)
    if ns == 0 and ng == 0:
        return 1.0
    if ns == 0 or ng == 0:
        return 0.0
    se = disk(tol).astype(bool) if tol > 0 else np.ones((1, 1), bool)
    precision = np.count_nonzero(bs & ndimage.binary_dilation(bg, se)) / ns
    recall = np.count_nonzero(bg & ndimage.binary_dilation(bs, se)) / ng
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------- reports

METRIC_NAMES = ("mae", "f_beta", "s_measure", "jaccard", "contour_f")


def score_frame(S, G, threshold=0.5) -> Dict[str, float]:
    S, Gb = _pair(S, G)
    row = {"mae": mae(S, Gb), "s_measure": s_measure(S, Gb)}
    row["f_beta"] = f_measure(S, Gb) if Gb.any() else float("nan")
    B = S >= threshold
    row["jaccard"] = jaccard(B, Gb)
    row["contour_f"] = contour_f(B, Gb)
    return row


@dataclass
class EvalReport:
    rows: List[dict] = field(default_factory=list)

    def add(self, dataset: str, clip_id: str, frame: int, S, G):
        row = {"dataset": dataset, "clip": clip_id, "frame": frame}
        row.update(score_frame(S, G))
        self.rows.append(row)

    @property
    def frame_count(self) -> int:
        return len(self.rows)

    def aggregate(self) -> Dict[str, Dict[str, float]]:
        """Unweighted per-frame means per dataset; frames with empty GT skip F-beta."""
        out = {}
        for ds in sorted({r["dataset"] for r in self.rows}):
            rows = [r for r in self.rows if r["dataset"] == ds]
            agg = {"frames": len(rows)}
            for name in METRIC_NAMES:
                vals = [r[name] for r in rows if not np.isnan(r[name])]
                if len(vals) < len(rows):
                    warnings.warn(f"{ds}: {len(rows) - len(vals)} frames skipped for {name}", RuntimeWarning)
                agg[name] = float(np.mean(vals)) if vals else float("nan")
            out[ds] = agg
        return out

    def write_csv(self, path: str):
        fields = ["dataset", "clip", "frame", *METRIC_NAMES]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for r in self.rows:
                writer.writerow(r)

    def write_json(self, path: str):
        with open(path, "w") as fh:
            json.dump({"datasets": self.aggregate(), "frame_count": self.frame_count}, fh, indent=1)


def evaluate_predictions(preds, masks, dataset="default", clip_ids=None) -> EvalReport:
    """preds/masks: sequences of (T,H,W) arrays, one per clip."""
    report = EvalReport()
    for k, (P, M) in enumerate(zip(preds, masks)):
        cid = clip_ids[k] if clip_ids else str(k)
        for t in range(len(P)):
            report.add(dataset, cid, t, P[t], M[t])
    return report
