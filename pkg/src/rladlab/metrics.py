"""Segmentation and generation metrics: Dice, IoU, clDice, Fréchet distance.

All mask metrics are pure numpy on binary arrays.  Empty-mask conventions:

  * dice / iou: both masks empty -> 1.0
  * cldice: both masks empty -> 1.0, exactly one empty -> 0.0, and if both
    topology precision and sensitivity are 0 the score is 0.0
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError
from .skeleton import thin_mask

PARAM_EPS = 1e-6


def _as_binary_pair(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.dtype != bool and not np.isin(arr, (0, 1)).all():
            raise DomainError(f"{name} mask is not binary")
    return pred.astype(bool), gt.astype(bool)


def dice(pred, gt) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both masks are empty."""
    p, g = _as_binary_pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def iou(pred, gt) -> float:
    """|P∩G| / |P∪G|; 1.0 when both masks are empty."""
    p, g = _as_binary_pair(pred, gt)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def cldice(pred, gt) -> float:
    """Centerline Dice: harmonic mean of skeleton precision and sensitivity."""
    p, g = _as_binary_pair(pred, gt)
    if not p.any() and not g.any():
        return 1.0
    if not p.any() or not g.any():
        return 0.0
    skel_p = thin_mask(p)
    skel_g = thin_mask(g)
    tprec = int((skel_p & g).sum()) / int(skel_p.sum())
    tsens = int((skel_g & p).sum()) / int(skel_g.sum())
    if tprec + tsens == 0.0:
        return 0.0
    return 2.0 * tprec * tsens / (tprec + tsens)


def _sym_sqrt_trace(mat: np.ndarray) -> float:
    """Trace of the PSD square root via eigendecomposition, clamping negatives."""
    sym = (mat + mat.T) / 2.0
    eigvals = np.linalg.eigvalsh(sym)
    return float(np.sqrt(np.clip(eigvals, 0.0, None)).sum())


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(sym)
    root = np.sqrt(np.clip(eigvals, 0.0, None))
    return (eigvecs * root) @ eigvecs.T


def frechet_distance(feats_a, feats_b, ridge: float = 1e-6) -> float:
    """Fréchet distance between Gaussian fits of two feature sets (rows = samples).

    Covariances get a +ridge*I regularizer; the matrix square root is taken
    by eigendecomposition of sqrt(Sa) @ Sb @ sqrt(Sa) with negative
    eigenvalues clamped to zero.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"expected N x k and M x k features, got {a.shape} and {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise DomainError("non-finite feature values")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise DomainError("need at least two samples per side to fit a covariance")
    k = a.shape[1]
    if a.shape[0] <= k or b.shape[0] <= k:
        warnings.warn(
            f"feature count ({a.shape[0]}, {b.shape[0]}) not larger than dimension {k}; "
            "covariance estimate is rank deficient",
            stacklevel=2,
        )
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False) + ridge * np.eye(k)
    cov_b = np.cov(b, rowvar=False) + ridge * np.eye(k)
    sqrt_a = _sym_sqrt(cov_a)
    tr_cross = _sym_sqrt_trace(sqrt_a @ cov_b @ sqrt_a)
    diff = mu_a - mu_b
    fd = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)
    return max(fd, 0.0)


def feature_encode(images, codec) -> np.ndarray:
    """N x 64 features: frozen codec latents average-pooled to 4x4 per channel."""
    feats = []
    for img in images:
        latent = codec.encode(img)  # (4, 16, 16)
        c, h, w = latent.shape
        pooled = latent.reshape(c, 4, h // 4, 4, w // 4).mean(axis=(2, 4))
        feats.append(pooled.reshape(-1))
    return np.asarray(feats, dtype=np.float64)


def pearson(xs, ys) -> float:
    """Product-moment correlation; raises on zero variance."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise ShapeError(f"expected equal-length 1-D inputs, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise DomainError("need at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    vx = float(dx @ dx)
    vy = float(dy @ dy)
    if vx == 0.0 or vy == 0.0:
        raise DomainError("correlation undefined: zero variance input")
    r = float(dx @ dy) / np.sqrt(vx * vy)
    return float(np.clip(r, -1.0, 1.0))


def av_scores(pred_masks, gt_masks) -> dict:
    """Aggregate artery/vein scores over paired (H, W, 2) binary masks.

    dice_A / dice_V are means over samples; dice_avg is exactly their mean.
    """
    if len(pred_masks) != len(gt_masks) or len(pred_masks) == 0:
        raise ShapeError("need equally many (and at least one) predictions and labels")
    dices = {0: [], 1: []}
    ious = {0: [], 1: []}
    cldices = {0: [], 1: []}
    for pred, gt in zip(pred_masks, gt_masks):
        for ch in (0, 1):
            dices[ch].append(dice(pred[..., ch], gt[..., ch]))
            ious[ch].append(iou(pred[..., ch], gt[..., ch]))
            cldices[ch].append(cldice(pred[..., ch], gt[..., ch]))
    dice_a = float(np.mean(dices[0]))
    dice_v = float(np.mean(dices[1]))
    return {
        "dice_A": dice_a,
        "dice_V": dice_v,
        "dice_avg": (dice_a + dice_v) / 2.0,
        "iou_avg": float((np.mean(ious[0]) + np.mean(ious[1])) / 2.0),
        "cldice_avg": float((np.mean(cldices[0]) + np.mean(cldices[1])) / 2.0),
        "n": len(pred_masks),
    }


@dataclass
class MetricsReport:
    """Named metric values per dataset, plus sample counts and a config hash."""

    per_dataset: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    config_hash: str = ""

    def add(self, name: str, scores: dict, count: int) -> None:
        self.per_dataset[name] = dict(scores)
        self.counts[name] = int(count)

    def to_json(self) -> dict:
        return {
            "per_dataset": self.per_dataset,
            "counts": self.counts,
            "config_hash": self.config_hash,
        }
