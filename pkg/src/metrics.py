"""Image quality (SSIM, FID) and instance segmentation quality (DQ, SQ, PQ)."""

import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import torch
from scipy.signal import convolve2d

from losses import FeatureExtractor, build_extractor

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
EIGEN_TOLERANCE = -1e-8
MATCH_IOU = 0.5


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(x: np.ndarray, y: np.ndarray, window: np.ndarray, c1: float, c2: float) -> float:
    def filt(a):
        return convolve2d(a, window, mode="valid")

    mu_x = filt(x)
    mu_y = filt(y)
    sigma_x = filt(x * x) - mu_x * mu_x
    sigma_y = filt(y * y) - mu_y * mu_y
    sigma_xy = filt(x * y) - mu_x * mu_y

    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sigma_xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2)
    return float(np.mean(num / den))


def ssim(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """Mean local SSIM over (H, W) or (C, H, W) images, averaged over channels.

    The Gaussian window is applied without padding and shrinks to fit images
    smaller than 11 pixels.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim needs equal shapes, got {x.shape} and {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.ndim != 3:
        raise ValueError(f"ssim expects (H, W) or (C, H, W) images, got {x.shape}")

    size = min(SSIM_WINDOW, x.shape[1], x.shape[2])
    window = _gaussian_window(size, SSIM_SIGMA)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    return float(np.mean([_ssim_channel(a, b, window, c1, c2) for a, b in zip(x, y)]))


@dataclass
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int = 0


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = scipy.linalg.eigh(matrix)
    values = np.clip(values, 0.0, None)
    return (vectors * np.sqrt(values)) @ vectors.T


def fid(stats_a: FeatureStats, stats_b: FeatureStats) -> float:
    """Frechet distance between two Gaussians.

    trace((C_a C_b)^1/2) is taken from the eigenvalues of the symmetric matrix
    C_a^1/2 C_b C_a^1/2, which share the spectrum of C_a C_b.
    """
    mean_a, cov_a = np.asarray(stats_a.mean, np.float64), np.atleast_2d(stats_a.covariance).astype(np.float64)
    mean_b, cov_b = np.asarray(stats_b.mean, np.float64), np.atleast_2d(stats_b.covariance).astype(np.float64)
    if mean_a.shape != mean_b.shape or cov_a.shape != cov_b.shape:
        raise ValueError(
            f"dimension mismatch: means {mean_a.shape} / {mean_b.shape}, "
            f"covariances {cov_a.shape} / {cov_b.shape}"
        )
    if cov_a.shape != (mean_a.shape[0], mean_a.shape[0]):
        raise ValueError(f"covariance {cov_a.shape} does not match mean {mean_a.shape}")
    for name, arr in (("mean_a", mean_a), ("mean_b", mean_b), ("cov_a", cov_a), ("cov_b", cov_b)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite statistics in {name}")

    sqrt_a = _psd_sqrt(cov_a)
    inner = sqrt_a @ cov_b @ sqrt_a
    inner = 0.5 * (inner + inner.T)
    eigenvalues = scipy.linalg.eigvalsh(inner)
    if eigenvalues.min() < EIGEN_TOLERANCE:
        logger.warning(f"Clamping negative eigenvalue {eigenvalues.min():.3e} in FID square root")
    trace_sqrt = float(np.sum(np.sqrt(np.clip(eigenvalues, 0.0, None))))

    diff = mean_a - mean_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)
    return max(value, 0.0)


@torch.no_grad()
def embed_set(
    images: Sequence[np.ndarray], extractor: FeatureExtractor, batch_size: int = 16
) -> FeatureStats:
    """Globally pooled deepest extractor features -> (mean, covariance)."""
    if len(images) < 2:
        raise ValueError(f"FID statistics need at least 2 images, got {len(images)}")
    device = next(extractor.parameters()).device
    chunks = []
    for start in range(0, len(images), batch_size):
        batch = torch.as_tensor(np.stack(images[start : start + batch_size]), dtype=torch.float32)
        features = extractor(batch.to(device))[-1]
        chunks.append(features.mean(dim=(2, 3)).double().cpu().numpy())
    feats = np.concatenate(chunks)
    return FeatureStats(feats.mean(axis=0), np.cov(feats, rowvar=False), len(images))


@dataclass
class Matching:
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)
    unmatched_gt: List[int] = field(default_factory=list)
    unmatched_pred: List[int] = field(default_factory=list)


@dataclass
class PanopticCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    def __add__(self, other: "PanopticCounts") -> "PanopticCounts":
        return PanopticCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.iou_sum + other.iou_sum
        )

    @classmethod
    def from_matching(cls, matching: Matching) -> "PanopticCounts":
        return cls(
            tp=len(matching.pairs),
            fp=len(matching.unmatched_pred),
            fn=len(matching.unmatched_gt),
            iou_sum=float(sum(iou for _, _, iou in matching.pairs)),
        )

    def quality(self) -> Tuple[float, float, float]:
        if self.tp == 0 and self.fp == 0 and self.fn == 0:
            logger.info("No instances on either side; DQ/SQ/PQ defined as 1")
            return 1.0, 1.0, 1.0
        dq = self.tp / (self.tp + 0.5 * self.fp + 0.5 * self.fn)
        sq = self.iou_sum / self.tp if self.tp else 0.0
        return dq, sq, dq * sq


def match_instances(gt: np.ndarray, pred: np.ndarray) -> Matching:
    """Pairs every gt/pred instance whose IoU exceeds 0.5 (such a partner is unique)."""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"mask shapes {gt.shape} and {pred.shape} differ")

    gt_ids = np.unique(gt[gt > 0])
    pred_ids = np.unique(pred[pred > 0])
    if gt_ids.size == 0 or pred_ids.size == 0:
        return Matching([], [int(i) for i in gt_ids], [int(i) for i in pred_ids])

    gt_index = np.searchsorted(gt_ids, gt.ravel())
    pred_index = np.searchsorted(pred_ids, pred.ravel())
    gt_fg = gt.ravel() > 0
    pred_fg = pred.ravel() > 0
    both = gt_fg & pred_fg

    n_gt, n_pred = gt_ids.size, pred_ids.size
    intersection = np.bincount(
        gt_index[both] * n_pred + pred_index[both], minlength=n_gt * n_pred
    ).reshape(n_gt, n_pred)
    gt_area = np.bincount(gt_index[gt_fg], minlength=n_gt)
    pred_area = np.bincount(pred_index[pred_fg], minlength=n_pred)
    union = gt_area[:, None] + pred_area[None, :] - intersection
    iou = intersection / np.maximum(union, 1)

    pairs = []
    matched_gt = set()
    matched_pred = set()
    for gi, pi in zip(*np.nonzero(iou > MATCH_IOU)):
        pairs.append((int(gt_ids[gi]), int(pred_ids[pi]), float(iou[gi, pi])))
        matched_gt.add(gi)
        matched_pred.add(pi)

    return Matching(
        pairs,
        [int(g) for i, g in enumerate(gt_ids) if i not in matched_gt],
        [int(p) for i, p in enumerate(pred_ids) if i not in matched_pred],
    )


def pq_metrics(matching: Matching) -> Tuple[float, float, float]:
    return PanopticCounts.from_matching(matching).quality()


@dataclass
class MetricReport:
    fid: Optional[float]
    ssim: Optional[float]
    dq: Optional[float] = None
    sq: Optional[float] = None
    pq: Optional[float] = None
    count: int = 0
    extractor: str = "random"
    organs: Dict[str, "MetricReport"] = field(default_factory=OrderedDict)

    def to_dict(self) -> Dict[str, Any]:
        out = {
            "fid": self.fid,
            "ssim": self.ssim,
            "dq": self.dq,
            "sq": self.sq,
            "pq": self.pq,
            "count": self.count,
            "extractor": self.extractor,
        }
        if self.organs:
            out["organs"] = {name: sub.to_dict() for name, sub in self.organs.items()}
        return out

    def csv_rows(self) -> List[Dict[str, Any]]:
        """One flat row for the whole set, then one per organ."""
        columns = ("fid", "ssim", "dq", "sq", "pq", "count")
        rows = [{"organ": "all", **{c: getattr(self, c) for c in columns}}]
        for name, sub in self.organs.items():
            rows.append({"organ": name, **{c: getattr(sub, c) for c in columns}})
        return rows


def _to_unit(image: np.ndarray) -> np.ndarray:
    return (np.asarray(image, dtype=np.float64) + 1.0) / 2.0


def _score_subset(
    indices: Sequence[int],
    real_images: Sequence[np.ndarray],
    fake_images: Sequence[np.ndarray],
    ssim_scores: Sequence[float],
    counts: Optional[Sequence[PanopticCounts]],
    extractor: FeatureExtractor,
    extractor_name: str,
    label: str,
) -> MetricReport:
    if len(indices) >= 2:
        fid_value = fid(
            embed_set([real_images[i] for i in indices], extractor),
            embed_set([fake_images[i] for i in indices], extractor),
        )
    else:
        logger.warning(f"FID for '{label}' skipped: {len(indices)} image(s), need at least 2")
        fid_value = None

    report = MetricReport(
        fid=fid_value,
        ssim=float(np.mean([ssim_scores[i] for i in indices])),
        count=len(indices),
        extractor=extractor_name,
    )
    if counts is not None:
        pooled = PanopticCounts()
        for i in indices:
            pooled = pooled + counts[i]
        report.dq, report.sq, report.pq = pooled.quality()
    return report


def evaluate_sets(
    real_images: Sequence[np.ndarray],
    fake_images: Sequence[np.ndarray],
    gt_masks: Sequence[np.ndarray],
    pred_masks: Optional[Sequence[np.ndarray]] = None,
    organ_tags: Optional[Sequence[str]] = None,
    extractor: Optional[FeatureExtractor] = None,
    extractor_name: str = "random",
    data_range: float = 1.0,
    workers: int = 4,
) -> MetricReport:
    """Score aligned real/fake images in [-1, 1].

    DQ/SQ/PQ pool TP/FP/FN over the set and stay None without predicted masks.
    """
    n = len(real_images)
    if n == 0:
        raise ValueError("evaluation needs at least one image pair")
    if len(fake_images) != n or len(gt_masks) != n:
        raise ValueError(
            f"unaligned inputs: {n} real, {len(fake_images)} fake, {len(gt_masks)} masks"
        )
    if pred_masks is not None and len(pred_masks) != n:
        raise ValueError(f"{len(pred_masks)} predicted masks for {n} images")
    if organ_tags is not None and len(organ_tags) != n:
        raise ValueError(f"{len(organ_tags)} organ tags for {n} images")

    if extractor is None:
        extractor = build_extractor(extractor_name)

    logger.info(f"Evaluating {n} image pairs")

    def _ssim_at(i: int) -> float:
        return ssim(_to_unit(real_images[i]), _to_unit(fake_images[i]), data_range)

    def _counts_at(i: int) -> PanopticCounts:
        return PanopticCounts.from_matching(match_instances(gt_masks[i], pred_masks[i]))

    # map() yields in submission order, so reductions are order-stable.
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        ssim_scores = list(executor.map(_ssim_at, range(n)))
        counts = list(executor.map(_counts_at, range(n))) if pred_masks is not None else None

    report = _score_subset(
        range(n), real_images, fake_images, ssim_scores, counts, extractor, extractor_name, "all"
    )

    if organ_tags is not None:
        groups: Dict[str, List[int]] = OrderedDict()
        for i, tag in enumerate(organ_tags):
            groups.setdefault(tag, []).append(i)
        for tag, indices in groups.items():
            report.organs[tag] = _score_subset(
                indices, real_images, fake_images, ssim_scores, counts, extractor, extractor_name, tag
            )

    logger.info(
        f"Evaluation complete: FID={report.fid}, SSIM={report.ssim:.4f}, PQ={report.pq}"
    )
    return report
