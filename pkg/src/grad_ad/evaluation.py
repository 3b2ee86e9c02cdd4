"""Dense scoring, multi-level fusion and AU-ROC evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .detector import LevelConfig, PatchDetector, output_size
from .patchset import make_coordinate_map, resize

FUSIONS = {"mean": np.mean, "max": np.max, "sum": np.sum}


@dataclass
class ScoreMap:
    values: np.ndarray  # (H', W') raw logits
    level: int
    source_size: int


@dataclass
class DetectionResult:
    image_score: float
    pixel_map: np.ndarray
    per_level_scores: dict[int, float] = field(default_factory=dict)


@torch.no_grad()
def score_image(detectors: dict[int, tuple[PatchDetector, LevelConfig]], image: torch.Tensor,
                device: str | torch.device = "cpu") -> dict[int, ScoreMap]:
    """Apply each detector fully convolutionally to ``image`` (3, H, W) in [-1, 1].

    The image is resized to each level's input size and concatenated with a
    coordinate map built at that size.
    """
    if not detectors:
        raise ValueError("no detectors given")
    maps = {}
    for level, (det, lc) in sorted(detectors.items()):
        x = resize(image, lc.input_size)
        x = torch.cat([x, make_coordinate_map(lc.input_size, lc.input_size)])
        logits = det(x[None].to(device))[0, 0].cpu().numpy().astype(np.float64)
        expected = output_size(lc.input_size)
        assert logits.shape == (expected, expected), logits.shape
        maps[level] = ScoreMap(logits, level, lc.input_size)
    return maps


def _values(maps) -> list[np.ndarray]:
    if isinstance(maps, dict):
        maps = [maps[k] for k in sorted(maps)]
    vals = [m.values if isinstance(m, ScoreMap) else np.asarray(m, dtype=np.float64) for m in maps]
    if not vals:
        raise ValueError("empty score map set")
    return vals


def per_level_max(maps) -> list[float]:
    return [float(v.max()) for v in _values(maps)]


def image_score(maps, fusion: str = "mean") -> float:
    """Fuse the per-level maxima of the score maps into one image score."""
    return float(FUSIONS[fusion](per_level_max(maps)))


def gaussian_kernel(size: int = 16, sigma: float = 4.0) -> np.ndarray:
    """Normalised 1-D Gaussian of even or odd length, centred between the middle taps."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur(img: np.ndarray, size: int = 16, sigma: float = 4.0) -> np.ndarray:
    """Separable Gaussian blur with reflect padding; output has the input's shape."""
    k = torch.from_numpy(gaussian_kernel(size, sigma))
    lo, hi = (size - 1) // 2, size // 2
    x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64))[None, None]
    x = F.pad(x, (lo, hi, lo, hi), mode="reflect")
    x = F.conv2d(x, k.view(1, 1, 1, -1))
    x = F.conv2d(x, k.view(1, 1, -1, 1))
    return x[0, 0].numpy()


def upsample(values: np.ndarray, size: int = 256) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(values, dtype=np.float64))[None, None]
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)[0, 0].numpy()


def pixel_map(maps, size: int = 256, kernel: int = 16, sigma: float = 4.0, fusion: str = "mean") -> np.ndarray:
    """Upsample each level's map to ``size`` x ``size``, fuse across levels, then blur."""
    stack = np.stack([upsample(v, size) for v in _values(maps)])
    return blur(FUSIONS[fusion](stack, axis=0), kernel, sigma)


def detect(maps, size: int = 256, kernel: int = 16, sigma: float = 4.0, fusion: str = "mean") -> DetectionResult:
    levels = sorted(maps) if isinstance(maps, dict) else list(range(len(maps)))
    return DetectionResult(image_score(maps, fusion), pixel_map(maps, size, kernel, sigma, fusion),
                           dict(zip(levels, per_level_max(maps))))


def auroc(scores_normal, scores_anomalous) -> float:
    """Area under the ROC curve by a descending threshold sweep.

    Tied scores move the curve diagonally, which credits each tied
    (normal, anomalous) pair with one half -- the Mann-Whitney statistic.
    """
    neg = np.asarray(scores_normal, dtype=np.float64).ravel()
    pos = np.asarray(scores_anomalous, dtype=np.float64).ravel()
    if len(neg) == 0 or len(pos) == 0:
        raise ValueError("AU-ROC needs at least one score in each class")
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    order = np.argsort(-scores, kind="mergesort")
    scores, labels = scores[order], labels[order]
    # last index of every run of equal scores
    ends = np.r_[np.nonzero(np.diff(scores))[0], len(scores) - 1]
    tp = np.r_[0.0, np.cumsum(labels)[ends]]
    fp = np.r_[0.0, np.cumsum(1 - labels)[ends]]
    area = np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1]) / 2)
    return float(area / (len(pos) * len(neg)))


def _stats(values: list[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "min": float(arr.min()),
            "max": float(arr.max())}


def build_report(records, size: int = 256, kernel: int = 16, sigma: float = 4.0,
                 fusion: str = "mean") -> dict:
    """Image and pixel AU-ROC from ``(defect, maps, mask)`` records.

    ``mask`` is a boolean array already at ``size`` x ``size`` (None for good
    images).  Besides the overall image AU-ROC the report holds one AU-ROC
    per defect type against the good images.
    """
    scores: dict[str, list[float]] = {}
    level_max: dict[int, list[float]] = {}
    pix_scores, pix_labels = [], []
    for defect, maps, mask in records:
        res = detect(maps, size, kernel, sigma, fusion)
        scores.setdefault(defect, []).append(res.image_score)
        for lv, v in res.per_level_scores.items():
            level_max.setdefault(int(lv), []).append(v)
        pix_scores.append(res.pixel_map.ravel())
        pix_labels.append(np.zeros(size * size, bool) if mask is None else np.asarray(mask, bool).ravel())
    good = scores.get("good", [])
    bad = [s for d, v in scores.items() if d != "good" for s in v]
    px = np.concatenate(pix_scores)
    lab = np.concatenate(pix_labels)
    return {
        "image_auroc": auroc(good, bad) if good and bad else None,
        "pixel_auroc": auroc(px[~lab], px[lab]) if lab.any() and (~lab).any() else None,
        "per_defect_image_auroc": {d: auroc(good, v) for d, v in sorted(scores.items())
                                   if d != "good" and good},
        "per_level_max_stats": {str(lv): _stats(v) for lv, v in sorted(level_max.items())},
        "n_images": {d: len(v) for d, v in sorted(scores.items())},
    }


def evaluate_dataset(detectors: dict[int, tuple[PatchDetector, LevelConfig]], root, category: str,
                     size: int = 256, kernel: int = 16, sigma: float = 4.0, fusion: str = "mean",
                     device: str | torch.device = "cpu") -> dict:
    """Score every test image of an MVTec-layout category and report image/pixel AU-ROC."""
    from .data import load_image, load_mask, test_items

    records = []
    for item in test_items(root, category):
        maps = score_image(detectors, load_image(item.path), device)
        mask = load_mask(item.mask_path, size) if item.mask_path else None
        records.append((item.defect, maps, mask))
    return build_report(records, size, kernel, sigma, fusion)
