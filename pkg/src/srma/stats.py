"""Label-conditioned and global feature statistics.

Conventions used throughout the package:
  * a feature map is a torch tensor of shape (D, H, W)
  * a label map is an integer torch tensor of shape (H, W) with values in
    {0..C-1} or IGNORE
  * region statistics are channel-wise (mean, std) pairs over the pixels of
    one semantic region
"""

from dataclasses import dataclass

import torch

IGNORE = 255
EPS_STD = 1e-5


class AbsentCategoryError(ValueError):
    """Raised when a statistic is requested for a category with no pixels."""


@dataclass
class RegionStats:
    """Channel-wise first/second moments of one semantic region."""

    category: int
    mean: torch.Tensor  # (D,)
    std: torch.Tensor  # (D,), floored at EPS_STD
    pixel_count: int


def resize_labels(labels: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Nearest-neighbor resize of a label map with center-of-cell sampling.

    Each target cell (i, j) reads the source cell at
    floor((i + 0.5) * src/target). Ignore labels propagate unchanged.
    """
    if target_h < 1 or target_w < 1:
        raise ValueError("target size must be positive")
    h, w = labels.shape
    ys = torch.floor((torch.arange(target_h, dtype=torch.float64) + 0.5) * (h / target_h))
    xs = torch.floor((torch.arange(target_w, dtype=torch.float64) + 0.5) * (w / target_w))
    ys = ys.long().clamp_(0, h - 1)
    xs = xs.long().clamp_(0, w - 1)
    return labels[ys][:, xs]


def split_by_semantic(f: torch.Tensor, gt: torch.Tensor, c: int) -> torch.Tensor:
    """Pixel feature vectors of region c, shape (N, D), in raster order.

    N == 0 when the category is absent; the caller decides how to handle it.
    """
    if gt.shape != f.shape[1:]:
        raise ValueError(f"label shape {tuple(gt.shape)} != feature shape {tuple(f.shape[1:])}")
    mask = gt == c
    return f.permute(1, 2, 0)[mask]


def present_categories(gt: torch.Tensor) -> list[int]:
    """Sorted non-ignore categories occurring in the label map."""
    vals = torch.unique(gt)
    return [int(v) for v in vals if int(v) != IGNORE]


def region_moments(f: torch.Tensor, gt: torch.Tensor, c: int) -> RegionStats:
    """Channel-wise mean and population std over the pixels labeled c."""
    pixels = split_by_semantic(f, gt, c)
    if pixels.shape[0] == 0:
        raise AbsentCategoryError(f"category {c} has no pixels")
    mean = pixels.mean(dim=0)
    std = pixels.var(dim=0, unbiased=False).sqrt().clamp_min(EPS_STD)
    return RegionStats(category=c, mean=mean, std=std, pixel_count=int(pixels.shape[0]))


def gap(f: torch.Tensor) -> torch.Tensor:
    """Global average pooling: per-channel mean over all spatial positions."""
    return f.mean(dim=(1, 2))


def sap(f: torch.Tensor, gt: torch.Tensor, c: int) -> torch.Tensor:
    """Semantic average pooling: per-channel mean over the pixels labeled c."""
    pixels = split_by_semantic(f, gt, c)
    if pixels.shape[0] == 0:
        raise AbsentCategoryError(f"category {c} has no pixels")
    return pixels.mean(dim=0)


def region_ratio(gt: torch.Tensor, c: int) -> float:
    """Fraction of all H*W cells labeled c (ignore cells count in the denominator)."""
    return float((gt == c).sum()) / gt.numel()
