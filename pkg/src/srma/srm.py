"""Semantic rearrangement of shallow-feature region styles.

Each semantic region's (mean, std) style is replaced by a Dirichlet-weighted
convex combination of the styles of all regions present in the sample, and
transferred onto the region's pixels by adaptive instance normalization.
Content (the standardized per-channel pattern) is preserved.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .stats import RegionStats, present_categories, region_moments, split_by_semantic

DEFAULT_ALPHA = 2.0 ** -6


@dataclass
class MixWeights:
    """One Dirichlet draw per target category, over the present categories."""

    present: list[int]
    weights: dict[int, np.ndarray] = field(default_factory=dict)
    alpha: float = DEFAULT_ALPHA


def sample_mix_weights(
    rng: np.random.Generator, present: list[int], alpha: float = DEFAULT_ALPHA
) -> MixWeights:
    """Draw independent Dirichlet(alpha, ..., alpha) weights for each target category.

    The simplex dimension is the number of categories present in the sample;
    absent categories contribute no style and receive no weight.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    k = len(present)
    if k < 1:
        raise ValueError("at least one category must be present")
    weights = {c: rng.dirichlet(np.full(k, alpha)) for c in sorted(present)}
    return MixWeights(present=sorted(present), weights=weights, alpha=alpha)


def synthesize_distribution(
    stats: list[RegionStats], w, category: int = -1
) -> RegionStats:
    """Convex combination of region styles: mean = sum w_i mean_i, std = sum w_i std_i."""
    if len(stats) != len(w):
        raise ValueError("weight vector length must match number of stats")
    wt = [float(x) for x in w]
    mean = sum(wi * s.mean for wi, s in zip(wt, stats))
    std = sum(wi * s.std for wi, s in zip(wt, stats))
    count = sum(s.pixel_count for s in stats)
    return RegionStats(category=category, mean=mean, std=std, pixel_count=count)


def adain_transfer(
    region_pixels: torch.Tensor, src: RegionStats, dst: RegionStats
) -> torch.Tensor:
    """Re-style (N, D) pixel vectors from src moments to dst moments per channel."""
    return dst.std * (region_pixels - src.mean) / src.std + dst.mean


def rearrange(
    f_s: torch.Tensor,
    gt_s: torch.Tensor,
    rng: np.random.Generator,
    alpha: float = DEFAULT_ALPHA,
    with_report: bool = False,
):
    """Return a copy of the shallow feature map with each region re-styled.

    Ignore-labeled positions are copied unchanged. Deterministic given the
    rng state. With with_report=True also returns a per-region list of
    (original stats, weights, synthesized stats, achieved stats) entries.
    """
    present = present_categories(gt_s)
    out = f_s.clone()
    if not present:
        return (out, []) if with_report else out

    stats = [region_moments(f_s, gt_s, c) for c in present]
    mix = sample_mix_weights(rng, present, alpha)
    out_view = out.permute(1, 2, 0)
    report = []
    for src, c in zip(stats, present):
        syn = synthesize_distribution(stats, mix.weights[c], category=c)
        mask = gt_s == c
        pixels = split_by_semantic(f_s, gt_s, c)
        styled = adain_transfer(pixels, src, syn)
        out_view[mask] = styled
        if with_report:
            achieved = region_moments(out, gt_s, c)
            report.append(
                {
                    "category": c,
                    "pixel_count": src.pixel_count,
                    "original_mean": src.mean.tolist(),
                    "original_std": src.std.tolist(),
                    "weights": mix.weights[c].tolist(),
                    "weight_categories": present,
                    "synthesized_mean": syn.mean.tolist(),
                    "synthesized_std": syn.std.tolist(),
                    "achieved_mean": achieved.mean.tolist(),
                    "achieved_std": achieved.std.tolist(),
                }
            )
    return (out, report) if with_report else out
