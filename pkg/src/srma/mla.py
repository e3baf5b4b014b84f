"""Style elimination and multi-level alignment against frozen neutral features.

The three alignment terms compare the segmentation branches (original image
branch I and rearranged branch SR) against a single frozen domain-neutral
feature map per layer. Gradients never flow into the neutral map; callers
produce it under no_grad.
"""

from dataclasses import dataclass

import torch

from .stats import EPS_STD, gap, present_categories, region_ratio, sap

DEFAULT_LAMBDA_MLA = (0.4, 0.6, 0.8, 1.0)


@dataclass
class LayerAlignment:
    a_global: torch.Tensor
    a_regional: torch.Tensor
    a_local: torch.Tensor

    def total(self) -> torch.Tensor:
        return self.a_global + self.a_regional + self.a_local


@dataclass
class AlignmentBreakdown:
    """Per-layer global/regional/local terms and their weighted sum."""

    layers: list[LayerAlignment]
    lambda_mla: tuple
    total: torch.Tensor

    def to_dict(self) -> dict:
        def scalar(x):
            return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

        return {
            "lambda_mla": list(self.lambda_mla),
            "layers": [
                {
                    "a_global": scalar(l.a_global),
                    "a_regional": scalar(l.a_regional),
                    "a_local": scalar(l.a_local),
                }
                for l in self.layers
            ],
            "total": scalar(self.total),
        }


def zero_breakdown(n_layers: int = 4, lambda_mla=DEFAULT_LAMBDA_MLA) -> AlignmentBreakdown:
    z = torch.zeros(())
    layers = [LayerAlignment(z, z, z) for _ in range(n_layers)]
    return AlignmentBreakdown(layers=layers, lambda_mla=tuple(lambda_mla), total=z)


def style_eliminate(f: torch.Tensor) -> torch.Tensor:
    """Parameter-free instance normalization over the spatial dimensions.

    Works on (D, H, W) and on batched (B, D, H, W) inputs; normalization is
    always per channel over the trailing two dimensions.
    """
    mu = f.mean(dim=(-2, -1), keepdim=True)
    sd = f.var(dim=(-2, -1), unbiased=False, keepdim=True).sqrt().clamp_min(EPS_STD)
    return (f - mu) / sd


def _branches(f_I: torch.Tensor, f_SR) -> list[torch.Tensor]:
    return [f_I] if f_SR is None else [f_I, f_SR]


def global_alignment(f_I: torch.Tensor, f_SR, f_N: torch.Tensor) -> torch.Tensor:
    """Squared distance between branch GAP centers and the neutral center, per channel."""
    d = f_N.shape[0]
    g_n = gap(f_N)
    total = torch.zeros((), dtype=f_N.dtype)
    for f_k in _branches(f_I, f_SR):
        total = total + ((gap(f_k) - g_n) ** 2).sum() / d
    return total


def regional_alignment(
    f_I: torch.Tensor, f_SR, f_N: torch.Tensor, gt_l: torch.Tensor
) -> torch.Tensor:
    """Pixel-ratio-weighted squared distances between semantic region centers."""
    d = f_N.shape[0]
    total = torch.zeros((), dtype=f_N.dtype)
    for c in present_categories(gt_l):
        w_c = region_ratio(gt_l, c)
        center_n = sap(f_N, gt_l, c)
        for f_k in _branches(f_I, f_SR):
            total = total + w_c * ((sap(f_k, gt_l, c) - center_n) ** 2).sum() / d
    return total


def local_alignment(f_I: torch.Tensor, f_SR, f_N: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel squared distance to the neutral features, per channel."""
    d, h, w = f_N.shape
    total = torch.zeros((), dtype=f_N.dtype)
    for f_k in _branches(f_I, f_SR):
        total = total + ((f_k - f_N) ** 2).sum() / (d * h * w)
    return total


def mla_loss(
    per_layer_features,
    lambda_mla=DEFAULT_LAMBDA_MLA,
    use_global: bool = True,
    use_regional: bool = True,
    use_local: bool = True,
) -> AlignmentBreakdown:
    """Combine per-layer alignments into the weighted multi-level loss.

    per_layer_features: sequence of (f_I, f_SR, f_N, gt_l) tuples in layer
    order, one per deep layer; f_SR may be None when no rearranged branch
    exists. The use_* switches zero out individual levels for ablations.
    """
    if len(per_layer_features) != len(lambda_mla):
        raise ValueError("one lambda per layer required")
    zero = torch.zeros(())
    layers = []
    total = torch.zeros(())
    for lam, (f_I, f_SR, f_N, gt_l) in zip(lambda_mla, per_layer_features):
        a_g = global_alignment(f_I, f_SR, f_N) if use_global else zero
        a_r = regional_alignment(f_I, f_SR, f_N, gt_l) if use_regional else zero
        a_l = local_alignment(f_I, f_SR, f_N) if use_local else zero
        layer = LayerAlignment(a_g, a_r, a_l)
        layers.append(layer)
        total = total + lam * layer.total()
    return AlignmentBreakdown(layers=layers, lambda_mla=tuple(lambda_mla), total=total)
