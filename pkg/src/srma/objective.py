"""Task loss, prediction-consistency loss, and the overall training objective.

Probability maps are (C, H, W) tensors, softmax-normalized per pixel. All
divergences use natural logs; probabilities are clamped at 1e-12 inside logs.
"""

from dataclasses import dataclass

import torch

from .mla import AlignmentBreakdown
from .stats import IGNORE

PROB_CLAMP = 1e-12
DEFAULT_LAMBDA_PC = 10.0


class AllIgnoredError(ValueError):
    """Raised when a task loss is requested for a fully ignored label map."""


@dataclass
class LossBreakdown:
    task_I: float
    task_SR: float
    mla_total: float  # already lambda-weighted
    pc: float
    lambda_pc: float
    total: float

    def to_dict(self) -> dict:
        return {
            "task_I": float(self.task_I),
            "task_SR": float(self.task_SR),
            "mla_total": float(self.mla_total),
            "pc": float(self.pc),
            "lambda_pc": float(self.lambda_pc),
            "total": float(self.total),
        }


def task_loss(p: torch.Tensor, gt: torch.Tensor, ignore: int = IGNORE) -> torch.Tensor:
    """Mean negative log-probability of the true class over non-ignore pixels."""
    mask = gt != ignore
    if not bool(mask.any()):
        raise AllIgnoredError("no valid pixels in label map")
    probs = p.permute(1, 2, 0)[mask]  # (N, C)
    idx = gt[mask].long().unsqueeze(1)
    chosen = probs.gather(1, idx).squeeze(1)
    return -(chosen.clamp_min(PROB_CLAMP).log()).mean()


def js_consistency(p_I: torch.Tensor, p_SR: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel Jensen-Shannon divergence between two probability maps."""
    if p_I.shape != p_SR.shape:
        raise ValueError("probability maps must share a shape")
    p_js = 0.5 * (p_I + p_SR)
    log_js = p_js.clamp_min(PROB_CLAMP).log()

    def kl(p):
        return (p * (p.clamp_min(PROB_CLAMP).log() - log_js)).sum(dim=0)

    return (0.5 * (kl(p_I) + kl(p_SR))).mean()


def total_loss(
    task_I,
    task_SR,
    mla: AlignmentBreakdown,
    pc,
    lambda_pc: float = DEFAULT_LAMBDA_PC,
):
    """Overall objective: 0.5*(task_I + task_SR) + weighted MLA + lambda_pc * PC.

    Returns (total tensor, LossBreakdown of floats) so the tensor can drive
    backprop while the breakdown goes to the metrics log.
    """
    total = 0.5 * (task_I + task_SR) + mla.total + lambda_pc * pc

    def scalar(x):
        return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

    breakdown = LossBreakdown(
        task_I=scalar(task_I),
        task_SR=scalar(task_SR),
        mla_total=scalar(mla.total),
        pc=scalar(pc),
        lambda_pc=float(lambda_pc),
        total=scalar(total),
    )
    return total, breakdown
