"""Training losses for displacement estimation.

Field-level losses accept ``[2, H, W]`` (returning a scalar tensor) or
``[B, 2, H, W]`` (returning per-sample values ``[B]``); batch reduction is the
caller's concern. Sums follow the definitions exactly: smoothness and ceiling
are sums over pixels, not means.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .deformation import warp


def huber_loss(pred: torch.Tensor, target: torch.Tensor, cutoff: float = 3.0) -> torch.Tensor:
    """Per-component robust loss summed over the last axis.

    Each component contributes ``|d|`` when ``|d| >= cutoff`` and
    ``(d**2 + cutoff**2) / (2 * cutoff)`` otherwise; the two branches meet with
    matching value and slope at ``|d| = cutoff``.
    """
    if not cutoff > 0:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype, device=pred.device)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = pred - target
    mag = diff.abs()
    per_component = torch.where(mag >= cutoff, mag, (diff * diff + cutoff * cutoff) / (2.0 * cutoff))
    return per_component.sum(dim=-1)


def _per_sample(disp: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if disp.dim() == 3:
        return disp.unsqueeze(0), True
    if disp.dim() == 4:
        return disp, False
    raise ValueError(f"field must be [2,H,W] or [B,2,H,W], got {tuple(disp.shape)}")


def smoothness_loss(disp: torch.Tensor) -> torch.Tensor:
    """Sum of squared forward differences of the field along rows and columns.

    Every defined difference term contributes: vertical differences for all
    rows past the first, horizontal for all columns past the first.
    """
    d, squeeze = _per_sample(disp)
    dv = d[:, :, 1:, :] - d[:, :, :-1, :]
    dh = d[:, :, :, 1:] - d[:, :, :, :-1]
    out = (dv * dv).sum(dim=(1, 2, 3)) + (dh * dh).sum(dim=(1, 2, 3))
    return out.squeeze(0) if squeeze else out


def warp_consistency_loss(
    observed: torch.Tensor, generated: torch.Tensor, disp: torch.Tensor
) -> torch.Tensor:
    """Mean squared error between ``warp(generated, disp)`` and ``observed``."""
    obs, obs_sq = (observed.unsqueeze(0), True) if observed.dim() == 3 else (observed, False)
    if observed.dim() not in (3, 4):
        raise ValueError(f"observed must be [C,H,W] or [B,C,H,W], got {tuple(observed.shape)}")
    warped = warp(generated, disp)
    if warped.dim() == 3:
        warped = warped.unsqueeze(0)
    if warped.shape != obs.shape:
        raise ValueError(f"shape mismatch {tuple(warped.shape)} vs {tuple(obs.shape)}")
    out = ((warped - obs) ** 2).mean(dim=(1, 2, 3))
    return out.squeeze(0) if obs_sq else out


def ceiling_loss(disp: torch.Tensor, max_norm_px: float | torch.Tensor) -> torch.Tensor:
    """Hinge on the per-pixel displacement norm: sum of ``max(0, |d| - ceiling)``.

    ``max_norm_px`` is a scalar or a per-sample tensor ``[B]`` of non-negative
    pixel ceilings (a case's known shift magnitude).
    """
    d, squeeze = _per_sample(disp)
    ceil = torch.as_tensor(max_norm_px, dtype=d.dtype, device=d.device)
    if (ceil < 0).any():
        raise ValueError("max_norm_px must be non-negative")
    if ceil.dim() == 0:
        ceil = ceil.expand(d.shape[0])
    elif ceil.shape != (d.shape[0],):
        raise ValueError(f"max_norm_px must be scalar or [B], got {tuple(ceil.shape)}")
    sumsq = (d * d).sum(dim=1)
    positive = sumsq > 0
    # sqrt(0) has an unbounded gradient; route zeros around it
    norm = torch.where(positive, torch.where(positive, sumsq, torch.ones_like(sumsq)).sqrt(), sumsq)
    excess = torch.clamp(norm - ceil.view(-1, 1, 1), min=0.0)
    out = excess.sum(dim=(1, 2))
    return out.squeeze(0) if squeeze else out


def ramp_weight(step: int, total_steps: int, start: float = 1.0, end: float = 10.0) -> float:
    """Linear schedule from ``start`` at step 0 to ``end`` at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    frac = min(step, total_steps) / total_steps
    return start + (end - start) * frac


@dataclass
class LossWeights:
    huber_cutoff: float = 3.0
    smooth_weight: float = 1.0
    ceiling_weight: float = 1.0
    ramp_start: float = 1.0
    ramp_end: float = 10.0


def combine_losses(
    huber: torch.Tensor,
    smooth: torch.Tensor,
    consistency: torch.Tensor,
    ceiling: torch.Tensor,
    weights: LossWeights,
    step: int,
    total_steps: int,
) -> tuple[torch.Tensor, float]:
    """Total objective; unsupervised terms are scaled by the ramped weight."""
    u = ramp_weight(step, total_steps, weights.ramp_start, weights.ramp_end)
    total = huber + weights.smooth_weight * smooth + u * (
        consistency + weights.ceiling_weight * ceiling
    )
    return total, u
