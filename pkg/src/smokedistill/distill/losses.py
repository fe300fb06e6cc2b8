"""Four-term distillation loss for a three-headed student.

    total = l0_w * bce(aux_seg) + l1_w * bce(final_seg)
          + l2_w * weighted_boundary_bce(boundary) + l3_w * bas(final_seg | boundary > t)

All components are pixel-mean normalised and reported unweighted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import torch
import torch.nn.functional as F

EPS = 1e-7
_LOG_EPS = math.log(EPS)


@dataclass(frozen=True)
class LossConfig:
    lambda0: float = 0.4
    lambda1: float = 20.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    t: float = 0.8
    use_l0: bool = True
    use_l1: bool = True
    use_l2: bool = True
    use_l3: bool = True

    def __post_init__(self) -> None:
        for name in ("lambda0", "lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.t < 1.0:
            raise ValueError(f"t must be in (0, 1), got {self.t}")

    @property
    def weights(self) -> tuple[float, float, float, float]:
        return (self.lambda0, self.lambda1, self.lambda2, self.lambda3)

    @property
    def enabled(self) -> tuple[bool, bool, bool, bool]:
        return (self.use_l0, self.use_l1, self.use_l2, self.use_l3)

    def without(self, *terms: int) -> "LossConfig":
        """Copy with the given term indices (0..3) switched off."""
        return replace(self, **{f"use_l{i}": False for i in terms})


# Rows of the loss-term ablation grid: omitted term indices, full loss last.
ABLATION_GRID: tuple[tuple[int, ...], ...] = ((0,), (1,), (2,), (3,), (2, 3), ())


class StudentOutputs(NamedTuple):
    """Logit maps, each (N, 1, H, W) at input resolution."""

    aux_seg_logits: torch.Tensor
    final_seg_logits: torch.Tensor
    boundary_logits: torch.Tensor


class LossResult(NamedTuple):
    total: torch.Tensor
    components: tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]


def _as_float(target: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if target.shape != like.shape:
        raise ValueError(f"shape mismatch: logits {tuple(like.shape)} vs target {tuple(target.shape)}")
    return target.to(dtype=like.dtype)


def bce_map(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-pixel BCE with log-probabilities clamped at log(EPS)."""
    log_p = F.logsigmoid(logits).clamp(min=_LOG_EPS)
    log_q = F.logsigmoid(-logits).clamp(min=_LOG_EPS)
    return -(target * log_p + (1.0 - target) * log_q)


def seg_bce(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    target = _as_float(target, logits)
    return bce_map(logits, target).mean()


def weighted_boundary_ce(boundary_logits: torch.Tensor, edge_target: torch.Tensor) -> torch.Tensor:
    """Class-balanced BCE: edge pixels weighted by the non-edge fraction and vice versa.

    The balance is computed over the whole batch. A constant target (no edges,
    or all edges) falls back to plain BCE.
    """
    target = _as_float(edge_target, boundary_logits)
    n = target.numel()
    n_edge = target.sum()
    if n_edge.item() == 0 or n_edge.item() == n:
        return seg_bce(boundary_logits, target)
    beta = (n - n_edge) / n
    weight = torch.where(target > 0.5, beta, 1.0 - beta)
    return (weight * bce_map(boundary_logits, target)).mean()


def bas_loss(final_seg_logits: torch.Tensor, target: torch.Tensor, boundary_logits: torch.Tensor,
             t: float = 0.8) -> torch.Tensor:
    """BCE of the final segmentation restricted to pixels where sigmoid(boundary) > t.

    The gate is a hard selection without gradient; an empty gate gives 0.
    """
    target = _as_float(target, final_seg_logits)
    if boundary_logits.shape != final_seg_logits.shape:
        raise ValueError("boundary and segmentation logits differ in shape")
    gate = torch.sigmoid(boundary_logits.detach()) > t
    if not gate.any():
        return final_seg_logits.sum() * 0.0
    return bce_map(final_seg_logits[gate], target[gate]).mean()


def total_loss(outputs: StudentOutputs, target: torch.Tensor, edges: torch.Tensor,
               cfg: LossConfig = LossConfig()) -> LossResult:
    aux, final, boundary = outputs
    zero = final.new_zeros(())
    l0 = seg_bce(aux, target) if cfg.use_l0 else zero
    l1 = seg_bce(final, target) if cfg.use_l1 else zero
    l2 = weighted_boundary_ce(boundary, edges) if cfg.use_l2 else zero
    l3 = bas_loss(final, target, boundary, cfg.t) if cfg.use_l3 else zero
    components = (l0, l1, l2, l3)
    return LossResult(zero + combine(components, cfg), components)


def combine(components, cfg: LossConfig):
    """Weighted sum of (l0, l1, l2, l3); disabled terms contribute nothing."""
    total = 0.0
    for w, on, c in zip(cfg.weights, cfg.enabled, components):
        if on:
            total = total + w * c
    return total
