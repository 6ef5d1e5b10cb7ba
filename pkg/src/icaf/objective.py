"""Loss functions and pseudo-label construction.

Masked cross-entropy divides by H*W (all pixels), not by the number of
confident pixels, unless ``normalize_by_valid`` is set.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F

from .segnet import feature_dropout


@dataclass
class LossConfig:
    tau: float = 0.95
    lam: float = 0.5
    strong_coef: float = 0.5
    fa_coef: float = 0.5
    strong_reduction: str = "mean"  # "mean" over Q, or "sum"
    normalize_by_valid: bool = False

    def validate(self):
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must be in [0, 1]")
        if self.lam < 0 or self.strong_coef < 0 or self.fa_coef < 0:
            raise ValueError("loss coefficients must be non-negative")
        if self.strong_reduction not in ("mean", "sum"):
            raise ValueError("strong_reduction must be 'mean' or 'sum'")


@dataclass
class PseudoLabel:
    hard: torch.Tensor  # (B, H, W) long
    confidence: torch.Tensor  # (B, H, W)
    valid: torch.Tensor  # (B, H, W) bool

    @property
    def valid_fraction(self) -> float:
        return self.valid.float().mean().item()


def pseudo_label(logits: torch.Tensor, tau: float) -> PseudoLabel:
    """Detached argmax labels with their softmax confidence and the ``confidence >= tau`` mask."""
    with torch.no_grad():
        probs = torch.softmax(logits.detach(), dim=1)
        # torch.max returns the first maximal index, i.e. ties go to the lowest class
        conf, hard = probs.max(dim=1)
    return PseudoLabel(hard, conf, conf >= tau)


def _check_targets(logits, target):
    if logits.shape[0] != target.shape[0] or logits.shape[-2:] != target.shape[-2:]:
        raise ValueError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} disagree")
    if target.numel() and (int(target.max()) >= logits.shape[1] or int(target.min()) < 0):
        raise ValueError(f"target class outside 0..{logits.shape[1] - 1}")


def masked_ce(logits: torch.Tensor, target: torch.Tensor, valid: torch.Tensor,
              normalize_by_valid: bool = False) -> torch.Tensor:
    """Batch mean of (1/HW) * sum_j valid_j * CE_j."""
    _check_targets(logits, target)
    ce = F.cross_entropy(logits, target, reduction="none")
    v = valid.to(ce.dtype)
    per_image = (ce * v).flatten(1).sum(1)
    if normalize_by_valid:
        per_image = per_image / v.flatten(1).sum(1).clamp_min(1.0)
    else:
        per_image = per_image / (ce.shape[-2] * ce.shape[-1])
    return per_image.mean()


def loss_group_baseline(p_w1: torch.Tensor, p_s2: torch.Tensor, p_s3: torch.Tensor, tau: float) -> torch.Tensor:
    """Two strong views supervised by the thresholded pseudo-label of one weak view."""
    if not (p_w1.shape == p_s2.shape == p_s3.shape):
        raise ValueError("all three logit tensors must share one shape")
    pl = pseudo_label(p_w1, tau)
    return masked_ce(p_s2, pl.hard, pl.valid) + masked_ce(p_s3, pl.hard, pl.valid)


def loss_sup(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _check_targets(logits, gt)
    return F.cross_entropy(logits, gt)


def loss_total(l_sup: torch.Tensor, l_unsup: torch.Tensor, lam: float) -> torch.Tensor:
    return l_sup + lam * l_unsup


@dataclass
class UnsupTerms:
    loss: torch.Tensor
    l_s: torch.Tensor
    l_fa: torch.Tensor
    pseudo: PseudoLabel


def strong_consistency(strong_logits: Sequence[torch.Tensor], targets: Sequence[torch.Tensor],
                       valids: Sequence[torch.Tensor], config: LossConfig) -> torch.Tensor:
    if len(strong_logits) == 0:
        raise ValueError("need at least one strong branch")
    terms = [masked_ce(lg, t, v, config.normalize_by_valid) for lg, t, v in zip(strong_logits, targets, valids)]
    total = torch.stack(terms).sum()
    return total / len(terms) if config.strong_reduction == "mean" else total


def loss_unsup_icaf(corrected: torch.Tensor, decode: Callable[[torch.Tensor], torch.Tensor],
                    strong_logits: Sequence[torch.Tensor], fa_rate: float, config: LossConfig,
                    generator: Optional[torch.Generator] = None,
                    strong_targets: Optional[Sequence[torch.Tensor]] = None,
                    strong_valids: Optional[Sequence[torch.Tensor]] = None,
                    use_fa: bool = True, pseudo: Optional[PseudoLabel] = None) -> UnsupTerms:
    """Strong-branch and feature-dropout consistency against the corrected pseudo-label.

    ``strong_targets``/``strong_valids`` replace the pseudo-label per branch when
    the strong inputs were CutMix-ed; by default every branch uses the plain
    pseudo-label and its confidence mask. A ``pseudo`` label already computed
    from ``decode(corrected)`` may be passed to skip the extra decoder pass.
    """
    if len(strong_logits) == 0:
        raise ValueError("need at least one strong branch")
    pl = pseudo if pseudo is not None else pseudo_label(decode(corrected), config.tau)
    targets = strong_targets if strong_targets is not None else [pl.hard] * len(strong_logits)
    valids = strong_valids if strong_valids is not None else [pl.valid] * len(strong_logits)
    l_s = strong_consistency(strong_logits, targets, valids, config)
    fa_coef = config.fa_coef if use_fa else 0.0
    if fa_coef > 0:
        dropped = feature_dropout(corrected, fa_rate, training=True, generator=generator)
        l_fa = masked_ce(decode(dropped), pl.hard, pl.valid, config.normalize_by_valid)
    else:
        l_fa = torch.zeros((), dtype=l_s.dtype)
    # coefficients mix the active branches; with FA off the strong term carries full weight
    norm = config.strong_coef + fa_coef
    if norm == 0:
        raise ValueError("at least one unsupervised branch coefficient must be positive")
    loss = (config.strong_coef * l_s + fa_coef * l_fa) / norm
    return UnsupTerms(loss, l_s, l_fa, pl)
