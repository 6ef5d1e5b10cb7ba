"""Pseudo-label correction: view weighting (WGU) and spatial interaction gating (SIU).

The weight generator scores every view of a group per pixel with shared
parameters; a softmax across the views turns the scores into convex weights
that blend the views into one boundary-aware image. Each interaction view's
features are then gated by a sigmoid map computed from (view features,
blended-view features) and the gated features are summed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .segnet import SegNet, group_norm

WEIGHT_SUM_TOL = 1e-5


def _conv_block(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), group_norm(cout), nn.ReLU())


class WeightGenerator(nn.Module):
    """Encoder-decoder producing one weight logit per pixel for a single view.

    Three stride-2 stages, then a mirrored upsampling path that fuses the
    first-stage (shallow) features before the one-channel head.
    """

    def __init__(self, widths=(16, 32, 64)):
        super().__init__()
        w1, w2, w3 = widths
        self.enc1 = _conv_block(3, w1, 2)
        self.enc2 = _conv_block(w1, w2, 2)
        self.enc3 = _conv_block(w2, w3, 2)
        self.dec3 = _conv_block(w3, w2)
        self.dec2 = _conv_block(w2 + w1, w1)
        self.head = nn.Conv2d(w1, 1, 3, 1, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"weight generator needs H, W divisible by 8, got {h}x{w}")
        e1 = self.enc1(x)
        e3 = self.enc3(self.enc2(e1))
        d = self.dec3(F.interpolate(e3, size=e1.shape[-2:], mode="bilinear", align_corners=False))
        d = self.dec2(torch.cat([d, e1], dim=1))
        d = F.interpolate(d, size=(h, w), mode="bilinear", align_corners=False)
        return self.head(d)


class SpatialInteraction(nn.Module):
    """Proj(Cat(f_p, f_hat)) -> single-channel spatial logit map."""

    def __init__(self, feat_channels: int):
        super().__init__()
        mid = max(1, feat_channels // 2)
        self.proj = nn.Sequential(
            nn.Conv2d(2 * feat_channels, mid, 3, 1, 1),
            nn.ReLU(),
            nn.Conv2d(mid, 1, 1),
        )

    def forward(self, f_p, f_hat):
        return self.proj(torch.cat([f_p, f_hat], dim=1))


class PseudoLabelCorrector(nn.Module):
    def __init__(self, feat_channels: int, wgu_widths=(16, 32, 64)):
        super().__init__()
        self.wgu = WeightGenerator(wgu_widths)
        self.siu = SpatialInteraction(feat_channels)


def normalize_view_logits(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the view axis (dim 1) of (B, O, 1, H, W) logits."""
    return torch.softmax(logits, dim=1)


def wgu_forward(views: torch.Tensor, wgu: WeightGenerator) -> torch.Tensor:
    """(B, O, 3, H, W) views -> (B, O, 1, H, W) weights summing to one over O."""
    if views.dim() == 4:
        views = views.unsqueeze(0)
    b, o = views.shape[:2]
    logits = wgu(views.reshape(b * o, *views.shape[2:]))
    return normalize_view_logits(logits.view(b, o, 1, *logits.shape[-2:]))


def check_weights(weights: torch.Tensor, tol: float = WEIGHT_SUM_TOL):
    total = weights.sum(dim=1)
    err = (total - 1).abs().max().item() if total.numel() else 0.0
    if err > tol or weights.min().item() < 0:
        raise ValueError(f"weights are not normalized across views (max |sum-1| = {err:.3g})")


def synthesize_boundary_view(views: torch.Tensor, weights: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Per-pixel convex blend sum_o w_o * x_o of (B, O, 3, H, W) views."""
    if views.dim() == 4:
        views, weights = views.unsqueeze(0), weights.unsqueeze(0)
    if weights.shape[:2] != views.shape[:2] or weights.shape[-2:] != views.shape[-2:]:
        raise ValueError(f"weights {tuple(weights.shape)} do not match views {tuple(views.shape)}")
    if check:
        check_weights(weights)
    return (weights * views).sum(dim=1)


def siu_gate(f_p: torch.Tensor, f_hat: torch.Tensor, siu: SpatialInteraction,
             return_gate: bool = False):
    """sigmoid(Proj(Cat(f_p, f_hat))) * f_p, gate broadcast over channels."""
    if f_p.shape != f_hat.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_p.shape)} vs {tuple(f_hat.shape)}")
    gate = torch.sigmoid(siu(f_p, f_hat))
    out = gate * f_p
    return (out, gate) if return_gate else out


def vcm_aggregate(pairs: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(pairs) == 0:
        raise ValueError("need at least one gated feature to aggregate")
    shape = pairs[0].shape
    if any(p.shape != shape for p in pairs):
        raise ValueError("gated features must share one shape")
    return torch.stack(list(pairs)).sum(dim=0)


@dataclass
class PCNOutput:
    corrected: torch.Tensor  # (B, F, h, w)
    boundary_view: torch.Tensor  # (B, 3, H, W)
    weights: Optional[torch.Tensor]  # (B, O, 1, H, W); None in bypass
    gates: Optional[torch.Tensor]  # (B, P, 1, h, w); None unless VCM runs


def draw_interaction_positions(rng: np.random.Generator, n_views: int, p: int) -> list[int]:
    if p > n_views:
        raise ValueError(f"cannot draw P={p} interaction views from O={n_views}")
    return sorted(rng.choice(n_views, size=p, replace=False).tolist())


def pcn_forward(views: torch.Tensor, segnet: SegNet, pcn: PseudoLabelCorrector,
                p_positions=None, *, use_vam: bool = True, use_vcm: bool = True,
                rng: Optional[np.random.Generator] = None, P: Optional[int] = None,
                check: bool = False) -> PCNOutput:
    """Corrected features for (B, O, 3, H, W) weak-transformed group views.

    ``p_positions`` gives, per group, which of the O views take part in the
    interaction; when omitted, ``P`` positions are drawn from ``rng``.
    With neither VAM nor VCM (bypass) the result is ``encode(views[:, 0])``.
    """
    if use_vcm and not use_vam:
        raise ValueError("the view correction module requires the view augmentation module")
    b, o = views.shape[:2]
    if not use_vam:
        first = views[:, 0]
        return PCNOutput(segnet.encode(first), first, None, None)

    weights = wgu_forward(views, pcn.wgu)
    x_hat = synthesize_boundary_view(views, weights, check=check)
    if not use_vcm:
        return PCNOutput(segnet.encode(x_hat), x_hat, weights, None)

    if p_positions is None:
        if rng is None or P is None:
            raise ValueError("pass p_positions or both rng and P")
        p_positions = [draw_interaction_positions(rng, o, P) for _ in range(b)]
    pos = torch.as_tensor(np.asarray(p_positions), dtype=torch.long).view(b, -1)
    p = pos.shape[1]
    if p < 1:
        raise ValueError("P must be >= 1 outside bypass mode")
    if p > o or int(pos.max()) >= o:
        raise ValueError(f"P={p} interaction views exceed the O={o} sampled views")

    x_p = views[torch.arange(b).unsqueeze(1), pos]  # (B, P, 3, H, W)
    # one encoder pass for the blended view and all interaction views
    feats = segnet.encode(torch.cat([x_hat, x_p.reshape(b * p, *x_p.shape[2:])]))
    f_hat, f_p = feats[:b], feats[b:].view(b, p, *feats.shape[1:])
    f_hat_rep = f_hat.unsqueeze(1).expand_as(f_p).reshape(b * p, *f_hat.shape[1:])
    gated, gate = siu_gate(f_p.reshape(b * p, *f_p.shape[2:]), f_hat_rep, pcn.siu, return_gate=True)
    gated = gated.view(b, p, *gated.shape[1:])
    corrected = vcm_aggregate(list(gated.unbind(1)))
    return PCNOutput(corrected, x_hat, weights, gate.view(b, p, *gate.shape[1:]))
