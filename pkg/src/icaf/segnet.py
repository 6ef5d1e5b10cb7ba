"""Small residual encoder-decoder used as the segmentation model.

``encode`` maps images to a stride-``s`` feature grid and ``decode`` maps any
feature grid of matching width back to full-resolution class logits. The two
halves are kept separate because the correction network mixes features from
several views before decoding.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_classes: int = 3
    widths: tuple[int, ...] = (32, 64, 128, 256)
    output_stride: int = 16
    decoder_channels: int = 64
    fa_dropout: float = 0.5
    wgu_widths: tuple[int, int, int] = (16, 32, 64)

    def validate(self):
        s = self.output_stride
        if s < 1 or s & (s - 1):
            raise ValueError("output_stride must be a power of two")
        if 2 ** len(self.widths) < s:
            raise ValueError(f"{len(self.widths)} stages cannot reach output stride {s}")
        if not 0 <= self.fa_dropout < 1:
            raise ValueError("fa_dropout must be in [0, 1)")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")

    def digest(self) -> str:
        d = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def group_norm(ch: int) -> nn.GroupNorm:
    groups = math.gcd(ch, 8)
    return nn.GroupNorm(groups, ch)


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.norm1 = group_norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = group_norm(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), group_norm(cout))

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class SegNet(nn.Module):
    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        config.validate()
        w = config.widths
        self.stem = nn.Sequential(nn.Conv2d(3, w[0], 3, 1, 1, bias=False), group_norm(w[0]), nn.ReLU())
        stages, cin, reduced = [], w[0], 1
        for cout in w:
            stride = 2 if reduced < config.output_stride else 1
            reduced *= stride
            stages.append(ResidualBlock(cin, cout, stride))
            cin = cout
        self.stages = nn.Sequential(*stages)
        self.feat_channels = w[-1]
        d = config.decoder_channels
        self.head = nn.Sequential(nn.Conv2d(w[-1], d, 3, 1, 1, bias=False), group_norm(d), nn.ReLU())
        self.classifier = nn.Conv2d(d, config.n_classes, 1)
        self._init()

    def _init(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        nn.init.normal_(self.classifier.weight, std=0.01)
        nn.init.zeros_(self.classifier.bias)

    @property
    def stride(self) -> int:
        return self.config.output_stride

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, feat_channels, H/s, W/s)."""
        h, w = images.shape[-2:]
        s = self.stride
        if h % s or w % s:
            raise ValueError(f"input {h}x{w} not divisible by output stride {s}")
        return self.stages(self.stem(images))

    def decode(self, features: torch.Tensor) -> torch.Tensor:
        """(B, feat_channels, h, w) -> (B, C, h*s, w*s) logits."""
        if features.dim() != 4 or features.shape[1] != self.feat_channels:
            raise ValueError(f"expected {self.feat_channels} feature channels, got shape {tuple(features.shape)}")
        out = self.classifier(self.head(features))
        h, w = features.shape[-2:]
        s = self.stride
        if s == 1:
            return out
        return F.interpolate(out, size=(h * s, w * s), mode="bilinear", align_corners=False)

    def forward(self, images):
        return self.decode(self.encode(images))


def feature_dropout(features: torch.Tensor, rate: float, training: bool = True,
                    generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Zero whole channels with probability ``rate`` and rescale survivors by 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return features
    b, c = features.shape[:2]
    keep = torch.rand((b, c), generator=generator, dtype=features.dtype, device=features.device) >= rate
    scale = keep.to(features.dtype) / (1.0 - rate)
    return features * scale.view(b, c, *([1] * (features.dim() - 2)))


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, modules: dict, config_digest: str, extra: Optional[dict] = None):
    """Atomically write parameters of ``modules`` under their names."""
    state = {}
    for prefix, module in modules.items():
        for k, v in module.state_dict().items():
            state[f"{prefix}.{k}"] = v.detach().cpu().clone()
    payload = {"version": CHECKPOINT_VERSION, "config_digest": config_digest, "params": state}
    payload.update(extra or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, modules: dict, config_digest: Optional[str] = None) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')!r}")
    if config_digest is not None and payload["config_digest"] != config_digest:
        raise CheckpointError("checkpoint was written for a different model configuration")
    params = payload["params"]
    for prefix, module in modules.items():
        sub = {k[len(prefix) + 1:]: v for k, v in params.items() if k.startswith(prefix + ".")}
        module.load_state_dict(sub)
    return payload
