"""mIoU under the one-to-one protocol, and pseudo-label correction panels.

At test time every view of a group is an independent sample scored against the
group's shared mask; the correction network is not involved. mIoU is computed
from the confusion matrix pooled over all views (micro-average).
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .data import DatasetManifest, load_group
from .objective import pseudo_label

Predictor = Callable[[torch.Tensor], torch.Tensor]  # (N, 3, H, W) -> (N, C, H, W) logits


def new_confusion(n_classes: int) -> np.ndarray:
    return np.zeros((n_classes, n_classes), dtype=np.int64)


def accumulate_confusion(pred, gt, cm: np.ndarray) -> np.ndarray:
    """Add joint (gt, pred) pixel counts to ``cm`` in place and return it."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    c = cm.shape[0]
    if pred.size and (pred.min() < 0 or gt.min() < 0 or pred.max() >= c or gt.max() >= c):
        raise ValueError(f"class index outside 0..{c - 1}")
    cm += np.bincount(gt.ravel() * c + pred.ravel(), minlength=c * c).reshape(c, c)
    return cm


def miou(cm: np.ndarray) -> tuple[list[Optional[float]], float]:
    """Per-class IoU (None where the class never occurs) and their mean."""
    cm = np.asarray(cm, dtype=np.float64)
    inter = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - inter
    present = union > 0
    if not present.any():
        raise ValueError("confusion matrix is empty; IoU undefined for every class")
    ious = [float(inter[c] / union[c]) if present[c] else None for c in range(len(inter))]
    return ious, float(np.mean([v for v in ious if v is not None]))


def model_predictor(segnet, batch_size: int = 12) -> Predictor:
    @torch.no_grad()
    def predict(images: torch.Tensor) -> torch.Tensor:
        segnet.eval()
        dtype = next(segnet.parameters()).dtype
        return torch.cat([segnet(chunk.to(dtype)) for chunk in images.split(batch_size)])
    return predict


def evaluate(predictor: Predictor, manifest: DatasetManifest, group_ids: Sequence[str],
             n_classes: Optional[int] = None) -> dict:
    """Score every view of every group against the group's mask."""
    c = n_classes or manifest.n_classes
    total = new_confusion(c)
    per_group = {}
    records = 0
    for gid in sorted(group_ids):
        group = load_group(manifest, gid, evaluation=True)
        views = torch.from_numpy(group.views).permute(0, 3, 1, 2)
        pred = predictor(views).argmax(dim=1).numpy()
        cm = new_confusion(c)
        for p in pred:
            accumulate_confusion(p, group.gt_mask, cm)
        records += len(pred)
        total += cm
        ious, m = miou(cm)
        per_group[gid] = {"miou": m, "iou": ious, "views": len(pred)}
    ious, m = miou(total)
    return {
        "miou": m,
        "iou": ious,
        "confusion": total.tolist(),
        "pixels": int(total.sum()),
        "records": records,
        "groups": per_group,
    }


def write_report(report: dict, path):
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# panels

PALETTE = np.array([[0, 0, 0], [90, 140, 220], [240, 80, 60], [80, 200, 120], [230, 200, 60]], np.uint8)


def _rgb(img: torch.Tensor) -> Image.Image:
    arr = img.detach().float().clamp(0, 1).permute(1, 2, 0).numpy()
    return Image.fromarray(np.rint(arr * 255).astype(np.uint8), mode="RGB")


def _gray(img: torch.Tensor) -> Image.Image:
    arr = img.detach().float().clamp(0, 1).numpy()
    return Image.fromarray(np.rint(arr * 255).astype(np.uint8), mode="L")


def _labels(hard: torch.Tensor, valid: Optional[torch.Tensor] = None) -> Image.Image:
    arr = PALETTE[hard.numpy() % len(PALETTE)].copy()
    if valid is not None:
        arr[~valid.numpy()] //= 3
    return Image.fromarray(arr, mode="RGB")


@torch.no_grad()
def export_panels(model, store, group_id: str, out_dir, config, tau: float, seed: int = 0) -> list[Path]:
    """Write the pseudo-label correction stages of one group as PNG files.

    Files: ``view_<k>.png`` for the O sampled views, ``boundary_view.png``,
    ``weight_<k>.png`` and ``weight_sum.png``, and for each stage in
    (single, vam, vam_vcm) ``pseudo_<stage>.png`` plus ``confidence_<stage>.png``.
    """
    from .augment import identity_geo
    from .engine import SampledViews, prepare_batch
    from .pcn import pcn_forward

    rng = np.random.default_rng(seed)
    ref = store.groups[group_id]
    if config.O > ref.num_views:
        raise ValueError(f"O={config.O} exceeds the {ref.num_views} views of {group_id}")
    idx_o = [int(i) for i in rng.choice(ref.num_views, size=config.O, replace=False)]
    p = min(max(config.P, 1), config.O)
    idx_p = [int(i) for i in rng.choice(idx_o, size=p, replace=False)]
    sv = SampledViews(group_id, idx_o, idx_p, [], identity_geo(ref.size))
    batch = prepare_batch(store, [sv], dataclasses.replace(config, use_vcm=True, P=p, image_size=ref.size))
    model.eval()
    segnet = model.segnet
    out = Path(out_dir) / group_id
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def save(img: Image.Image, name: str):
        path = out / name
        img.save(path)
        written.append(path)

    views = batch.views[0]
    for k, v in zip(idx_o, views):
        save(_rgb(v), f"view_{k:02d}.png")

    use_vam, use_vcm = config.use_vam, config.use_vcm
    single = pcn_forward(batch.views, segnet, model.pcn, use_vam=False, use_vcm=False)
    vam = pcn_forward(batch.views, segnet, model.pcn, use_vam=use_vam, use_vcm=False)
    full = pcn_forward(batch.views, segnet, model.pcn, batch.p_positions, use_vam=use_vam,
                       use_vcm=use_vam and use_vcm)
    save(_rgb(vam.boundary_view[0]), "boundary_view.png")
    if vam.weights is not None:
        w = vam.weights[0, :, 0]
        for k, wk in zip(idx_o, w):
            save(_gray(wk), f"weight_{k:02d}.png")
        save(_gray(w.sum(0)), "weight_sum.png")
    for stage, res in (("single", single), ("vam", vam), ("vam_vcm", full)):
        pl = pseudo_label(segnet.decode(res.corrected), tau)
        save(_labels(pl.hard[0], pl.valid[0]), f"pseudo_{stage}.png")
        save(_gray(pl.confidence[0]), f"confidence_{stage}.png")
    return written
