"""Intra-group view sampling and the training loop.

One iteration draws, per group, O distinct views for the correction network,
P of them for spatial interaction and Q for the strong branches. A single
geometric transform is drawn per group and shared by all of its views and its
mask so that predictions can supervise each other pixel by pixel.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .augment import (AugConfig, GeoParams, StrongParams, apply_strong, apply_weak, cutmix_pair,
                      sample_strong_params, sample_weak_params)
from .data import DatasetManifest, ViewGroup, load_group
from .objective import LossConfig, PseudoLabel, loss_sup, loss_total, loss_unsup_icaf, pseudo_label
from .pcn import PCNOutput, PseudoLabelCorrector, pcn_forward
from .segnet import ModelConfig, SegNet, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    O: int = 6
    P: int = 3
    Q: int = 2
    labeled_per_batch: int = 8
    unlabeled_per_batch: int = 8
    optimizer: str = "sgd"
    base_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: str = "poly"
    poly_power: float = 0.9
    epochs: int = 80
    image_size: tuple[int, int] = (320, 320)
    seed: int = 0
    deterministic: bool = True
    # Table II style component toggles
    semi_baseline: bool = False
    group_baseline_only: bool = False
    use_vam: bool = True
    use_vcm: bool = True
    use_ca: bool = True
    use_fa: bool = True
    # labeled forward: "pcn" (same correction path as unlabeled data), "vam" (blended view only), "single"
    labeled_path: str = "pcn"
    keep_checkpoints: int = 0  # 0 keeps every epoch

    def validate(self):
        for name in ("O", "Q", "labeled_per_batch", "unlabeled_per_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.P < 0 or self.epochs < 0:
            raise ValueError("P and epochs must be non-negative")
        if self.use_vcm and not self.use_vam:
            raise ValueError("use_vcm requires use_vam")
        if self.use_vcm and not 1 <= self.P <= self.O:
            raise ValueError(f"P={self.P} must be in 1..O={self.O} when the correction module is on")
        if self.Q > self.O:
            raise ValueError(f"Q={self.Q} cannot exceed O={self.O}")
        baseline = self.semi_baseline or self.group_baseline_only
        if self.semi_baseline and self.group_baseline_only:
            raise ValueError("semi_baseline and group_baseline_only are exclusive")
        if baseline and (self.use_vam or self.use_vcm or self.use_ca or self.use_fa):
            raise ValueError("baseline presets run without VAM/VCM/CA/FA")
        if self.labeled_path not in ("pcn", "vam", "single"):
            raise ValueError(f"unknown labeled_path {self.labeled_path!r}")
        if self.optimizer != "sgd" or self.lr_schedule != "poly":
            raise ValueError("only SGD with the poly schedule is implemented")

    @property
    def bypass(self) -> bool:
        return not self.use_vam


@dataclass
class SampledViews:
    group_id: str
    indices_O: list[int]
    indices_P: list[int]
    indices_Q: list[int]
    geo: GeoParams
    strong: list[StrongParams] = field(default_factory=list)

    @property
    def p_positions(self) -> list[int]:
        return [self.indices_O.index(i) for i in self.indices_P]


def ivs_sample(group, config: TrainConfig, aug: AugConfig, rng: np.random.Generator,
               with_strong: bool = True) -> SampledViews:
    """Draw the O/P/Q views of one group plus its shared geometric parameters."""
    k = group.num_views
    if config.O > k:
        raise ValueError(f"cannot sample O={config.O} distinct views from a group of {k}")
    idx_o = [int(i) for i in rng.choice(k, size=config.O, replace=False)]
    idx_p: list[int] = []
    if config.use_vcm:
        idx_p = [int(i) for i in rng.choice(idx_o, size=config.P, replace=False)]
    idx_q: list[int] = []
    strong: list[StrongParams] = []
    if with_strong:
        if config.semi_baseline:
            # weak and strong inputs come from the same view
            idx_q = [idx_o[0]] * config.Q
        else:
            # in bypass the pseudo-label comes from idx_o[0]; strong views are the others
            pool = idx_o[1:] if config.bypass and config.O > config.Q else idx_o
            idx_q = [int(i) for i in rng.choice(pool, size=config.Q, replace=False)]
    geo = sample_weak_params(rng, aug, group.size, tuple(config.image_size))
    if with_strong:
        strong = [sample_strong_params(rng, aug, tuple(config.image_size), use_cutmix=config.use_ca)
                  for _ in idx_q]
    return SampledViews(group.group_id, idx_o, idx_p, idx_q, geo, strong)


def poly_lr(base: float, it: int, total_iters: int, power: float = 0.9) -> float:
    if total_iters <= 0:
        raise ValueError("total_iters must be positive")
    if not 0 <= it <= total_iters:
        raise ValueError(f"iteration {it} outside 0..{total_iters}")
    return base * (1 - it / total_iters) ** power


# ---------------------------------------------------------------------------
# model and batches


class ICAFModel(nn.Module):
    """Segmentation network plus the training-only correction network."""

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.segnet = SegNet(config)
        self.pcn = PseudoLabelCorrector(self.segnet.feat_channels, self.segnet.config.wgu_widths)

    @property
    def config(self) -> ModelConfig:
        return self.segnet.config

    def checkpoint_modules(self) -> dict:
        return {"segnet": self.segnet, "pcn": self.pcn}


@dataclass(frozen=True)
class GroupRef:
    group_id: str
    num_views: int
    size: tuple[int, int]


class GroupStore:
    """In-memory uint8 cache of decoded groups."""

    def __init__(self, manifest: Optional[DatasetManifest] = None, ids: Sequence[str] = (),
                 evaluation: bool = False):
        self.views: dict[str, torch.Tensor] = {}
        self.masks: dict[str, Optional[torch.Tensor]] = {}
        self.groups: dict[str, GroupRef] = {}
        for gid in ids:
            self.add(load_group(manifest, gid, evaluation=evaluation))

    def add(self, group: ViewGroup):
        u8 = np.rint(group.views * 255).astype(np.uint8)
        self.views[group.group_id] = torch.from_numpy(u8).permute(0, 3, 1, 2).contiguous()
        self.masks[group.group_id] = None if group.gt_mask is None else torch.from_numpy(group.gt_mask)
        self.groups[group.group_id] = GroupRef(group.group_id, group.num_views, group.size)

    def without_masks(self, ids: Sequence[str]) -> "GroupStore":
        """Shallow copy whose masks for ``ids`` are hidden."""
        other = GroupStore()
        other.views, other.groups = self.views, self.groups
        hidden = set(ids)
        other.masks = {g: (None if g in hidden else m) for g, m in self.masks.items()}
        return other

    def images(self, gid: str, indices: Sequence[int], dtype=torch.float32) -> torch.Tensor:
        return self.views[gid][list(indices)].to(dtype) / 255.0


@dataclass
class PreparedBatch:
    group_ids: list[str]
    sampled: list[SampledViews]
    views: torch.Tensor  # (B, O, 3, h, w)
    p_positions: Optional[list[list[int]]]
    masks: Optional[torch.Tensor] = None  # (B, h, w)
    strong: Optional[torch.Tensor] = None  # (B, Q, 3, h, w)
    partners: Optional[list[list[int]]] = None  # CutMix partner per (q, i)


def prepare_batch(store: GroupStore, sampled: Sequence[SampledViews], config: TrainConfig,
                  rng: Optional[np.random.Generator] = None, labeled: bool = False,
                  dtype=torch.float32) -> PreparedBatch:
    views, masks, strong = [], [], []
    for sv in sampled:
        imgs = store.images(sv.group_id, sv.indices_O, dtype)
        views.append(apply_weak(imgs, sv.geo, "bilinear"))
        if labeled:
            masks.append(apply_weak(store.masks[sv.group_id], sv.geo, "nearest"))
        if sv.indices_Q:
            q_imgs = apply_weak(store.images(sv.group_id, sv.indices_Q, dtype), sv.geo, "bilinear")
            strong.append(torch.stack([apply_strong(x, sp) for x, sp in zip(q_imgs, sv.strong)]))
    b = len(sampled)
    partners = None
    if strong and config.use_ca:
        if rng is None:
            raise ValueError("CutMix partners need an rng")
        partners = [[int(j) for j in rng.permutation(b)] for _ in range(config.Q)]
    return PreparedBatch(
        group_ids=[sv.group_id for sv in sampled],
        sampled=list(sampled),
        views=torch.stack(views),
        p_positions=[sv.p_positions for sv in sampled] if config.use_vcm else None,
        masks=torch.stack(masks) if labeled else None,
        strong=torch.stack(strong) if strong else None,
        partners=partners,
    )


@dataclass
class LossTerms:
    l_sup: torch.Tensor
    l_unsup: torch.Tensor
    l_s: torch.Tensor
    l_fa: torch.Tensor
    l_total: torch.Tensor
    valid_fraction: float
    pseudo: Optional[PseudoLabel] = None
    unlabeled_out: Optional[PCNOutput] = None


def _run_pcn(model: ICAFModel, batch: PreparedBatch, config: TrainConfig) -> PCNOutput:
    return pcn_forward(batch.views, model.segnet, model.pcn, batch.p_positions,
                       use_vam=config.use_vam, use_vcm=config.use_vcm)


def mix_strong_branch(images: torch.Tensor, pl: PseudoLabel, sampled: Sequence[SampledViews],
                      q: int, partners: Optional[Sequence[int]]):
    """CutMix one strong branch across the batch; returns images, targets and validity."""
    if partners is None:
        return images, pl.hard, pl.valid
    out_img, out_tgt, out_valid = [], [], []
    for i, sv in enumerate(sampled):
        j = partners[i]
        img, tgt, valid = cutmix_pair(images[i], images[j], pl.hard[i], pl.hard[j], sv.strong[q].cutmix_box,
                                      pl.valid[i], pl.valid[j])
        out_img.append(img)
        out_tgt.append(tgt)
        out_valid.append(valid)
    return torch.stack(out_img), torch.stack(out_tgt), torch.stack(out_valid)


def compute_losses(model: ICAFModel, labeled: Optional[PreparedBatch], unlabeled: Optional[PreparedBatch],
                   config: TrainConfig, loss_cfg: LossConfig,
                   generator: Optional[torch.Generator] = None) -> LossTerms:
    segnet = model.segnet
    dtype = next(model.parameters()).dtype
    zero = torch.zeros((), dtype=dtype)
    l_sup = zero
    if labeled is not None:
        path = config.labeled_path if config.use_vam else "single"
        if path == "pcn":
            out = _run_pcn(model, labeled, config)
        else:
            out = pcn_forward(labeled.views, segnet, model.pcn, use_vam=path == "vam", use_vcm=False)
        l_sup = loss_sup(segnet.decode(out.corrected), labeled.masks)

    l_unsup = l_s = l_fa = zero
    valid_fraction = 0.0
    pl = None
    out_u = None
    if unlabeled is not None and loss_cfg.lam > 0:
        out_u = _run_pcn(model, unlabeled, config)
        with torch.no_grad():
            pl = pseudo_label(segnet.decode(out_u.corrected), loss_cfg.tau)
        valid_fraction = pl.valid_fraction
        b, q = unlabeled.strong.shape[:2]
        imgs, targets, valids = [], [], []
        for qi in range(q):
            partners = unlabeled.partners[qi] if unlabeled.partners is not None else None
            im, tg, vd = mix_strong_branch(unlabeled.strong[:, qi], pl, unlabeled.sampled, qi, partners)
            imgs.append(im)
            targets.append(tg)
            valids.append(vd)
        strong_logits = segnet(torch.cat(imgs)).split(b)
        terms = loss_unsup_icaf(out_u.corrected, segnet.decode, list(strong_logits),
                                segnet.config.fa_dropout, loss_cfg, generator,
                                strong_targets=targets, strong_valids=valids,
                                use_fa=config.use_fa, pseudo=pl)
        l_unsup, l_s, l_fa = terms.loss, terms.l_s, terms.l_fa
    total = loss_total(l_sup, l_unsup, loss_cfg.lam)
    return LossTerms(l_sup, l_unsup, l_s, l_fa, total, valid_fraction, pl, out_u)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, group_ids: Sequence[str]):
        super().__init__(f"{message}; offending groups: {', '.join(group_ids)}")
        self.group_ids = list(group_ids)


@dataclass
class StepMetrics:
    lr: float
    l_sup: float
    l_unsup: float
    l_s: float
    l_fa: float
    l_total: float
    valid_fraction: float
    labeled_sampled: list[SampledViews] = field(default_factory=list, repr=False)
    unlabeled_sampled: list[SampledViews] = field(default_factory=list, repr=False)

    def scalars(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "l_sup", "l_unsup", "l_s", "l_fa", "l_total", "valid_fraction")}


def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(model.parameters(), lr=config.base_lr, momentum=config.momentum,
                           weight_decay=config.weight_decay)


def train_step(model: ICAFModel, optimizer: torch.optim.Optimizer, labeled: Optional[Sequence[GroupRef]],
               unlabeled: Optional[Sequence[GroupRef]], store: GroupStore, config: TrainConfig,
               loss_cfg: LossConfig, aug: AugConfig, rng: np.random.Generator,
               generator: Optional[torch.Generator] = None, lr: Optional[float] = None) -> StepMetrics:
    """One optimizer update on sup + lambda * unsup for a labeled and an unlabeled batch of groups."""
    dtype = next(model.parameters()).dtype
    lab_sv = [ivs_sample(g, config, aug, rng, with_strong=False) for g in labeled or []]
    unl_sv = [ivs_sample(g, config, aug, rng) for g in unlabeled or []]
    lab = prepare_batch(store, lab_sv, config, labeled=True, dtype=dtype) if lab_sv else None
    unl = prepare_batch(store, unl_sv, config, rng, dtype=dtype) if unl_sv else None

    model.train()
    terms = compute_losses(model, lab, unl, config, loss_cfg, generator)
    ids = [s.group_id for s in lab_sv + unl_sv]
    if not torch.isfinite(terms.l_total):
        raise NonFiniteLossError(f"non-finite loss {terms.l_total.item()}", ids)

    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    terms.l_total.backward()
    optimizer.step()
    return StepMetrics(
        lr=optimizer.param_groups[0]["lr"],
        l_sup=terms.l_sup.item(), l_unsup=terms.l_unsup.item(), l_s=terms.l_s.item(),
        l_fa=terms.l_fa.item(), l_total=terms.l_total.item(), valid_fraction=terms.valid_fraction,
        labeled_sampled=lab_sv, unlabeled_sampled=unl_sv,
    )


# ---------------------------------------------------------------------------
# training loop


class CyclicBatches:
    """Fixed-size batches from successive reshuffled passes over ``ids``."""

    def __init__(self, ids: Sequence[str], batch_size: int, rng: np.random.Generator):
        if not ids:
            raise ValueError("no groups to draw batches from")
        self.ids = list(ids)
        self.batch_size = batch_size
        self.rng = rng
        self._queue: list[str] = []

    def __iter__(self) -> Iterator[list[str]]:
        return self

    def __next__(self) -> list[str]:
        while len(self._queue) < self.batch_size:
            self._queue.extend(self.ids[i] for i in self.rng.permutation(len(self.ids)))
        batch, self._queue = self._queue[:self.batch_size], self._queue[self.batch_size:]
        return batch


def seed_everything(seed: int, deterministic: bool = True):
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


@dataclass
class TrainResult:
    final_checkpoint: Path
    metrics: list[dict]
    model: ICAFModel
    steps: int


def train(run, manifest: DatasetManifest, split: tuple[Sequence[str], Sequence[str]], run_dir,
          store: Optional[GroupStore] = None) -> TrainResult:
    """Run ``epochs * steps_per_epoch`` updates; write checkpoints and a JSONL metrics log."""
    from .config import RunConfig  # local import keeps config -> engine one-directional

    assert isinstance(run, RunConfig)
    cfg, loss_cfg, aug = run.train, run.loss, run.aug
    cfg.validate()
    loss_cfg.validate()
    aug.validate()
    labeled_ids, unlabeled_ids = list(split[0]), list(split[1])
    if not labeled_ids:
        raise ValueError("training needs at least one labeled group")

    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(cfg.seed, cfg.deterministic)
    model = ICAFModel(run.model)
    optimizer = make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed + 1)
    if store is None:
        store = GroupStore(manifest, labeled_ids + unlabeled_ids)
    store = store.without_masks(unlabeled_ids)
    # split membership decides which masks are visible during training
    lab_groups = {g: store.groups[g] for g in labeled_ids}
    unl_groups = {g: store.groups[g] for g in unlabeled_ids}

    driver = unlabeled_ids or labeled_ids
    per_batch = cfg.unlabeled_per_batch if unlabeled_ids else cfg.labeled_per_batch
    steps_per_epoch = math.ceil(len(driver) / per_batch)
    total = cfg.epochs * steps_per_epoch
    lab_stream = CyclicBatches(labeled_ids, cfg.labeled_per_batch, rng)
    unl_stream = CyclicBatches(unlabeled_ids, cfg.unlabeled_per_batch, rng) if unlabeled_ids else None

    digest = run.model.digest()
    metrics: list[dict] = []
    metrics_path = run_dir / "metrics.jsonl"
    metrics_path.write_text("")
    final = ckpt_dir / "final.pt"
    step = 0
    with open(metrics_path, "a", encoding="utf-8") as mlog:
        for epoch in range(cfg.epochs):
            for _ in range(steps_per_epoch):
                t0 = time.perf_counter()
                lr = poly_lr(cfg.base_lr, step, total, cfg.poly_power)
                lab = [lab_groups[g] for g in next(lab_stream)]
                unl = [unl_groups[g] for g in next(unl_stream)] if unl_stream else None
                m = train_step(model, optimizer, lab, unl, store, cfg, loss_cfg, aug, rng, generator, lr)
                row = {"step": step, "epoch": epoch, **m.scalars(),
                       "wall_ms": round((time.perf_counter() - t0) * 1000, 3)}
                metrics.append(row)
                mlog.write(json.dumps(row) + "\n")
                step += 1
            mlog.flush()
            path = ckpt_dir / f"epoch_{epoch:03d}.pt"
            _save(path, model, optimizer, run, digest, rng, generator, epoch, step)
            _prune(ckpt_dir, cfg.keep_checkpoints)
            log.info("epoch %d/%d done, l_total=%.4f", epoch + 1, cfg.epochs, metrics[-1]["l_total"])
    _save(final, model, optimizer, run, digest, rng, generator, cfg.epochs, step)
    return TrainResult(final, metrics, model, step)


def _save(path, model, optimizer, run, digest, rng, generator, epoch, step):
    save_checkpoint(path, model.checkpoint_modules(), digest, extra={
        "run_config": run.to_flat(),
        "epoch": epoch,
        "step": step,
        "optimizer": optimizer.state_dict(),
        "rng_state": rng.bit_generator.state,
        "torch_rng_state": generator.get_state(),
    })


def _prune(ckpt_dir: Path, keep: int):
    if keep <= 0:
        return
    epochs = sorted(ckpt_dir.glob("epoch_*.pt"))
    for p in epochs[:-keep]:
        p.unlink()


@torch.no_grad()
def pseudo_label_probe(model: ICAFModel, store: GroupStore, ids: Sequence[str], config: TrainConfig,
                       aug: AugConfig, tau: float, seed: int = 0) -> float:
    """Mean confident-pixel fraction of the configured pseudo-label path over ``ids``."""
    rng = np.random.default_rng(seed)
    model.eval()
    fractions = []
    for gid in ids:
        sv = ivs_sample(store.groups[gid], config, aug, rng, with_strong=False)
        batch = prepare_batch(store, [sv], config)
        out = _run_pcn(model, batch, config)
        fractions.append(pseudo_label(model.segnet.decode(out.corrected), tau).valid_fraction)
    return float(np.mean(fractions)) if fractions else 0.0
