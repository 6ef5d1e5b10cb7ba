"""Multi-view group data: the on-disk format, loading, splits and a synthetic generator.

A group is K pixel-aligned views of one sample that share a single mask. On disk
every group is a directory ``<id>/view_00.png ... view_{K-1}.png`` plus
``mask.png`` (8-bit class indices), and the dataset root holds ``manifest.json``.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

FORMAT_VERSION = "1"
MANIFEST_NAME = "manifest.json"
SPEC_NAME = "generator_spec.json"

BACKGROUND, CRYSTAL, DEFECT = 0, 1, 2


class DatasetFormatError(ValueError):
    """Raised when files on disk do not satisfy the group invariants."""


@dataclass
class ViewGroup:
    group_id: str
    views: np.ndarray  # (K, H, W, 3) float32 in [0, 1]
    gt_mask: Optional[np.ndarray] = None  # (H, W) int64
    labeled: bool = False

    def __post_init__(self):
        views = np.asarray(self.views, dtype=np.float32)
        if views.ndim != 4 or views.shape[-1] != 3 or views.shape[0] < 1:
            raise DatasetFormatError(f"{self.group_id}: views must be (K, H, W, 3), got {views.shape}")
        if not np.all(np.isfinite(views)) or views.min() < 0.0 or views.max() > 1.0:
            raise DatasetFormatError(f"{self.group_id}: intensities must be finite and in [0, 1]")
        self.views = views
        if self.gt_mask is not None:
            mask = np.asarray(self.gt_mask)
            if mask.shape != views.shape[1:3]:
                raise DatasetFormatError(
                    f"{self.group_id}: mask {mask.shape} does not match views {views.shape[1:3]}")
            self.gt_mask = mask.astype(np.int64)
        if self.labeled and self.gt_mask is None:
            raise DatasetFormatError(f"{self.group_id}: labeled group without a mask")

    @property
    def num_views(self) -> int:
        return self.views.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.views.shape[1], self.views.shape[2]


@dataclass
class GeneratorSpec:
    n_groups: int = 96
    views_per_group: int = 12
    image_size: tuple[int, int] = (128, 128)
    n_classes: int = 3
    illumination_angles: list[float] = field(default_factory=lambda: [30.0 * k for k in range(12)])
    boundary_visibility_width: float = 90.0
    defect_interior_contrast: float = 0.05
    boundary_contrast: float = 0.35
    noise_std: float = 0.02
    n_test_groups: int = 0
    seed: int = 0

    def validate(self):
        if self.n_groups < 0 or self.n_test_groups < 0:
            raise ValueError("group counts must be non-negative")
        if self.views_per_group != len(self.illumination_angles):
            raise ValueError(
                f"views_per_group={self.views_per_group} but {len(self.illumination_angles)} illumination angles")
        if self.views_per_group < 1:
            raise ValueError("views_per_group must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.n_classes > 3:
            raise ValueError("the generator renders at most 3 classes (background, crystal, defect)")
        for name in ("defect_interior_contrast", "boundary_contrast", "noise_std"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not 0.0 < self.boundary_visibility_width <= 360.0:
            raise ValueError("boundary_visibility_width must be in (0, 360]")
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ValueError("image_size must be at least 16x16")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class GroupEntry:
    id: str
    labeled: bool
    views: list[str]
    mask: Optional[str] = "mask.png"
    split: str = "train"


@dataclass
class DatasetManifest:
    root: Path
    groups: list[GroupEntry]
    n_classes: int = 3
    spec_digest: str = ""
    format_version: str = FORMAT_VERSION

    def __post_init__(self):
        self.root = Path(self.root)
        ids = [g.id for g in self.groups]
        if len(set(ids)) != len(ids):
            raise DatasetFormatError("duplicate group ids in manifest")
        self._index = {g.id: g for g in self.groups}

    def entry(self, group_id: str) -> GroupEntry:
        try:
            return self._index[group_id]
        except KeyError:
            raise KeyError(f"group {group_id!r} not in manifest") from None

    def ids(self, split: Optional[str] = None) -> list[str]:
        return [g.id for g in self.groups if split is None or g.split == split]

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "n_classes": self.n_classes,
            "spec_digest": self.spec_digest,
            "groups": [asdict(g) for g in self.groups],
        }

    def save(self):
        self.root.mkdir(parents=True, exist_ok=True)
        _atomic_write_text(self.root / MANIFEST_NAME, json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        with open(root / MANIFEST_NAME, encoding="utf-8") as f:
            raw = json.load(f)
        if str(raw.get("format_version")) != FORMAT_VERSION:
            raise DatasetFormatError(f"unsupported manifest version {raw.get('format_version')!r}")
        groups = [GroupEntry(**g) for g in raw["groups"]]
        m = cls(root, groups, n_classes=raw["n_classes"], spec_digest=raw.get("spec_digest", ""))
        m.check_files()
        return m

    def check_files(self):
        for g in self.groups:
            names = list(g.views) + ([g.mask] if g.mask else [])
            for name in names:
                p = self.root / g.id / name
                if not p.is_file():
                    raise FileNotFoundError(f"manifest lists missing file {p}")


def _atomic_write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# image i/o


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def save_group(group: ViewGroup, root, n_classes: int = 3) -> GroupEntry:
    """Write a group directory and return its manifest entry."""
    gdir = Path(root) / group.group_id
    gdir.mkdir(parents=True, exist_ok=True)
    names = []
    for k, view in enumerate(group.views):
        name = f"view_{k:02d}.png"
        Image.fromarray(_to_uint8(view), mode="RGB").save(gdir / name)
        names.append(name)
    mask_name = None
    if group.gt_mask is not None:
        if group.gt_mask.min() < 0 or group.gt_mask.max() >= n_classes:
            raise DatasetFormatError(f"{group.group_id}: mask class outside 0..{n_classes - 1}")
        mask_name = "mask.png"
        Image.fromarray(group.gt_mask.astype(np.uint8), mode="L").save(gdir / mask_name)
    return GroupEntry(group.group_id, group.labeled, names, mask_name)


def load_group(manifest: DatasetManifest, group_id: str, evaluation: bool = False) -> ViewGroup:
    """Decode one group. The mask is exposed for labeled groups, or for any group when ``evaluation``."""
    entry = manifest.entry(group_id)
    gdir = manifest.root / entry.id
    views = []
    for name in entry.views:
        with Image.open(gdir / name) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        if views and arr.shape != views[0].shape:
            raise DatasetFormatError(f"{group_id}/{name}: size {arr.shape[:2]} differs from view_00")
        views.append(arr)
    mask = None
    if entry.mask and (entry.labeled or evaluation):
        with Image.open(gdir / entry.mask) as im:
            mask = np.asarray(im, dtype=np.int64)
        if mask.ndim != 2:
            raise DatasetFormatError(f"{group_id}: mask must be single-channel")
        if mask.shape != views[0].shape[:2]:
            raise DatasetFormatError(
                f"{group_id}: mask {mask.shape} does not match views {views[0].shape[:2]}")
        if mask.max() >= manifest.n_classes:
            raise DatasetFormatError(f"{group_id}: class index {mask.max()} >= {manifest.n_classes}")
    elif evaluation:
        raise DatasetFormatError(f"{group_id}: no mask on disk for evaluation")
    return ViewGroup(entry.id, np.stack(views), mask, labeled=entry.labeled and mask is not None)


def dataset_digest(root) -> str:
    """sha256 over every file of a dataset directory (relative path + content)."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def split_dataset(manifest: DatasetManifest, labeled_ratio: float, seed: int) -> tuple[list[str], list[str]]:
    """Partition the train groups into (labeled ids, unlabeled ids)."""
    if not 0.0 < labeled_ratio <= 1.0:
        raise ValueError(f"labeled_ratio must be in (0, 1], got {labeled_ratio}")
    ids = [g.id for g in manifest.groups if g.split == "train" and g.mask]
    n_labeled = int(math.floor(labeled_ratio * len(ids) + 0.5))
    if n_labeled < 1:
        raise ValueError(f"labeled_ratio={labeled_ratio} over {len(ids)} groups yields no labeled group")
    order = np.random.default_rng(seed).permutation(len(ids))
    labeled = sorted(ids[i] for i in order[:n_labeled])
    unlabeled = sorted(ids[i] for i in order[n_labeled:])
    return labeled, unlabeled


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class Scene:
    mask: np.ndarray  # (H, W) class indices
    crystal_level: float
    background_level: float
    tint: np.ndarray  # (3,)
    rim: np.ndarray  # (H, W) bool, defect boundary band
    normal_angle: np.ndarray  # (H, W) radians, outward normal of the defect boundary


def _polygon_mask(h, w, cx, cy, radii, angles):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ang = np.arctan2(yy - cy, xx - cx)
    boundary = np.interp(ang, angles, radii, period=2 * np.pi)
    return np.hypot(yy - cy, xx - cx) <= boundary


def _ellipse_mask(h, w, cx, cy, ra, rb, rot):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(rot), math.sin(rot)
    u = (dx * c + dy * s) / ra
    v = (-dx * s + dy * c) / rb
    return u * u + v * v <= 1.0


def rim_width(size: tuple[int, int]) -> float:
    return max(1.5, min(size) / 64.0)


def sample_scene(rng: np.random.Generator, spec: GeneratorSpec) -> Scene:
    h, w = spec.image_size
    n = min(h, w)
    for _ in range(200):
        cx = w / 2 + rng.uniform(-0.08, 0.08) * w
        cy = h / 2 + rng.uniform(-0.08, 0.08) * h
        nv = int(rng.integers(5, 9))
        angles = np.sort(rng.uniform(0, 2 * np.pi, nv))
        radii = rng.uniform(0.32, 0.44, nv) * n
        crystal = _polygon_mask(h, w, cx, cy, radii, angles)
        if spec.n_classes == 2:
            crystal = np.zeros_like(crystal)
        host = ndimage.binary_erosion(crystal, iterations=3) if spec.n_classes == 3 else np.ones((h, w), bool)
        defect = np.zeros((h, w), bool)
        for _ in range(int(rng.integers(1, 4))):
            ra = rng.uniform(0.05, 0.12) * n
            rb = ra * rng.uniform(0.9, 1.0)
            dcx = cx + rng.uniform(-0.2, 0.2) * n
            dcy = cy + rng.uniform(-0.2, 0.2) * n
            blob = _ellipse_mask(h, w, dcx, dcy, ra, rb, rng.uniform(0, np.pi))
            # clipped blobs get straight edges whose normals all face one light
            # merged blobs likewise skew the normal distribution, so keep them apart
            if np.all(host[blob]) and not np.any(defect & ndimage.binary_dilation(blob, iterations=3)):
                defect |= blob
        frac = defect.mean()
        if 0.005 <= frac <= 0.20:
            break
    else:  # pragma: no cover - sampling ranges make this unreachable in practice
        raise RuntimeError("could not sample a scene with a valid defect fraction")

    mask = np.zeros((h, w), np.int64)
    mask[crystal] = CRYSTAL
    mask[defect] = spec.n_classes - 1

    inside = ndimage.distance_transform_edt(defect)
    rim = defect & (inside <= rim_width((h, w)))
    smooth = ndimage.gaussian_filter(defect.astype(np.float64), sigma=max(1.0, n / 64.0))
    gy, gx = np.gradient(smooth)
    # outward normal points down the defect indicator
    normal = np.arctan2(-gy, -gx)
    return Scene(
        mask=mask,
        crystal_level=float(rng.uniform(0.42, 0.55)),
        background_level=float(rng.uniform(0.12, 0.22)),
        tint=rng.uniform(0.9, 1.0, 3),
        rim=rim,
        normal_angle=normal,
    )


def boundary_visibility(scene: Scene, angle_deg: float) -> np.ndarray:
    """max(0, cos(normal - illumination)) over the image; only meaningful on ``scene.rim``."""
    return np.maximum(0.0, np.cos(scene.normal_angle - math.radians(angle_deg)))


def visibility_cutoff(spec: GeneratorSpec) -> float:
    return math.cos(math.radians(spec.boundary_visibility_width / 2.0))


def lit_rim(scene: Scene, spec: GeneratorSpec, angle_deg: float) -> np.ndarray:
    """Rim pixels that render above the interior contrast in the view lit from ``angle_deg``."""
    v = boundary_visibility(scene, angle_deg)
    return scene.rim & (v >= visibility_cutoff(spec)) & (v > 0)


def render_view(rng: np.random.Generator, scene: Scene, spec: GeneratorSpec, angle_deg: float) -> np.ndarray:
    h, w = spec.image_size
    img = np.full((h, w), scene.background_level)
    img[scene.mask == CRYSTAL] = scene.crystal_level
    defect = scene.mask == spec.n_classes - 1
    base = scene.crystal_level if spec.n_classes == 3 else scene.background_level
    img[defect] = base + spec.defect_interior_contrast

    v = boundary_visibility(scene, angle_deg)
    lit = lit_rim(scene, spec, angle_deg)
    edge = np.maximum(spec.defect_interior_contrast, spec.boundary_contrast * v)
    img[lit] = base + edge[lit]

    img = ndimage.gaussian_filter(img, sigma=0.6)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    t = math.radians(angle_deg)
    ramp = ((xx - w / 2) * math.cos(t) + (yy - h / 2) * math.sin(t)) / (max(h, w) / 2)
    img = img * (1.0 + 0.1 * ramp)
    rgb = img[..., None] * scene.tint[None, None, :]
    rgb = rgb + rng.normal(0.0, spec.noise_std, rgb.shape)
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


def generate_group(spec: GeneratorSpec, group_seed, group_id: str, labeled: bool = True) -> ViewGroup:
    rng = np.random.default_rng(group_seed)
    scene = sample_scene(rng, spec)
    views = np.stack([render_view(rng, scene, spec, a) for a in spec.illumination_angles])
    return ViewGroup(group_id, views, scene.mask, labeled=labeled)


def generate_synthetic_dataset(spec: GeneratorSpec, out) -> DatasetManifest:
    """Render ``spec.n_groups`` train groups (and ``n_test_groups`` test groups) under ``out``."""
    spec.validate()
    out = Path(out)
    total = spec.n_groups + spec.n_test_groups
    entries = []
    if total:
        out.mkdir(parents=True, exist_ok=True)
        seeds = np.random.SeedSequence(spec.seed).spawn(total)
        for i, ss in enumerate(seeds):
            split = "train" if i < spec.n_groups else "test"
            gid = f"{split}_{i if split == 'train' else i - spec.n_groups:04d}"
            # test masks are kept on disk but not exposed as training labels
            group = generate_group(spec, ss, gid, labeled=split == "train")
            entry = save_group(group, out, spec.n_classes)
            entry.split = split
            entries.append(entry)
        _atomic_write_text(out / SPEC_NAME, json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    manifest = DatasetManifest(out, entries, n_classes=spec.n_classes, spec_digest=spec.digest())
    if total:
        manifest.save()
    return manifest
