"""Train-and-evaluate cells for presets and ablation grids."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import time
from pathlib import Path
from typing import Iterable, Optional, Sequence

import torch

from . import __version__
from .config import TOGGLE_GRID, RunConfig, resolve
from .data import DatasetManifest, split_dataset
from .engine import GroupStore, ICAFModel, pseudo_label_probe, train
from .evaluation import evaluate, model_predictor, write_report
from .segnet import CheckpointError, load_checkpoint

RUN_ROOT_ENV = "ICAF_RUN_ROOT"


def run_root(default: str = "runs") -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, default))


def code_digest() -> str:
    h = hashlib.sha256(__version__.encode())
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def write_run_header(run_dir: Path, cfg: RunConfig):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.dump(), encoding="utf-8")
    (run_dir / "version.txt").write_text(f"icaf {__version__}\ncode {code_digest()}\n", encoding="utf-8")


def cell_key(cfg: RunConfig, manifest: DatasetManifest) -> str:
    """Identity of a run: code, configuration and dataset."""
    return f"{code_digest()}-{cfg.digest()}-{manifest.spec_digest[:16]}"


def run_cell(cfg: RunConfig, manifest: DatasetManifest, run_dir, store: Optional[GroupStore] = None,
             evaluate_split: Optional[str] = "test", resume: bool = False) -> dict:
    """Train one configuration, score it, and return a summary row.

    With ``resume`` a finished run in ``run_dir`` with the same key is reused.
    """
    run_dir = Path(run_dir)
    key = cell_key(cfg, manifest)
    summary_path = run_dir / "summary.json"
    if resume and summary_path.is_file():
        old = json.loads(summary_path.read_text(encoding="utf-8"))
        if old.get("key") == key and (not evaluate_split or "miou" in old):
            return old
    write_run_header(run_dir, cfg)
    split = split_dataset(manifest, cfg.data.labeled_ratio, cfg.data.split_seed)
    if store is None:
        store = GroupStore(manifest, split[0] + split[1])
    t0 = time.perf_counter()
    result = train(cfg, manifest, split, run_dir, store=store)
    row = {
        "key": key,
        "steps": result.steps,
        "train_seconds": round(time.perf_counter() - t0, 1),
        "valid_fraction": pseudo_label_probe(result.model, store, split[1] or split[0], cfg.train, cfg.aug,
                                             cfg.loss.tau, seed=cfg.train.seed),
        "l_total_step0": result.metrics[0]["l_total"] if result.metrics else None,
    }
    if evaluate_split:
        test_ids = manifest.ids(evaluate_split)
        if test_ids:
            report = evaluate(model_predictor(result.model.segnet), manifest, test_ids)
            write_report(report, run_dir / "report.json")
            row["miou"] = report["miou"]
            row["iou"] = report["iou"]
    summary_path.write_text(json.dumps(row, indent=2) + "\n", encoding="utf-8")
    return row


def toggle_cells() -> list[tuple[str, dict]]:
    return [(name, {}) for name in TOGGLE_GRID]


def op_cells(o_values: Sequence[int], p_values: Sequence[int]) -> list[tuple[str, dict]]:
    return [(f"O{o}_P{p}", {"train.O": o, "train.P": p}) for o in o_values for p in p_values]


def q_cells(q_values: Sequence[int]) -> list[tuple[str, dict]]:
    return [(f"Q{q}", {"train.Q": q}) for q in q_values]


CSV_FIELDS = ["cell", "preset", "seed", "O", "P", "Q", "use_ca", "use_fa", "use_vam", "use_vcm",
              "miou", "iou", "valid_fraction", "steps", "train_seconds"]


def run_grid(cells: Iterable[tuple[str, dict]], manifest: DatasetManifest, out_csv, root,
             seeds: Sequence[int], base_presets: Sequence[str] = (), desk: bool = False,
             overrides: Optional[dict] = None, log=print, resume: bool = False) -> list[dict]:
    """Run every (cell, seed) pair and append one CSV row per run."""
    cells = list(cells)
    rows = []
    store = None
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for seed in seeds:
            for name, cell_over in cells:
                presets = list(base_presets) + ([name] if name in TOGGLE_GRID or name == "supervised-only" else [])
                cfg = resolve(presets, overrides={**(overrides or {}), **cell_over, "train.seed": seed,
                                                  "data.split_seed": seed}, desk=desk)
                if store is None:
                    store = GroupStore(manifest, manifest.ids("train"))
                summary = run_cell(copy.deepcopy(cfg), manifest, Path(root) / f"{name}_seed{seed}", store,
                                   resume=resume)
                t = cfg.train
                row = {"cell": name, "preset": "+".join(presets) or "icaf", "seed": seed, "O": t.O, "P": t.P,
                       "Q": t.Q, "use_ca": t.use_ca, "use_fa": t.use_fa, "use_vam": t.use_vam,
                       "use_vcm": t.use_vcm, "miou": summary.get("miou"),
                       "iou": json.dumps(summary.get("iou")), "valid_fraction": summary["valid_fraction"],
                       "steps": summary["steps"], "train_seconds": summary["train_seconds"]}
                writer.writerow(row)
                f.flush()
                rows.append(row)
                log(f"{name} seed={seed} miou={row['miou']} valid_fraction={row['valid_fraction']:.4f}")
    return rows


def load_run(checkpoint) -> tuple[RunConfig, ICAFModel]:
    """Rebuild the configuration and model stored in a training checkpoint."""
    try:
        payload = torch.load(checkpoint, map_location="cpu", weights_only=False)
        flat = payload["run_config"]
    except Exception as e:  # torch.load surfaces corrupt files as assorted unpickling errors
        raise CheckpointError(f"cannot read checkpoint {checkpoint}: {e}") from e
    cfg = RunConfig.from_flat(flat)
    model = ICAFModel(cfg.model)
    load_checkpoint(checkpoint, model.checkpoint_modules(), cfg.model.digest())
    model.eval()
    return cfg, model
