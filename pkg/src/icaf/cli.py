"""Command-line entry point: ``icaf gen-data | train | eval | ablate | viz``.

Exit codes: 0 success, 1 runtime failure (bad data, bad checkpoint, divergence),
2 invalid arguments or configuration. Run directories default to
``$ICAF_RUN_ROOT/<name>`` (``./runs`` when unset).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .config import PRESETS, parse_value, resolve
from .data import (DatasetFormatError, DatasetManifest, GeneratorSpec, dataset_digest,
                   generate_synthetic_dataset, load_group)
from .engine import GroupStore, NonFiniteLossError
from .evaluation import evaluate, export_panels, model_predictor, write_report
from .experiments import (load_run, op_cells, q_cells, run_cell, run_grid, run_root, toggle_cells)
from .segnet import CheckpointError

log = logging.getLogger("icaf")


class UsageError(Exception):
    pass


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = parse_value(value)
    return out


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _manifest(path) -> DatasetManifest:
    if not path:
        raise UsageError("no dataset given; pass --data or set data.root")
    return DatasetManifest.load(path)


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    spec = GeneratorSpec()
    fields = {"n_groups": args.groups, "n_test_groups": args.test_groups, "views_per_group": args.views,
              "n_classes": args.classes, "seed": args.seed}
    if args.size is not None:
        fields["image_size"] = (args.size, args.size)
    d = spec.to_dict()
    d.update({k: v for k, v in fields.items() if v is not None})
    if args.views is not None:
        d["illumination_angles"] = [360.0 * k / args.views for k in range(args.views)]
    for k, v in _overrides(args.set).items():
        k = k.removeprefix("generator.")
        if k not in d:
            raise UsageError(f"unknown generator field {k!r}")
        d[k] = v
    try:
        spec = GeneratorSpec.from_dict(d)
        spec.validate()
    except (TypeError, ValueError) as e:
        raise UsageError(str(e))
    t0 = time.perf_counter()
    manifest = generate_synthetic_dataset(spec, args.out)
    print(json.dumps({"root": str(manifest.root), "groups": len(manifest.groups),
                      "train": len(manifest.ids("train")), "test": len(manifest.ids("test")),
                      "digest": dataset_digest(args.out),
                      "seconds": round(time.perf_counter() - t0, 1)}))
    return 0


def _resolve(args):
    over = _overrides(args.set)
    if getattr(args, "data", None):
        over["data.root"] = args.data
    try:
        return resolve(args.preset or [], args.config, over, desk=args.desk)
    except (KeyError, ValueError, TypeError) as e:
        raise UsageError(str(e).strip("'\""))


def cmd_train(args) -> int:
    cfg = _resolve(args)
    if args.dump_config:
        sys.stdout.write(cfg.dump())
        return 0
    manifest = _manifest(cfg.data.root)
    name = args.name or f"{'+'.join(args.preset or ['icaf'])}-seed{cfg.train.seed}"
    run_dir = Path(args.run_dir) if args.run_dir else run_root() / name
    summary = run_cell(cfg, manifest, run_dir, evaluate_split=None if args.no_eval else cfg.data.eval_split)
    print(json.dumps({"run_dir": str(run_dir), **{k: v for k, v in summary.items() if k != "iou"}}))
    return 0


def cmd_eval(args) -> int:
    if args.oracle:
        manifest = _manifest(args.data)
        ids = manifest.ids(args.split)
        cm_report = _oracle_report(manifest, ids)
        _emit_report(cm_report, args.out)
        return 0
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint (or --oracle)")
    cfg, model = load_run(args.checkpoint)
    manifest = _manifest(args.data or cfg.data.root)
    split = args.split or cfg.data.eval_split
    ids = manifest.ids(split)
    if not ids:
        raise DatasetFormatError(f"split {split!r} has no groups")
    report = evaluate(model_predictor(model.segnet), manifest, ids)
    report["checkpoint"] = str(args.checkpoint)
    report["split"] = split
    out = args.out or Path(args.checkpoint).resolve().parent.parent / "report.json"
    _emit_report(report, out)
    return 0


def _oracle_report(manifest, ids) -> dict:
    if not ids:
        raise DatasetFormatError("no groups to evaluate")
    masks = {gid: load_group(manifest, gid, evaluation=True).gt_mask for gid in ids}
    order = iter(sorted(ids))  # evaluate() visits groups in sorted order

    def predict(views: torch.Tensor) -> torch.Tensor:
        mask = torch.from_numpy(masks[next(order)].astype(np.int64))
        onehot = torch.nn.functional.one_hot(mask, manifest.n_classes).permute(2, 0, 1).float()
        return onehot.expand(views.shape[0], -1, -1, -1)

    report = evaluate(predict, manifest, ids)
    report["oracle"] = True
    return report


def _emit_report(report: dict, out):
    if out:
        write_report(report, out)
    print(json.dumps({"miou": report["miou"], "iou": report["iou"], "records": report["records"],
                      "report": str(out) if out else None}))


def cmd_ablate(args) -> int:
    if args.grid == "toggles":
        cells, base = toggle_cells(), []
    elif args.grid == "op":
        cells, base = op_cells(args.o_values, args.p_values), ["icaf"]
    else:
        cells, base = q_cells(args.q_values), ["icaf"]
    over = _overrides(args.set)
    seeds = args.seed_list or list(range(args.seeds))
    try:
        for name, cell in cells:  # fail fast on invalid cells before any training
            resolve(base + ([name] if name in PRESETS else []), args.config, {**over, **cell}, desk=args.desk)
    except (KeyError, ValueError) as e:
        raise UsageError(str(e).strip("'\""))
    manifest = _manifest(args.data)
    root = Path(args.run_dir) if args.run_dir else run_root() / f"ablate-{args.grid}"
    out = Path(args.out) if args.out else root / "ablation.csv"
    over["data.root"] = str(manifest.root)
    if args.config:
        from .config import load_config_file
        over = {**load_config_file(args.config), **over}
    run_grid(cells, manifest, out, root, seeds, base_presets=base, desk=args.desk, overrides=over,
             log=lambda msg: print(msg, flush=True), resume=args.resume)
    print(json.dumps({"csv": str(out)}))
    return 0


def cmd_viz(args) -> int:
    cfg, model = load_run(args.checkpoint)
    manifest = _manifest(args.data or cfg.data.root)
    ids = args.group or manifest.ids("train")[:1]
    missing = [g for g in ids if g not in manifest.ids()]
    if missing:
        raise UsageError(f"unknown group(s): {', '.join(missing)}")
    store = GroupStore(manifest, ids)
    out = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent.parent / "panels"
    written = []
    for gid in ids:
        written += export_panels(model, store, gid, out, cfg.train, cfg.loss.tau, seed=args.seed)
    print(json.dumps({"out": str(out), "files": len(written)}))
    return 0


# ---------------------------------------------------------------------------

def _config_args(p, data_required=False):
    p.add_argument("--data", required=data_required, help="dataset directory containing manifest.json")
    p.add_argument("--preset", action="append", choices=sorted(PRESETS), help="apply a named preset (repeatable)")
    p.add_argument("--config", help="file of 'section.key = value' lines")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value (repeatable)")
    p.add_argument("--desk", action="store_true", help="reduced-cost settings for CPU runs on 128x128 data")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icaf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic multi-view dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--groups", type=int, help="training groups")
    p.add_argument("--test-groups", type=int, help="held-out groups")
    p.add_argument("--views", type=int, help="views per group")
    p.add_argument("--size", type=int, help="square image side")
    p.add_argument("--classes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="any generator field")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration")
    _config_args(p)
    p.add_argument("--run-dir", help="output directory (default $ICAF_RUN_ROOT/<name>)")
    p.add_argument("--name", help="run name under $ICAF_RUN_ROOT")
    p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("--no-eval", action="store_true", help="skip scoring the evaluation split")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", default=None, help="split to score (default from the run config)")
    p.add_argument("--out", help="report path (default <run_dir>/report.json)")
    p.add_argument("--oracle", action="store_true", help="score ground-truth masks as predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score a grid of configurations")
    _config_args(p, data_required=True)
    p.add_argument("--grid", choices=["toggles", "op", "q"], default="toggles")
    p.add_argument("--o-values", type=_int_list, default=[3, 6, 9])
    p.add_argument("--p-values", type=_int_list, default=[1, 2, 3])
    p.add_argument("--q-values", type=_int_list, default=[1, 2, 3, 4])
    p.add_argument("--seeds", type=int, default=1, help="run seeds 0..N-1")
    p.add_argument("--seed-list", type=_int_list, help="explicit seeds")
    p.add_argument("--run-dir")
    p.add_argument("--out", help="CSV path (default <run_dir>/ablation.csv)")
    p.add_argument("--resume", action="store_true", help="reuse finished cells with identical code, config and data")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("viz", help="export pseudo-label correction panels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--group", action="append", help="group id (repeatable)")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))  # exits 2
    except (DatasetFormatError, CheckpointError, NonFiniteLossError, FileNotFoundError, OSError) as e:
        print(f"icaf: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
